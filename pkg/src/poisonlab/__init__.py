"""poisonlab: a desk-scale laboratory for probabilistically relabeled backdoor
attacks on small image classifiers, with entropy-screen and reverse-trigger
defenses for measuring stealth."""

from .config import ExperimentConfig, default_config, load_config
from .data import (
    Dataset,
    IdxFormatError,
    Image,
    LabeledExample,
    dataset_from_idx,
    derive_seed,
    generate_synthetic,
    load_dataset,
    read_idx_images,
    read_idx_labels,
    rng_from,
    save_dataset,
    split,
    synthetic_template,
)
from .defense import (
    AnomalyReport,
    StripConfig,
    TriggerPattern,
    anomaly_index,
    cleanse_reverse_trigger,
    shannon_entropy,
    strip_entropies,
    strip_entropy,
    strip_far,
    strip_threshold,
)
from .harness import (
    StageError,
    activation_sweep,
    asr_by_activation,
    compute_accuracy,
    compute_asr,
    probability_by_activation,
    run_experiment,
)
from .injectors import (
    InjectorSpec,
    WarpField,
    apply_injector,
    compose,
    default_specs,
    inject_patch,
    inject_sig,
    inject_warp,
    make_warp_field,
    patch_spec,
    sig_spec,
    spec_from_kv,
    spec_to_kv,
    warp_spec,
)
from .nn import (
    Architecture,
    Model,
    TrainConfig,
    backward,
    forward,
    forward_batch,
    grad_check,
    init_model,
    load_model,
    loss,
    mean_loss,
    save_model,
    train,
    train_with_history,
)
from .poisoner import (
    AttackInstance,
    PoisonPlan,
    SmoothingRecord,
    apply_plan,
    estimate_alpha,
    load_plan,
    plan_from_text,
    plan_to_text,
    poison_dataset,
    save_plan,
    select_samples,
    set_beta,
    solve_pn,
    stacked_expectation,
    verify_theorem,
)

__version__ = "0.1.0"
