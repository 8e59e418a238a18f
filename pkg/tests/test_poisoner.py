import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonlab.data import Image, generate_synthetic
from poisonlab.injectors import inject_patch, inject_sig, patch_spec, sig_spec
from poisonlab.nn import Architecture, Model
from poisonlab.poisoner import (
    AttackInstance,
    PoisonPlan,
    SmoothingRecord,
    apply_plan,
    estimate_alpha,
    load_plan,
    plan_from_text,
    plan_to_text,
    poison_dataset,
    relabel_draw,
    save_plan,
    select_samples,
    set_beta,
    solve_pn,
    stacked_expectation,
    verify_theorem,
)


def constant_model(probs, input_dim=1):
    # zero weights and log-prob biases: outputs `probs` for every input
    probs = np.asarray(probs, dtype=float)
    arch = Architecture(input_dim=input_dim, hidden=(), output_dim=len(probs))
    return Model(arch, [np.zeros((input_dim, len(probs)))], [np.log(probs)])


def pixel_image(value=0.5):
    return Image(np.full((1, 1, 1), value))


# ---------------------------------------------------------------- alpha / beta / p_n


def test_estimate_alpha_reads_target_probability():
    model = constant_model([0.3, 0.6, 0.1])
    assert abs(estimate_alpha(model, pixel_image(), 0) - 0.3) < 1e-12
    assert abs(estimate_alpha(model, pixel_image(), 2) - 0.1) < 1e-12
    with pytest.raises(ValueError):
        estimate_alpha(model, pixel_image(), 3)


def test_set_beta_caps_at_point_six():
    assert abs(set_beta(constant_model([0.3, 0.6, 0.1]), pixel_image()) - 0.6) < 1e-12
    assert abs(set_beta(constant_model([0.45, 0.3, 0.25]), pixel_image()) - 0.55) < 1e-12
    third = 1.0 / 3.0
    got = set_beta(constant_model([third, third, third]), pixel_image())
    assert abs(got - (third + 0.1)) < 1e-12


def test_solve_pn_reference_values():
    assert solve_pn(0.0, 0.6) == 0.6
    assert abs(solve_pn(0.5, 0.6) - 0.2) < 1e-12
    assert solve_pn(0.3, 1.0) == 1.0
    assert solve_pn(0.7, 0.6) == 0.0
    assert solve_pn(1.0, 0.2) == 1.0


def test_solve_pn_bounds():
    for alpha, beta in ((-0.1, 0.5), (1.1, 0.5), (0.5, -0.1), (0.5, 1.1)):
        with pytest.raises(ValueError):
            solve_pn(alpha, beta)


@given(alpha=st.floats(0.0, 0.999999), beta=st.floats(0.0, 1.0))
def test_solve_pn_closes_the_algebra(alpha, beta):
    p = solve_pn(alpha, beta)
    assert 0.0 <= p <= 1.0
    achieved = alpha + (1.0 - alpha) * p
    expected = min(max(beta, alpha), 1.0)
    assert abs(achieved - expected) < 1e-9


def test_stacked_expectation_values():
    assert abs(stacked_expectation(0.2, 0.5, 1) - 0.6) < 1e-12
    # two independent chances: 0.2 + 0.8 * (1 - 0.25) = 0.8
    assert abs(stacked_expectation(0.2, 0.5, 2) - 0.8) < 1e-12
    assert stacked_expectation(1.0, 0.3, 4) == 1.0
    with pytest.raises(ValueError):
        stacked_expectation(0.2, 0.5, 0)


@given(
    alpha=st.floats(0.0, 0.95),
    p_n=st.floats(0.01, 0.99),
    k=st.integers(1, 6),
)
def test_stacked_expectation_increases_with_k(alpha, p_n, k):
    a = stacked_expectation(alpha, p_n, k)
    b = stacked_expectation(alpha, p_n, k + 1)
    assert b > a
    assert 0.0 <= a <= 1.0 and b <= 1.0


def test_verify_theorem_degenerate_cases():
    assert verify_theorem(1.0, 0.5, 2, trials=100, seed=0) == 1.0
    assert verify_theorem(0.0, 1.0, 1, trials=100, seed=0) == 1.0
    assert verify_theorem(0.0, 0.0, 3, trials=100, seed=0) == 0.0
    with pytest.raises(ValueError):
        verify_theorem(0.5, 0.5, 0, trials=100, seed=0)
    with pytest.raises(ValueError):
        verify_theorem(0.5, 0.5, 1, trials=0, seed=0)


@settings(max_examples=20, deadline=None)
@given(
    alpha=st.floats(0.0, 1.0),
    p_n=st.floats(0.0, 1.0),
    k=st.integers(1, 4),
    seed=st.integers(0, 2**32),
)
def test_verify_theorem_matches_closed_form(alpha, p_n, k, seed):
    trials = 20_000
    emp = verify_theorem(alpha, p_n, k, trials=trials, seed=seed)
    expected = stacked_expectation(alpha, p_n, k)
    sigma = math.sqrt(max(expected * (1 - expected), 1e-12) / trials)
    # 5 sigma keeps the per-example false-failure odds below 1e-6
    assert abs(emp - expected) <= 5 * sigma + 1e-9


def test_verify_theorem_deterministic():
    a = verify_theorem(0.3, 0.6, 2, trials=5000, seed=77)
    assert a == verify_theorem(0.3, 0.6, 2, trials=5000, seed=77)
    assert a != verify_theorem(0.3, 0.6, 2, trials=5000, seed=78)


# ---------------------------------------------------------------- selection / relabeling


def test_select_samples_count_and_order():
    ds = generate_synthetic(2, 500, 8, 0.0, seed=1)
    picked = select_samples(ds, 0.01, seed=2)
    assert len(picked) == 10
    assert picked == sorted(picked)
    assert len(set(picked)) == 10
    assert all(0 <= i < 1000 for i in picked)


def test_select_samples_rounds_half_up():
    ds = generate_synthetic(2, 125, 8, 0.0, seed=1)
    assert len(select_samples(ds, 0.01, seed=3)) == 3  # 2.5 rounds up
    small = generate_synthetic(2, 50, 8, 0.0, seed=1)
    assert len(select_samples(small, 0.005, seed=3)) == 1  # 0.5 rounds up


def test_select_samples_deterministic():
    ds = generate_synthetic(2, 100, 8, 0.0, seed=1)
    assert select_samples(ds, 0.1, seed=4) == select_samples(ds, 0.1, seed=4)
    assert select_samples(ds, 0.1, seed=4) != select_samples(ds, 0.1, seed=5)


def test_select_samples_rate_bounds():
    ds = generate_synthetic(2, 10, 8, 0.0, seed=1)
    for rate in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            select_samples(ds, rate, seed=0)


def test_relabel_draw_degenerate_and_deterministic():
    assert all(relabel_draw(9, i, 1.0) for i in range(200))
    assert not any(relabel_draw(9, i, 0.0) for i in range(200))
    assert relabel_draw(9, 5, 0.5) == relabel_draw(9, 5, 0.5)
    draws = [relabel_draw(11, i, 0.5) for i in range(2000)]
    assert 0.45 < sum(draws) / len(draws) < 0.55


# ---------------------------------------------------------------- poisoning


def smooth_plan(target=2, rate=0.05, spec=None):
    inst = AttackInstance(
        id="patch-0",
        injector=spec or patch_spec("TL", 2),
        poison_rate=rate,
        target_class=target,
        selection_seed=21,
        relabel_seed=22,
    )
    return PoisonPlan("smooth", [inst])


def test_poison_dataset_hard_mode():
    train = generate_synthetic(3, 80, 8, 0.05, seed=31)
    plan = PoisonPlan("hard", [smooth_plan(rate=0.05).instances[0]])
    poisoned, filled = poison_dataset(train, plan)
    inst = filled.instances[0]
    assert len(inst.records) == 12
    assert plan.instances[0].records == []  # input plan untouched
    picked = {rec.sample_index for rec in inst.records}
    for rec in inst.records:
        assert (rec.alpha, rec.beta, rec.p_n, rec.relabeled) == (0.0, 1.0, 1.0, True)
    for i, (orig, new) in enumerate(zip(train, poisoned)):
        if i in picked:
            assert new.label == 2
            expected = inject_patch(orig.image, inst.injector)
            assert np.array_equal(new.image.pixels, expected.pixels)
        else:
            assert new.label == orig.label
            assert np.array_equal(new.image.pixels, orig.image.pixels)
    assert poisoned.name.endswith("-poisoned")
    assert len(poisoned) == len(train)


def test_poison_dataset_smooth_mode_records():
    train = generate_synthetic(3, 80, 8, 0.05, seed=32)
    f_clean = constant_model([0.2, 0.5, 0.3], input_dim=64)
    poisoned, filled = poison_dataset(train, smooth_plan(), f_clean=f_clean)
    inst = filled.instances[0]
    assert len(inst.records) == 12
    for rec in inst.records:
        assert abs(rec.alpha - 0.3) < 1e-12
        assert abs(rec.beta - 0.6) < 1e-12
        assert abs(rec.p_n - solve_pn(rec.alpha, rec.beta)) < 1e-15
        achieved = rec.alpha + (1 - rec.alpha) * rec.p_n
        assert abs(achieved - min(max(rec.beta, rec.alpha), 1.0)) < 1e-9
        new_label = poisoned[rec.sample_index].label
        old_label = train[rec.sample_index].label
        assert new_label == (2 if rec.relabeled else old_label)
        # trigger present regardless of the label decision
        assert poisoned[rec.sample_index].image.pixels[0, 0, 0] == 1.0


def test_poison_dataset_smooth_requires_model():
    train = generate_synthetic(3, 20, 8, 0.0, seed=33)
    with pytest.raises(ValueError):
        poison_dataset(train, smooth_plan())


def test_poison_dataset_validates_target():
    train = generate_synthetic(3, 20, 8, 0.0, seed=34)
    with pytest.raises(ValueError):
        poison_dataset(train, PoisonPlan("hard", [smooth_plan(target=5).instances[0]]))
    with pytest.raises(ValueError):
        poison_dataset(train, PoisonPlan("hard", []))


def test_poison_dataset_deterministic():
    train = generate_synthetic(3, 60, 8, 0.05, seed=35)
    f_clean = constant_model([0.2, 0.5, 0.3], input_dim=64)
    a, _ = poison_dataset(train, smooth_plan(), f_clean=f_clean)
    b, _ = poison_dataset(train, smooth_plan(), f_clean=f_clean)
    for ea, eb in zip(a, b):
        assert ea.label == eb.label
        assert np.array_equal(ea.image.pixels, eb.image.pixels)


def test_overlapping_instances_stack_triggers_last_relabel_wins():
    train = generate_synthetic(3, 40, 8, 0.05, seed=36)
    first = AttackInstance("sig-a", sig_spec(2, 0.05), 0.25, 1, selection_seed=7, relabel_seed=8)
    second = AttackInstance("patch-b", patch_spec("TL", 2), 0.25, 2, selection_seed=7, relabel_seed=9)
    poisoned, filled = poison_dataset(train, PoisonPlan("hard", [first, second]))
    a_idx = {r.sample_index for r in filled.instances[0].records}
    b_idx = {r.sample_index for r in filled.instances[1].records}
    assert a_idx == b_idx  # same seed and rate pick the same samples
    for i in sorted(a_idx):
        expected = inject_patch(inject_sig(train[i].image, first.injector), second.injector)
        assert np.array_equal(poisoned[i].image.pixels, expected.pixels)
        assert poisoned[i].label == 2


def test_apply_plan_replays_exactly():
    train = generate_synthetic(3, 60, 8, 0.05, seed=37)
    f_clean = constant_model([0.2, 0.5, 0.3], input_dim=64)
    poisoned, filled = poison_dataset(train, smooth_plan(), f_clean=f_clean)
    replayed = apply_plan(train, filled)
    for ea, eb in zip(poisoned, replayed):
        assert ea.label == eb.label
        assert np.array_equal(ea.image.pixels, eb.image.pixels)


# ---------------------------------------------------------------- plan text format


def test_plan_text_round_trip(tmp_path):
    train = generate_synthetic(3, 60, 8, 0.05, seed=38)
    f_clean = constant_model([0.2, 0.5, 0.3], input_dim=64)
    _, filled = poison_dataset(train, smooth_plan(), f_clean=f_clean)
    text = plan_to_text(filled)
    assert plan_from_text(text) == filled
    save_plan(filled, tmp_path / "deep" / "plan.txt")
    assert load_plan(tmp_path / "deep" / "plan.txt") == filled


def test_plan_text_shape():
    inst = smooth_plan().instances[0]
    inst.records.append(SmoothingRecord(4, 0.25, 0.6, 0.4666666666666667, True))
    text = plan_to_text(PoisonPlan("smooth", [inst]))
    lines = text.splitlines()
    assert lines[0] == "plan mode=smooth instances=1"
    assert lines[1].startswith("instance id=patch-0 ")
    assert "kind=patch corner=TL s=2" in lines[1]
    assert lines[2].startswith("record index=4 ")


def test_plan_from_text_errors():
    with pytest.raises(ValueError):
        plan_from_text("bogus directive=1\n")
    with pytest.raises(ValueError):
        plan_from_text("plan mode=smooth instances=0\nrecord index=1 alpha=0.0 beta=1.0 p_n=1.0 relabeled=1\n")
    with pytest.raises(ValueError):
        plan_from_text("instance id=x rate=0.1 target=1 selection_seed=1 relabel_seed=2 kind=sig f=2 delta=0.05\n")
    with pytest.raises(ValueError):
        plan_from_text("plan mode=smooth\ninstance id=x rate=0.1\n")


def test_attack_instance_validation():
    with pytest.raises(ValueError):
        AttackInstance("has space", patch_spec("TL", 2), 0.1, 1, 0, 0)
    with pytest.raises(ValueError):
        AttackInstance("ok", patch_spec("TL", 2), 0.0, 1, 0, 0)
    with pytest.raises(ValueError):
        AttackInstance("ok", patch_spec("TL", 2), 1.0, 1, 0, 0)
    with pytest.raises(ValueError):
        PoisonPlan("fuzzy", [])


@settings(max_examples=30)
@given(
    rate=st.floats(0.001, 0.999),
    target=st.integers(0, 9),
    sel=st.integers(0, 2**63),
    rel=st.integers(0, 2**63),
    alpha=st.floats(0.0, 1.0),
    beta=st.floats(0.0, 1.0),
    relabeled=st.booleans(),
)
def test_plan_round_trip_property(rate, target, sel, rel, alpha, beta, relabeled):
    inst = AttackInstance(
        id="sig-x",
        injector=sig_spec(4, 0.05),
        poison_rate=rate,
        target_class=target,
        selection_seed=sel,
        relabel_seed=rel,
        records=[SmoothingRecord(3, alpha, beta, solve_pn(alpha, beta), relabeled)],
    )
    plan = PoisonPlan("smooth", [inst])
    assert plan_from_text(plan_to_text(plan)) == plan
