"""Backdoor trigger injectors: corner checkerboard patch, additive sinusoid,
and a smooth random warp. Each is a pure Image -> Image map."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, reduce

import numpy as np

from .data import Image, derive_seed, rng_from

CORNERS = ("TL", "TR", "BL", "BR")
KINDS = ("patch", "sig", "warp")
SIG_FREQUENCIES = (2, 4, 8, 16)
SIG_DELTA = 0.05
WARP_GRID = 4
WARP_STRENGTH = 0.75


@dataclass(frozen=True)
class InjectorSpec:
    """Parameters of one trigger; only the fields for its kind are set.

    patch: corner, patch_side. sig: freq, delta. warp: grid, strength, field_seed.
    """

    kind: str
    corner: str | None = None
    patch_side: int | None = None
    freq: int | None = None
    delta: float | None = None
    grid: int | None = None
    strength: float | None = None
    field_seed: int | None = None

    def __post_init__(self) -> None:
        if self.kind == "patch":
            if self.corner not in CORNERS:
                raise ValueError(f"corner must be one of {CORNERS}, got {self.corner!r}")
            if self.patch_side is None or self.patch_side < 2:
                raise ValueError("patch_side must be at least 2")
        elif self.kind == "sig":
            if self.freq is None or self.freq < 1:
                raise ValueError("freq must be a positive integer")
            if self.delta is None or not 0.0 < self.delta <= 1.0:
                raise ValueError("delta must lie in (0, 1]")
        elif self.kind == "warp":
            if self.grid is None or self.grid < 2:
                raise ValueError("grid must be at least 2")
            if self.strength is None or self.strength < 0.0:
                raise ValueError("strength must be nonnegative")
            if self.field_seed is None:
                raise ValueError("warp spec needs a field_seed")
        else:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")


def patch_spec(corner: str, patch_side: int) -> InjectorSpec:
    return InjectorSpec(kind="patch", corner=corner, patch_side=patch_side)


def sig_spec(freq: int, delta: float = SIG_DELTA) -> InjectorSpec:
    return InjectorSpec(kind="sig", freq=freq, delta=delta)


def warp_spec(field_seed: int, grid: int = WARP_GRID, strength: float = WARP_STRENGTH) -> InjectorSpec:
    return InjectorSpec(kind="warp", grid=grid, strength=strength, field_seed=field_seed)


def spec_to_kv(spec: InjectorSpec) -> str:
    """Single-line key=value form, parseable by :func:`spec_from_kv`."""
    if spec.kind == "patch":
        return f"kind=patch corner={spec.corner} s={spec.patch_side}"
    if spec.kind == "sig":
        return f"kind=sig f={spec.freq} delta={spec.delta!r}"
    return f"kind=warp k={spec.grid} strength={spec.strength!r} seed={spec.field_seed}"


def spec_from_kv(text: str) -> InjectorSpec:
    fields = {}
    for token in text.split():
        if "=" not in token:
            raise ValueError(f"malformed injector token {token!r}")
        key, value = token.split("=", 1)
        fields[key] = value
    kind = fields.pop("kind", None)
    try:
        if kind == "patch":
            return patch_spec(fields.pop("corner"), int(fields.pop("s")))
        if kind == "sig":
            return sig_spec(int(fields.pop("f")), float(fields.pop("delta")))
        if kind == "warp":
            return warp_spec(int(fields.pop("seed")), int(fields.pop("k")), float(fields.pop("strength")))
    except KeyError as missing:
        raise ValueError(f"injector spec {text!r} is missing field {missing}") from None
    raise ValueError(f"unknown injector kind {kind!r}")


def inject_patch(image: Image, spec: InjectorSpec) -> Image:
    """Replace an s x s corner region with a checkerboard: patch-local cell
    (0, 0) is 1.0 and parity alternates. Idempotent by construction."""
    if spec.kind != "patch":
        raise ValueError("inject_patch needs a patch spec")
    h, w = image.height, image.width
    s = spec.patch_side
    if 2 * s > min(h, w):
        raise ValueError(f"patch side {s} does not fit a {h}x{w} image (needs s <= min(H, W)/2)")
    local = np.add.outer(np.arange(s), np.arange(s)) % 2 == 0
    checker = np.where(local, 1.0, 0.0)[:, :, None]
    r0 = 0 if spec.corner in ("TL", "TR") else h - s
    c0 = 0 if spec.corner in ("TL", "BL") else w - s
    pixels = image.pixels.copy()
    pixels[r0 : r0 + s, c0 : c0 + s, :] = checker
    return Image(pixels)


def inject_sig(image: Image, spec: InjectorSpec) -> Image:
    """Add a horizontal sinusoid delta * sin(2*pi*j*f/W) with 1-based column j,
    identical across rows and channels, then clamp to [0, 1]."""
    if spec.kind != "sig":
        raise ValueError("inject_sig needs a sig spec")
    w = image.width
    columns = np.arange(1, w + 1, dtype=np.float64)
    offsets = spec.delta * np.sin(2.0 * np.pi * columns * spec.freq / w)
    pixels = np.clip(image.pixels + offsets[None, :, None], 0.0, 1.0)
    return Image(pixels)


@dataclass(frozen=True, eq=False)
class WarpField:
    """Per-pixel displacements in pixel units: dx along columns, dy along rows."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self) -> None:
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValueError("dx and dy must be 2-D arrays of equal shape")


@lru_cache(maxsize=128)
def _warp_field_cached(spec: InjectorSpec, height: int, width: int) -> WarpField:
    rng = rng_from(spec.field_seed)
    k = spec.grid
    control = rng.uniform(-1.0, 1.0, size=(k, k, 2))

    # bilinear upsample, corners aligned: control node (a, b) sits at
    # pixel (a*(H-1)/(k-1), b*(W-1)/(k-1))
    def expand(length: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = np.linspace(0.0, k - 1.0, length)
        lo = np.minimum(np.floor(pos).astype(np.int64), k - 2)
        return lo, lo + 1, pos - lo

    r0, r1, wr = expand(height)
    rows = control[r0] + wr[:, None, None] * (control[r1] - control[r0])
    c0, c1, wc = expand(width)
    field = rows[:, c0] + wc[None, :, None] * (rows[:, c1] - rows[:, c0])

    dx, dy = field[:, :, 0], field[:, :, 1]
    norms = np.hypot(dx, dy)
    peak = float(norms.max())
    if peak == 0.0 or spec.strength == 0.0:
        zero = np.zeros((height, width))
        return WarpField(zero, zero.copy())
    scale = spec.strength / peak
    return WarpField(dx * scale, dy * scale)


def make_warp_field(spec: InjectorSpec, height: int, width: int) -> WarpField:
    """Deterministic smooth displacement field for a warp spec: a k x k control
    grid drawn uniform in [-1, 1]^2 from field_seed, bilinearly upsampled, then
    scaled so the largest per-pixel displacement norm equals `strength`."""
    if spec.kind != "warp":
        raise ValueError("make_warp_field needs a warp spec")
    if height < 1 or width < 1:
        raise ValueError("field dimensions must be positive")
    return _warp_field_cached(spec, height, width)


def inject_warp(image: Image, field: WarpField) -> Image:
    """Resample the image at source position (i + dy, j + dx) per pixel, with
    border-clamped bilinear interpolation, then clamp values to [0, 1]."""
    h, w = image.height, image.width
    if field.dx.shape != (h, w):
        raise ValueError(f"field shape {field.dx.shape} does not match image {h}x{w}")
    rows = np.clip(np.arange(h, dtype=np.float64)[:, None] + field.dy, 0.0, h - 1.0)
    cols = np.clip(np.arange(w, dtype=np.float64)[None, :] + field.dx, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = (rows - r0)[:, :, None]
    wc = (cols - c0)[:, :, None]
    p = image.pixels
    top = p[r0, c0] + wc * (p[r0, c1] - p[r0, c0])
    bottom = p[r1, c0] + wc * (p[r1, c1] - p[r1, c0])
    blended = top + wr * (bottom - top)
    return Image(np.clip(blended, 0.0, 1.0))


def apply_injector(spec: InjectorSpec, image: Image) -> Image:
    """Dispatch one spec; warp fields are built (and memoized) per image size."""
    if spec.kind == "patch":
        return inject_patch(image, spec)
    if spec.kind == "sig":
        return inject_sig(image, spec)
    field = make_warp_field(spec, image.height, image.width)
    return inject_warp(image, field)


def compose(specs: list[InjectorSpec] | tuple[InjectorSpec, ...], image: Image) -> Image:
    """Apply several injectors left to right."""
    if not specs:
        raise ValueError("compose needs at least one injector spec")
    return reduce(lambda img, spec: apply_injector(spec, img), specs, image)


def default_patch_side(side: int) -> int:
    """Checkerboard patch side for a given image side: about side/8, at least 2."""
    return max(2, -(-side // 8))


def default_specs(
    template: str,
    side: int,
    seed: int,
    patch_side: int | None = None,
    sig_delta: float = SIG_DELTA,
    warp_grid: int = WARP_GRID,
    warp_strength: float = WARP_STRENGTH,
) -> list[InjectorSpec]:
    """The four stock trigger variants of one family.

    patch: one checkerboard per corner. sig: frequencies 2, 4, 8, 16.
    warp: four fields with seeds derived from `seed`.
    """
    if template == "patch":
        s = patch_side if patch_side is not None else default_patch_side(side)
        return [patch_spec(corner, s) for corner in CORNERS]
    if template == "sig":
        return [sig_spec(f, sig_delta) for f in SIG_FREQUENCIES]
    if template == "warp":
        return [
            warp_spec(derive_seed(seed, f"warp-field-{i}"), warp_grid, warp_strength)
            for i in range(4)
        ]
    raise ValueError(f"unknown trigger template {template!r}")
