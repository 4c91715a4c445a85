"""Volume ingestion, overlapping-window extraction, augmentation, synthesis.

A volume on disk is a pair of files per modality: `<id>.img.txt` /
`<id>.img.raw` for the image and `<id>.msk.txt` / `<id>.msk.raw` for the
mask. The manifest is plain `key = value` text with keys `extents`
(V H W), `dtype` (f32|f64), `range` (min max) and `spacing`; the raw file
holds little-endian scalars in row-major V,H,W order. Masks are strictly
binary. Images are min-max normalized to [0, 1] on load (a constant volume
normalizes to zeros).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .tensor import Tensor, dtype_for

MECHANISMS = (
    "erosion",
    "dilation",
    "horizontal_flip",
    "vertical_flip",
    "random_rotate90",
    "elastic",
    "grid_distortion",
    "optical_distortion",
)

# 3x3 cross structuring element applied per slice (no coupling across V).
_CROSS = np.array([[[0, 1, 0], [1, 1, 1], [0, 1, 0]]], dtype=bool)


@dataclass
class VolumeSample:
    """One (image, mask) pair with provenance."""

    image: Tensor
    mask: Tensor
    source_id: str = ""
    slice_range: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.image.rank != 4 or self.image.dims[-1] != 1:
            raise DataError(f"image must be (V, H, W, 1), got {self.image.dims}")
        if self.image.dims != self.mask.dims:
            raise DataError(f"image/mask shape mismatch: {self.image.dims} "
                            f"vs {self.mask.dims}")
        m = self.mask.data
        if not np.all((m == 0) | (m == 1)):
            bad = int(np.flatnonzero((m != 0) & (m != 1))[0])
            raise DataError(f"mask is not binary at flat index {bad}")
        img = self.image.data
        if img.min() < 0 or img.max() > 1:
            raise DataError(f"image values outside [0, 1]: "
                            f"[{img.min():.4g}, {img.max():.4g}]")

    @property
    def depth(self) -> int:
        return self.image.dims[0]


@dataclass
class WindowingSpec:
    """Fixed-depth overlapping slabs along V."""

    window_depth: int = 16
    stride: int = 5

    def validate(self):
        if not 1 <= self.stride <= self.window_depth:
            raise ConfigError(f"stride must satisfy 1 <= stride <= window_depth, "
                              f"got stride={self.stride}, depth={self.window_depth}")

    def starts(self, depth: int) -> list[int]:
        """Window anchors 0, stride, ...; the tail anchors at depth - window."""
        self.validate()
        if depth < self.window_depth:
            raise DataError(f"volume depth {depth} < window depth {self.window_depth}")
        out = list(range(0, depth - self.window_depth + 1, self.stride))
        if out[-1] != depth - self.window_depth:
            out.append(depth - self.window_depth)
        return out


@dataclass
class AugmentationPlan:
    """Per-mechanism application fractions plus transform parameters."""

    fractions: dict[str, float] = field(
        default_factory=lambda: {m: 0.05 for m in MECHANISMS})
    seed: int = 0
    morph_target: str = "both"  # erosion/dilation hit image, mask or both
    elastic_alpha: float = 3.0
    elastic_sigma: float = 8.0
    grid_cells: int = 4
    grid_limit: float = 0.15
    optical_limit: float = 0.10

    def validate(self):
        unknown = set(self.fractions) - set(MECHANISMS)
        if unknown:
            raise ConfigError(f"unknown augmentation mechanisms: {sorted(unknown)}")
        for mech, frac in self.fractions.items():
            if not 0.0 <= frac <= 1.0:
                raise ConfigError(f"fraction for {mech} must be in [0, 1], got {frac}")
        if self.morph_target not in ("both", "image", "mask"):
            raise ConfigError(f"morph_target must be both, image or mask, "
                              f"got {self.morph_target!r}")
        if self.elastic_alpha < 0 or self.elastic_sigma <= 0:
            raise ConfigError("elastic parameters must be positive")
        if self.grid_cells < 1 or not 0 <= self.grid_limit < 1:
            raise ConfigError("grid distortion parameters out of range")
        if not 0 <= self.optical_limit < 1:
            raise ConfigError("optical distortion limit out of range")


@dataclass
class AugmentReport:
    applied: dict[str, int] = field(default_factory=dict)
    eroded_to_empty: int = 0


# ---------------------------------------------------------------------------
# on-disk format

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _parse_manifest(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"{path}: manifest file missing")
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    for key in ("extents", "dtype"):
        if key not in entries:
            raise DataError(f"{path}: missing required key {key!r}")
    return entries


def _read_array(base: Path, kind: str) -> np.ndarray:
    manifest_path = Path(f"{base}.{kind}.txt")
    raw_path = Path(f"{base}.{kind}.raw")
    manifest = _parse_manifest(manifest_path)
    try:
        extents = tuple(int(v) for v in manifest["extents"].split())
    except ValueError as exc:
        raise DataError(f"{manifest_path}: bad extents "
                        f"{manifest['extents']!r}") from exc
    if len(extents) != 3 or any(e < 1 for e in extents):
        raise DataError(f"{manifest_path}: extents must be three positive "
                        f"integers, got {extents}")
    tag = manifest["dtype"]
    if tag not in _DTYPE_TAGS:
        raise DataError(f"{manifest_path}: unknown dtype tag {tag!r}")
    dtype = _DTYPE_TAGS[tag]
    if not raw_path.exists():
        raise DataError(f"{raw_path}: raw voxel file missing")
    blob = raw_path.read_bytes()
    expected = int(np.prod(extents)) * dtype.itemsize
    if len(blob) != expected:
        raise DataError(f"{raw_path}: size mismatch at offset {min(len(blob), expected)}: "
                        f"manifest implies {expected} bytes, file has {len(blob)}")
    arr = np.frombuffer(blob, dtype=dtype).reshape(extents)
    finite = np.isfinite(arr)
    if not finite.all():
        bad = int(np.flatnonzero(~finite.ravel())[0])
        raise DataError(f"{raw_path}: non-finite voxel at flat offset {bad}")
    return arr.astype(np.float64 if tag == "f64" else np.float32)


def load_volume(base, precision: int | None = None) -> VolumeSample:
    """Load an `<id>.img.* / <id>.msk.*` pair; image is min-max normalized."""
    base = Path(base)
    img = _read_array(base, "img")
    msk = _read_array(base, "msk")
    if img.shape != msk.shape:
        raise DataError(f"{base}: image extents {img.shape} != mask extents "
                        f"{msk.shape}")
    bad = (msk != 0) & (msk != 1)
    if bad.any():
        off = int(np.flatnonzero(bad.ravel())[0])
        raise DataError(f"{base}.msk.raw: non-binary mask voxel at flat offset {off}")
    lo, hi = float(img.min()), float(img.max())
    img = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    if precision is not None:
        img = img.astype(dtype_for(precision))
        msk = msk.astype(dtype_for(precision))
    return VolumeSample(image=Tensor._wrap(img[..., None].copy()),
                        mask=Tensor._wrap(msk[..., None].copy()),
                        source_id=base.name, slice_range=(0, img.shape[0]))


def _write_array(arr: np.ndarray, base: Path, kind: str, spacing=(1.0, 1.0, 1.0)):
    tag = "f64" if arr.dtype == np.float64 else "f32"
    manifest = (f"extents = {arr.shape[0]} {arr.shape[1]} {arr.shape[2]}\n"
                f"dtype = {tag}\n"
                f"range = {arr.min():.17g} {arr.max():.17g}\n"
                f"spacing = {spacing[0]:g} {spacing[1]:g} {spacing[2]:g}\n")
    Path(f"{base}.{kind}.txt").write_text(manifest)
    Path(f"{base}.{kind}.raw").write_bytes(
        np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())


def save_volume(sample: VolumeSample, base):
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    _write_array(sample.image.data[..., 0], base, "img")
    _write_array(sample.mask.data[..., 0], base, "msk")


def save_mask(mask: Tensor, base):
    """Write a predicted mask in the dataset format (mask pair only)."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    _write_array(mask.data[..., 0], base, "msk")


def load_mask(base) -> np.ndarray:
    return _read_array(Path(base), "msk")


def list_dataset(directory) -> list[str]:
    """Sorted volume ids found as <id>.img.txt in a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return sorted(p.name[:-len(".img.txt")] for p in directory.glob("*.img.txt"))


def load_dataset(directory, precision: int | None = None) -> list[VolumeSample]:
    directory = Path(directory)
    ids = list_dataset(directory)
    return [load_volume(directory / i, precision=precision) for i in ids]


# ---------------------------------------------------------------------------
# windowing


def extract_windows(vol: VolumeSample, spec: WindowingSpec) -> list[VolumeSample]:
    """Cut exact slabs (no interpolation) at the spec's anchors."""
    out = []
    lo = vol.slice_range[0]
    for start in spec.starts(vol.depth):
        stop = start + spec.window_depth
        out.append(VolumeSample(
            image=Tensor._wrap(vol.image.data[start:stop].copy()),
            mask=Tensor._wrap(vol.mask.data[start:stop].copy()),
            source_id=vol.source_id,
            slice_range=(lo + start, lo + stop)))
    return out


# ---------------------------------------------------------------------------
# deterministic transform primitives (image and mask move together)


def _rebuild(sample: VolumeSample, img: np.ndarray, msk: np.ndarray,
             suffix: str) -> VolumeSample:
    img = np.clip(img, 0.0, 1.0).astype(sample.image.dtype)
    return VolumeSample(image=Tensor._wrap(np.ascontiguousarray(img)),
                        mask=Tensor._wrap(np.ascontiguousarray(
                            msk.astype(sample.mask.dtype))),
                        source_id=f"{sample.source_id}{suffix}",
                        slice_range=sample.slice_range)


def horizontal_flip(sample: VolumeSample) -> VolumeSample:
    """Mirror the W axis, uniformly across the slice stack."""
    return _rebuild(sample, np.flip(sample.image.data, axis=2),
                    np.flip(sample.mask.data, axis=2), "+hflip")


def vertical_flip(sample: VolumeSample) -> VolumeSample:
    """Mirror the H axis, uniformly across the slice stack."""
    return _rebuild(sample, np.flip(sample.image.data, axis=1),
                    np.flip(sample.mask.data, axis=1), "+vflip")


def rotate90(sample: VolumeSample, k: int = 1) -> VolumeSample:
    """Rotate k quarter turns in the H-W plane."""
    return _rebuild(sample, np.rot90(sample.image.data, k, axes=(1, 2)),
                    np.rot90(sample.mask.data, k, axes=(1, 2)), f"+rot{k * 90}")


def _morph(sample: VolumeSample, op, target: str, suffix: str) -> VolumeSample:
    img = sample.image.data[..., 0]
    msk = sample.mask.data[..., 0]
    if target in ("both", "image"):
        img = op(img, footprint=_CROSS)
    if target in ("both", "mask"):
        msk = op(msk, footprint=_CROSS)
    return _rebuild(sample, img[..., None], msk[..., None], suffix)


def erode(sample: VolumeSample, target: str = "both") -> VolumeSample:
    """Per-slice grey erosion with a 3x3 cross (minimum filter)."""
    return _morph(sample, ndimage.grey_erosion, target, "+erode")


def dilate(sample: VolumeSample, target: str = "both") -> VolumeSample:
    """Per-slice grey dilation with a 3x3 cross (maximum filter)."""
    return _morph(sample, ndimage.grey_dilation, target, "+dilate")


def _warp(sample: VolumeSample, coords: np.ndarray, suffix: str) -> VolumeSample:
    """Apply one (2, H, W) sampling map to every slice.

    Images interpolate bilinearly; masks sample nearest-neighbour so they
    stay strictly binary.
    """
    img = sample.image.data[..., 0]
    msk = sample.mask.data[..., 0]
    wi = np.empty_like(img)
    wm = np.empty_like(msk)
    for v in range(img.shape[0]):
        wi[v] = ndimage.map_coordinates(img[v], coords, order=1, mode="nearest")
        wm[v] = ndimage.map_coordinates(msk[v], coords, order=0, mode="nearest")
    return _rebuild(sample, wi[..., None], wm[..., None], suffix)


def elastic_transform(sample: VolumeSample, rng: np.random.Generator,
                      alpha: float = 3.0, sigma: float = 8.0) -> VolumeSample:
    """Smooth random in-plane displacement, shared by all slices."""
    _, h, w, _ = sample.image.dims
    dh = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    dw = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    hh, ww = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    return _warp(sample, np.stack([hh + dh, ww + dw]), "+elastic")


def _grid_axis_map(length: int, cells: int, factors: np.ndarray) -> np.ndarray:
    # Piecewise-linear monotone map: perturb cell widths, rescale to span.
    nodes_out = np.linspace(0.0, length - 1.0, cells + 1)
    widths = np.diff(nodes_out) * factors
    nodes_in = np.concatenate([[0.0], np.cumsum(widths)])
    nodes_in *= (length - 1.0) / nodes_in[-1]
    return np.interp(np.arange(length, dtype=float), nodes_out, nodes_in)


def grid_distortion(sample: VolumeSample, rng: np.random.Generator,
                    cells: int = 4, limit: float = 0.15) -> VolumeSample:
    """Perturb the widths of a cells x cells grid in the H-W plane."""
    _, h, w, _ = sample.image.dims
    fh = 1.0 + rng.uniform(-limit, limit, cells)
    fw = 1.0 + rng.uniform(-limit, limit, cells)
    mh = _grid_axis_map(h, cells, fh)
    mw = _grid_axis_map(w, cells, fw)
    coords = np.stack(np.meshgrid(mh, mw, indexing="ij"))
    return _warp(sample, coords, "+grid")


def optical_distortion(sample: VolumeSample, rng: np.random.Generator,
                       limit: float = 0.10) -> VolumeSample:
    """Radial barrel/pincushion warp about the slice center."""
    _, h, w, _ = sample.image.dims
    k = float(rng.uniform(-limit, limit))
    ch, cw = (h - 1) / 2.0, (w - 1) / 2.0
    hh, ww = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    rh, rw = hh - ch, ww - cw
    r2 = (rh / max(ch, 1)) ** 2 + (rw / max(cw, 1)) ** 2
    scale = 1.0 + k * r2
    return _warp(sample, np.stack([ch + rh * scale, cw + rw * scale]), "+optical")


# ---------------------------------------------------------------------------
# augmentation driver


def _sub_rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def _apply_mechanism(mech: str, sample: VolumeSample, rng: np.random.Generator,
                     plan: AugmentationPlan) -> VolumeSample:
    if mech == "erosion":
        return erode(sample, plan.morph_target)
    if mech == "dilation":
        return dilate(sample, plan.morph_target)
    if mech == "horizontal_flip":
        return horizontal_flip(sample)
    if mech == "vertical_flip":
        return vertical_flip(sample)
    if mech == "random_rotate90":
        return rotate90(sample, k=int(rng.integers(1, 4)))
    if mech == "elastic":
        return elastic_transform(sample, rng, plan.elastic_alpha, plan.elastic_sigma)
    if mech == "grid_distortion":
        return grid_distortion(sample, rng, plan.grid_cells, plan.grid_limit)
    if mech == "optical_distortion":
        return optical_distortion(sample, rng, plan.optical_limit)
    raise ConfigError(f"unknown mechanism {mech!r}")


def augment(samples: list[VolumeSample],
            plan: AugmentationPlan) -> tuple[list[VolumeSample], AugmentReport]:
    """Enlarge the sample list; originals are retained.

    For each mechanism, ceil(fraction * N) samples are chosen uniformly
    without replacement under a seed derived from (plan.seed, mechanism),
    and each copy's transform seed derives from (plan.seed, mechanism,
    sample index), so parallel and serial application agree.
    """
    plan.validate()
    out = list(samples)
    report = AugmentReport()
    n = len(samples)
    if n == 0:
        return out, report
    for mi, mech in enumerate(MECHANISMS):
        frac = plan.fractions.get(mech, 0.0)
        count = math.ceil(frac * n)
        if count == 0:
            continue
        chosen = _sub_rng(plan.seed, mi).choice(n, size=count, replace=False)
        for j in sorted(int(v) for v in chosen):
            new = _apply_mechanism(mech, samples[j], _sub_rng(plan.seed, mi, j), plan)
            if (mech == "erosion" and new.mask.data.sum() == 0
                    and samples[j].mask.data.sum() > 0):
                report.eroded_to_empty += 1
            out.append(new)
        report.applied[mech] = count
    return out, report


# ---------------------------------------------------------------------------
# synthetic dataset


def synth_volume(shape: tuple[int, int, int], rng: np.random.Generator,
                 source_id: str, precision: int = 32) -> VolumeSample:
    """One noisy volume containing a stack of bright ellipsoid bodies."""
    v, h, w = shape
    dt = dtype_for(precision)
    vv, hh, ww = np.meshgrid(np.arange(v, dtype=float), np.arange(h, dtype=float),
                             np.arange(w, dtype=float), indexing="ij")
    mask = np.zeros(shape, dtype=bool)
    cv = float(rng.uniform(2.0, 3.5))
    while cv < v - 1.5:
        ch = h / 2.0 + float(rng.uniform(-0.08, 0.08)) * h
        cw = w / 2.0 + float(rng.uniform(-0.08, 0.08)) * w
        rv = float(rng.uniform(1.6, 2.4))
        rh = float(rng.uniform(0.18, 0.24)) * h
        rw = float(rng.uniform(0.18, 0.24)) * w
        body = (((vv - cv) / rv) ** 2 + ((hh - ch) / rh) ** 2
                + ((ww - cw) / rw) ** 2) <= 1.0
        mask |= body
        cv += float(rng.uniform(5.0, 7.0))
    image = 0.15 + 0.04 * rng.standard_normal(shape)
    image[mask] = 0.85 + 0.04 * rng.standard_normal(int(mask.sum()))
    image = np.clip(image, 0.0, 1.0)
    fraction = mask.mean()
    if not 0.01 < fraction < 0.3:
        raise DataError(f"synthetic mask fraction {fraction:.4f} outside (0.01, 0.3) "
                        f"for shape {shape}")
    return VolumeSample(image=Tensor._wrap(image.astype(dt)[..., None]),
                        mask=Tensor._wrap(mask.astype(dt)[..., None]),
                        source_id=source_id, slice_range=(0, v))


def synth_dataset(n_volumes: int, shape: tuple[int, int, int], seed: int = 0,
                  precision: int = 32) -> list[VolumeSample]:
    """Deterministic list of vertebra-like synthetic volumes."""
    return [synth_volume(tuple(shape), _sub_rng(seed, i), f"synth{i:03d}", precision)
            for i in range(n_volumes)]


def train_val_split(volumes: list[VolumeSample], val_fraction: float,
                    seed: int = 0) -> tuple[list[VolumeSample], list[VolumeSample]]:
    """Volume-level split; val_fraction 0 validates on the training set."""
    if not volumes:
        raise DataError("cannot split an empty dataset")
    if not 0 <= val_fraction < 1:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if val_fraction == 0:
        return list(volumes), list(volumes)
    n_val = max(1, round(val_fraction * len(volumes)))
    if n_val >= len(volumes):
        n_val = len(volumes) - 1
    order = _sub_rng(seed, 0x5B11).permutation(len(volumes))
    val_idx = set(int(i) for i in order[:n_val])
    train = [v for i, v in enumerate(volumes) if i not in val_idx]
    val = [v for i, v in enumerate(volumes) if i in val_idx]
    return train, val
