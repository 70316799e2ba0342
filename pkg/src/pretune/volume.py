"""Volume / mask data model, synthetic sulcal cohort, splitting and patching."""

from __future__ import annotations

import csv
import enum
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, CoverageError, InvalidSpecError

Dims = tuple[int, int, int]
Spacing = tuple[float, float, float]

BACKGROUND, SKELETON, PCS = 0, 1, 2


class ClassLabel(enum.IntEnum):
    ABSENT = 0
    PRESENT = 1
    SMALL = 2

    @classmethod
    def parse(cls, value: "str | int | ClassLabel") -> "ClassLabel":
        if isinstance(value, str) and not value.isdigit():
            return cls[value.upper()]
        return cls(int(value))


@dataclass
class Volume:
    """Scalar intensity grid with physical voxel spacing (mm)."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)

    def normalized(self) -> "Volume":
        lo, hi = float(self.data.min()), float(self.data.max())
        scale = hi - lo if hi > lo else 1.0
        return Volume(((self.data - lo) / scale).astype(np.float32), self.spacing)


@dataclass
class SegmentationMask:
    """Per-voxel label map: 0 background, 1 skeleton sulcal, 2 PCS."""

    labels: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {self.labels.shape}")
        if self.labels.max(initial=0) > PCS:
            raise ValueError("mask label codes must be in {0, 1, 2}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.labels.shape)

    def count(self, label: int) -> int:
        return int(np.count_nonzero(self.labels == label))


@dataclass
class SubjectRecord:
    id: str
    volume: Volume
    mask: SegmentationMask
    class_label: ClassLabel

    def __post_init__(self) -> None:
        if self.volume.dims != self.mask.dims:
            raise ValueError(f"{self.id}: volume dims {self.volume.dims} != mask dims {self.mask.dims}")
        has_pcs = self.mask.count(PCS) > 0
        if has_pcs != (self.class_label != ClassLabel.ABSENT):
            raise ValueError(f"{self.id}: class {self.class_label.name} inconsistent with mask")


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    fractions: tuple[float, float, float] = (0.70, 0.20, 0.10)
    seed: int = 0

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_ids), len(self.val_ids), len(self.test_ids)


@dataclass
class GeneratorSettings:
    """Settings of the synthetic sulcal cohort.

    Each subject holds ``n_ridges`` long curvilinear ridges (the skeleton
    label) with a Gaussian cross-section on a noisy background. Subjects of
    class ``present`` / ``small`` carry one extra thin ridge running parallel
    to the first one (the PCS surrogate); its length is drawn from
    ``pcs_length_present`` or ``pcs_length_small`` as a fraction of the main
    ridge span. The PCS ridge peaks at ``pcs_contrast`` times the skeleton
    ridge height, which gives the label an appearance cue besides position.
    """

    dims: Dims = (90, 190, 160)
    spacing: Spacing = (1.0, 1.0, 1.0)
    class_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    n_ridges: int = 3
    ridge_sigma: float = 1.2
    ridge_radius: float = 1.0
    ridge_intensity: float = 0.8
    background: float = 0.1
    noise_std: float = 0.05
    pcs_length_present: tuple[float, float] = (0.5, 0.8)
    pcs_length_small: tuple[float, float] = (0.15, 0.3)
    pcs_contrast: float = 0.5
    pcs_radius: float = 1.0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise InvalidSpecError(f"generator dims must be >= 16 on every axis, got {self.dims}")
        probs = np.asarray(self.class_probs, dtype=float)
        if probs.shape != (3,) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise InvalidSpecError(f"class_probs must be 3 non-negative values summing to 1, got {self.class_probs}")
        if not 0 < self.pcs_contrast <= 1 or self.pcs_radius <= 0:
            raise InvalidSpecError("pcs_contrast must lie in (0, 1] and pcs_radius must be positive")
        if self.n_ridges < 1:
            raise InvalidSpecError("n_ridges must be >= 1")
        # one ridge slot per structure plus the PCS slot, each at least 2 voxels apart
        margin = 3
        if (self.dims[0] - 2 * margin) / (self.n_ridges + 1) < 2.0:
            raise InvalidSpecError(f"depth {self.dims[0]} too small for {self.n_ridges} ridges and a PCS ridge")


def _ridge_points(z0, y0, amp_z, amp_y, freq, phase, w_from, w_to, n_points=400):
    w = np.linspace(w_from, w_to, n_points)
    s = (w - w_from) / max(w_to - w_from, 1e-9)
    z = z0 + amp_z * np.sin(2 * np.pi * freq * s + phase)
    y = y0 + amp_y * np.sin(2 * np.pi * 0.5 * freq * s + 0.5 * phase)
    return np.stack([z, y, w], axis=1)


def _rasterize(points: np.ndarray, dims: Dims) -> np.ndarray:
    idx = np.rint(points).astype(int)
    for axis, d in enumerate(dims):
        idx[:, axis] = np.clip(idx[:, axis], 0, d - 1)
    grid = np.zeros(dims, dtype=bool)
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return grid


def _distance_to(curve: np.ndarray) -> np.ndarray:
    return ndimage.distance_transform_edt(~curve)


def generate_synthetic_subject(
    seed: int,
    spec: GeneratorSettings | None = None,
    class_label: ClassLabel | str | None = None,
    subject_id: str | None = None,
) -> SubjectRecord:
    """Draw one synthetic subject; bit-identical for a fixed ``seed`` and ``spec``."""
    spec = spec or GeneratorSettings()
    spec.validate()
    rng = np.random.default_rng(seed)
    drawn = ClassLabel(int(rng.choice(3, p=np.asarray(spec.class_probs, dtype=float))))
    label = drawn if class_label is None else ClassLabel.parse(class_label)

    D, H, W = spec.dims
    margin = 3
    slot = (D - 2 * margin) / (spec.n_ridges + 1)
    w_from, w_to = 0.1 * (W - 1), 0.9 * (W - 1)

    skeleton_curve = np.zeros(spec.dims, dtype=bool)
    first = None
    for i in range(spec.n_ridges):
        # PCS slot sits between ridge 0 and ridge 1, so ridges start one slot lower
        z0 = margin + slot * (i + (0.5 if i == 0 else 1.5))
        params = dict(
            z0=z0,
            y0=rng.uniform(0.35, 0.65) * (H - 1),
            amp_z=0.2 * slot,
            amp_y=0.1 * H,
            freq=rng.uniform(0.5, 1.5),
            phase=rng.uniform(0, 2 * np.pi),
        )
        if first is None:
            first = params
        skeleton_curve |= _rasterize(_ridge_points(w_from=w_from, w_to=w_to, **params), spec.dims)

    skeleton_dist = _distance_to(skeleton_curve)
    intensity = np.exp(-(skeleton_dist**2) / (2 * spec.ridge_sigma**2))
    labels = np.where(skeleton_dist <= spec.ridge_radius, SKELETON, BACKGROUND).astype(np.uint8)

    if label != ClassLabel.ABSENT:
        lo, hi = spec.pcs_length_present if label == ClassLabel.PRESENT else spec.pcs_length_small
        frac = rng.uniform(lo, hi)
        span = (w_to - w_from) * frac
        start = w_from + rng.uniform(0.0, (w_to - w_from) - span)
        pcs_params = dict(first, z0=first["z0"] + slot)
        full = _ridge_points(w_from=w_from, w_to=w_to, **pcs_params)
        keep = (full[:, 2] >= start) & (full[:, 2] <= start + span)
        pcs_curve = _rasterize(full[keep], spec.dims)
        pcs_dist = _distance_to(pcs_curve)
        pcs_profile = spec.pcs_contrast * np.exp(-(pcs_dist**2) / (2 * (0.75 * spec.ridge_sigma) ** 2))
        pcs_mask = pcs_dist <= spec.pcs_radius
        intensity = np.where(pcs_mask, pcs_profile, np.maximum(intensity, pcs_profile))
        labels[pcs_mask] = PCS
    else:
        rng.uniform(size=2)  # keep the noise stream aligned across classes

    noise = rng.normal(0.0, spec.noise_std, size=spec.dims)
    data = np.clip(spec.background + spec.ridge_intensity * intensity + noise, 0.0, 1.0).astype(np.float32)

    sid = subject_id or f"sub-{seed:05d}"
    return SubjectRecord(
        id=sid,
        volume=Volume(data, spec.spacing),
        mask=SegmentationMask(labels, spec.spacing),
        class_label=label,
    )


def generate_cohort(n_subjects: int, spec: GeneratorSettings | None = None, seed: int = 0) -> list[SubjectRecord]:
    seeds = np.random.SeedSequence(seed).generate_state(n_subjects, dtype=np.uint32)
    return [
        generate_synthetic_subject(int(s), spec, subject_id=f"sub-{i:04d}")
        for i, s in enumerate(seeds)
    ]


def split_dataset(
    ids: Sequence[str],
    fractions: Sequence[float] = (0.70, 0.20, 0.10),
    seed: int = 0,
) -> DatasetSplit:
    """Shuffle ``ids`` by ``seed`` and slice contiguously into train/val/test.

    Validation and test sizes are floored; the remainder goes to train.
    """
    ids = list(ids)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be three positive values summing to 1, got {fractions}")
    if len(set(ids)) != len(ids):
        raise ConfigError("subject ids must be unique")
    n = len(ids)
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise ConfigError(f"split of {n} ids with fractions {fractions} leaves an empty partition")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train_ids=tuple(shuffled[:n_train]),
        val_ids=tuple(shuffled[n_train : n_train + n_val]),
        test_ids=tuple(shuffled[n_train + n_val :]),
        fractions=fractions,
        seed=seed,
    )


# -- patches ---------------------------------------------------------------------


@dataclass
class PatchSpec:
    """Patch geometry. ``sampling`` is ``"grid"`` (overlapping tiling) or ``"random"`` (k patches)."""

    size: Dims = (64, 64, 63)
    sampling: str = "grid"
    count: int | None = None
    stride: Dims | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        aliases = {"grid-with-overlap": "grid", "random-k": "random"}
        self.sampling = aliases.get(self.sampling, self.sampling)
        if self.sampling not in ("grid", "random"):
            raise InvalidSpecError(f"unknown sampling mode {self.sampling!r}")
        self.size = tuple(int(s) for s in self.size)
        if self.stride is not None:
            self.stride = tuple(int(s) for s in self.stride)

    def check(self, dims: Sequence[int]) -> None:
        if len(self.size) != 3 or any(s < 1 for s in self.size):
            raise InvalidSpecError(f"invalid patch size {self.size}")
        if any(s > d for s, d in zip(self.size, dims)):
            raise InvalidSpecError(f"patch size {self.size} exceeds volume dims {tuple(dims)}")
        if self.sampling == "grid":
            stride = self.stride or self.size
            if any(st < 1 or st > s for st, s in zip(stride, self.size)):
                raise InvalidSpecError(f"grid stride {stride} must lie in [1, patch size] to cover all voxels")
        elif self.count is None or self.count < 1:
            raise InvalidSpecError("random sampling needs count >= 1")


def _axis_origins(dim: int, size: int, stride: int) -> list[int]:
    origins = list(range(0, dim - size + 1, stride))
    if origins[-1] + size < dim:
        origins.append(dim - size)  # clamp the edge patch inside the volume
    return origins


def grid_origins(dims: Sequence[int], size: Sequence[int], stride: Sequence[int] | None = None) -> list[Dims]:
    stride = stride or size
    axes = [_axis_origins(d, s, st) for d, s, st in zip(dims, size, stride)]
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


def random_origins(dims: Sequence[int], size: Sequence[int], count: int, seed: int | np.random.Generator) -> list[Dims]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    highs = [d - s + 1 for d, s in zip(dims, size)]
    return [tuple(int(rng.integers(0, h)) for h in highs) for _ in range(count)]


def patch_origins(dims: Sequence[int], spec: PatchSpec) -> list[Dims]:
    spec.check(dims)
    if spec.sampling == "grid":
        return grid_origins(dims, spec.size, spec.stride)
    return random_origins(dims, spec.size, spec.count, spec.seed)


def crop(array: np.ndarray, origin: Sequence[int], size: Sequence[int]) -> np.ndarray:
    """Crop the trailing three axes of ``array``."""
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return array[(Ellipsis, *sl)]


def extract_patches(volume: Volume, spec: PatchSpec) -> list[tuple[Volume, Dims]]:
    origins = patch_origins(volume.dims, spec)
    return [(Volume(crop(volume.data, o, spec.size).copy(), volume.spacing), o) for o in origins]


def reassemble_array(patches: Iterable[tuple[np.ndarray, Sequence[int]]], dims: Sequence[int]) -> np.ndarray:
    """Average overlapping patches back onto a grid; patches may carry leading channel axes."""
    acc = None
    counts = np.zeros(tuple(dims), dtype=np.int64)
    for arr, origin in patches:
        arr = np.asarray(arr, dtype=np.float64)
        if acc is None:
            acc = np.zeros(arr.shape[:-3] + tuple(dims), dtype=np.float64)
        size = arr.shape[-3:]
        sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
        if any(o < 0 or o + s > d for o, s, d in zip(origin, size, dims)):
            raise CoverageError(f"patch at {tuple(origin)} of size {size} falls outside {tuple(dims)}")
        acc[(Ellipsis, *sl)] += arr
        counts[sl] += 1
    if acc is None or np.any(counts == 0):
        missing = int(np.count_nonzero(counts == 0))
        raise CoverageError(f"{missing} voxels of {tuple(dims)} are not covered by any patch")
    return acc / counts


def reassemble_patches(patches: Sequence[tuple[Volume | np.ndarray, Sequence[int]]], dims: Sequence[int]) -> Volume:
    spacing = (1.0, 1.0, 1.0)
    arrays = []
    for p, origin in patches:
        if isinstance(p, Volume):
            spacing = p.spacing
            p = p.data
        arrays.append((p, origin))
    out = reassemble_array(arrays, dims)
    return Volume(out, spacing)


# -- SVOL v1 file format ----------------------------------------------------------

SVOL_MAGIC = b"SULCVOL1"
_SVOL_HEADER = struct.Struct("<3I3fB")
DTYPE_F32, DTYPE_U8 = 0, 1


def write_svol(path: str | Path, item: Volume | SegmentationMask, compress: bool | None = None) -> Path:
    path = Path(path)
    if isinstance(item, SegmentationMask):
        code, payload = DTYPE_U8, item.labels.astype("<u1")
    else:
        code, payload = DTYPE_F32, item.data.astype("<f4")
    blob = SVOL_MAGIC + _SVOL_HEADER.pack(*item.dims, *item.spacing, code) + np.ascontiguousarray(payload).tobytes()
    if compress is None:
        compress = path.suffix == ".gz"
    path.write_bytes(gzip.compress(blob, mtime=0) if compress else blob)
    return path


def read_svol(path: str | Path) -> Volume | SegmentationMask:
    blob = Path(path).read_bytes()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    if blob[:8] != SVOL_MAGIC:
        raise ValueError(f"{path}: not an SVOL v1 file")
    d, h, w, sd, sh, sw, code = _SVOL_HEADER.unpack_from(blob, 8)
    offset = 8 + _SVOL_HEADER.size
    dtype = {DTYPE_F32: "<f4", DTYPE_U8: "<u1"}.get(code)
    if dtype is None:
        raise ValueError(f"{path}: unknown dtype code {code}")
    arr = np.frombuffer(blob, dtype=dtype, offset=offset, count=d * h * w).reshape(d, h, w)
    spacing = (float(sd), float(sh), float(sw))
    if code == DTYPE_U8:
        return SegmentationMask(arr.copy(), spacing)
    return Volume(arr.astype(np.float32), spacing)


MANIFEST_FIELDS = ("id", "volume_path", "mask_path", "class_label")


def save_cohort(subjects: Sequence[SubjectRecord], out_dir: str | Path, compress: bool = True) -> Path:
    """Write every subject as SVOL files plus a ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = ".svol.gz" if compress else ".svol"
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for s in subjects:
            vol_name, mask_name = f"{s.id}_img{ext}", f"{s.id}_mask{ext}"
            write_svol(out_dir / vol_name, s.volume)
            write_svol(out_dir / mask_name, s.mask)
            writer.writerow([s.id, vol_name, mask_name, s.class_label.name.lower()])
    return manifest


def load_cohort(manifest: str | Path) -> list[SubjectRecord]:
    manifest = Path(manifest)
    root = manifest.parent
    subjects = []
    with manifest.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{manifest}: header must be {','.join(MANIFEST_FIELDS)}")
        for row in reader:
            vol = read_svol(root / row["volume_path"])
            mask = read_svol(root / row["mask_path"])
            subjects.append(SubjectRecord(row["id"], vol, mask, ClassLabel.parse(row["class_label"])))
    return subjects
