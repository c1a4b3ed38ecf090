"""
Random patch-based dropout masks and the noise-fill function.

Masks are built by rejection sampling box-shaped patches until their
accumulated raw volume reaches a random budget of up to 1% of the image
volume; any patch touching a zero (background) voxel is rejected.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import Modality, Volume, _as_array, check_same_shape

MAX_DROP_FRACTION = 0.01
MIN_PATCH_FRACTION = 0.05
MAX_PATCH_FRACTION = 0.10
MAX_CONSECUTIVE_REJECTIONS = 10_000
RNG_ALGORITHM = "PCG64"

Patch = tuple[tuple[int, int, int], tuple[int, int, int]]


def make_rng(seed: int | None) -> np.random.Generator:
    """Seeded generator; same seed and call sequence give identical draws."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class DropoutMask:
    data: np.ndarray
    patches: list[Patch] = field(default_factory=list)
    total_drop_volume: int = 0
    max_drop_volume: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool, copy=False)

    @property
    def shape(self):
        return self.data.shape

    @property
    def patch_volumes(self) -> list[int]:
        return [int(np.prod(np.subtract(e, s))) for s, e in self.patches]

    def sidecar(self) -> dict:
        return {
            "shape": list(self.data.shape),
            "patches": [[list(s), list(e)] for s, e in self.patches],
            "total_drop_volume": int(self.total_drop_volume),
            "max_drop_volume": float(self.max_drop_volume),
            "mask_voxels": int(self.data.sum()),
            "seed": self.seed,
            "rng": RNG_ALGORITHM,
        }

    def save(self, path: os.PathLike | str, like: Volume | None = None) -> None:
        """Write the mask as a uint8 NIfTI with a ``.json`` patch-list sidecar."""
        from .volume import save_volume

        path = Path(path)
        ref = like if like is not None else Volume(self.data)
        save_volume(ref.with_data(self.data.astype(np.uint8), Modality.MASK), path)
        sidecar_path(path).write_text(json.dumps(self.sidecar(), indent=2))

    @classmethod
    def load(cls, path: os.PathLike | str) -> DropoutMask:
        from .volume import load_volume

        path = Path(path)
        data = load_volume(path, Modality.MASK).data > 0
        side = sidecar_path(path)
        if not side.exists():
            return cls(data, total_drop_volume=int(data.sum()))
        meta = json.loads(side.read_text())
        patches = [(tuple(s), tuple(e)) for s, e in meta["patches"]]
        return cls(data, patches, meta["total_drop_volume"], meta["max_drop_volume"], meta.get("seed"))


def sidecar_path(path: Path) -> Path:
    name = path.name
    for ext in (".nii.gz", ".nii", ".mgz"):
        if name.endswith(ext):
            return path.with_name(name[: -len(ext)] + ".json")
    return path.with_suffix(".json")


def patch_length_bounds(size: int) -> tuple[int, int]:
    """Integer-truncated [5%, 10%] patch edge bounds for an axis of ``size`` voxels."""
    lo = max(int(size * MIN_PATCH_FRACTION), 1)
    hi = max(int(size * MAX_PATCH_FRACTION), lo)
    return lo, hi


def generate_dropout_mask(reference, rng: np.random.Generator,
                          max_rejections: int = MAX_CONSECUTIVE_REJECTIONS,
                          seed: int | None = None) -> DropoutMask:
    """
    Sample a patch-based dropout mask for ``reference``.

    The accumulated volume counts each accepted patch's raw box volume, so
    overlaps are double counted and the final accepted patch may push the
    total past the budget.

    Args:
        reference: normalized intensity volume (``Volume`` or array).
        rng: numpy generator; determines the mask completely.
        max_rejections: consecutive rejected patches before giving up.
        seed: recorded in the sidecar only.

    Raises:
        RuntimeError: no valid patch placement within ``max_rejections`` tries.
    """
    img = _as_array(reference)
    if not np.any(img != 0):
        raise ValueError("reference has no foreground")
    shape = img.shape
    bounds = [patch_length_bounds(k) for k in shape]
    max_drop = float(np.prod(shape)) * rng.uniform(0.0, MAX_DROP_FRACTION)

    mask = np.zeros(shape, dtype=bool)
    patches: list[Patch] = []
    total = 0
    rejected = 0
    # at least one patch even when the drawn budget rounds to nothing
    while total < max_drop or not patches:
        start, end = [], []
        for k, (lo, hi) in zip(shape, bounds):
            s = int(rng.integers(0, k - lo, endpoint=True))
            start.append(s)
            end.append(min(s + int(rng.integers(lo, hi, endpoint=True)), k))
        box = tuple(slice(s, e) for s, e in zip(start, end))
        if np.any(img[box] == 0):
            rejected += 1
            if rejected >= max_rejections:
                raise RuntimeError(
                    f"no valid patch placement after {rejected} consecutive rejections")
            continue
        rejected = 0
        mask[box] = True
        patches.append((tuple(start), tuple(end)))
        total += int(np.prod(np.subtract(end, start)))
    return DropoutMask(mask, patches, total, max_drop, seed)


def apply_noise_fill(v, mask, rng: np.random.Generator):
    """
    Replace mask voxels with independent N(0, 1) draws; other voxels are
    returned bit-identical. Noise is not clamped to the intensity range.
    """
    data = _as_array(v)
    m = _as_array(mask).astype(bool)
    check_same_shape(data, m)
    out = data.astype(np.float32, copy=True)
    out[m] = rng.standard_normal(int(m.sum()))
    return v.with_data(out) if isinstance(v, Volume) else out


def make_mtis(tis, mask):
    """Tissue labels restricted to the dropout region."""
    labels = _as_array(tis)
    m = _as_array(mask).astype(bool)
    check_same_shape(labels, m)
    out = np.where(m, labels, 0).astype(labels.dtype)
    return tis.with_data(out, Modality.LABEL) if isinstance(tis, Volume) else out
