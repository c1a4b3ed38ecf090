"""
Volume data model, NIfTI/MGZ ingestion, intensity normalization and the
7-class tissue label remapping.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class Modality(str, enum.Enum):
    T1W = "T1w"
    FLAIR = "FLAIR"
    LABEL = "label"
    MASK = "mask"
    EDGE = "edge"


class Tissue(enum.IntEnum):
    BACKGROUND = 0
    CORTICAL_GM = 1
    WM = 2
    CSF = 3
    VENTRICLES = 4
    NON_CORTICAL = 5
    HEAD = 6


N_TISSUE_CLASSES = 7
MAX_TISSUE_CODE = N_TISSUE_CLASSES - 1


@dataclass
class Volume:
    """
    A 3D scalar grid with its spatial metadata.

    ``data`` is indexed (i, j, k) = (sagittal, coronal, axial); axial slices
    are ``data[:, :, k]``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    modality: Modality = Modality.T1W

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"non-3D data: got array of shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"empty volume shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {self.affine.shape}")
        self.modality = Modality(self.modality)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, modality: Modality | str | None = None) -> Volume:
        """Copy of this volume's geometry around new data."""
        return replace(self, data=data, modality=self.modality if modality is None else modality,
                       affine=self.affine.copy())


def check_same_shape(*arrays) -> None:
    shapes = {tuple(np.shape(a)) for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _as_array(v) -> np.ndarray:
    # Volume, DropoutMask or plain array
    data = getattr(v, "data", v)
    return data if isinstance(data, np.ndarray) else np.asarray(data)


# ---------------------------------------------------------------------------
# file i/o
# ---------------------------------------------------------------------------

def load_volume(path: os.PathLike | str, modality: Modality | str = Modality.T1W) -> Volume:
    """
    Load a NIfTI-1 (``.nii``/``.nii.gz``) or FreeSurfer ``.mgz`` volume.

    Intensities are returned in their on-disk dtype without scaling beyond the
    header's own slope/intercept.
    """
    import nibabel as nib

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises several unrelated types
        raise ValueError(f"malformed header in {path}: {exc}") from exc
    data = np.asanyarray(img.dataobj)
    if data.ndim != 3:
        raise ValueError(f"non-3D data in {path}: shape {data.shape}")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume(np.asarray(data), spacing=spacing, affine=img.affine, modality=modality)


def save_volume(vol: Volume, path: os.PathLike | str) -> None:
    """Write ``vol`` as NIfTI-1; dtype, spacing and affine are preserved."""
    import nibabel as nib

    data = vol.data
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    img = nib.Nifti1Image(data, vol.affine)
    img.header.set_zooms(vol.spacing)
    img.header.set_data_dtype(data.dtype)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))


# ---------------------------------------------------------------------------
# intensity normalization
# ---------------------------------------------------------------------------

def normalize_intensity(v: Volume) -> Volume:
    """
    Global min/max rescale into [0, 1].

    A constant volume has no range to map and comes back as all zeros.
    """
    x = v.data.astype(np.float32)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        logger.warning("constant volume (value %g); normalized to zeros", lo)
        return v.with_data(np.zeros_like(x))
    out = (x - np.float32(lo)) / np.float32(hi - lo)
    np.clip(out, 0.0, 1.0, out=out)
    return v.with_data(out)


# ---------------------------------------------------------------------------
# tissue labels
# ---------------------------------------------------------------------------

@dataclass
class LabelRemapTable:
    """Source label -> tissue class lookup plus skull-strip handling policy."""

    mapping: dict[int, int]
    unlabeled: int = Tissue.CSF
    head_outside_skullstrip: bool = True

    def __post_init__(self):
        bad = {k: c for k, c in self.mapping.items() if not 0 <= c <= MAX_TISSUE_CODE}
        if bad:
            raise ValueError(f"class codes outside 0..{MAX_TISSUE_CODE}: {bad}")
        if not 0 <= self.unlabeled <= MAX_TISSUE_CODE:
            raise ValueError(f"unlabeled class {self.unlabeled} outside 0..{MAX_TISSUE_CODE}")

    @classmethod
    def parse(cls, text: str) -> LabelRemapTable:
        mapping: dict[int, int] = {}
        opts: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in ("unlabeled", "head_outside_skullstrip"):
                opts[key] = value
                continue
            try:
                code = int(value)
                if "-" in key.lstrip("-"):
                    lo, hi = (int(s) for s in key.split("-", 1))
                    keys = range(lo, hi + 1)
                else:
                    keys = [int(key)]
            except ValueError:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}") from None
            for k in keys:
                mapping[k] = code
        kwargs = {}
        if "unlabeled" in opts:
            kwargs["unlabeled"] = int(opts["unlabeled"])
        if "head_outside_skullstrip" in opts:
            kwargs["head_outside_skullstrip"] = opts["head_outside_skullstrip"].lower() in ("1", "true", "yes")
        return cls(mapping, **kwargs)

    @classmethod
    def from_file(cls, path: os.PathLike | str) -> LabelRemapTable:
        return cls.parse(Path(path).read_text())

    @classmethod
    def default(cls) -> LabelRemapTable:
        """The shipped FreeSurfer aseg table (``data/aseg_to_tissue.txt``)."""
        text = resources.files("csfinpaint").joinpath("data/aseg_to_tissue.txt").read_text()
        return cls.parse(text)

    def to_text(self) -> str:
        lines = [f"unlabeled={int(self.unlabeled)}",
                 f"head_outside_skullstrip={'true' if self.head_outside_skullstrip else 'false'}"]
        lines += [f"{k}={v}" for k, v in sorted(self.mapping.items())]
        return "\n".join(lines) + "\n"


def remap_tissue_labels(aseg, skullstrip, table: LabelRemapTable | None = None, image=None) -> Volume:
    """
    Convert a FreeSurfer segmentation into the 7-class tissue labelling.

    Precedence per voxel: a nonzero aseg label maps through ``table``; an
    unlabeled voxel inside the skull-strip mask takes ``table.unlabeled``;
    a foreground voxel (nonzero ``image``, or nonzero aseg/skullstrip when no
    image is given) outside the skull strip becomes head; everything else is
    background.
    """
    table = LabelRemapTable.default() if table is None else table
    seg = _as_array(aseg)
    brain = _as_array(skullstrip) > 0
    check_same_shape(seg, brain)
    if image is not None:
        fg = _as_array(image)
        check_same_shape(seg, fg)
        fg = fg != 0
    else:
        fg = (seg != 0) | brain

    seg_int = seg.astype(np.int64)
    if not np.array_equal(seg_int, seg):
        raise ValueError("aseg volume contains non-integer labels")
    present = np.unique(seg_int)
    missing = [int(v) for v in present if v != 0 and int(v) not in table.mapping]
    if missing:
        raise ValueError(f"unmapped source label(s): {missing}")

    lut_keys = np.array(sorted(table.mapping), dtype=np.int64)
    lut_vals = np.array([table.mapping[k] for k in lut_keys], dtype=np.uint8)
    out = np.zeros(seg.shape, dtype=np.uint8)
    labelled = seg_int != 0
    out[labelled] = lut_vals[np.searchsorted(lut_keys, seg_int[labelled])]
    out[~labelled & brain] = table.unlabeled
    if table.head_outside_skullstrip:
        out[~labelled & ~brain & fg] = Tissue.HEAD

    ref = aseg if isinstance(aseg, Volume) else Volume(seg)
    return ref.with_data(out, Modality.LABEL)


def validate_tissue_labels(tis) -> np.ndarray:
    data = _as_array(tis)
    if data.size and (data.min() < 0 or data.max() > MAX_TISSUE_CODE
                      or not np.array_equal(data, np.round(data))):
        raise ValueError(f"tissue labels must be integers in 0..{MAX_TISSUE_CODE}")
    return data
