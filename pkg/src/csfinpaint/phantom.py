"""
Synthetic head phantoms with known tissue geometry, for tests and demos.

Concentric shells around a ventricle core: WM, a folded cortical GM ribbon,
CSF, then scalp ("head"), inside a zero background border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Tissue

T1_INTENSITY = {Tissue.VENTRICLES: 0.12, Tissue.WM: 0.85, Tissue.CORTICAL_GM: 0.55,
                Tissue.CSF: 0.15, Tissue.HEAD: 0.7, Tissue.NON_CORTICAL: 0.6}
FLAIR_INTENSITY = {Tissue.VENTRICLES: 0.05, Tissue.WM: 0.6, Tissue.CORTICAL_GM: 0.75,
                   Tissue.CSF: 0.08, Tissue.HEAD: 0.5, Tissue.NON_CORTICAL: 0.65}


@dataclass
class Phantom:
    t1: np.ndarray
    flair: np.ndarray
    tissue: np.ndarray


def _radius(shape, border):
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    half = [(n - 1) / 2 for n in shape]
    semi = [n / 2 - border for n in shape]
    r = np.sqrt(sum(((g - c) / s) ** 2 for g, c, s in zip(grids, half, semi)))
    theta = np.arctan2(grids[1] - half[1], grids[0] - half[0])
    return r, theta


def tissue_geometry(shape=(48, 48, 48), border: int = 2, folds: int = 6) -> np.ndarray:
    r, theta = _radius(shape, border)
    wobble = 0.06 * np.sin(folds * theta)
    tis = np.zeros(shape, dtype=np.uint8)
    tis[r < 0.92] = Tissue.HEAD
    tis[r < 0.78] = Tissue.CSF
    tis[r < 0.66 + wobble] = Tissue.CORTICAL_GM
    tis[r < 0.45 + wobble] = Tissue.WM
    tis[r < 0.15] = Tissue.VENTRICLES
    return tis


def render(tissue: np.ndarray, intensities: dict, rng: np.random.Generator | None = None,
           noise: float = 0.01, shift: float = 0.0) -> np.ndarray:
    """Piecewise-constant image from labels, plus Gaussian texture; background stays 0."""
    img = np.zeros(tissue.shape, dtype=np.float32)
    for cls, value in intensities.items():
        img[tissue == cls] = value + shift
    fg = tissue != Tissue.BACKGROUND
    if rng is not None and noise > 0:
        img[fg] += rng.normal(0.0, noise, int(fg.sum())).astype(np.float32)
    img[fg] = np.clip(img[fg], 0.02, 1.0)
    return img


def make_phantom(shape=(48, 48, 48), rng: np.random.Generator | None = None, noise: float = 0.01,
                 shift: float = 0.0, border: int = 2) -> Phantom:
    """
    Args:
        shift: added to every tissue intensity, to mimic a scanner/cohort offset.
    """
    tis = tissue_geometry(shape, border)
    return Phantom(render(tis, T1_INTENSITY, rng, noise, shift),
                   render(tis, FLAIR_INTENSITY, rng, noise, shift), tis)


def atrophy(tissue: np.ndarray, t1: np.ndarray, flair: np.ndarray, region: tuple[slice, ...],
            depth: int = 1):
    """
    Thin the cortical ribbon inside ``region``: GM voxels within ``depth``
    voxels of CSF turn into CSF, and their intensities are set halfway
    between GM and CSF (mimicking interpolation blur).

    Returns ``(tissue_atr, t1_atr, flair_atr, changed)``.
    """
    from scipy import ndimage

    tis_atr = tissue.copy()
    csf = tissue == Tissue.CSF
    near_csf = ndimage.binary_dilation(csf, iterations=depth)
    in_region = np.zeros(tissue.shape, dtype=bool)
    in_region[region] = True
    changed = (tissue == Tissue.CORTICAL_GM) & near_csf & in_region
    tis_atr[changed] = Tissue.CSF
    t1_atr, fl_atr = t1.copy(), flair.copy()
    t1_atr[changed] = (T1_INTENSITY[Tissue.CORTICAL_GM] + T1_INTENSITY[Tissue.CSF]) / 2
    fl_atr[changed] = (FLAIR_INTENSITY[Tissue.CORTICAL_GM] + FLAIR_INTENSITY[Tissue.CSF]) / 2
    return tis_atr, t1_atr, fl_atr, changed


# FreeSurfer aseg code standing in for each tissue class in written datasets
ASEG_CODE = {Tissue.CORTICAL_GM: 3, Tissue.WM: 2, Tissue.CSF: 24, Tissue.VENTRICLES: 4,
             Tissue.NON_CORTICAL: 10}


def to_aseg(tissue: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the default remap: ``(aseg, skullstrip)``; head voxels lie outside the skull strip."""
    aseg = np.zeros(tissue.shape, dtype=np.int32)
    for cls, code in ASEG_CODE.items():
        aseg[tissue == cls] = code
    brain = (tissue != Tissue.BACKGROUND) & (tissue != Tissue.HEAD)
    return aseg, brain.astype(np.uint8)


def write_phantom_dataset(root, subjects=("s0", "s1"), samples=("test",), shape=(32, 32, 32),
                          seed: int = 0, shift: float = 0.0, with_atrophy: bool = False):
    """
    Write phantom NIfTI files and a ``manifest.csv`` under ``root``.
    Returns the manifest path. Each (subject, sample) gets its own noise draw.
    """
    import csv
    from pathlib import Path

    from .volume import Modality, Volume, save_volume

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    affine = np.eye(4)
    rows = []

    def save(arr, name, modality):
        path = root / name
        save_volume(Volume(arr, (1.0, 1.0, 1.0), affine, modality), path)
        return path.name

    for subj in subjects:
        for smp in samples:
            ph = make_phantom(shape, rng, shift=shift)
            aseg, brain = to_aseg(ph.tissue)
            stem = f"{subj}_{smp}"
            row = {"subject": subj, "sample": smp,
                   "t1": save(ph.t1, f"{stem}_t1.nii.gz", Modality.T1W),
                   "flair": save(ph.flair, f"{stem}_flair.nii.gz", Modality.FLAIR),
                   "aseg": save(aseg, f"{stem}_aseg.nii.gz", Modality.LABEL),
                   "skullstrip": save(brain, f"{stem}_brain.nii.gz", Modality.MASK)}
            if with_atrophy:
                half = tuple(slice(0, n // 2) if i == 0 else slice(None) for i, n in enumerate(shape))
                tis_atr, t1_atr, fl_atr, _ = atrophy(ph.tissue, ph.t1, ph.flair, half)
                row.update(tis_orig=save(ph.tissue, f"{stem}_tis.nii.gz", Modality.LABEL),
                           tis_atr=save(tis_atr, f"{stem}_tis_atr.nii.gz", Modality.LABEL),
                           t1_atr=save(t1_atr, f"{stem}_t1_atr.nii.gz", Modality.T1W),
                           flair_atr=save(fl_atr, f"{stem}_flair_atr.nii.gz", Modality.FLAIR))
            rows.append(row)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return manifest
