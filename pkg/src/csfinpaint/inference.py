"""
CSF inpainting of synthetically atrophied images: the atrophy dropout mask
and Gaussian-weighted sliding-window generator inference.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Callable, Union

import numpy as np
from scipy import ndimage

from .channels import CannyParams, SpeConfig, assemble_channels
from .dropout import DropoutMask, apply_noise_fill, make_mtis, make_rng
from .networks import ModelBundle, composite, generator_forward
from .volume import Modality, Tissue, _as_array, check_same_shape, validate_tissue_labels

Predictor = Callable[[np.ndarray], np.ndarray]
CSF_CLASSES = (Tissue.CSF, Tissue.VENTRICLES)


@dataclass(frozen=True)
class SlidingWindowConfig:
    patch_size: tuple[int, int, int] = (96, 96, 96)
    stride: int = 20
    sigma_scale: float = 1 / 8

    def __post_init__(self):
        if self.stride < 1 or any(self.stride > p for p in self.patch_size):
            raise ValueError(f"stride {self.stride} must be in 1..patch size {self.patch_size}")
        if self.sigma_scale <= 0:
            raise ValueError("sigma_scale must be positive")


@dataclass
class AtrophyPair:
    tis_orig: np.ndarray
    tis_atr: np.ndarray
    t1_atr: np.ndarray
    flair_atr: np.ndarray

    def __post_init__(self):
        check_same_shape(self.tis_orig, self.tis_atr, self.t1_atr, self.flair_atr)
        validate_tissue_labels(self.tis_orig)
        validate_tissue_labels(self.tis_atr)

    @property
    def shape(self):
        return _as_array(self.tis_atr).shape

    def image(self, target) -> np.ndarray:
        return self.t1_atr if Modality(target) == Modality.T1W else self.flair_atr


def build_csf_dropout_mask(pair: AtrophyPair, ring_radius: int = 1) -> DropoutMask:
    """
    Voxels that went from cortical GM to CSF, plus a shell of ``ring_radius``
    voxels around them (6-connected dilation, non-background voxels only).
    """
    orig, atr = _as_array(pair.tis_orig), _as_array(pair.tis_atr)
    changed = (orig == Tissue.CORTICAL_GM) & np.isin(atr, CSF_CLASSES)
    if not changed.any():
        raise ValueError("no atrophy present: no GM -> CSF label changes")
    mask = changed.copy()
    if ring_radius > 0:
        ring = ndimage.binary_dilation(changed, ndimage.generate_binary_structure(3, 1),
                                       iterations=ring_radius)
        mask |= ring & (atr != Tissue.BACKGROUND)
    return DropoutMask(mask, total_drop_volume=int(mask.sum()))


def window_starts(n: int, patch: int, stride: int) -> list[int]:
    """Starts at multiples of ``stride``, with the last window flush against the end."""
    if n <= patch:
        return [0]
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def window_slices(shape, cfg: SlidingWindowConfig) -> list[tuple[slice, slice, slice]]:
    per_axis = [window_starts(n, p, cfg.stride) for n, p in zip(shape, cfg.patch_size)]
    return [tuple(slice(s, s + p) for s, p in zip(starts, cfg.patch_size))
            for starts in itertools.product(*per_axis)]


def gaussian_importance(cfg: SlidingWindowConfig) -> np.ndarray:
    """Separable Gaussian over the patch, centred, sigma = ``sigma_scale`` * patch size."""
    axes = []
    for p in cfg.patch_size:
        x = np.arange(p, dtype=np.float64) - (p - 1) / 2
        axes.append(np.exp(-0.5 * (x / (cfg.sigma_scale * p)) ** 2))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def fusion_weight_sum(shape, cfg: SlidingWindowConfig) -> np.ndarray:
    """Per-voxel sum of the normalized fusion weights over all windows (should be 1)."""
    g = gaussian_importance(cfg)
    total = np.zeros(shape)
    for sl in window_slices(shape, cfg):
        total[sl] += g
    normed = np.zeros(shape)
    for sl in window_slices(shape, cfg):
        normed[sl] += g / total[sl]
    return normed


def sliding_window_predict(channels: np.ndarray, predictor: Predictor,
                           cfg: SlidingWindowConfig = SlidingWindowConfig()) -> np.ndarray:
    """
    Run ``predictor`` on every ``(C, *patch)`` window of ``channels`` and
    fuse the single-channel outputs as a Gaussian-weighted average.
    Windows are visited in a fixed order so results are reproducible.
    """
    spatial = channels.shape[1:]
    if any(n < p for n, p in zip(spatial, cfg.patch_size)):
        raise ValueError(f"volume {spatial} smaller than patch {cfg.patch_size}; pad first")
    g = gaussian_importance(cfg)
    acc = np.zeros(spatial, dtype=np.float64)
    wsum = np.zeros(spatial, dtype=np.float64)
    for sl in window_slices(spatial, cfg):
        out = np.asarray(predictor(channels[(slice(None), *sl)]), dtype=np.float64)
        acc[sl] += g * out
        wsum[sl] += g
    return acc / wsum


def _pad_widths(shape, patch):
    return [((p - n) // 2, (p - n) - (p - n) // 2) if n < p else (0, 0) for n, p in zip(shape, patch)]


def bundle_predictor(bundle: ModelBundle) -> Predictor:
    return lambda window: generator_forward(window, bundle)


def sliding_window_inpaint(pair: AtrophyPair, mask, model: Union[ModelBundle, Predictor],
                           cfg: SlidingWindowConfig = SlidingWindowConfig(), target="T1w",
                           seed: int = 0, spe: SpeConfig = SpeConfig(), canny: CannyParams = CannyParams(),
                           allow_untrained: bool = False):
    """
    Inpaint the masked voxels of the atrophied ``target`` image.

    Inputs are noise-filled inside the mask, assembled into channels
    (labels restricted to the mask fill the masked-label slot), run through
    the generator window by window, fused, and composited so that voxels
    outside the mask are returned unchanged. Volumes smaller than the patch
    are reflect-padded and cropped back.
    """
    target = Modality(target)
    m = _as_array(mask).astype(bool)
    check_same_shape(m, pair.tis_atr)
    if isinstance(model, ModelBundle):
        if not allow_untrained and not model.metadata.get("iteration"):
            raise ValueError("untrained model: bundle metadata records no training iterations")
        expected = 5 + spe.n_channels
        if model.gen_spec.in_channels != expected:
            raise ValueError(f"channel mismatch: model expects {model.gen_spec.in_channels}, "
                             f"SPE config gives {expected}")
        predictor = bundle_predictor(model)
    else:
        predictor = model

    pads = _pad_widths(m.shape, cfg.patch_size)
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pads, m.shape))

    def pad(x, mode="reflect"):
        x = _as_array(x)
        return np.pad(x, pads, mode=mode) if any(sum(p) for p in pads) else x

    rng = make_rng(seed)
    mask_p = pad(m, "constant")
    t1 = apply_noise_fill(pad(pair.t1_atr).astype(np.float32), mask_p, rng)
    fl = apply_noise_fill(pad(pair.flair_atr).astype(np.float32), mask_p, rng)
    tis = pad(pair.tis_atr)
    stack = assemble_channels(t1, fl, tis, make_mtis(tis, mask_p), target, spe, canny)
    fused = sliding_window_predict(stack.channels, predictor, cfg)[crop]

    orig = pair.image(target)
    return composite(fused.astype(np.float32), orig, m)


def provenance(model, cfg: SlidingWindowConfig, mask, target, seed: int) -> dict:
    m = _as_array(mask).astype(bool)
    return {
        "model_checksum": model.checksum() if isinstance(model, ModelBundle) else None,
        "sliding_window": asdict(cfg),
        "target": Modality(target).value,
        "seed": seed,
        "mask_voxels": int(m.sum()),
        "mask_fraction": float(m.mean()),
    }
