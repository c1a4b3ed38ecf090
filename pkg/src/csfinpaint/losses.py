"""
Training losses: masked L1 reconstruction, adversarial, and slice-wise
perceptual and style losses on a frozen 2D feature extractor.

Volumes are torch tensors shaped ``(..., H, W, D)``; axial slices are taken
along the last axis. Numpy inputs are accepted and give python floats.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# relu1_1, relu2_1, relu3_1, relu4_1, relu5_1 in torchvision's vgg19().features
VGG19_TAPS = (1, 6, 11, 20, 29)


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    adv: float = 0.1
    perceptual: float = 0.1
    style: float = 250.0

    def __post_init__(self):
        if any(w < 0 for w in astuple(self)):
            raise ValueError(f"loss weights must be nonnegative: {self}")


class FeatureExtractor(nn.Module):
    """
    Frozen 2D conv stack exposing activations at fixed tap layers.

    Args:
        layers: sequential layers applied in order.
        taps: indices into ``layers`` whose outputs are returned.
        in_channels: channel count the first layer expects; grayscale slices
            are replicated to match.
        mean, std: per-channel input normalization, or None.
        min_size: smallest slice edge the stack accepts.
    """

    def __init__(self, layers: Sequence[nn.Module], taps: Sequence[int], in_channels: int = 1,
                 mean=None, std=None, min_size: int = 1):
        super().__init__()
        self.layers = nn.ModuleList(layers[: max(taps) + 1])
        self.taps = tuple(taps)
        self.in_channels = in_channels
        self.min_size = min_size
        if mean is not None:
            self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
            self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))
        else:
            self.mean = self.std = None
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # never leaves eval mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """``x``: ``(N, 1, H, W)`` grayscale slices."""
        if min(x.shape[-2:]) < self.min_size:
            raise ValueError(f"slice {tuple(x.shape[-2:])} smaller than extractor minimum {self.min_size}")
        if x.shape[1] != self.in_channels:
            x = x.expand(-1, self.in_channels, -1, -1)
        if self.mean is not None:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def file_sha256(path: os.PathLike | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def vgg19_extractor(weights_path: os.PathLike | str | None = None, sha256: str | None = None,
                    pretrained: bool = True) -> FeatureExtractor:
    """
    VGG-19 up to relu5_1 with ImageNet input normalization.

    Weights come from ``weights_path`` (a torchvision ``vgg19`` state dict,
    optionally checked against ``sha256``) or, when no path is given, from
    torchvision's ImageNet weights cache. ``pretrained=False`` gives the
    same architecture with random weights.
    """
    from torchvision.models import VGG19_Weights, vgg19

    if weights_path is not None:
        if sha256 is not None:
            digest = file_sha256(weights_path)
            if digest != sha256:
                raise ValueError(f"checksum mismatch for {weights_path}: {digest} != {sha256}")
        model = vgg19(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        if not any(k.startswith("features.") for k in state):
            state = {f"features.{k}": v for k, v in state.items()}
        model.load_state_dict(state, strict=False)
    elif pretrained:
        try:
            model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise RuntimeError("ImageNet VGG-19 weights unavailable; pass a weights file") from exc
    else:
        model = vgg19(weights=None)
    layers = [nn.ReLU(inplace=False) if isinstance(m, nn.ReLU) else m for m in model.features]
    return FeatureExtractor(layers, VGG19_TAPS, in_channels=3, mean=IMAGENET_MEAN, std=IMAGENET_STD,
                            min_size=16)


def toy_extractor(seed: int = 0, channels: tuple[int, int] = (4, 8)) -> FeatureExtractor:
    """Two conv+ReLU layers with random frozen weights; cheap stand-in for tests and smoke runs."""
    gen = torch.Generator().manual_seed(seed)
    c1, c2 = channels
    conv1, conv2 = nn.Conv2d(1, c1, 3, padding=1), nn.Conv2d(c1, c2, 3, stride=2, padding=1)
    with torch.no_grad():
        for conv in (conv1, conv2):
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.5)
            conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
    return FeatureExtractor([conv1, nn.ReLU(), conv2, nn.ReLU()], taps=(1, 3), in_channels=1, min_size=3)


def _tensors(*xs):
    as_numpy = not isinstance(xs[0], torch.Tensor)
    out = [torch.as_tensor(np.asarray(getattr(x, "data", x))) if as_numpy else x for x in xs]
    return as_numpy, out


def _result(value: torch.Tensor, as_numpy: bool):
    return float(value) if as_numpy else value


def recon_loss(orig, pred, mask):
    """Mean absolute difference over mask voxels."""
    as_numpy, (o, p, m) = _tensors(orig, pred, mask)
    if o.shape != p.shape or o.shape[-3:] != m.shape[-3:]:
        raise ValueError(f"shape mismatch: {tuple(o.shape)}, {tuple(p.shape)}, {tuple(m.shape)}")
    m = m.to(p.dtype).expand_as(p)
    n = m.sum()
    if n == 0:
        raise ValueError("empty mask")
    return _result(((o - p).abs() * m).sum() / n, as_numpy)


def discriminator_loss(real_logits, fake_logits):
    """-[E log sigmoid(real) + E log(1 - sigmoid(fake))]."""
    return (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
            + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))


def generator_adv_loss(fake_logits):
    """Non-saturating generator objective, -E log sigmoid(fake)."""
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def adv_loss(real_logits, fake_logits):
    """Return ``(d_loss, g_loss)`` averaged over patch-logit grid elements."""
    as_numpy, (r, f) = _tensors(real_logits, fake_logits)
    r, f = r.double() if as_numpy else r, f.double() if as_numpy else f
    return _result(discriminator_loss(r, f), as_numpy), _result(generator_adv_loss(f), as_numpy)


def axial_slices(vol: torch.Tensor) -> torch.Tensor:
    """``(..., H, W, D)`` -> ``(N*D, 1, H, W)``."""
    h, w, d = vol.shape[-3:]
    return vol.reshape(-1, h, w, d).permute(0, 3, 1, 2).reshape(-1, 1, h, w)


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """``(N, C, H, W)`` -> ``(N, C, C)`` normalized by ``C*H*W``."""
    n, c, h, w = feat.shape
    f = feat.reshape(n, c, h * w)
    return torch.bmm(f, f.transpose(1, 2)) / (c * h * w)


def _paired_features(orig, pred, fx):
    if orig.shape != pred.shape:
        raise ValueError(f"shape mismatch: {tuple(orig.shape)} vs {tuple(pred.shape)}")
    dtype = next(fx.parameters()).dtype
    orig, pred = orig.to(dtype), pred.to(dtype)
    return fx(axial_slices(orig)), fx(axial_slices(pred))


def perceptual_loss(orig, pred, fx: FeatureExtractor):
    """Mean over axial slices and tap layers of the mean |feature difference|."""
    as_numpy, (o, p) = _tensors(orig, pred)
    fo, fp = _paired_features(o, p, fx)
    loss = sum(F.l1_loss(a, b) for a, b in zip(fo, fp)) / len(fo)
    return _result(loss, as_numpy)


def style_loss(orig, pred, fx: FeatureExtractor):
    """Mean over axial slices and tap layers of the mean |Gram difference|."""
    as_numpy, (o, p) = _tensors(orig, pred)
    fo, fp = _paired_features(o, p, fx)
    loss = sum(F.l1_loss(gram_matrix(b), gram_matrix(a)) for a, b in zip(fo, fp)) / len(fo)
    return _result(loss, as_numpy)


def total_loss(components, w: LossWeights = LossWeights()):
    """
    Weighted sum of the (recon, adv, perceptual, style) components.

    Raises:
        FloatingPointError: a component is NaN or infinite.
    """
    recon, adv, perc, sty = components
    for name, c in zip(("recon", "adv", "perceptual", "style"), components):
        value = c.item() if torch.is_tensor(c) else float(c)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name} loss: {value}")
    return w.recon * recon + w.adv * adv + w.perceptual * perc + w.style * sty
