"""
3D generator and PatchGAN discriminator, the composite-output rule, and
checkpoint bundles.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.parametrizations import spectral_norm

from .volume import MAX_TISSUE_CODE, Volume, _as_array, check_same_shape

BUNDLE_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 11
    base_width: int = 64
    n_downsamples: int = 2
    n_residual_blocks: int = 8
    residual_dilation: int = 2
    stem_kernel: int = 7
    sample_kernel: int = 4
    normalization: str = "spectral+instance"
    output_activation: str = "scaled_sigmoid"

    @property
    def size_multiple(self) -> int:
        return 2 ** self.n_downsamples


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 2
    base_width: int = 64
    n_stride2: int = 3
    n_stride1: int = 1
    kernel: int = 4
    normalization: str = "spectral"
    leaky_slope: float = 0.2

    def output_shape(self, shape) -> tuple[int, ...]:
        """Logit grid shape for a spatial input ``shape`` (padding 1 throughout)."""
        out = []
        for n in shape:
            for _ in range(self.n_stride2):
                n = (n + 2 - self.kernel) // 2 + 1
            # hidden stride-1 blocks plus the output projection
            for _ in range(self.n_stride1 + 1):
                n = n + 2 - self.kernel + 1
            out.append(n)
        return tuple(out)


class ResnetBlock3d(nn.Module):
    def __init__(self, dim, dilation=2):
        super().__init__()
        self.conv_block = nn.Sequential(
            spectral_norm(nn.Conv3d(dim, dim, 3, padding=dilation, dilation=dilation, bias=False)),
            nn.InstanceNorm3d(dim),
            nn.ReLU(True),
            spectral_norm(nn.Conv3d(dim, dim, 3, padding=1, bias=False)),
            nn.InstanceNorm3d(dim),
        )

    def forward(self, x):
        return x + self.conv_block(x)


class Generator3d(nn.Module):
    """
    Encoder / dilated-residual bottleneck / decoder, all 3D.

    Input ``(B, C, H, W, D)`` with H, W, D divisible by 4; output
    ``(B, 1, H, W, D)`` in [0, 1].
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        k = spec.stem_kernel
        layers = [
            nn.ReflectionPad3d(k // 2),
            spectral_norm(nn.Conv3d(spec.in_channels, w, k, bias=False)),
            nn.InstanceNorm3d(w),
            nn.ReLU(True),
        ]
        ch = w
        for _ in range(spec.n_downsamples):
            layers += [
                spectral_norm(nn.Conv3d(ch, ch * 2, spec.sample_kernel, stride=2, padding=1, bias=False)),
                nn.InstanceNorm3d(ch * 2),
                nn.ReLU(True),
            ]
            ch *= 2
        self.encoder = nn.Sequential(*layers)
        self.middle = nn.Sequential(*[ResnetBlock3d(ch, spec.residual_dilation)
                                      for _ in range(spec.n_residual_blocks)])
        layers = []
        for _ in range(spec.n_downsamples):
            layers += [
                spectral_norm(nn.ConvTranspose3d(ch, ch // 2, spec.sample_kernel, stride=2, padding=1, bias=False)),
                nn.InstanceNorm3d(ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad3d(k // 2), nn.Conv3d(ch, 1, k)]
        self.decoder = nn.Sequential(*layers)

    def forward(self, x):
        x = self.decoder(self.middle(self.encoder(x)))
        # sigmoid(2x) written as (tanh + 1) / 2
        return (torch.tanh(x) + 1) / 2


class Discriminator3d(nn.Module):
    """3D PatchGAN: stride-2 blocks, stride-1 blocks, then a 1-channel logit projection."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        k, slope = spec.kernel, spec.leaky_slope
        layers = []
        ch_in, ch = spec.in_channels, spec.base_width
        for _ in range(spec.n_stride2):
            layers += [spectral_norm(nn.Conv3d(ch_in, ch, k, stride=2, padding=1)), nn.LeakyReLU(slope, True)]
            ch_in, ch = ch, ch * 2
        for _ in range(spec.n_stride1):
            layers += [spectral_norm(nn.Conv3d(ch_in, ch, k, stride=1, padding=1)), nn.LeakyReLU(slope, True)]
            ch_in, ch = ch, ch * 2
        layers.append(spectral_norm(nn.Conv3d(ch_in, 1, k, stride=1, padding=1)))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def init_weights(module: nn.Module, gain: float = 0.02) -> None:
    """N(0, gain) init for conv weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            weight = m.parametrizations.weight.original if hasattr(m, "parametrizations") else m.weight
            nn.init.normal_(weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class ModelBundle:
    generator: Generator3d
    discriminator: Discriminator3d
    metadata: dict = field(default_factory=dict)

    @property
    def gen_spec(self) -> GeneratorSpec:
        return self.generator.spec

    @property
    def disc_spec(self) -> DiscriminatorSpec:
        return self.discriminator.spec

    @classmethod
    def create(cls, gen_spec: GeneratorSpec = GeneratorSpec(),
               disc_spec: DiscriminatorSpec = DiscriminatorSpec(), seed: int = 0, **metadata) -> ModelBundle:
        torch.manual_seed(seed)
        g, d = Generator3d(gen_spec), Discriminator3d(disc_spec)
        init_weights(g)
        init_weights(d)
        return cls(g, d, {"seed": seed, **metadata})

    def to(self, device) -> ModelBundle:
        self.generator.to(device)
        self.discriminator.to(device)
        return self

    def eval(self) -> ModelBundle:
        self.generator.eval()
        self.discriminator.eval()
        return self

    @property
    def device(self) -> torch.device:
        return next(self.generator.parameters()).device

    def clone(self) -> ModelBundle:
        other = ModelBundle(Generator3d(self.gen_spec), Discriminator3d(self.disc_spec), dict(self.metadata))
        other.generator.load_state_dict(self.generator.state_dict())
        other.discriminator.load_state_dict(self.discriminator.state_dict())
        return other.to(self.device)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for net in (self.generator, self.discriminator):
            for name, t in sorted(net.state_dict().items()):
                h.update(name.encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, directory: os.PathLike | str) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.generator.state_dict(), directory / "generator.pt")
        torch.save(self.discriminator.state_dict(), directory / "discriminator.pt")
        manifest = {
            "version": BUNDLE_VERSION,
            "generator": asdict(self.gen_spec),
            "discriminator": asdict(self.disc_spec),
            "metadata": self.metadata,
            "checksum": self.checksum(),
        }
        (directory / "bundle.json").write_text(json.dumps(manifest, indent=2, default=str))
        return directory

    @classmethod
    def load(cls, directory: os.PathLike | str, map_location="cpu") -> ModelBundle:
        directory = Path(directory)
        manifest_path = directory / "bundle.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no bundle.json in {directory}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {manifest.get('version')!r}")
        g = Generator3d(GeneratorSpec(**manifest["generator"]))
        d = Discriminator3d(DiscriminatorSpec(**manifest["discriminator"]))
        g.load_state_dict(torch.load(directory / "generator.pt", map_location=map_location, weights_only=True))
        d.load_state_dict(torch.load(directory / "discriminator.pt", map_location=map_location, weights_only=True))
        return cls(g, d, manifest.get("metadata", {}))


def check_generator_input(shape, spec: GeneratorSpec) -> None:
    c, *spatial = shape
    if c != spec.in_channels:
        raise ValueError(f"channel mismatch: generator expects {spec.in_channels}, got {c}")
    m = spec.size_multiple
    bad = [n for n in spatial if n % m]
    if bad:
        raise ValueError(f"spatial size(s) {bad} not divisible by {m}")


@torch.no_grad()
def generator_forward(stack, bundle: ModelBundle) -> np.ndarray:
    """
    Run the generator in eval mode on a ``ChannelStack`` or ``(C, H, W, D)``
    array and return the ``(H, W, D)`` prediction.
    """
    x = stack.channels if hasattr(stack, "channels") else np.asarray(stack)
    check_generator_input(x.shape, bundle.gen_spec)
    g = bundle.generator
    was_training = g.training
    g.eval()
    try:
        out = g(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None].to(bundle.device))
    finally:
        g.train(was_training)
    return out[0, 0].cpu().numpy()


def tissue_to_channel(tis) -> np.ndarray:
    return _as_array(tis).astype(np.float32) / MAX_TISSUE_CODE


@torch.no_grad()
def discriminator_forward(img, tis, bundle: ModelBundle) -> np.ndarray:
    """Patch logit grid for one image conditioned on its tissue labels."""
    a, t = _as_array(img), _as_array(tis)
    check_same_shape(a, t)
    x = np.stack([a.astype(np.float32), tissue_to_channel(t)])
    d = bundle.discriminator
    was_training = d.training
    d.eval()
    try:
        out = d(torch.from_numpy(x)[None].to(bundle.device))
    finally:
        d.train(was_training)
    return out[0, 0].cpu().numpy()


def composite(pred, orig, mask):
    """
    Generator output inside the mask, original voxels elsewhere.

    Works on numpy arrays, ``Volume`` objects (returns a Volume with
    ``orig``'s geometry) and torch tensors (differentiable in ``pred``).
    """
    if isinstance(pred, torch.Tensor):
        m = mask if isinstance(mask, torch.Tensor) else torch.as_tensor(_as_array(mask))
        if pred.shape != orig.shape or pred.shape[-3:] != m.shape[-3:]:
            raise ValueError(f"shape mismatch: {tuple(pred.shape)}, {tuple(orig.shape)}, {tuple(m.shape)}")
        return torch.where(m.bool(), pred, orig)
    p, o, m = _as_array(pred), _as_array(orig), _as_array(mask).astype(bool)
    check_same_shape(p, o, m)
    out = np.where(m, p.astype(o.dtype, copy=False), o)
    return orig.with_data(out) if isinstance(orig, Volume) else out
