"""
Model input channels: noise-filled T1w/FLAIR, tissue labels, masked tissue
labels, a slice-wise Canny edge map of the target modality, and 3D
sinusoidal positional encoding (SPE).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import feature

from .volume import MAX_TISSUE_CODE, Modality, Volume, _as_array, check_same_shape

SEMANTIC_CHANNELS = ("t1_drop", "mtis", "tis", "flair_drop", "edge")
TARGETS = (Modality.T1W, Modality.FLAIR)


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.0
    low: float = 0.1
    high: float = 0.2


@dataclass(frozen=True)
class SpeConfig:
    """
    3D SPE settings for ``n_input_channels`` semantic channels.

    Each axis gets ``ceil(N/6)`` frequencies. The first is
    ``1 / 10000**(6/N)`` and the rest continue geometrically, so
    frequency ``m`` is ``base_frequency ** (m + 1)``.
    """

    n_input_channels: int = len(SEMANTIC_CHANNELS)

    def __post_init__(self):
        if self.n_input_channels < 1:
            raise ValueError("n_input_channels must be >= 1")

    @property
    def freqs_per_axis(self) -> int:
        return math.ceil(self.n_input_channels / 6)

    @property
    def base_frequency(self) -> float:
        return 1.0 / 10000.0 ** (6.0 / self.n_input_channels)

    @property
    def frequencies(self) -> list[float]:
        return [self.base_frequency ** (m + 1) for m in range(self.freqs_per_axis)]

    @property
    def n_channels(self) -> int:
        return 6 * self.freqs_per_axis

    def channel_names(self) -> list[str]:
        return [f"spe_{axis}{m}_{fn}" for axis in "ijk"
                for m in range(self.freqs_per_axis) for fn in ("sin", "cos")]


def spe_channels(shape, cfg: SpeConfig = SpeConfig()) -> np.ndarray:
    """
    Positional encoding of shape ``(6 * ceil(N/6), H, W, D)``.

    Channel order: for each axis (sagittal i, coronal j, axial k), for each
    frequency, sin then cos of frequency times the voxel index.
    """
    out = np.empty((cfg.n_channels, *shape), dtype=np.float32)
    c = 0
    for axis, n in enumerate(shape):
        coord = np.arange(n, dtype=np.float64)
        bshape = [1, 1, 1]
        bshape[axis] = n
        for w in cfg.frequencies:
            out[c] = np.sin(w * coord).reshape(bshape)
            out[c + 1] = np.cos(w * coord).reshape(bshape)
            c += 2
    return out


def compute_edge_stack(v, params: CannyParams = CannyParams()):
    """
    Binary edge volume from a 2D Canny detector run independently on every
    axial slice ``v[:, :, k]``.
    """
    data = _as_array(v).astype(np.float64)
    edges = np.zeros(data.shape, dtype=np.uint8)
    for k in range(data.shape[2]):
        sl = data[:, :, k]
        if sl.min() == sl.max():
            continue
        edges[:, :, k] = feature.canny(sl, sigma=params.sigma, low_threshold=params.low,
                                       high_threshold=params.high, mode="nearest")
    return v.with_data(edges, Modality.EDGE) if isinstance(v, Volume) else edges


@dataclass
class ChannelStack:
    channels: np.ndarray
    manifest: list[str]
    target: Modality
    spe: SpeConfig = field(default_factory=SpeConfig)

    def __post_init__(self):
        if self.channels.ndim != 4:
            raise ValueError(f"channel stack must be 4D (C, H, W, D), got {self.channels.shape}")
        if len(self.manifest) != self.channels.shape[0]:
            raise ValueError("manifest length does not match channel count")
        self.target = Modality(self.target)

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.channels.shape[1:])

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    def channel(self, name: str) -> np.ndarray:
        return self.channels[self.manifest.index(name)]

    def save(self, directory: os.PathLike | str, like: Volume | None = None) -> None:
        from .volume import save_volume

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ref = like if like is not None else Volume(self.channels[0])
        for i, name in enumerate(self.manifest):
            save_volume(ref.with_data(self.channels[i].astype(np.float32)), directory / f"{i:02d}_{name}.nii.gz")
        meta = {"manifest": self.manifest, "target": self.target.value,
                "n_input_channels": self.spe.n_input_channels}
        (directory / "manifest.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: os.PathLike | str) -> ChannelStack:
        from .volume import load_volume

        directory = Path(directory)
        meta = json.loads((directory / "manifest.json").read_text())
        chans = [load_volume(directory / f"{i:02d}_{name}.nii.gz").data
                 for i, name in enumerate(meta["manifest"])]
        return cls(np.stack(chans).astype(np.float32), meta["manifest"], meta["target"],
                   SpeConfig(meta["n_input_channels"]))


def assemble_channels(t1_drop, fl_drop, tis, mtis, target, cfg: SpeConfig = SpeConfig(),
                      canny: CannyParams = CannyParams()) -> ChannelStack:
    """
    Stack the five semantic channels and the SPE channels.

    The edge channel is computed from the noise-filled image of the target
    modality. Label channels are scaled into [0, 1] by the top class code.
    """
    target = Modality(target)
    if target not in TARGETS:
        raise ValueError(f"unknown target modality {target.value!r}; expected T1w or FLAIR")
    arrays = [_as_array(x) for x in (t1_drop, fl_drop, tis, mtis)]
    check_same_shape(*arrays)
    t1, fl, labels, mlabels = arrays
    shape = t1.shape

    edge = compute_edge_stack(t1 if target == Modality.T1W else fl, canny)
    chans = np.empty((len(SEMANTIC_CHANNELS) + cfg.n_channels, *shape), dtype=np.float32)
    chans[0] = t1
    chans[1] = mlabels / MAX_TISSUE_CODE
    chans[2] = labels / MAX_TISSUE_CODE
    chans[3] = fl
    chans[4] = edge
    chans[5:] = spe_channels(shape, cfg)
    return ChannelStack(chans, list(SEMANTIC_CHANNELS) + cfg.channel_names(), target, cfg)
