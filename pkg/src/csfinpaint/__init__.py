"""3D GAN inpainting of brain MRI for synthetic-atrophy repair."""

from .channels import CannyParams, ChannelStack, SpeConfig, assemble_channels, spe_channels
from .dropout import DropoutMask, apply_noise_fill, generate_dropout_mask, make_rng
from .inference import AtrophyPair, SlidingWindowConfig, build_csf_dropout_mask, sliding_window_inpaint
from .losses import LossWeights
from .metrics import compute_metrics, ct_change_error
from .networks import DiscriminatorSpec, GeneratorSpec, ModelBundle, composite
from .volume import Modality, Tissue, Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "AtrophyPair", "CannyParams", "ChannelStack", "DiscriminatorSpec", "DropoutMask", "GeneratorSpec",
    "LossWeights", "Modality", "ModelBundle", "SlidingWindowConfig", "SpeConfig", "Tissue", "Volume",
    "apply_noise_fill", "assemble_channels", "build_csf_dropout_mask", "composite", "compute_metrics",
    "ct_change_error", "generate_dropout_mask", "load_volume", "make_rng", "save_volume",
    "sliding_window_inpaint", "spe_channels",
]
