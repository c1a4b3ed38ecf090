"""
Pipeline configuration (YAML) and dataset manifests (CSV).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

STAGES = ("gen-masks", "prepare-channels", "train", "finetune", "inpaint", "evaluate", "plot-histograms")
Stage = Literal["gen-masks", "prepare-channels", "train", "finetune", "inpaint", "evaluate", "plot-histograms"]
Target = Literal["T1w", "FLAIR"]


class ConfigError(Exception):
    """Configuration failed validation; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LossBlock(_Block):
    recon: float = Field(1.0, ge=0)
    adv: float = Field(0.1, ge=0)
    perceptual: float = Field(0.1, ge=0)
    style: float = Field(250.0, ge=0)


class ChannelsBlock(_Block):
    target: Target = "T1w"
    n_input_channels: int = Field(5, ge=1)
    canny_sigma: float = Field(1.0, gt=0)
    canny_low: float = Field(0.1, ge=0)
    canny_high: float = Field(0.2, ge=0)


class MasksBlock(_Block):
    per_sample: int = Field(5, ge=1)


class ExtractorBlock(_Block):
    kind: Literal["vgg19", "toy"] = "vgg19"
    weights: Optional[str] = None
    sha256: Optional[str] = None


class TrainBlock(_Block):
    batch_size: int = Field(4, ge=1)
    lr: float = Field(2e-4, gt=0)
    beta1: float = 0.5
    beta2: float = 0.999
    decay_start: int = Field(80, ge=0)
    epochs: int = Field(200, ge=0)
    crops_per_sample: int = Field(4, ge=1)
    crop_size: int = Field(48, ge=4)
    flip_prob: float = Field(0.1, ge=0, le=1)
    rotate_prob: float = Field(0.1, ge=0, le=1)
    rotate_max_k: int = Field(3, ge=1)
    max_iterations: Optional[int] = None
    checkpoint_every: int = Field(1, ge=1)
    n_folds: int = Field(5, ge=1)
    n_val: Optional[int] = None
    fold: Optional[int] = None
    base_width: int = Field(64, ge=1)
    disc_base_width: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _decay(self):
        if self.decay_start > self.epochs:
            raise ValueError(f"decay_start {self.decay_start} exceeds epochs {self.epochs}")
        return self


class FinetuneBlock(_Block):
    checkpoint: Optional[str] = None
    train_subject: Optional[str] = None
    masks_per_sample: int = Field(20, ge=1)
    epochs: int = Field(20, ge=0)
    decay_start: int = Field(0, ge=0)
    max_iterations: Optional[int] = None


class InpaintBlock(_Block):
    checkpoint: Optional[str] = None
    ring_radius: int = Field(1, ge=0)
    patch_size: tuple[int, int, int] = (96, 96, 96)
    stride: int = Field(20, ge=1)
    sigma_scale: float = Field(0.125, gt=0)
    allow_untrained: bool = False


class EvaluateBlock(_Block):
    checkpoint: Optional[str] = None
    masks_per_sample: int = Field(1, ge=1)
    ct_csv: Optional[str] = None
    n_comparisons: Optional[int] = Field(None, ge=1)


class HistogramBlock(_Block):
    checkpoint: Optional[str] = None
    finetuned_checkpoint: Optional[str] = None
    bins: int = Field(50, ge=2)


class PipelineConfig(_Block):
    manifest: str
    output_root: str
    stage: Stage
    seed: int = 0
    device: str = "cpu"
    overwrite: bool = False
    label_table: Optional[str] = None
    channels: ChannelsBlock = ChannelsBlock()
    masks: MasksBlock = MasksBlock()
    losses: LossBlock = LossBlock()
    extractor: ExtractorBlock = ExtractorBlock()
    train: TrainBlock = TrainBlock()
    finetune: FinetuneBlock = FinetuneBlock()
    inpaint: InpaintBlock = InpaintBlock()
    evaluate: EvaluateBlock = EvaluateBlock()
    histograms: HistogramBlock = HistogramBlock()

    @field_validator("stage", mode="before")
    @classmethod
    def _stage(cls, v):
        return v.replace("_", "-") if isinstance(v, str) else v

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# stage -> (block, field) paths that must point at existing files/directories
_REQUIRED_PATHS = {
    "finetune": [("finetune", "checkpoint")],
    "inpaint": [("inpaint", "checkpoint")],
    "evaluate": [("evaluate", "checkpoint")],
    "plot-histograms": [("histograms", "checkpoint")],
}
# optional paths, checked only for the stages that read them
_OPTIONAL_PATHS = {
    ("label_table",): STAGES,
    ("extractor", "weights"): ("train", "finetune"),
    ("evaluate", "ct_csv"): ("evaluate",),
    ("histograms", "finetuned_checkpoint"): ("plot-histograms",),
}


def _lookup(cfg, path):
    for key in path:
        cfg = getattr(cfg, key)
    return cfg


def _resolve(base: Path, p: str) -> str:
    q = Path(os.path.expanduser(p))
    return str(q if q.is_absolute() else (base / q).resolve())


def validate_config(source, overrides: dict | None = None, base_dir: Path | None = None) -> PipelineConfig:
    """
    Parse and validate a YAML config file (or an already-loaded mapping).

    Relative paths resolve against the config file's directory. All schema
    and path problems are collected and raised together as ``ConfigError``.
    """
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        try:
            raw = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"]) from None
        except yaml.YAMLError as exc:
            raise ConfigError([f"parse error: {exc}"]) from None
        base_dir = path.resolve().parent if base_dir is None else base_dir
    else:
        raw = dict(source)
        base_dir = Path.cwd() if base_dir is None else base_dir
    if not isinstance(raw, dict):
        raise ConfigError(["top level of the config must be a mapping"])
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        cfg = PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        errors = []
        for e in exc.errors():
            loc = ".".join(str(p) for p in e["loc"]) or "<root>"
            errors.append(f"{loc}: {e['msg']}")
        raise ConfigError(errors) from None

    errors = []
    cfg.manifest = _resolve(base_dir, cfg.manifest)
    cfg.output_root = _resolve(base_dir, cfg.output_root)
    if not Path(cfg.manifest).exists():
        errors.append(f"manifest: path does not exist: {cfg.manifest}")
    for path in _REQUIRED_PATHS.get(cfg.stage, []):
        value = _lookup(cfg, path)
        if value is None:
            errors.append(f"{'.'.join(path)}: required for stage {cfg.stage}")
    optional = [p for p, stages in _OPTIONAL_PATHS.items() if cfg.stage in stages]
    for path in _REQUIRED_PATHS.get(cfg.stage, []) + optional:
        value = _lookup(cfg, path)
        if value is None:
            continue
        full = _resolve(base_dir, value)
        owner = _lookup(cfg, path[:-1]) if len(path) > 1 else cfg
        setattr(owner, path[-1], full)
        if not Path(full).exists():
            errors.append(f"{'.'.join(path)}: path does not exist: {full}")
    if errors:
        raise ConfigError(errors)
    return cfg


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("subject", "sample", "t1", "flair", "aseg", "skullstrip")
ATROPHY_COLUMNS = ("tis_orig", "tis_atr", "t1_atr", "flair_atr")


@dataclass
class ManifestRecord:
    subject: str
    sample: str
    t1: str
    flair: str
    aseg: str
    skullstrip: str
    tis_orig: Optional[str] = None
    tis_atr: Optional[str] = None
    t1_atr: Optional[str] = None
    flair_atr: Optional[str] = None

    @property
    def has_atrophy(self) -> bool:
        return all(getattr(self, c) for c in ATROPHY_COLUMNS)


def read_manifest(path: os.PathLike | str) -> list[ManifestRecord]:
    """
    CSV with columns ``subject,sample,t1,flair,aseg,skullstrip`` and
    optionally ``tis_orig,tis_atr,t1_atr,flair_atr``. Relative file paths
    resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.resolve().parent
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"manifest {path} lacks column(s): {missing}")
        rows = list(reader)
    records, seen, errors = [], set(), []
    for i, row in enumerate(rows, 2):
        key = (row["subject"], row["sample"])
        if key in seen:
            errors.append(f"line {i}: duplicate (subject, sample) {key}")
        seen.add(key)
        fields = {}
        for col in MANIFEST_COLUMNS + ATROPHY_COLUMNS:
            value = (row.get(col) or "").strip()
            if col in ("subject", "sample"):
                fields[col] = value
            elif value:
                full = _resolve(base, value)
                if not Path(full).exists():
                    errors.append(f"line {i}: {col} file not found: {full}")
                fields[col] = full
            elif col in MANIFEST_COLUMNS:
                errors.append(f"line {i}: empty {col}")
                fields[col] = ""
        records.append(ManifestRecord(**fields))
    if errors:
        raise ValueError("invalid manifest:\n  " + "\n  ".join(errors))
    return records
