"""
Self-supervised adversarial training, augmentation, subject-level fold
splitting and fine-tuning.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .channels import ChannelStack, SpeConfig, assemble_channels
from .dropout import DropoutMask, apply_noise_fill, generate_dropout_mask, make_mtis, make_rng
from .metrics import compute_metrics
from .networks import (DiscriminatorSpec, GeneratorSpec, ModelBundle, composite, generator_forward)
from .volume import MAX_TISSUE_CODE, Modality

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    decay_start: int = 80
    epochs: int = 200
    crops_per_sample: int = 4
    crop_size: int = 48
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    masks_per_sample: int = 5
    finetune_masks_per_sample: int = 20
    flip_prob: float = 0.1
    rotate_prob: float = 0.1
    rotate_max_k: int = 3
    target: str = "T1w"
    n_input_channels: int = 5
    max_iterations: int | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.decay_start > self.epochs:
            raise ValueError(f"decay_start {self.decay_start} exceeds epochs {self.epochs}")
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant until ``decay_start``, then linear towards 0 at ``epochs``."""
    if epoch < cfg.decay_start:
        return cfg.lr
    span = cfg.epochs - cfg.decay_start
    if span <= 0:
        return cfg.lr
    return cfg.lr * max(cfg.epochs - epoch, 0) / span


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class SubjectSample:
    """One acquisition (e.g. test or retest) of one subject, already normalized."""

    subject_id: str
    sample_id: str
    t1: np.ndarray
    flair: np.ndarray
    tissue: np.ndarray

    def image(self, target: str | Modality) -> np.ndarray:
        return self.t1 if Modality(target) == Modality.T1W else self.flair


@dataclass
class FoldSplit:
    fold: int
    train_ids: list[str]
    val_ids: list[str]

    def __post_init__(self):
        leaked = set(self.train_ids) & set(self.val_ids)
        if leaked:
            raise ValueError(f"subjects in both train and validation: {sorted(leaked)}")


def make_folds(subject_ids: Sequence[str], n_folds: int = 5, n_val: int | None = None,
               seed: int = 0) -> list[FoldSplit]:
    """
    Subject-level folds. Validation windows of ``n_val`` subjects (default
    ``ceil(n / n_folds)``) are spread evenly around a shuffled ring, so
    every subject is validated at least once; 21 subjects give 16/5 splits.
    Samples of one subject always share a side because splitting is by id.
    """
    ids = sorted(set(subject_ids))
    n = len(ids)
    if n < 2:
        raise ValueError("need at least two subjects to split")
    n_folds = min(n_folds, n)
    n_val = math.ceil(n / n_folds) if n_val is None else n_val
    if not 0 < n_val < n:
        raise ValueError(f"n_val must be in 1..{n - 1}")
    order = [ids[i] for i in make_rng(seed).permutation(n)]
    folds = []
    for f in range(n_folds):
        start = round(f * n / n_folds)
        val = [order[(start + i) % n] for i in range(n_val)]
        train = [s for s in order if s not in val]
        folds.append(FoldSplit(f, train, val))
    return folds


def generate_masks(samples: Sequence[SubjectSample], per_sample: int, seed: int,
                   target: str = "T1w") -> dict[tuple[str, str], list[DropoutMask]]:
    """Pre-generate ``per_sample`` dropout masks for every sample, keyed by (subject, sample)."""
    out = {}
    for i, s in enumerate(samples):
        masks = []
        for m in range(per_sample):
            mseed = seed * 1_000_003 + i * 1000 + m
            masks.append(generate_dropout_mask(s.image(target), make_rng(mseed), seed=mseed))
        out[(s.subject_id, s.sample_id)] = masks
    return out


@dataclass
class TrainItem:
    """A sample paired with one dropout mask, channels built."""

    stack: ChannelStack
    target: np.ndarray
    mask: np.ndarray
    tissue: np.ndarray
    key: tuple = ()


def build_item(sample: SubjectSample, mask, rng: np.random.Generator, target: str = "T1w",
               spe: SpeConfig = SpeConfig()) -> TrainItem:
    m = mask.data if isinstance(mask, DropoutMask) else np.asarray(mask, dtype=bool)
    t1 = apply_noise_fill(sample.t1, m, rng)
    fl = apply_noise_fill(sample.flair, m, rng)
    stack = assemble_channels(t1, fl, sample.tissue, make_mtis(sample.tissue, m), target, spe)
    return TrainItem(stack, sample.image(target).astype(np.float32), m, sample.tissue,
                     (sample.subject_id, sample.sample_id))


@dataclass
class Crop:
    inputs: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    tissue: np.ndarray
    origin: tuple[int, int, int]
    flips: tuple[bool, bool, bool]
    rot_k: int


def _foreground_box(img: np.ndarray, min_size: int = 0) -> tuple[slice, ...]:
    """
    Bounding box of ``img > 0``, widened (within the volume) on any axis
    shorter than ``min_size`` so crops keep real context instead of padding.
    """
    nz = np.argwhere(img > 0)
    if nz.size == 0:
        return tuple(slice(0, n) for n in img.shape)
    lo, hi = nz.min(0), nz.max(0) + 1
    box = []
    for a, b, n in zip(lo, hi, img.shape):
        a, b = int(a), int(b)
        short = min(min_size, n) - (b - a)
        if short > 0:
            a = max(0, min(a - short // 2, n - (b - a) - short))
            b = a + min(min_size, n)
        box.append(slice(a, b))
    return tuple(box)


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    spatial = arr.shape[-3:]
    pads = [(0, 0)] * (arr.ndim - 3)
    for n in spatial:
        extra = max(size - n, 0)
        pads.append((extra // 2, extra - extra // 2))
    return np.pad(arr, pads) if any(p != (0, 0) for p in pads) else arr


def augment(item: TrainItem, rng: np.random.Generator, cfg: TrainConfig) -> list[Crop]:
    """
    Foreground crop, then ``crops_per_sample`` crops of ``crop_size``
    centred on random mask voxels, each independently flipped per axis and
    rotated by 90 degrees * k (k in 1..rotate_max_k) in the first two axes.
    The same transform is applied to channels, target, mask and labels.
    """
    size = cfg.crop_size
    box = _foreground_box(item.target, size)
    chans = _pad_to(item.stack.channels[(slice(None), *box)], size)
    target = _pad_to(item.target[box], size)
    mask = _pad_to(item.mask[box], size)
    tissue = _pad_to(item.tissue[box], size)

    pos = np.argwhere(mask)
    if len(pos) == 0:
        raise ValueError("no positive voxels in dropout mask")
    crops = []
    for _ in range(cfg.crops_per_sample):
        centre = pos[rng.integers(len(pos))]
        origin = tuple(int(np.clip(c - size // 2, 0, n - size)) for c, n in zip(centre, mask.shape))
        sl = tuple(slice(o, o + size) for o in origin)
        parts = [chans[(slice(None), *sl)], target[sl], mask[sl], tissue[sl]]
        flips = tuple(bool(rng.random() < cfg.flip_prob) for _ in range(3))
        for axis, flip in enumerate(flips):
            if flip:
                parts = [np.flip(p, axis=p.ndim - 3 + axis) for p in parts]
        rot_k = int(rng.integers(1, cfg.rotate_max_k + 1)) if rng.random() < cfg.rotate_prob else 0
        if rot_k:
            parts = [np.rot90(p, rot_k, axes=(p.ndim - 3, p.ndim - 2)) for p in parts]
        parts = [np.ascontiguousarray(p) for p in parts]
        crops.append(Crop(*parts, origin=origin, flips=flips, rot_k=rot_k))
    return crops


def collate(crops: Sequence[Crop], device) -> dict[str, torch.Tensor]:
    def t(arrs, dtype=torch.float32):
        return torch.as_tensor(np.stack(arrs)).to(device=device, dtype=dtype)
    return {
        "inputs": t([c.inputs for c in crops]),
        "target": t([c.target[None] for c in crops]),
        "mask": t([c.mask[None] for c in crops], torch.bool),
        "tissue": t([c.tissue[None] for c in crops]) / MAX_TISSUE_CODE,
    }


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class GanTrainer:
    """
    Owns one bundle's optimizers. ``d_step`` updates only the discriminator,
    ``g_step`` only the generator.
    """

    def __init__(self, bundle: ModelBundle, cfg: TrainConfig, extractor: L.FeatureExtractor):
        self.bundle = bundle
        self.cfg = cfg
        self.fx = extractor.to(bundle.device)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(bundle.generator.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.lr, betas=betas)

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def _disc(self, img, tissue):
        return self.bundle.discriminator(torch.cat([img, tissue], dim=1))

    def d_step(self, batch) -> float:
        g, d = self.bundle.generator, self.bundle.discriminator
        g.train()
        d.train()
        with torch.no_grad():
            comp = composite(g(batch["inputs"]), batch["target"], batch["mask"])
        loss = L.discriminator_loss(self._disc(batch["target"], batch["tissue"]),
                                    self._disc(comp, batch["tissue"]))
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite discriminator loss: {loss.item()}")
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return loss.item()

    def g_step(self, batch) -> dict[str, float]:
        g, d = self.bundle.generator, self.bundle.discriminator
        g.train()
        d.requires_grad_(False)
        try:
            pred = g(batch["inputs"])
            comp = composite(pred, batch["target"], batch["mask"])
            parts = (
                L.recon_loss(batch["target"], pred, batch["mask"]),
                L.generator_adv_loss(self._disc(comp, batch["tissue"])),
                L.perceptual_loss(batch["target"], comp, self.fx),
                L.style_loss(batch["target"], comp, self.fx),
            )
            total = L.total_loss(parts, self.cfg.weights)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        finally:
            d.requires_grad_(True)
        names = ("recon", "adv", "perceptual", "style")
        return {"g_total": total.item(), **{n: p.item() for n, p in zip(names, parts)}}

    def step(self, batch) -> dict[str, float]:
        d_loss = self.d_step(batch)
        return {"d_loss": d_loss, **self.g_step(batch)}


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def predict_volume(bundle: ModelBundle, channels: np.ndarray) -> np.ndarray:
    """Whole-volume prediction, edge-padding each axis up to the generator's size multiple."""
    m = bundle.gen_spec.size_multiple
    spatial = channels.shape[1:]
    pads = [(0, 0)] + [(0, (-n) % m) for n in spatial]
    padded = np.pad(channels, pads, mode="edge") if any(p[1] for p in pads) else channels
    out = generator_forward(padded, bundle)
    return out[tuple(slice(0, n) for n in spatial)]


def validate(bundle: ModelBundle, items: Sequence[TrainItem]) -> dict[str, float]:
    """Mean masked L1 / PSNR / SSIM of composite predictions over ``items``."""
    rows = []
    for it in items:
        comp = composite(predict_volume(bundle, it.stack.channels), it.target, it.mask)
        rows.append(compute_metrics(it.target, comp, it.mask).as_dict())
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in ("l1", "psnr", "ssim")}


# ---------------------------------------------------------------------------
# fold training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    iteration: int = 0
    lr: float = 0.0
    history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    best_val_l1: float = math.inf
    best_checkpoint: str | None = None


@dataclass
class TrainResult:
    bundle: ModelBundle
    state: TrainState
    run_dir: Path | None = None


def _write_logs(run_dir: Path, state: TrainState) -> None:
    if state.history:
        with open(run_dir / "losses.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(state.history[0]))
            writer.writeheader()
            writer.writerows(state.history)
    (run_dir / "validation.json").write_text(json.dumps(state.val_history, indent=2))


def _save_checkpoint(path: Path, trainer: GanTrainer, state: TrainState) -> None:
    trainer.bundle.metadata.update(epoch=state.epoch, iteration=state.iteration)
    trainer.bundle.save(path)
    torch.save({"opt_g": trainer.opt_g.state_dict(), "opt_d": trainer.opt_d.state_dict()},
               path / "optimizers.pt")
    st = asdict(state)
    st.pop("history")
    (path / "train_state.json").write_text(json.dumps(st, indent=2, default=str))


def run_training(bundle: ModelBundle, train_items: Sequence[TrainItem], val_items: Sequence[TrainItem],
                 cfg: TrainConfig, extractor: L.FeatureExtractor | None = None,
                 run_dir: Path | str | None = None,
                 callback: Callable[[TrainState, GanTrainer], bool] | None = None) -> TrainResult:
    """
    Epoch loop over prepared items; alternates one D-step and one G-step per
    batch. ``callback`` runs after every iteration and may return True to
    stop early. Returns the best-validation bundle (the last one if there is
    no validation data).
    """
    torch.manual_seed(cfg.seed)
    rng = make_rng(cfg.seed)
    extractor = extractor if extractor is not None else L.vgg19_extractor()
    trainer = GanTrainer(bundle, cfg, extractor)
    state = TrainState(lr=cfg.lr)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    best = bundle.clone()
    stop = cfg.max_iterations is not None and cfg.max_iterations <= 0

    for epoch in range(cfg.epochs):
        if stop:
            break
        state.epoch = epoch
        state.lr = lr_schedule(epoch, cfg)
        trainer.set_lr(state.lr)
        pending: list[Crop] = []
        for idx in rng.permutation(len(train_items)):
            pending.extend(augment(train_items[idx], rng, cfg))
            while len(pending) >= cfg.batch_size and not stop:
                batch, pending = pending[: cfg.batch_size], pending[cfg.batch_size:]
                try:
                    losses = trainer.step(collate(batch, bundle.device))
                except FloatingPointError as exc:
                    if run_dir is not None:
                        _save_checkpoint(run_dir / "diagnostic", trainer, state)
                    raise RuntimeError(f"training aborted at iteration {state.iteration}: {exc}") from exc
                state.iteration += 1
                state.history.append({"epoch": epoch, "iteration": state.iteration, "lr": state.lr, **losses})
                if callback is not None and callback(state, trainer):
                    stop = True
                if cfg.max_iterations is not None and state.iteration >= cfg.max_iterations:
                    stop = True
            if stop:
                break

        bundle.metadata.update(epoch=epoch, iteration=state.iteration)
        metrics = validate(bundle, val_items)
        if metrics:
            state.val_history.append({"epoch": epoch, **metrics})
            logger.info("epoch %d val %s", epoch, metrics)
        improved = not metrics or metrics["l1"] < state.best_val_l1
        if improved:
            state.best_val_l1 = metrics.get("l1", math.inf)
            best = bundle.clone()
        if run_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or stop
                                    or epoch == cfg.epochs - 1):
            ckpt = run_dir / f"epoch_{epoch}"
            _save_checkpoint(ckpt, trainer, state)
            if improved:
                state.best_checkpoint = str(ckpt)
    if run_dir is not None:
        _write_logs(run_dir, state)
        (run_dir / "best").mkdir(exist_ok=True)
        best.save(run_dir / "best")
    return TrainResult(best, state, run_dir)


def _items(samples, masks, ids, cfg, rng):
    spe = SpeConfig(cfg.n_input_channels)
    items = []
    for s in samples:
        if s.subject_id in ids:
            for m in masks[(s.subject_id, s.sample_id)]:
                items.append(build_item(s, m, rng, cfg.target, spe))
    return items


def train_fold(split: FoldSplit, samples: Sequence[SubjectSample], cfg: TrainConfig,
               masks: dict | None = None, bundle: ModelBundle | None = None,
               gen_spec: GeneratorSpec | None = None, disc_spec: DiscriminatorSpec | None = None,
               extractor: L.FeatureExtractor | None = None, run_dir: Path | str | None = None,
               callback=None) -> TrainResult:
    """Train one cross-validation fold from scratch (or from ``bundle``)."""
    if masks is None:
        masks = generate_masks(samples, cfg.masks_per_sample, cfg.seed, cfg.target)
    rng = make_rng(cfg.seed + 1)
    train_items = _items(samples, masks, set(split.train_ids), cfg, rng)
    val_items = _items(samples, masks, set(split.val_ids), cfg, rng)
    if not train_items:
        raise ValueError(f"fold {split.fold} has no training samples")
    if bundle is None:
        gen_spec = gen_spec or GeneratorSpec(in_channels=5 + SpeConfig(cfg.n_input_channels).n_channels)
        bundle = ModelBundle.create(gen_spec, disc_spec or DiscriminatorSpec(), seed=cfg.seed,
                                    target=cfg.target, fold=split.fold)
    t0 = time.time()
    result = run_training(bundle, train_items, val_items, cfg, extractor, run_dir, callback)
    logger.info("fold %d finished in %.1fs", split.fold, time.time() - t0)
    return result


def finetune(base: ModelBundle, cohort: Sequence[SubjectSample], cfg: TrainConfig,
             train_subject: str | None = None, extractor: L.FeatureExtractor | None = None,
             run_dir: Path | str | None = None, callback=None) -> TrainResult:
    """
    Continue training every weight of a copy of ``base`` on one subject of
    an unseen cohort, validating on the remaining subjects, with
    ``cfg.finetune_masks_per_sample`` masks per sample.
    """
    ids = sorted({s.subject_id for s in cohort})
    if len(ids) < 2:
        raise ValueError(f"cohort too small: {len(ids)} subject(s), need at least 2")
    train_subject = ids[0] if train_subject is None else train_subject
    split = FoldSplit(0, [train_subject], [i for i in ids if i != train_subject])
    masks = generate_masks(cohort, cfg.finetune_masks_per_sample, cfg.seed, cfg.target)
    bundle = base.clone()
    for net in (bundle.generator, bundle.discriminator):
        net.requires_grad_(True)
    bundle.metadata.update(finetuned_on=train_subject)
    return train_fold(split, cohort, cfg, masks=masks, bundle=bundle, extractor=extractor,
                      run_dir=run_dir, callback=callback)
