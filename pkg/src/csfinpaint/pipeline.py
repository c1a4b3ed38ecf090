"""
Stage runners behind the command line: mask generation, channel
preparation, cross-validation training, fine-tuning, CSF inpainting,
evaluation and histogram plots.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from contextlib import contextmanager
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .channels import CannyParams, SpeConfig
from .config import ManifestRecord, PipelineConfig, read_manifest
from .dropout import make_rng
from .inference import AtrophyPair, SlidingWindowConfig, build_csf_dropout_mask, provenance, sliding_window_inpaint
from .metrics import (compute_metrics, ct_change_error, histogram_distance, plot_histograms, read_ct_records,
                      tissue_histograms)
from .networks import DiscriminatorSpec, GeneratorSpec, ModelBundle, composite
from .trainer import (SubjectSample, TrainConfig, build_item, finetune, generate_masks, make_folds,
                      predict_volume, train_fold)
from .volume import LabelRemapTable, Modality, Volume, load_volume, normalize_intensity, remap_tissue_labels, save_volume

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@contextmanager
def output_lock(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"another stage holds {lock}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _stage_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_root) / cfg.stage
    if out.exists() and any(out.iterdir()):
        if not cfg.overwrite:
            raise StageError(f"{out} already exists; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(out: Path, cfg: PipelineConfig, extra: dict | None = None) -> None:
    record = {
        "stage": cfg.stage,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "code_version": code_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "config": cfg.resolved(),
        **(extra or {}),
    }
    (out / "provenance.json").write_text(json.dumps(record, indent=2))


# ---------------------------------------------------------------------------
# loading helpers
# ---------------------------------------------------------------------------

def _table(cfg: PipelineConfig) -> LabelRemapTable:
    return LabelRemapTable.from_file(cfg.label_table) if cfg.label_table else LabelRemapTable.default()


def load_sample(rec: ManifestRecord, table: LabelRemapTable) -> tuple[SubjectSample, Volume]:
    t1_raw = load_volume(rec.t1, Modality.T1W)
    fl_raw = load_volume(rec.flair, Modality.FLAIR)
    if t1_raw.shape != fl_raw.shape:
        raise ValueError(f"{rec.subject}/{rec.sample}: T1w {t1_raw.shape} and FLAIR {fl_raw.shape} grids differ")
    aseg = load_volume(rec.aseg, Modality.LABEL)
    brain = load_volume(rec.skullstrip, Modality.MASK)
    tis = remap_tissue_labels(aseg, brain, table, image=t1_raw)
    t1 = normalize_intensity(t1_raw)
    fl = normalize_intensity(fl_raw)
    return SubjectSample(rec.subject, rec.sample, t1.data, fl.data, tis.data), t1


def _samples(cfg: PipelineConfig):
    table = _table(cfg)
    loaded = [load_sample(r, table) for r in read_manifest(cfg.manifest)]
    return [s for s, _ in loaded], [v for _, v in loaded]


def _masks(cfg, samples, per_sample):
    return generate_masks(samples, per_sample, cfg.seed, cfg.channels.target)


def _spe(cfg) -> SpeConfig:
    return SpeConfig(cfg.channels.n_input_channels)


def _canny(cfg) -> CannyParams:
    c = cfg.channels
    return CannyParams(c.canny_sigma, c.canny_low, c.canny_high)


def _extractor(cfg) -> L.FeatureExtractor:
    e = cfg.extractor
    if e.kind == "toy":
        return L.toy_extractor(cfg.seed)
    return L.vgg19_extractor(e.weights, e.sha256)


def _train_config(cfg: PipelineConfig, **overrides) -> TrainConfig:
    t = cfg.train
    kw = dict(batch_size=t.batch_size, lr=t.lr, beta1=t.beta1, beta2=t.beta2, decay_start=t.decay_start,
              epochs=t.epochs, crops_per_sample=t.crops_per_sample, crop_size=t.crop_size,
              weights=L.LossWeights(**cfg.losses.model_dump()), seed=cfg.seed,
              masks_per_sample=cfg.masks.per_sample, finetune_masks_per_sample=cfg.finetune.masks_per_sample,
              flip_prob=t.flip_prob, rotate_prob=t.rotate_prob, rotate_max_k=t.rotate_max_k,
              target=cfg.channels.target, n_input_channels=cfg.channels.n_input_channels,
              max_iterations=t.max_iterations, checkpoint_every=t.checkpoint_every)
    kw.update(overrides)
    return TrainConfig(**kw)


def _load_bundle(path, device) -> ModelBundle:
    return ModelBundle.load(path, map_location=device).to(device)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_masks(cfg: PipelineConfig, out: Path) -> dict:
    samples, refs = _samples(cfg)
    masks = _masks(cfg, samples, cfg.masks.per_sample)
    files = []
    for s, ref in zip(samples, refs):
        for m, mask in enumerate(masks[(s.subject_id, s.sample_id)]):
            path = out / f"{s.subject_id}_{s.sample_id}_m{m}.nii.gz"
            mask.save(path, like=ref)
            files.append(str(path))
    return {"masks": files}


def stage_prepare_channels(cfg: PipelineConfig, out: Path) -> dict:
    samples, refs = _samples(cfg)
    masks = _masks(cfg, samples, cfg.masks.per_sample)
    rng = make_rng(cfg.seed + 1)
    dirs = []
    for s, ref in zip(samples, refs):
        for m, mask in enumerate(masks[(s.subject_id, s.sample_id)]):
            item = build_item(s, mask, rng, cfg.channels.target, _spe(cfg))
            d = out / f"{s.subject_id}_{s.sample_id}_m{m}"
            item.stack.save(d, like=ref)
            dirs.append(str(d))
    return {"channel_stacks": dirs}


def stage_train(cfg: PipelineConfig, out: Path) -> dict:
    samples, _ = _samples(cfg)
    tcfg = _train_config(cfg)
    folds = make_folds([s.subject_id for s in samples], cfg.train.n_folds, cfg.train.n_val, cfg.seed)
    (out / "folds.json").write_text(json.dumps([asdict(f) for f in folds], indent=2))
    masks = _masks(cfg, samples, cfg.masks.per_sample)
    gen_spec = GeneratorSpec(in_channels=5 + _spe(cfg).n_channels, base_width=cfg.train.base_width)
    disc_spec = DiscriminatorSpec(base_width=cfg.train.disc_base_width)
    extractor = _extractor(cfg)
    best = {}
    selected = folds if cfg.train.fold is None else [folds[cfg.train.fold]]
    for split in selected:
        bundle = ModelBundle.create(gen_spec, disc_spec, seed=cfg.seed, target=cfg.channels.target,
                                    fold=split.fold).to(cfg.device)
        result = train_fold(split, samples, tcfg, masks=masks, bundle=bundle, extractor=extractor,
                            run_dir=out / f"fold_{split.fold}")
        best[split.fold] = str(result.run_dir / "best")
    return {"best_checkpoints": best}


def stage_finetune(cfg: PipelineConfig, out: Path) -> dict:
    samples, _ = _samples(cfg)
    base = _load_bundle(cfg.finetune.checkpoint, cfg.device)
    f = cfg.finetune
    tcfg = _train_config(cfg, epochs=f.epochs, decay_start=f.decay_start, max_iterations=f.max_iterations)
    result = finetune(base, samples, tcfg, f.train_subject, _extractor(cfg), run_dir=out)
    return {"best_checkpoint": str(result.run_dir / "best")}


def _sliding_cfg(cfg: PipelineConfig) -> SlidingWindowConfig:
    i = cfg.inpaint
    return SlidingWindowConfig(tuple(i.patch_size), i.stride, i.sigma_scale)


def stage_inpaint(cfg: PipelineConfig, out: Path) -> dict:
    records = [r for r in read_manifest(cfg.manifest) if r.has_atrophy]
    if not records:
        raise StageError("manifest has no rows with atrophy-pair columns (tis_orig, tis_atr, t1_atr, flair_atr)")
    bundle = _load_bundle(cfg.inpaint.checkpoint, cfg.device).eval()
    swcfg = _sliding_cfg(cfg)
    target = cfg.channels.target
    outputs = []
    for rec in records:
        t1 = load_volume(rec.t1_atr, Modality.T1W)
        pair = AtrophyPair(
            load_volume(rec.tis_orig, Modality.LABEL).data.astype(np.uint8),
            load_volume(rec.tis_atr, Modality.LABEL).data.astype(np.uint8),
            normalize_intensity(t1).data,
            normalize_intensity(load_volume(rec.flair_atr, Modality.FLAIR)).data,
        )
        mask = build_csf_dropout_mask(pair, cfg.inpaint.ring_radius)
        result = sliding_window_inpaint(pair, mask, bundle, swcfg, target, seed=cfg.seed, spe=_spe(cfg),
                                        canny=_canny(cfg), allow_untrained=cfg.inpaint.allow_untrained)
        stem = f"{rec.subject}_{rec.sample}_{target}"
        save_volume(t1.with_data(np.asarray(result, dtype=np.float32), target), out / f"{stem}_inpainted.nii.gz")
        save_volume(t1.with_data(mask.data.astype(np.uint8), Modality.MASK), out / f"{stem}_csfmask.nii.gz")
        prov = provenance(bundle, swcfg, mask, target, cfg.seed)
        (out / f"{stem}_provenance.json").write_text(json.dumps(prov, indent=2))
        outputs.append(str(out / f"{stem}_inpainted.nii.gz"))
    return {"inpainted": outputs}


def _inpaint_random(bundle, samples, cfg, per_sample):
    """Composite predictions for seeded random masks: yields (sample, mask, composite)."""
    masks = _masks(cfg, samples, per_sample)
    rng = make_rng(cfg.seed + 2)
    for s in samples:
        for mask in masks[(s.subject_id, s.sample_id)]:
            item = build_item(s, mask, rng, cfg.channels.target, _spe(cfg))
            pred = predict_volume(bundle, item.stack.channels)
            yield s, mask, composite(pred, item.target, item.mask)


def stage_evaluate(cfg: PipelineConfig, out: Path) -> dict:
    samples, _ = _samples(cfg)
    bundle = _load_bundle(cfg.evaluate.checkpoint, cfg.device).eval()
    rows = []
    for s, mask, comp in _inpaint_random(bundle, samples, cfg, cfg.evaluate.masks_per_sample):
        target = s.image(cfg.channels.target)
        for region, m in (("mask", mask.data), ("whole", None)):
            rows.append({"subject": s.subject_id, "sample": s.sample_id,
                         **compute_metrics(target, comp, m).as_dict()})
    summary = {}
    for region in ("mask", "whole"):
        sel = [r for r in rows if r["region"] == region]
        summary[region] = {k: {"mean": float(np.mean([r[k] for r in sel])), "sd": float(np.std([r[k] for r in sel]))}
                           for k in ("l1", "l1_scaled", "psnr", "ssim")}
    report = {"per_image": rows, "summary": summary}
    if cfg.evaluate.ct_csv:
        ct = ct_change_error(read_ct_records(cfg.evaluate.ct_csv), n_comparisons=cfg.evaluate.n_comparisons)
        report["ct_change"] = asdict(ct)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, default=float))
    return {"metrics": str(out / "metrics.json")}


def stage_plot_histograms(cfg: PipelineConfig, out: Path) -> dict:
    samples, _ = _samples(cfg)
    models = {"base": cfg.histograms.checkpoint}
    if cfg.histograms.finetuned_checkpoint:
        models["finetuned"] = cfg.histograms.finetuned_checkpoint
    bins = cfg.histograms.bins
    pools: dict[str, list] = {}
    for name, path in models.items():
        bundle = _load_bundle(path, cfg.device).eval()
        vals, tis, msk, origs = [], [], [], []
        for s, mask, comp in _inpaint_random(bundle, samples, cfg, 1):
            vals.append(comp.ravel())
            origs.append(s.image(cfg.channels.target).ravel())
            tis.append(s.tissue.ravel())
            msk.append(mask.data.ravel())
        tis_all, msk_all = np.concatenate(tis), np.concatenate(msk)
        pools[name] = tissue_histograms(np.concatenate(vals), tis_all, bins=bins, mask=msk_all)
        pools.setdefault("original", tissue_histograms(np.concatenate(origs), tis_all, bins=bins, mask=msk_all))
    groups = {"original": pools.pop("original"), **pools}
    distances = {name: {int(h.tissue): histogram_distance(h, o) for h, o in zip(hists, groups["original"])}
                 for name, hists in groups.items() if name != "original"}
    plot_histograms(groups, out / "histograms.png")
    serial = {name: [{"tissue": h.tissue, "edges": h.edges.tolist(), "counts": h.counts.tolist(),
                      "n_voxels": h.n_voxels} for h in hists] for name, hists in groups.items()}
    (out / "histograms.json").write_text(json.dumps({"histograms": serial, "l1_to_original": distances}, indent=2))
    return {"plot": str(out / "histograms.png"), "l1_to_original": distances}


STAGE_RUNNERS = {
    "gen-masks": stage_gen_masks,
    "prepare-channels": stage_prepare_channels,
    "train": stage_train,
    "finetune": stage_finetune,
    "inpaint": stage_inpaint,
    "evaluate": stage_evaluate,
    "plot-histograms": stage_plot_histograms,
}


def run_stage(cfg: PipelineConfig) -> dict:
    """Run ``cfg.stage`` under an output-root lock; writes a provenance record next to its artifacts."""
    torch.manual_seed(cfg.seed)
    root = Path(cfg.output_root)
    with output_lock(root):
        out = _stage_dir(cfg)
        artifacts = STAGE_RUNNERS[cfg.stage](cfg, out)
        _write_provenance(out, cfg, {"artifacts": artifacts})
    return artifacts
