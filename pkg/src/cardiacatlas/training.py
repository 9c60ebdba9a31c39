"""Training loop, checkpointing, resume, prediction helpers, and atlas
export.

Reproducibility model
---------------------
All randomness is derived from the config seed through labeled child seeds:
weight initialization from ``(seed, "torch-init")`` and each epoch's batch
shuffle from ``(seed, "shuffle-epoch-<e>")``. Nothing draws from a shared
mutable RNG stream after initialization, so resuming from a checkpoint at
epoch ``k`` replays exactly the batches a fresh run would have seen — no RNG
state needs to be carried in checkpoints.

The first ``warmup_epochs`` epochs of the atlas variant train the
segmentation term alone; the atlas, mapper and disease branch receive no
gradients until the segmenter produces usable probability maps.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import N_CLASSES
from . import losses as L
from . import networks, phantom
from . import transforms as T
from .evaluation import FOREGROUND_CLASSES, dice_per_class
from .seeds import child_rng, child_seed


class TrainingDiverged(RuntimeError):
    """Raised when the objective becomes non-finite. The referenced
    checkpoint holds the last state from before the divergence."""

    def __init__(self, message: str, checkpoint_path: Path, epoch: int, step: int):
        super().__init__(message)
        self.checkpoint_path = Path(checkpoint_path)
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    manifest: str = ""
    out_dir: str = ""
    variant: str = "atlas_istn"
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    atlas_learning_rate: float = 1e-2
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    warmup_epochs: int = 2
    seg_depth: int = 4
    seg_base_channels: int = 16
    ssn_rank: int = 5
    exp_steps: int = 6
    velocity_scale: float = 1.0
    seg_loss: str = "mse"        # "mse" | "mc"
    mc_samples: int = 10
    seed: int = 0
    deterministic: bool = True
    checkpoint_interval: int = 0  # extra periodic saves every k epochs; 0 = off
    resume_from: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if self.variant == "unet":
            # the plain variant has no stochastic head and no atlas terms
            self.ssn_rank = 0
            self.weights = L.LossWeights(omega=0.0, lam=self.weights.lam, gamma=0.0)
        elif self.variant == "ssn":
            self.weights = L.LossWeights(omega=0.0, lam=self.weights.lam, gamma=0.0)

    def validate(self) -> None:
        if not self.manifest:
            raise ValueError("manifest path is required")
        if not self.out_dir:
            raise ValueError("out_dir is required")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.atlas_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.seg_loss not in ("mse", "mc"):
            raise ValueError(f"unknown seg_loss {self.seg_loss!r}")
        self.weights.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class SplitTensors:
    ids: list[str]
    images: torch.Tensor     # (N, 1, H, W) float32 in [0, 1]
    labelmaps: torch.Tensor  # (N, H, W) int64
    hlhs: np.ndarray         # (N,) bool

    def onehot(self) -> torch.Tensor:
        return F.one_hot(self.labelmaps, N_CLASSES).permute(0, 3, 1, 2).float()


def load_split_tensors(manifest_path: str | Path, split: str) -> SplitTensors:
    records = phantom.load_dataset(manifest_path, split)
    if not records:
        raise phantom.DatasetError(f"split {split!r} is empty")
    images = torch.from_numpy(
        np.stack([r.image for r in records])[:, None].astype(np.float32))
    labels = torch.from_numpy(
        np.stack([r.labelmap for r in records]).astype(np.int64))
    hlhs = np.array([bool(r.hlhs) for r in records])
    return SplitTensors([r.id for r in records], images, labels, hlhs)


def batch_losses(model: networks.AtlasISTN, x: torch.Tensor,
                 gt_onehot: torch.Tensor, hlhs_targets: torch.Tensor,
                 weights: L.LossWeights, *, seg_loss: str = "mse",
                 mc_samples: int = 10, mc_seed: int = 0
                 ) -> tuple[dict, networks.ModelOutputs]:
    """One batch's loss terms. Terms whose weight is zero are skipped and
    reported as constant zeros, so they contribute no gradients at all."""
    need_transforms = model.mapper is not None and (
        weights.omega > 0 or weights.gamma > 0)
    out = model(x, with_transforms=need_transforms)
    if seg_loss == "mse":
        seg = L.loss_seg(gt_onehot, out.seg_probs)
    else:
        seg = L.loss_seg_mc(gt_onehot, out.seg, n_samples=mc_samples, seed=mc_seed)
    zero = torch.zeros((), dtype=x.dtype, device=x.device)
    parts = {"seg": seg, "a2s": zero, "s2a": zero, "reg": zero, "disease": zero}
    if need_transforms:
        if weights.omega > 0:
            atlas_probs = model.atlas.probs()
            parts["a2s"] = L.loss_atlas_to_subject(
                gt_onehot, atlas_probs, out.inverse_disp)
            parts["s2a"] = L.loss_subject_to_atlas(
                gt_onehot, out.forward_disp, atlas_probs)
            parts["reg"] = L.loss_smoothness(out.nonrigid_disp)
        if weights.gamma > 0:
            parts["disease"] = L.loss_disease(hlhs_targets, out.p_disease)
    return parts, out


@dataclass
class TrainResult:
    checkpoint_best: Path
    checkpoint_last: Path
    log_path: Path
    best_val_dice: float
    best_epoch: int
    epochs_run: int
    param_count: int
    history: list


def _build_optimizer(model: networks.AtlasISTN, cfg: TrainConfig) -> torch.optim.Adam:
    if model.atlas is not None:
        atlas_params = [model.atlas.label_logits]
        atlas_ids = {id(p) for p in atlas_params}
        rest = [p for p in model.parameters() if id(p) not in atlas_ids]
        groups = [
            {"params": rest, "lr": cfg.learning_rate},
            {"params": atlas_params, "lr": cfg.atlas_learning_rate},
        ]
        return torch.optim.Adam(groups)
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def _model_config(cfg: TrainConfig, height: int, width: int) -> networks.ModelConfig:
    return networks.ModelConfig(
        variant=cfg.variant, image_height=height, image_width=width,
        seg=networks.SegConfig(depth=cfg.seg_depth,
                               base_channels=cfg.seg_base_channels,
                               rank=cfg.ssn_rank),
        exp_steps=cfg.exp_steps, velocity_scale=cfg.velocity_scale)


def _save(path: Path, model, cfg: TrainConfig, optimizer, epoch: int,
          best: float, best_epoch: int, history: list) -> None:
    cfg_dict = cfg.to_dict()
    for key in ("manifest", "out_dir", "resume_from"):
        # checkpoints are portable training state: no machine-local paths
        cfg_dict.pop(key, None)
    networks.save_checkpoint(path, model, extra={
        "train_config": cfg_dict,
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "best_val_dice": best,
        "best_epoch": best_epoch,
        "history": history,
    })


def validate_dice(model: networks.AtlasISTN, data: SplitTensors,
                  batch_size: int = 16) -> dict:
    """Per-class and mean foreground Dice of argmax predictions."""
    maps = predict_labelmaps(model, data.images, batch_size=batch_size)
    gts = data.labelmaps.numpy()
    mat = np.stack([dice_per_class(pm, gt) for pm, gt in zip(maps, gts)])
    per_class = {phantom.CLASS_NAMES[c]: float(mat[:, j].mean())
                 for j, c in enumerate(FOREGROUND_CLASSES)}
    per_class["mean_fg"] = float(mat.mean())
    return per_class


def train(cfg: TrainConfig) -> TrainResult:
    """Run (or resume) a training job; returns paths and the best score.

    Writes ``checkpoint_last.pt`` every epoch and ``checkpoint_best.pt``
    whenever mean foreground validation Dice improves, plus one JSON line per
    epoch to ``log.jsonl``. ``cfg.epochs`` is the absolute epoch budget: a
    resumed job continues until that total is reached.
    """
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        # fixed intra-op thread count: float reductions associate identically
        torch.set_num_threads(1)

    train_data = load_split_tensors(cfg.manifest, "train")
    val_data = load_split_tensors(cfg.manifest, "val")
    height, width = train_data.images.shape[-2:]

    start_epoch = 0
    history: list[dict] = []
    best = -1.0
    best_epoch = -1
    if cfg.resume_from:
        model, payload = networks.load_checkpoint(cfg.resume_from)
        saved_cfg = payload.get("train_config", {})
        if saved_cfg.get("variant") != cfg.variant:
            raise ValueError(
                f"cannot resume: checkpoint variant {saved_cfg.get('variant')!r} "
                f"differs from requested {cfg.variant!r}")
        optimizer = _build_optimizer(model, cfg)
        optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = int(payload["epoch"]) + 1
        best = float(payload["best_val_dice"])
        best_epoch = int(payload["best_epoch"])
        history = list(payload["history"])
    else:
        torch.manual_seed(child_seed(cfg.seed, "torch-init"))
        model = networks.build_model(_model_config(cfg, height, width))
        optimizer = _build_optimizer(model, cfg)

    model.train()
    n_params = networks.param_count(model)
    best_path = out_dir / "checkpoint_best.pt"
    last_path = out_dir / "checkpoint_last.pt"
    log_path = out_dir / "log.jsonl"

    # a valid "last good" state must exist before the first step so a
    # divergence in epoch 0 still leaves something usable behind
    if not cfg.resume_from:
        _save(last_path, model, cfg, optimizer, -1, best, best_epoch, history)

    gt_all = train_data.onehot()
    hlhs_all = torch.from_numpy(train_data.hlhs.astype(np.float32))
    n_train = train_data.images.shape[0]

    log_mode = "a" if cfg.resume_from else "w"
    log_fh = open(log_path, log_mode)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.monotonic()
            warm = cfg.variant == "atlas_istn" and epoch < cfg.warmup_epochs
            weights_eff = (L.LossWeights(omega=0.0, lam=cfg.weights.lam, gamma=0.0)
                           if warm else cfg.weights)
            order = child_rng(cfg.seed, f"shuffle-epoch-{epoch}").permutation(n_train)
            sums = {k: 0.0 for k in ("seg", "a2s", "s2a", "reg", "disease", "total")}
            n_steps = 0
            model.train()
            for step, lo in enumerate(range(0, n_train, cfg.batch_size)):
                idx = torch.from_numpy(order[lo:lo + cfg.batch_size].copy())
                parts, out = batch_losses(
                    model, train_data.images[idx], gt_all[idx], hlhs_all[idx],
                    weights_eff, seg_loss=cfg.seg_loss, mc_samples=cfg.mc_samples,
                    mc_seed=child_seed(cfg.seed, f"mc-{epoch}-{step}"))
                finite = all(bool(torch.isfinite(v.detach()).all())
                             for v in parts.values())
                if finite:
                    total = L.loss_total(parts, weights_eff)
                    finite = math.isfinite(float(total.detach()))
                if not finite:
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"last good state: {last_path}", last_path, epoch, step)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                if out.forward_disp is not None:
                    with torch.no_grad():
                        warped = T.warp(train_data.images[idx],
                                        out.forward_disp.detach(),
                                        padding="border")
                        model.atlas.update_intensity(warped)
                for k in sums:
                    sums[k] += (float(total.detach()) if k == "total"
                                else float(parts[k].detach()))
                n_steps += 1

            val_dice = validate_dice(model, val_data)
            record = {
                "epoch": epoch,
                "warmup": warm,
                **{f"loss_{k}": sums[k] / max(n_steps, 1) for k in sums},
                "val_dice": val_dice,
                "seconds": 0.0 if cfg.deterministic else round(time.monotonic() - t0, 3),
            }
            history.append(record)
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

            if val_dice["mean_fg"] > best:
                best = val_dice["mean_fg"]
                best_epoch = epoch
                _save(best_path, model, cfg, optimizer, epoch, best, best_epoch, history)
            _save(last_path, model, cfg, optimizer, epoch, best, best_epoch, history)
            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
                _save(out_dir / f"checkpoint_epoch{epoch:04d}.pt", model, cfg,
                      optimizer, epoch, best, best_epoch, history)
    finally:
        log_fh.close()

    if not best_path.exists():  # zero new epochs (already-complete resume)
        _save(best_path, model, cfg, optimizer, start_epoch - 1, best,
              best_epoch, history)
    return TrainResult(
        checkpoint_best=best_path, checkpoint_last=last_path, log_path=log_path,
        best_val_dice=best, best_epoch=best_epoch,
        epochs_run=max(cfg.epochs - start_epoch, 0),
        param_count=n_params, history=history)


@torch.no_grad()
def predict_labelmaps(model: networks.AtlasISTN, images: torch.Tensor,
                      batch_size: int = 16) -> np.ndarray:
    """Argmax label maps of the mean segmentation logits, (N, H, W) int64."""
    model.eval()
    chunks = []
    for lo in range(0, images.shape[0], batch_size):
        seg = model.segment(images[lo:lo + batch_size])
        chunks.append(seg.mean_logits.argmax(dim=1).numpy())
    return np.concatenate(chunks).astype(np.int64)


@torch.no_grad()
def predict_disease_probs(model: networks.AtlasISTN, images: torch.Tensor,
                          batch_size: int = 16) -> np.ndarray:
    """Disease-branch probabilities, (N,) float64."""
    if model.disease is None:
        raise ValueError(f"variant {model.cfg.variant!r} has no disease branch")
    model.eval()
    chunks = []
    for lo in range(0, images.shape[0], batch_size):
        out = model(images[lo:lo + batch_size])
        chunks.append(out.p_disease.numpy().astype(np.float64))
    return np.concatenate(chunks)


@dataclass
class AtlasExport:
    probs_path: Path
    label_path: Path
    intensity_path: Path
    meta_path: Path
    probs: np.ndarray


def export_atlas(checkpoint_path: str | Path, out_dir: str | Path) -> AtlasExport:
    """Write the learned atlas as class probabilities (.npy), an indexed
    label PNG of the argmax, and the running intensity average as a PNG."""
    model, payload = networks.load_checkpoint(checkpoint_path)
    if model.atlas is None:
        raise ValueError(
            f"variant {model.cfg.variant!r} has no atlas to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        probs = model.atlas.probs().numpy().astype(np.float32)
        intensity = model.atlas.intensity.numpy()
    probs_path = out_dir / "atlas_probs.npy"
    np.save(probs_path, probs)
    label = probs.argmax(axis=0).astype(np.uint8)
    label_path = out_dir / "atlas_label.png"
    label_path.write_bytes(phantom._png_bytes(label, indexed=True))
    intensity_path = out_dir / "atlas_intensity.png"
    intensity_path.write_bytes(phantom._png_bytes(
        np.clip(np.round(intensity * 255.0), 0, 255).astype(np.uint8),
        indexed=False))
    meta = {
        "classes": list(phantom.CLASS_NAMES),
        "epoch": payload.get("epoch"),
        "shape": list(probs.shape),
        "variant": model.cfg.variant,
    }
    meta_path = out_dir / "atlas_meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return AtlasExport(probs_path, label_path, intensity_path, meta_path, probs)


def atlas_difference(checkpoint_a: str | Path, checkpoint_b: str | Path) -> float:
    """Mean absolute difference between two checkpoints' atlas probabilities."""
    model_a, _ = networks.load_checkpoint(checkpoint_a)
    model_b, _ = networks.load_checkpoint(checkpoint_b)
    for m, p in ((model_a, checkpoint_a), (model_b, checkpoint_b)):
        if m.atlas is None:
            raise ValueError(f"checkpoint {p} has no atlas")
    with torch.no_grad():
        pa = model_a.atlas.probs().numpy()
        pb = model_b.atlas.probs().numpy()
    if pa.shape != pb.shape:
        raise ValueError(f"atlas shapes differ: {pa.shape} vs {pb.shape}")
    return float(np.abs(pa - pb).mean())
