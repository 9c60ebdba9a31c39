"""Training objectives: segmentation fidelity, atlas alignment in both
directions, deformation smoothness, and disease classification.

All terms operate in probability space. The segmentation and alignment terms
share one functional form — per-pixel mean of channel-summed squared error —
so their magnitudes are directly comparable and resolution-independent. The
smoothness term penalises the displacement gradient, so rigid shifts encoded
in the affine component are free while local distortion is not.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import transforms as T
from .networks import SegOutput, sample_seg

_PROB_EPS = 1e-7


@dataclass
class LossWeights:
    """Scalar weights of the total objective:

    total = seg + omega * (a2s + s2a + lam * reg) + gamma * disease
    """
    omega: float = 1.0
    lam: float = 1.0
    gamma: float = 1.0

    def validate(self) -> None:
        for name in ("omega", "lam", "gamma"):
            v = getattr(self, name)
            if not (v >= 0.0):
                raise ValueError(f"{name} must be >= 0, got {v}")


def _mean_sq_channel_sum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).sum(dim=1).mean()


def loss_seg(gt_onehot: torch.Tensor, seg_probs: torch.Tensor) -> torch.Tensor:
    """Mean over batch and pixels of the channel-summed squared difference
    between one-hot ground truth and predicted class probabilities.

    Zero iff the prediction equals the ground truth exactly. For C classes a
    uniform prediction against one-hot truth scores (C-1)/C per pixel.
    """
    if gt_onehot.dim() != 4 or seg_probs.dim() != 4:
        raise ValueError("expected (B, C, H, W) tensors")
    return _mean_sq_channel_sum(gt_onehot, seg_probs)


def loss_atlas_to_subject(gt_onehot: torch.Tensor, atlas_probs: torch.Tensor,
                          inverse_disp: torch.Tensor) -> torch.Tensor:
    """Squared error between the ground truth and the atlas pulled into
    subject space through the inverse displacement."""
    if atlas_probs.dim() == 3:
        atlas_probs = atlas_probs.unsqueeze(0).expand(gt_onehot.shape[0], -1, -1, -1)
    warped = T.warp(atlas_probs, inverse_disp, padding="border")
    return _mean_sq_channel_sum(gt_onehot, warped)


def loss_subject_to_atlas(gt_onehot: torch.Tensor, forward_disp: torch.Tensor,
                          atlas_probs: torch.Tensor) -> torch.Tensor:
    """Squared error between the ground truth pushed into atlas space through
    the forward displacement and the atlas."""
    if atlas_probs.dim() == 3:
        atlas_probs = atlas_probs.unsqueeze(0).expand(gt_onehot.shape[0], -1, -1, -1)
    warped = T.warp(gt_onehot, forward_disp, padding="border")
    return _mean_sq_channel_sum(warped, atlas_probs)


def loss_smoothness(disp: torch.Tensor) -> torch.Tensor:
    """Displacement smoothness; see :func:`transforms.smoothness_penalty`."""
    return T.smoothness_penalty(disp)


def loss_disease(target: torch.Tensor, prob: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on predicted probabilities, clamped away from
    {0, 1} so the loss stays finite for saturated predictions."""
    if target.shape != prob.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(prob.shape)}")
    p = prob.clamp(_PROB_EPS, 1.0 - _PROB_EPS)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


_PART_NAMES = ("seg", "a2s", "s2a", "reg", "disease")


def loss_total(parts: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the individual terms.

    ``parts`` must contain seg/a2s/s2a/reg/disease (zero tensors are fine for
    disabled terms). Non-finite parts raise, naming the offending term.
    """
    weights.validate()
    missing = [k for k in _PART_NAMES if k not in parts]
    if missing:
        raise ValueError(f"missing loss parts: {missing}")
    for name in _PART_NAMES:
        val = parts[name]
        if not torch.isfinite(torch.as_tensor(val)).all():
            raise ValueError(f"loss term {name!r} is non-finite")
    return (parts["seg"]
            + weights.omega * (parts["a2s"] + parts["s2a"] + weights.lam * parts["reg"])
            + weights.gamma * parts["disease"])


def loss_seg_mc(gt_onehot: torch.Tensor, seg_out: SegOutput,
                n_samples: int = 10, seed: int = 0) -> torch.Tensor:
    """Monte-Carlo categorical objective for the stochastic head: the
    negative log of the sample-averaged joint likelihood of the label map,
    normalized per pixel. Alternative to :func:`loss_seg`; off by default.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    logit_samples = sample_seg(seg_out, n_samples, seed)
    n, b, c, h, w = logit_samples.shape
    log_probs = F.log_softmax(logit_samples, dim=2)
    gt = gt_onehot.unsqueeze(0).expand(n, -1, -1, -1, -1)
    per_sample = (log_probs * gt).sum(dim=(2, 3, 4))  # (n, B) joint log-lik
    log_mix = torch.logsumexp(per_sample, dim=0) - torch.log(
        torch.tensor(float(n), dtype=per_sample.dtype))
    return -(log_mix / (h * w)).mean()
