"""Network architectures: segmentation UNet with a low-rank stochastic head,
atlas-to-image mapper, disease branch, and the learnable atlas itself.

Design notes
------------
- The mapper consumes *probability* maps (predicted segmentation and atlas),
  never raw intensities, so the deformation model is appearance-agnostic.
- The bottleneck code ``d_b`` is produced by global average pooling and is the
  single input to the disease branch; gradients from the disease loss reach
  the mapper encoder through it.
- The affine head is zero-initialized (exact identity pose at start); the
  velocity field is multiplied by a learnable gain starting at 1e-3, so the
  initial transform is within a small fraction of a pixel of the identity.
- Normalization is GroupNorm throughout so that single-sample behaviour
  matches batched behaviour exactly (no cross-sample coupling).
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import N_CLASSES
from . import transforms as T


@dataclass
class SegConfig:
    depth: int = 4
    base_channels: int = 16
    rank: int = 5
    n_classes: int = N_CLASSES

    def validate(self) -> None:
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_channels < 8 or self.base_channels % 8:
            raise ValueError("base_channels must be a positive multiple of 8")
        if self.rank < 0:
            raise ValueError("rank must be >= 0")


@dataclass
class ModelConfig:
    variant: str = "atlas_istn"
    image_height: int = 112
    image_width: int = 144
    seg: SegConfig = field(default_factory=SegConfig)
    code_dim: int = 256
    exp_steps: int = 6
    velocity_scale: float = 1.0

    def validate(self) -> None:
        if self.variant not in ("unet", "ssn", "atlas_istn"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.image_height % 16 or self.image_width % 16:
            raise ValueError("image dimensions must be multiples of 16")
        if self.image_height < 32 or self.image_width < 32:
            raise ValueError("image dimensions must be >= 32")
        if self.exp_steps < 1:
            raise ValueError("exp_steps must be >= 1")
        self.seg.validate()
        if self.variant == "unet" and self.seg.rank != 0:
            raise ValueError("variant 'unet' requires rank 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["seg"] = SegConfig(**d["seg"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GroupNorm(8, c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GroupNorm(8, c_out),
        nn.ReLU(inplace=True),
    )


@dataclass
class SegOutput:
    """Low-rank Gaussian over per-pixel logits.

    mean_logits:    (B, C, H, W)
    cov_factor:     (B, rank, C, H, W) or None when rank == 0
    diag_log_scale: (B, C, H, W) or None when rank == 0
    """
    mean_logits: torch.Tensor
    cov_factor: torch.Tensor | None
    diag_log_scale: torch.Tensor | None

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.mean_logits, dim=1)


class SegNet(nn.Module):
    """UNet encoder/decoder over intensity images with softmax class logits.

    With ``rank > 0`` the head also predicts a rank-``r`` covariance factor
    and a diagonal scale, giving a sampleable logit distribution.
    """

    def __init__(self, cfg: SegConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.enc = nn.ModuleList()
        c_prev = 1
        for c in chans:
            self.enc.append(_conv_block(c_prev, c))
            c_prev = c
        self.dec = nn.ModuleList()
        for i in range(cfg.depth - 2, -1, -1):
            self.dec.append(_conv_block(chans[i + 1] + chans[i], chans[i]))
        c_head = chans[0]
        self.mean_head = nn.Conv2d(c_head, cfg.n_classes, 1)
        if cfg.rank > 0:
            self.factor_head = nn.Conv2d(c_head, cfg.rank * cfg.n_classes, 1)
            self.diag_head = nn.Conv2d(c_head, cfg.n_classes, 1)
            nn.init.zeros_(self.factor_head.weight)
            nn.init.zeros_(self.factor_head.bias)
            nn.init.zeros_(self.diag_head.weight)
            nn.init.constant_(self.diag_head.bias, -3.0)
        else:
            self.factor_head = None
            self.diag_head = None

    def forward(self, x: torch.Tensor) -> SegOutput:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            h = block(h)
            if i < len(self.enc) - 1:
                skips.append(h)
                h = F.max_pool2d(h, 2)
        for block in self.dec:
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skips.pop()], dim=1))
        mean = self.mean_head(h)
        if self.factor_head is None:
            return SegOutput(mean, None, None)
        b, _, hh, ww = mean.shape
        factor = self.factor_head(h).view(b, self.cfg.rank, self.cfg.n_classes, hh, ww)
        return SegOutput(mean, factor, self.diag_head(h))


def sample_seg(out: SegOutput, n_samples: int, seed: int) -> torch.Tensor:
    """Draw logit samples, (n, B, C, H, W). Deterministic for a given seed."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mean = out.mean_logits
    b, c, h, w = mean.shape
    if out.cov_factor is None:
        return mean.unsqueeze(0).expand(n_samples, -1, -1, -1, -1).clone()
    gen = torch.Generator(device=mean.device).manual_seed(seed)
    rank = out.cov_factor.shape[1]
    eps_lr = torch.randn(n_samples, b, rank, generator=gen,
                         dtype=mean.dtype, device=mean.device)
    eps_diag = torch.randn(n_samples, b, c, h, w, generator=gen,
                           dtype=mean.dtype, device=mean.device)
    low_rank = torch.einsum("nbr,brchw->nbchw", eps_lr, out.cov_factor)
    diag = torch.exp(out.diag_log_scale).unsqueeze(0) * eps_diag
    return mean.unsqueeze(0) + low_rank + diag


def _check_probs(name: str, p: torch.Tensor) -> None:
    sums = p.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-3):
        raise ValueError(f"{name} must be probability maps (channels summing to 1)")


@dataclass
class MapperOutput:
    code: torch.Tensor      # (B, code_dim)
    velocity: torch.Tensor  # (B, 2, H, W), pixel units
    affine: torch.Tensor    # (B, 2, 3), normalized coordinates


class MapperD(nn.Module):
    """Maps (predicted seg probs, atlas probs) to a bottleneck code, a
    stationary velocity field, and an affine pose correction."""

    def __init__(self, n_classes: int, code_dim: int, height: int, width: int,
                 velocity_scale: float = 1.0):
        super().__init__()
        self.height, self.width = height, width
        self.velocity_scale = velocity_scale
        c_in = 2 * n_classes
        enc_chans = (24, 48, 96, 128)
        layers: list[nn.Module] = []
        c_prev = c_in
        for c in enc_chans:
            layers += [nn.Conv2d(c_prev, c, 3, stride=2, padding=1),
                       nn.GroupNorm(8, c), nn.ReLU(inplace=True)]
            c_prev = c
        self.encoder = nn.Sequential(*layers)
        self.to_code = nn.Linear(enc_chans[-1], code_dim)

        self.h16, self.w16 = height // 16, width // 16
        self.from_code = nn.Linear(code_dim, 16 * self.h16 * self.w16)
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(16, 32, 4, stride=2, padding=1),
            nn.GroupNorm(8, 32), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(32, 32, 4, stride=2, padding=1),
            nn.GroupNorm(8, 32), nn.ReLU(inplace=True),
        )
        self.vel_head = nn.Conv2d(32, 2, 3, padding=1)
        # learnable output gain, small at start: training begins close to the
        # identity transform without pinning the head weights to zero
        self.velocity_gain = nn.Parameter(torch.tensor(1e-3))
        self.affine_head = nn.Linear(code_dim, 6)
        nn.init.zeros_(self.affine_head.weight)
        nn.init.zeros_(self.affine_head.bias)

    def forward(self, seg_probs: torch.Tensor, atlas_probs: torch.Tensor) -> MapperOutput:
        if seg_probs.dim() != 4:
            raise ValueError("seg_probs must be (B, C, H, W)")
        if atlas_probs.dim() == 3:
            atlas_probs = atlas_probs.unsqueeze(0).expand(seg_probs.shape[0], -1, -1, -1)
        _check_probs("seg_probs", seg_probs)
        _check_probs("atlas_probs", atlas_probs)
        h = self.encoder(torch.cat([seg_probs, atlas_probs], dim=1))
        code = self.to_code(h.mean(dim=(2, 3)))
        b = code.shape[0]
        g = self.from_code(code).view(b, 16, self.h16, self.w16)
        v_quarter = self.vel_head(self.dec(g))
        v = F.interpolate(v_quarter, size=(self.height, self.width),
                          mode="bilinear", align_corners=False)
        v = v * self.velocity_gain * self.velocity_scale
        ident = T.identity_affine(dtype=code.dtype, device=code.device)
        affine = ident.unsqueeze(0) + self.affine_head(code).view(b, 2, 3)
        return MapperOutput(code, v, affine)


class DiseaseHead(nn.Module):
    """Three fully connected ReLU layers and a sigmoid over the bottleneck
    code. Biases start at zero, so an all-zero code maps to probability 0.5."""

    def __init__(self, code_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(code_dim, 64), nn.ReLU(inplace=True),
            nn.Linear(64, 16), nn.ReLU(inplace=True),
            nn.Linear(16, 1),
        )
        for m in self.net:
            if isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        if code.dim() != 2:
            raise ValueError("code must be (B, code_dim)")
        return torch.sigmoid(self.net(code).squeeze(-1))


class Atlas(nn.Module):
    """Learnable label atlas plus a running intensity average in atlas space.

    ``label_logits`` starts at zero (uniform class probabilities). The
    intensity buffer is a non-learned exponential moving average of images
    warped into atlas space, useful for inspection and export.
    """

    def __init__(self, n_classes: int, height: int, width: int):
        super().__init__()
        self.label_logits = nn.Parameter(torch.zeros(n_classes, height, width))
        self.register_buffer("intensity", torch.zeros(height, width))
        self.register_buffer("intensity_count", torch.zeros(()))

    def probs(self) -> torch.Tensor:
        return torch.softmax(self.label_logits, dim=0)

    @torch.no_grad()
    def update_intensity(self, warped_images: torch.Tensor, momentum: float = 0.05) -> None:
        batch_mean = warped_images.mean(dim=0).squeeze(0)
        if self.intensity_count.item() == 0:
            self.intensity.copy_(batch_mean)
        else:
            self.intensity.mul_(1.0 - momentum).add_(momentum * batch_mean)
        self.intensity_count += 1


@dataclass
class ModelOutputs:
    seg: SegOutput
    seg_probs: torch.Tensor
    code: torch.Tensor | None = None
    velocity: torch.Tensor | None = None
    affine: torch.Tensor | None = None
    forward_disp: torch.Tensor | None = None
    inverse_disp: torch.Tensor | None = None
    nonrigid_disp: torch.Tensor | None = None
    p_disease: torch.Tensor | None = None


class AtlasISTN(nn.Module):
    """Full model: segmentation network, atlas, mapper, and disease branch.

    For the plain segmentation variants (``unet``, ``ssn``) the atlas, mapper
    and disease branch are absent and :meth:`forward` only fills the
    segmentation fields.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seg_net = SegNet(cfg.seg)
        if cfg.variant == "atlas_istn":
            self.atlas = Atlas(cfg.seg.n_classes, cfg.image_height, cfg.image_width)
            self.mapper = MapperD(cfg.seg.n_classes, cfg.code_dim,
                                  cfg.image_height, cfg.image_width,
                                  cfg.velocity_scale)
            self.disease = DiseaseHead(cfg.code_dim)
        else:
            self.atlas = None
            self.mapper = None
            self.disease = None

    def segment(self, x: torch.Tensor) -> SegOutput:
        expected = (self.cfg.image_height, self.cfg.image_width)
        if x.shape[-2:] != expected:
            raise ValueError(
                f"expected {expected[0]}x{expected[1]} images, "
                f"got {x.shape[-2]}x{x.shape[-1]}")
        return self.seg_net(x)

    def map_atlas(self, seg_probs: torch.Tensor,
                  atlas_probs: torch.Tensor | None = None) -> MapperOutput:
        if self.mapper is None:
            raise ValueError(f"variant {self.cfg.variant!r} has no atlas mapper")
        if atlas_probs is None:
            atlas_probs = self.atlas.probs()
        return self.mapper(seg_probs, atlas_probs)

    def predict_disease(self, code: torch.Tensor) -> torch.Tensor:
        if self.disease is None:
            raise ValueError(f"variant {self.cfg.variant!r} has no disease branch")
        return self.disease(code)

    def forward(self, x: torch.Tensor, with_transforms: bool = True) -> ModelOutputs:
        seg = self.segment(x)
        probs = seg.probs
        out = ModelOutputs(seg=seg, seg_probs=probs)
        if self.mapper is None or not with_transforms:
            return out
        mapped = self.map_atlas(probs)
        out.code, out.velocity, out.affine = mapped.code, mapped.velocity, mapped.affine
        pair = T.decompose(mapped.velocity, mapped.affine, steps=self.cfg.exp_steps)
        out.forward_disp, out.inverse_disp = pair.forward, pair.inverse
        out.nonrigid_disp = pair.nonrigid
        out.p_disease = self.predict_disease(mapped.code)
        return out


def build_model(cfg: ModelConfig) -> AtlasISTN:
    cfg.validate()
    return AtlasISTN(cfg)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


CHECKPOINT_FORMAT_VERSION = 1


def _intern_tree(obj):
    """Rebuild nested containers with every string interned.

    Pickle emits a back-reference instead of a second copy whenever the same
    string *object* reappears, so the serialized bytes depend on string
    identity, not just value. Interning makes identity a function of value,
    which keeps save -> load -> save byte-identical (loaded strings are
    otherwise distinct objects from fresh literals).
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return type(obj)((_intern_tree(k), _intern_tree(v))
                         for k, v in obj.items())
    if isinstance(obj, list):
        return [_intern_tree(v) for v in obj]
    if isinstance(obj, tuple):
        return type(obj)(_intern_tree(v) for v in obj)
    return obj


def save_checkpoint(path, model: AtlasISTN, extra: dict | None = None) -> None:
    """Serialize model config + weights (and optional training state).

    The payload layout is versioned; loading rejects unknown versions.
    """
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "model_state": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(_intern_tree(payload), path)


def load_checkpoint(path) -> tuple[AtlasISTN, dict]:
    """Rebuild a model from a checkpoint; returns (model, full payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version!r}")
    model = build_model(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload
