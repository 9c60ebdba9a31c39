"""Transformation computation: velocity-field exponentiation, affine handling,
composition, inversion, and differentiable warping.

Conventions
-----------
- Displacements and velocities are dense 2-channel tensors ``(B, 2, H, W)``
  in *pixel* units; channel 0 is the x (column) component, channel 1 the y
  (row) component. The map they encode is ``phi(p) = p + u(p)``.
- Affine transforms are ``(2, 3)`` (or batched ``(B, 2, 3)``) matrices acting
  on *normalized* coordinates in ``[-1, 1]`` (align-corners convention).
  All pixel/normalized conversion goes through :func:`normalized_from_pixel`
  and :func:`pixel_from_normalized`.
- The forward map composes affine-then-nonrigid: pose is removed before the
  residual deformation. ``forward(p) = expv(A(p))`` as a sampling map, so
  ``warp(x, forward)`` resamples ``x`` at ``expv(A(p))``.
- The smoothness penalty acts on the *displacement* gradient (zero for any
  constant shift), not on the gradient of the full map.

Unbatched ``(2, H, W)`` / ``(C, H, W)`` inputs are accepted everywhere and
returned unbatched. All operations are differentiable and stateless.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def _batched(t: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ValueError(f"expected a 3D or 4D tensor, got shape {tuple(t.shape)}")


def normalized_from_pixel(coords: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Pixel (x, y) -> normalized [-1, 1] coordinates, last dim = (x, y)."""
    x = 2.0 * coords[..., 0] / max(width - 1, 1) - 1.0
    y = 2.0 * coords[..., 1] / max(height - 1, 1) - 1.0
    return torch.stack([x, y], dim=-1)


def pixel_from_normalized(coords: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Normalized [-1, 1] -> pixel (x, y) coordinates, last dim = (x, y)."""
    x = (coords[..., 0] + 1.0) * max(width - 1, 1) / 2.0
    y = (coords[..., 1] + 1.0) * max(height - 1, 1) / 2.0
    return torch.stack([x, y], dim=-1)


def base_grid(height: int, width: int, *, dtype=torch.float32, device=None) -> torch.Tensor:
    """Identity pixel grid of shape (H, W, 2), last dim = (x, y)."""
    ys = torch.arange(height, dtype=dtype, device=device)
    xs = torch.arange(width, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def identity_affine(*, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=dtype, device=device)


def warp(field: torch.Tensor, disp: torch.Tensor, padding: str = "border") -> torch.Tensor:
    """Resample ``field`` at ``p + disp(p)`` with bilinear interpolation.

    Channels are warped independently; differentiable in both arguments.
    ``padding`` is ``"border"`` (clamp) or ``"zeros"``.
    """
    if padding not in ("border", "zeros"):
        raise ValueError(f"unknown padding mode {padding!r}")
    field_b, squeeze_f = _batched(field)
    disp_b, _ = _batched(disp)
    if disp_b.shape[1] != 2:
        raise ValueError("displacement must have 2 channels")
    if field_b.shape[-2:] != disp_b.shape[-2:]:
        raise ValueError(
            f"field grid {tuple(field_b.shape[-2:])} does not match "
            f"displacement grid {tuple(disp_b.shape[-2:])}"
        )
    if field_b.shape[0] != disp_b.shape[0]:
        if disp_b.shape[0] == 1:
            disp_b = disp_b.expand(field_b.shape[0], -1, -1, -1)
        elif field_b.shape[0] == 1:
            field_b = field_b.expand(disp_b.shape[0], -1, -1, -1)
        else:
            raise ValueError("batch sizes of field and displacement disagree")
    b, _, h, w = disp_b.shape
    grid = base_grid(h, w, dtype=disp_b.dtype, device=disp_b.device)
    pts = grid.unsqueeze(0) + disp_b.permute(0, 2, 3, 1)
    grid_norm = normalized_from_pixel(pts, h, w)
    out = F.grid_sample(field_b, grid_norm, mode="bilinear",
                        padding_mode=padding, align_corners=True)
    return out.squeeze(0) if squeeze_f and out.shape[0] == 1 else out


def exp_velocity(v: torch.Tensor, steps: int = 6) -> torch.Tensor:
    """Exponentiate a stationary velocity field by scaling and squaring.

    The field is scaled by ``2**-steps`` to a small displacement and composed
    with itself ``steps`` times: ``u <- u + warp(u, u)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_finite("velocity field", v)
    v_b, squeeze = _batched(v)
    if v_b.shape[1] != 2:
        raise ValueError("velocity field must have 2 channels")
    u = v_b / (2.0 ** steps)
    for _ in range(steps):
        u = u + warp(u, u, padding="border")
    return u.squeeze(0) if squeeze else u


def compose(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Displacement of the map ``p -> second(first(p))``:
    ``u(p) = u1(p) + u2(p + u1(p))``."""
    f_b, squeeze = _batched(first)
    s_b, _ = _batched(second)
    out = f_b + warp(s_b, f_b, padding="border")
    return out.squeeze(0) if squeeze else out


def _affine_batched(affine: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if affine.dim() == 2:
        return affine.unsqueeze(0), True
    if affine.dim() == 3:
        return affine, False
    raise ValueError("affine must be (2, 3) or (B, 2, 3)")


def affine_inverse(affine: torch.Tensor) -> torch.Tensor:
    """Inverse of a (batched) 2x3 affine; raises on a singular linear part."""
    a_b, squeeze = _affine_batched(affine)
    lin, trans = a_b[:, :, :2], a_b[:, :, 2]
    det = lin[:, 0, 0] * lin[:, 1, 1] - lin[:, 0, 1] * lin[:, 1, 0]
    if (det.abs() <= 1e-6).any():
        raise ValueError("singular affine: |det| <= 1e-6")
    inv = torch.stack([
        torch.stack([lin[:, 1, 1], -lin[:, 0, 1]], dim=-1),
        torch.stack([-lin[:, 1, 0], lin[:, 0, 0]], dim=-1),
    ], dim=1) / det[:, None, None]
    t_inv = -torch.einsum("bij,bj->bi", inv, trans)
    out = torch.cat([inv, t_inv.unsqueeze(-1)], dim=-1)
    return out.squeeze(0) if squeeze else out


def _affine_delta(affine_b: torch.Tensor, pts_pix: torch.Tensor,
                  height: int, width: int) -> torch.Tensor:
    """Displacement vectors ``A(x) - x`` in pixels at the given pixel points,
    (B, H, W, 2). Computed as ``(A_lin - I) q + t`` in normalized space and
    scaled, so an identity affine yields exact zeros."""
    lin = affine_b[:, :, :2] - torch.eye(
        2, dtype=affine_b.dtype, device=affine_b.device)
    q = normalized_from_pixel(pts_pix, height, width)
    dq = torch.einsum("bij,bhwj->bhwi", lin, q) + affine_b[:, None, None, :, 2]
    dx = dq[..., 0] * max(width - 1, 1) / 2.0
    dy = dq[..., 1] * max(height - 1, 1) / 2.0
    return torch.stack([dx, dy], dim=-1)


def affine_apply_points(affine: torch.Tensor, pts_pix: torch.Tensor,
                        height: int, width: int) -> torch.Tensor:
    """Apply a normalized-coordinate affine to pixel points exactly.

    ``pts_pix`` has shape ``(B, H, W, 2)`` (or unbatched); the affine is
    evaluated analytically, with no interpolation.
    """
    a_b, _ = _affine_batched(affine)
    squeeze = pts_pix.dim() == 3
    p_b = pts_pix.unsqueeze(0) if squeeze else pts_pix
    out = p_b + _affine_delta(a_b, p_b, height, width)
    return out.squeeze(0) if squeeze else out


def affine_displacement(affine: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Exact displacement field of a normalized-coordinate affine, (B, 2, H, W)."""
    a_b, squeeze = _affine_batched(affine)
    grid = base_grid(height, width, dtype=a_b.dtype, device=a_b.device)
    grid = grid.unsqueeze(0).expand(a_b.shape[0], -1, -1, -1)
    out = _affine_delta(a_b, grid, height, width).permute(0, 3, 1, 2)
    return out.squeeze(0) if squeeze else out


@dataclass
class TransformPair:
    """Displacement fields of ``phi = expv o A`` and its inverse, plus the
    nonrigid factor ``expv`` on its own (the part smoothness penalties act on).
    All fields are (B, 2, H, W) unless built from unbatched inputs."""
    forward: torch.Tensor
    inverse: torch.Tensor
    nonrigid: torch.Tensor


def decompose(v: torch.Tensor, affine: torch.Tensor, steps: int = 6) -> TransformPair:
    """Build forward/inverse displacements of ``phi = expv o A``.

    forward(p)  = A(p) + expv_disp(A(p))            (affine first)
    inverse(p)  = A^-1(p + expmv_disp(p)) - p       (nonrigid first)

    so that forward(inverse(p)) ~ p up to velocity-integration error. The
    affine is evaluated analytically on both paths; only the velocity
    integral is interpolated.
    """
    _check_finite("velocity field", v)
    _check_finite("affine", affine)
    v_b, squeeze = _batched(v)
    a_b, _ = _affine_batched(affine)
    if a_b.shape[0] != v_b.shape[0]:
        if a_b.shape[0] == 1:
            a_b = a_b.expand(v_b.shape[0], -1, -1)
        else:
            raise ValueError("batch sizes of velocity and affine disagree")
    a_inv = affine_inverse(a_b)
    b, _, h, w = v_b.shape

    u_fwd_nr = exp_velocity(v_b, steps)
    u_inv_nr = exp_velocity(-v_b, steps)

    u_aff = affine_displacement(a_b, h, w)
    forward = compose(u_aff, u_fwd_nr)

    grid = base_grid(h, w, dtype=v_b.dtype, device=v_b.device)
    grid = grid.unsqueeze(0).expand(b, -1, -1, -1)
    u_inv_pts = u_inv_nr.permute(0, 2, 3, 1)
    mid = grid + u_inv_pts
    # A^-1(mid) - p = (mid - p) + (A^-1(mid) - mid): exact zero when both
    # the velocity and the affine are the identity
    inverse = (u_inv_pts + _affine_delta(a_inv, mid, h, w)).permute(0, 3, 1, 2)

    if squeeze:
        return TransformPair(forward.squeeze(0), inverse.squeeze(0),
                             u_fwd_nr.squeeze(0))
    return TransformPair(forward, inverse, u_fwd_nr)


def invert(v: torch.Tensor, affine: torch.Tensor, steps: int = 6
           ) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward and inverse displacements of ``phi = expv o A``;
    see :func:`decompose`."""
    pair = decompose(v, affine, steps)
    return pair.forward, pair.inverse


def smoothness_penalty(disp: torch.Tensor) -> torch.Tensor:
    """Mean squared forward finite difference of the displacement.

    Sums squared differences over both axes and both channels and divides by
    the total number of difference terms, ``B * 2 * (H*(W-1) + (H-1)*W)``, so
    the value is resolution-comparable. Zero exactly for constant fields.
    """
    _check_finite("displacement", disp)
    d_b, _ = _batched(disp)
    b, c, h, w = d_b.shape
    dx = d_b[:, :, :, 1:] - d_b[:, :, :, :-1]
    dy = d_b[:, :, 1:, :] - d_b[:, :, :-1, :]
    n_terms = b * c * (h * (w - 1) + (h - 1) * w)
    return (dx.pow(2).sum() + dy.pow(2).sum()) / n_terms
