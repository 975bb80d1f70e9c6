"""Differentiable spatial warping and deformation-field algebra.

Displacement fields have shape ``[2, H, W]`` (optionally with a leading
batch axis): channel 0 holds row offsets, channel 1 column offsets, both
in pixels. The zero field is the identity transform. Sampling outside the
image clamps to the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "warp_image",
    "warp_labels",
    "compose_fields",
    "spatial_gradient",
    "jacobian_stats",
    "JacobianStats",
]


def _as_tensor(x):
    """Return (tensor, was_numpy). Numpy inputs round-trip back to numpy."""
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x)), True


def _batched(t, rank):
    if t.dim() == rank:
        return t.unsqueeze(0), True
    if t.dim() == rank + 1:
        return t, False
    raise ValueError(f"expected rank {rank} or {rank + 1} array, got shape {tuple(t.shape)}")


def _gather2d(img_flat, r, c, w):
    # img_flat [N, C, H*W]; r, c [N, H, W] integer sample indices
    n, ch, _ = img_flat.shape
    idx = (r * w + c).reshape(n, 1, -1).expand(n, ch, -1)
    return img_flat.gather(2, idx).reshape(n, ch, *r.shape[1:])


def warp_image(image, field, mode: str = "bilinear"):
    """Backward-warp ``image`` by a displacement field.

    ``output[r, c]`` samples the input at ``(r + field[0, r, c],
    c + field[1, r, c])``. Bilinear mode interpolates and is differentiable
    w.r.t. both inputs; nearest mode picks the closest pixel (for label
    maps). Sample coordinates are clamped to the image border.

    Accepts ``[C, H, W]`` or ``[N, C, H, W]`` images with a matching
    ``[2, H, W]`` / ``[N, 2, H, W]`` field; numpy in, numpy out.
    """
    img, was_np = _as_tensor(image)
    fld, _ = _as_tensor(field)
    img, img_sq = _batched(img, 3)
    fld, _ = _batched(fld, 3)
    n, ch, h, w = img.shape
    if fld.shape[0] == 1 and n > 1:
        fld = fld.expand(n, -1, -1, -1)
    if fld.shape != (n, 2, h, w):
        raise ValueError(f"field shape {tuple(fld.shape)} does not match image {tuple(img.shape)}")
    fld = fld.to(img.dtype)

    base_r = torch.arange(h, dtype=img.dtype).reshape(1, h, 1)
    base_c = torch.arange(w, dtype=img.dtype).reshape(1, 1, w)
    rows = (base_r + fld[:, 0]).clamp(0, h - 1)
    cols = (base_c + fld[:, 1]).clamp(0, w - 1)

    flat = img.reshape(n, ch, h * w)
    if mode == "nearest":
        out = _gather2d(flat, rows.round().long(), cols.round().long(), w)
    elif mode == "bilinear":
        r0f = rows.floor()
        c0f = cols.floor()
        wr = (rows - r0f).unsqueeze(1)
        wc = (cols - c0f).unsqueeze(1)
        r0 = r0f.long()
        c0 = c0f.long()
        r1 = (r0 + 1).clamp(max=h - 1)
        c1 = (c0 + 1).clamp(max=w - 1)
        v00 = _gather2d(flat, r0, c0, w)
        v01 = _gather2d(flat, r0, c1, w)
        v10 = _gather2d(flat, r1, c0, w)
        v11 = _gather2d(flat, r1, c1, w)
        out = ((1 - wr) * (1 - wc) * v00 + (1 - wr) * wc * v01
               + wr * (1 - wc) * v10 + wr * wc * v11)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    if img_sq:
        out = out.squeeze(0)
    return out.numpy() if was_np else out


def warp_labels(labels, field):
    """Warp an integer label map ``[H, W]`` with nearest-neighbor sampling."""
    lab = np.asarray(labels)
    out = warp_image(lab[None].astype(np.float64), field, mode="nearest")
    return np.rint(out[0]).astype(lab.dtype)


def compose_fields(a, omega_prev):
    """Accumulate a new displacement ``a`` onto ``omega_prev``.

    Returns ``omega_prev + (a warped by omega_prev)``, i.e. the new field is
    resampled at the positions the accumulated field already points to.
    """
    a_t, was_np = _as_tensor(a)
    prev, _ = _as_tensor(omega_prev)
    warped = warp_image(a_t, prev)
    out = prev.to(warped.dtype) + warped
    return out.numpy() if was_np else out


def spatial_gradient(field):
    """Forward-difference spatial gradient with a replicated last row/column.

    ``[C, H, W] -> [C, 2, H, W]`` (axis 0 of the new dim is the row
    derivative, axis 1 the column derivative); a leading batch dim is
    passed through. The replicated edge makes the last row/column
    derivative zero.
    """
    f, was_np = _as_tensor(field)
    f, sq = _batched(f, 3)
    dr = f[..., 1:, :] - f[..., :-1, :]
    dr = torch.cat([dr, torch.zeros_like(f[..., :1, :])], dim=-2)
    dc = f[..., :, 1:] - f[..., :, :-1]
    dc = torch.cat([dc, torch.zeros_like(f[..., :, :1])], dim=-1)
    out = torch.stack([dr, dc], dim=-3)
    if sq:
        out = out.squeeze(0)
    return out.numpy() if was_np else out


@dataclass
class JacobianStats:
    """Summary of the per-pixel determinant of ``I + grad(u)``."""

    mean_det: float
    std_det: float
    negative_fraction: float


def jacobian_stats(field) -> JacobianStats:
    """Determinant statistics of the warp Jacobian for a ``[2, H, W]`` field.

    The Jacobian is ``I`` plus the forward-difference displacement gradient;
    ``negative_fraction`` counts non-positive determinants (folds).
    """
    f, _ = _as_tensor(field)
    if f.dim() != 3 or f.shape[0] != 2:
        raise ValueError(f"expected a [2, H, W] field, got {tuple(f.shape)}")
    g = spatial_gradient(f.double())
    det = (1 + g[0, 0]) * (1 + g[1, 1]) - g[0, 1] * g[1, 0]
    return JacobianStats(
        mean_det=float(det.mean()),
        std_det=float(det.std(unbiased=False)),
        negative_fraction=float((det <= 0).double().mean()),
    )
