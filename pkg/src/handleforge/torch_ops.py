"""Differentiable torch counterparts of the geometric operators and losses.

These mirror the numpy implementations in ``handles``, ``extraction`` and
``losses`` and are cross-checked against them in the test suite.
"""

import numpy as np
import torch

from .losses import DISC_CLAMP, KL_CLAMP


def as_tensor(x, dtype=torch.float64):
    return x if torch.is_tensor(x) else torch.tensor(np.array(x), dtype=dtype)


def rot6d_to_matrix(r):
    a, b = r[..., :3], r[..., 3:]
    b1 = a / a.norm(dim=-1, keepdim=True)
    b2 = b - (b1 * b).sum(-1, keepdim=True) * b1
    b2 = b2 / b2.norm(dim=-1, keepdim=True)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def axis_angle_to_matrix(v):
    """Rodrigues with a series expansion near zero so gradients stay finite."""
    theta2 = (v * v).sum(-1, keepdim=True)
    small = theta2 < 1e-12
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = theta2_safe.sqrt()
    A = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    B = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / theta2_safe)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = torch.zeros_like(x)
    Kx = torch.stack([torch.stack([zero, -z, y], -1),
                      torch.stack([z, zero, -x], -1),
                      torch.stack([-y, x, zero], -1)], -2)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(Kx.shape)
    return eye + A[..., None] * Kx + B[..., None] * (Kx @ Kx)


class _ProcrustesRotation(torch.autograd.Function):
    """Rotation maximizing ``tr(R H)`` (Kabsch with reflection correction).

    The backward pass differentiates the optimality condition ``R H``
    symmetric instead of going through SVD, so it stays finite when ``H``
    has repeated singular values (e.g. rotationally symmetric supports).
    """

    @staticmethod
    def forward(ctx, H):
        U, _, Vh = torch.linalg.svd(H)
        V = Vh.transpose(-1, -2)
        d = torch.sign(torch.linalg.det(V @ U.transpose(-1, -2)))
        d = torch.where(d == 0, torch.ones_like(d), d)
        D = torch.diag_embed(torch.stack([torch.ones_like(d), torch.ones_like(d), d], -1))
        R = V @ D @ U.transpose(-1, -2)
        ctx.save_for_backward(R, H)
        return R

    @staticmethod
    def backward(ctx, grad_R):
        R, H = ctx.saved_tensors
        P = R @ H
        lam, Q = torch.linalg.eigh((P + P.transpose(-1, -2)) / 2)
        denom = lam[..., :, None] + lam[..., None, :]
        denom = torch.where(denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
        A = grad_R @ R.transpose(-1, -2)
        Qt = Q.transpose(-1, -2)
        C = Q @ ((Qt @ A @ Q) / denom) @ Qt
        return R.transpose(-1, -2) @ (C.transpose(-1, -2) - C)


procrustes_rotation = _ProcrustesRotation.apply


def handle_positions(W, V):
    mass = W.sum(0)
    return (W.transpose(0, 1) @ V) / mass[:, None]


def deform(V, W, h, local_trans, local_R, global_R=None, global_trans=None):
    """Batched linear blend about handle pivots.

    Shapes: ``V (Nv, 3)``, ``W (Nv, K)``, ``h (K, 3)``, ``local_trans
    (..., K, 3)``, ``local_R (..., K, 3, 3)``, ``global_R (..., 3, 3)``.
    """
    offsets = local_trans + h - (local_R @ h[..., None])[..., 0]
    blended = torch.einsum("ik,...kab->...iab", W, local_R)
    out = (blended @ V[..., None])[..., 0] + torch.einsum("ik,...ka->...ia", W, offsets)
    if global_R is not None:
        out = out @ global_R.transpose(-1, -2) + global_trans[..., None, :]
    return out


def fit_local(V, target, W, h):
    """Per-handle weighted Procrustes about the handle positions (local only)."""
    X = V - h[:, None, :]                         # (K, Nv, 3)
    Y = target - h[:, None, :]
    w = W.transpose(0, 1)                         # (K, Nv)
    mass = w.sum(1, keepdim=True)
    cx = (w[..., None] * X).sum(1) / mass
    cy = (w[..., None] * Y).sum(1) / mass
    Xc, Yc = X - cx[:, None], Y - cy[:, None]
    H = (w[..., None] * Xc).transpose(1, 2) @ Yc
    R = procrustes_rotation(H)
    t = cy - (R @ cx[..., None])[..., 0]
    return R, t


def pose_loss(V, target, W):
    """Mean squared vertex error of the local-only handle fit of ``target``."""
    h = handle_positions(W, V)
    R, t = fit_local(V, target, W, h)
    approx = deform(V, W, h, t, R)
    return ((approx - target) ** 2).sum() / V.shape[0]


def root_loss(W, V, root):
    s = W[:, 0]
    return (((s @ V) / s.sum() - root) ** 2).sum()


def skinning_loss(W, i, j, gamma):
    s = W.clamp(KL_CLAMP, 1.0)
    si, sj = s[i], s[j]
    return (gamma * (si * si.log() - si * sj.log()).sum(1)).mean()


def spring_loss(traj, pairs, sigma=0.0):
    """``traj (..., N+1, K, 3)`` with the rest frame first; summed over leading dims."""
    diff = traj[..., pairs[:, 0], :] - traj[..., pairs[:, 1], :]
    d = diff.norm(dim=-1)
    d0 = d[..., :1, :]
    c = torch.exp(-(d0 + sigma))
    stretch = (c * (d[..., 1:, :] - d0) ** 2).sum()
    jitter = ((d[..., 1:, :] - d[..., :-1, :]) ** 2).sum()
    return stretch + jitter


def motion_loss(x0, x0_hat, mask=None):
    err = (x0_hat - x0) ** 2
    if mask is None:
        return err.mean()
    m = mask.to(err.dtype)[..., None]
    return (err * m).sum() / (m.sum() * x0.shape[-1])


def adversarial_losses(p_real, p_fake):
    p_real = p_real.clamp(DISC_CLAMP, 1 - DISC_CLAMP)
    p_fake = p_fake.clamp(DISC_CLAMP, 1 - DISC_CLAMP)
    d_loss = -p_real.log().mean() - torch.log1p(-p_fake).mean()
    g_loss = -p_fake.log().mean()
    return d_loss, g_loss
