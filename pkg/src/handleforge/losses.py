"""Training objectives for handle learning, motion learning and ARAP adaptation.

The ``*_grad`` functions return analytic gradients with the same shapes as
the inputs they differentiate.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .extraction import fit_frame, skeletal_pose
from .handles import deform
from .mesh import edge_set
from .validation import ContractError, check_random_state

KL_CLAMP = 1e-8
DISC_CLAMP = 1e-7


@dataclass
class LossWeights:
    """Balancing factors and the spring offset.

    ``nu_p``, ``nu_r`` weight pose and root losses against the skinning loss;
    ``nu_h``, ``nu_a`` weight spring and adversarial losses against the motion
    loss; ``nu_v`` weights the edge term of the ARAP objective.
    """

    nu_p: float = 1.0
    nu_r: float = 0.1
    nu_h: float = 0.001
    nu_a: float = 0.1
    nu_v: float = 10.0
    sigma: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "sigma" and value < 0:
                raise ContractError(f"LossWeights.{name} must be non-negative")

    def to_dict(self):
        return asdict(self)


# --- skinning -----------------------------------------------------------------

def part_labels(gt_skinning, threshold=0.9):
    """Dominant ground-truth part per vertex, ``-1`` where no weight exceeds ``threshold``."""
    gt = np.asarray(gt_skinning)
    return np.where(gt.max(axis=1) > threshold, gt.argmax(axis=1), -1)


def sample_pairs(labels, n_pairs, seed=None):
    """Random pairs of distinct labeled vertices and their sign ``gamma``."""
    labeled = np.flatnonzero(np.asarray(labels) >= 0)
    if len(labeled) < 2:
        raise ContractError("skinning loss needs at least 2 labeled vertices")
    rng = check_random_state(seed)
    i = rng.choice(labeled, size=n_pairs)
    # shift j by a nonzero offset within the labeled list so i != j
    pos = np.searchsorted(labeled, i)
    j = labeled[(pos + rng.integers(1, len(labeled), size=n_pairs)) % len(labeled)]
    gamma = np.where(labels[i] == labels[j], 1.0, -1.0)
    return i, j, gamma


def skinning_pair_terms(pred, i, j, gamma):
    s = np.clip(np.asarray(pred, dtype=np.float64), KL_CLAMP, 1.0)
    si, sj = s[i], s[j]
    return gamma * np.sum(si * np.log(si) - si * np.log(sj), axis=1)


def skinning_loss(pred, labels, n_pairs=1024, seed=None):
    """Mean signed KL over sampled vertex pairs (same part +1, different part -1)."""
    i, j, gamma = sample_pairs(labels, n_pairs, seed)
    return float(skinning_pair_terms(pred, i, j, gamma).mean())


# --- pose / root --------------------------------------------------------------

def pose_loss(rest, rig, weights, handles, pose):
    """Mean squared vertex error between skeletal LBS and the fitted local handle motion."""
    V = rest.vertices if hasattr(rest, "vertices") else np.asarray(rest, dtype=np.float64)
    target = skeletal_pose(V, rig, pose)
    frame = fit_frame(V, target, weights, handles, local_only=True)
    approx = deform(V, weights, handles, frame, use_global=False)
    return float(np.sum((approx - target) ** 2) / len(V))


def root_loss(weights, rest_vertices, root_joint):
    """Squared distance from the first handle (weighted centroid) to the root joint."""
    s = np.asarray(weights, dtype=np.float64)[:, 0]
    V = np.asarray(rest_vertices, dtype=np.float64)
    h = s @ V / s.sum()
    return float(np.sum((h - root_joint) ** 2))


def root_loss_grad(weights, rest_vertices, root_joint):
    """Gradients with respect to ``weights`` and ``root_joint``."""
    W = np.asarray(weights, dtype=np.float64)
    V = np.asarray(rest_vertices, dtype=np.float64)
    s = W[:, 0]
    S = s.sum()
    h = s @ V / S
    r = h - root_joint
    dW = np.zeros_like(W)
    dW[:, 0] = 2.0 * (V - h) @ r / S
    return dW, -2.0 * r


# --- spring -------------------------------------------------------------------

def _pair_distances(traj, pairs):
    diff = traj[:, pairs[:, 0]] - traj[:, pairs[:, 1]]
    return diff, np.linalg.norm(diff, axis=-1)


def _check_spring(traj, pairs, active_mask):
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 3 or traj.shape[2] != 3 or traj.shape[0] < 2:
        raise ContractError("spring_loss: expected (N+1, K, 3) trajectory with N >= 1")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if active_mask is not None:
        bad = ~np.asarray(active_mask)[pairs].all(axis=1)
        if bad.any():
            raise ContractError(
                f"spring_loss: adjacency pair {tuple(pairs[bad][0])} references an inactive handle")
    return traj, pairs


def spring_loss(handle_traj, adjacency, sigma=0.0, active_mask=None):
    """Spring penalty on adjacent-handle distances.

    ``handle_traj[0]`` is the rest pose. Each adjacent pair is penalized for
    deviating from its rest distance (with stiffness ``exp(-(d0 + sigma))``)
    and for changing distance between consecutive frames.
    """
    traj, pairs = _check_spring(handle_traj, adjacency, active_mask)
    if len(pairs) == 0:
        return 0.0
    _, d = _pair_distances(traj, pairs)
    c = np.exp(-(d[0] + sigma))
    stretch = c * np.sum((d[1:] - d[0]) ** 2, axis=0)
    jitter = np.sum(np.diff(d, axis=0) ** 2, axis=0)
    return float(np.sum(stretch + jitter))


def spring_loss_grad(handle_traj, adjacency, sigma=0.0, active_mask=None):
    """Gradient with respect to the full trajectory, rest frame included."""
    traj, pairs = _check_spring(handle_traj, adjacency, active_mask)
    grad = np.zeros_like(traj)
    if len(pairs) == 0:
        return grad
    diff, d = _pair_distances(traj, pairs)
    c = np.exp(-(d[0] + sigma))
    dev = d[1:] - d[0]
    step = np.diff(d, axis=0)
    gd = np.zeros_like(d)
    gd[1:] += 2 * c * dev + 2 * step
    gd[:-1] -= 2 * step
    gd[0] += -c * np.sum(dev ** 2, axis=0) - 2 * c * np.sum(dev, axis=0)
    g = gd[..., None] * diff / d[..., None]
    np.add.at(grad, (slice(None), pairs[:, 0]), g)
    np.add.at(grad, (slice(None), pairs[:, 1]), -g)
    return grad


def derive_adjacency(mesh, weights, active_mask=None):
    """Handle pairs joined by a mesh edge whose endpoints have different argmax handles."""
    W = np.asarray(weights)
    if active_mask is not None:
        W = np.where(np.asarray(active_mask)[None, :], W, -1.0)
    owner = W.argmax(axis=1)
    e = edge_set(mesh).edges
    a, b = owner[e[:, 0]], owner[e[:, 1]]
    cross = a != b
    pairs = np.sort(np.stack([a[cross], b[cross]], axis=1), axis=1)
    return np.unique(pairs, axis=0) if len(pairs) else np.zeros((0, 2), dtype=np.int64)


# --- adversarial --------------------------------------------------------------

def adversarial_loss(disc, real_batch, fake_batch):
    """Discriminator and (non-saturating) generator losses.

    ``disc`` maps a batch to probabilities of being skeleton driven.
    """
    p_real = np.clip(np.asarray(disc(real_batch), dtype=np.float64), DISC_CLAMP, 1 - DISC_CLAMP)
    p_fake = np.clip(np.asarray(disc(fake_batch), dtype=np.float64), DISC_CLAMP, 1 - DISC_CLAMP)
    d_loss = -np.mean(np.log(p_real)) - np.mean(np.log1p(-p_fake))
    g_loss = -np.mean(np.log(p_fake))
    return float(d_loss), float(g_loss)


# --- ARAP ---------------------------------------------------------------------

def edge_length_error(rest_vertices, deformed, edges):
    """Sum over edges of the squared change in edge length."""
    e = edges.edges
    d = np.linalg.norm(deformed[e[:, 0]] - deformed[e[:, 1]], axis=1)
    return float(np.sum((d - edges.rest_lengths) ** 2))


def edge_length_error_grad(deformed, edges):
    e = edges.edges
    diff = deformed[e[:, 0]] - deformed[e[:, 1]]
    d = np.linalg.norm(diff, axis=1)
    g = (2 * (d - edges.rest_lengths) / d)[:, None] * diff
    grad = np.zeros_like(deformed)
    np.add.at(grad, e[:, 0], g)
    np.add.at(grad, e[:, 1], -g)
    return grad


def arap_objective(rest_vertices, deformed, edges, delta, delta_prev, nu_v=10.0):
    """``nu_v`` times the edge-length error plus a proximal pull toward ``delta_prev``."""
    deformed = np.asarray(deformed, dtype=np.float64)
    prox = np.sum((np.asarray(delta_prev) - np.asarray(delta)) ** 2)
    return float(nu_v * edge_length_error(rest_vertices, deformed, edges) + prox)


def arap_objective_grad(deformed, edges, delta, delta_prev, nu_v=10.0):
    """Gradients with respect to ``deformed`` and ``delta``."""
    deformed = np.asarray(deformed, dtype=np.float64)
    return (nu_v * edge_length_error_grad(deformed, edges),
            2.0 * (np.asarray(delta) - np.asarray(delta_prev)))


# --- motion -------------------------------------------------------------------

def _mask(x, mask):
    if mask is None:
        return np.ones(x.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ContractError(f"motion mask {mask.shape} does not match frames {x.shape[:-1]}")
    return mask


def motion_loss(x0, x0_hat, mask=None):
    """Mean squared error over the entries of valid (unpadded) frames."""
    x0, x0_hat = np.asarray(x0, dtype=np.float64), np.asarray(x0_hat, dtype=np.float64)
    m = _mask(x0, mask)
    count = m.sum() * x0.shape[-1]
    return float(np.sum(((x0_hat - x0) ** 2)[m]) / count)


def motion_loss_grad(x0, x0_hat, mask=None):
    """Gradient with respect to ``x0_hat``."""
    x0, x0_hat = np.asarray(x0, dtype=np.float64), np.asarray(x0_hat, dtype=np.float64)
    m = _mask(x0, mask)
    count = m.sum() * x0.shape[-1]
    return np.where(m[..., None], 2.0 * (x0_hat - x0) / count, 0.0)
