"""Pseudo-label generation: per-frame adaptation offsets minimizing edge distortion."""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .handles import apply_adaptation, deform, masked_weights
from .losses import edge_length_error, edge_length_error_grad
from .mesh import edge_set
from .validation import ContractError, check_shape

logger = logging.getLogger(__name__)


@dataclass
class AdaptationResult:
    delta: np.ndarray
    trace: list
    edge_error: float


def adaptation_objective(vertices, weights, handles, frame, edges, delta, delta_prev, nu_v):
    deformed = deform(vertices, weights, handles, apply_adaptation(frame, delta))
    return nu_v * edge_length_error(vertices, deformed, edges) + np.sum((delta_prev - delta) ** 2)


def adaptation_gradient(vertices, weights, handles, frame, edges, delta, delta_prev, nu_v):
    """Analytic gradient of the adaptation objective with respect to ``delta``.

    Each vertex moves by ``Rg sum_k w_ik delta_k``, so the edge-term gradient
    is pulled back through the (masked) skinning matrix and global rotation.
    """
    deformed = deform(vertices, weights, handles, apply_adaptation(frame, delta))
    g_vert = edge_length_error_grad(deformed, edges)
    W = masked_weights(np.asarray(weights, dtype=np.float64), handles.active_mask)
    return nu_v * W.T @ (g_vert @ frame.global_matrix()) + 2.0 * (delta - delta_prev)


def optimize_adaptation(vertices, weights, handles, frame, edges=None, init_delta=None,
                        steps=300, lr=1e-2, nu_v=10.0, tol=1e-12):
    """Proximal gradient descent on the adaptation ``delta`` for one frame.

    At each iteration the proximal anchor is the previous iterate, and the
    step length is backtracked until that iteration's objective does not
    increase, so the recorded trace is non-increasing.

    Returns:
        AdaptationResult with the final ``delta`` ``(K, 3)``, the objective
        trace and the final (unweighted) edge-length error.
    """
    if hasattr(vertices, "vertices"):
        if edges is None:
            edges = edge_set(vertices)
        vertices = vertices.vertices
    if edges is None:
        raise ContractError("optimize_adaptation: edges required for raw vertex arrays")
    K = frame.K
    delta = np.zeros((K, 3)) if init_delta is None else check_shape(init_delta, (K, 3), "init_delta").copy()
    # inactive handles do not move any vertex
    free = handles.active_mask[:, None].astype(np.float64)
    args = (vertices, weights, handles, frame, edges)
    value = adaptation_objective(*args, delta, delta, nu_v)
    trace = [float(value)]
    step = lr
    for it in range(steps):
        grad = adaptation_gradient(*args, delta, delta, nu_v) * free
        gnorm2 = float(np.sum(grad ** 2))
        if gnorm2 < tol:
            break
        while True:
            cand = delta - step * grad
            new = adaptation_objective(*args, cand, delta, nu_v)
            if not np.isfinite(new):
                raise ContractError(f"optimize_adaptation: non-finite objective at step {it}")
            if new <= value - 1e-4 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-16:
                break
        if step < 1e-16:
            break
        delta = cand
        value = new
        trace.append(float(value))
        # re-evaluate without the proximal offset for the next anchor
        value = adaptation_objective(*args, delta, delta, nu_v)
        step *= 1.5
    final = deform(vertices, weights, handles, apply_adaptation(frame, delta))
    return AdaptationResult(delta, trace, edge_length_error(vertices, final, edges))


def build_pseudo_labels(dataset, steps=300, lr=1e-2, nu_v=10.0):
    """Pseudo-labels ``(N, K, 3)`` for each ``(mesh, weights, handles, motion)`` item.

    Frames are optimized in order; each starts from the previous frame's
    result (the first from ``motion.delta[0]`` when present).
    """
    labels = []
    for mesh, weights, handles, motion in dataset:
        edges = edge_set(mesh)
        init = None if motion.delta is None else motion.delta[0]
        out = []
        for n, frame in enumerate(motion.frames):
            res = optimize_adaptation(mesh.vertices, weights, handles, frame, edges, init,
                                      steps=steps, lr=lr, nu_v=nu_v)
            out.append(res.delta)
            init = res.delta
        labels.append(np.stack(out))
        logger.debug("pseudo-labels: %d frames, last edge error %.3g", len(out), res.edge_error)
    return labels


class ArapAdapter(BaseEstimator):
    """Estimator wrapper: ``transform`` maps a motion to its pseudo-label adaptation."""

    def __init__(self, steps=300, lr=1e-2, nu_v=10.0):
        self.steps = steps
        self.lr = lr
        self.nu_v = nu_v

    def fit(self, X=None, y=None):
        return self

    def transform(self, mesh, weights, handles, motion):
        return build_pseudo_labels([(mesh, weights, handles, motion)],
                                   self.steps, self.lr, self.nu_v)[0]
