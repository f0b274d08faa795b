"""Handle/skinning data model and the handle-driven linear blend deformation."""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rotations import IDENTITY_6D, axis_angle_to_matrix, rot6d_to_matrix
from .validation import ContractError, check_points, check_shape, check_weights

DEFAULT_K = 30
MAX_FRAMES = 196
INACTIVE_EPS = 1e-8


@dataclass(frozen=True)
class HandleSet:
    """Handle positions ``(K, 3)``; handle 0 is the root.

    ``active_mask[k]`` is False when handle ``k`` carries (almost) no skinning
    weight. Such handles sit at the mesh centroid and are ignored by the
    deformation and the losses.
    """

    positions: np.ndarray
    active_mask: np.ndarray

    @property
    def K(self):
        return len(self.positions)


def handle_positions(weights, rest_vertices):
    """Skinning-weighted centroids of the rest vertices, one per handle."""
    V = check_points(rest_vertices, "rest_vertices")
    W = check_weights(weights, n_vertices=len(V))
    mass = W.sum(axis=0)
    active = mass >= INACTIVE_EPS
    pos = np.tile(V.mean(axis=0), (W.shape[1], 1))
    pos[active] = (W[:, active].T @ V) / mass[active, None]
    return HandleSet(pos, active)


def masked_weights(weights, active_mask):
    """Zero inactive columns and renormalize rows to sum to one."""
    W = np.where(active_mask[None, :], weights, 0.0)
    return W / W.sum(axis=1, keepdims=True)


@dataclass
class HandleFrame:
    """One frame of handle motion.

    Attributes:
        local_trans: ``(K, 3)`` per-handle translations.
        local_rot: ``(K, 6)`` per-handle rotations as 6D features.
        global_trans: ``(3,)``.
        global_rot: ``(3,)`` axis-angle, radians.
    """

    local_trans: np.ndarray
    local_rot: np.ndarray
    global_trans: np.ndarray
    global_rot: np.ndarray

    def __post_init__(self):
        self.local_trans = check_shape(self.local_trans, (None, 3), "local_trans")
        K = len(self.local_trans)
        self.local_rot = check_shape(self.local_rot, (K, 6), "local_rot")
        self.global_trans = check_shape(self.global_trans, (3,), "global_trans")
        self.global_rot = check_shape(self.global_rot, (3,), "global_rot")

    @property
    def K(self):
        return len(self.local_trans)

    @classmethod
    def identity(cls, K):
        return cls(np.zeros((K, 3)), np.tile(IDENTITY_6D, (K, 1)), np.zeros(3), np.zeros(3))

    def local_matrices(self):
        return rot6d_to_matrix(self.local_rot)

    def global_matrix(self):
        return axis_angle_to_matrix(self.global_rot)

    def to_vector(self):
        return np.concatenate([self.local_trans.ravel(), self.local_rot.ravel(),
                               self.global_trans, self.global_rot])

    @classmethod
    def from_vector(cls, x, K):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (motion_dim(K),):
            raise ContractError(f"frame vector: expected {motion_dim(K)} values, got {x.shape}")
        a, b = 3 * K, 9 * K
        return cls(x[:a].reshape(K, 3), x[a:b].reshape(K, 6), x[b:b + 3], x[b + 3:b + 6])


def motion_dim(K):
    """Per-frame tensor width: local trans, local 6D rot, global trans, global rot."""
    return 9 * K + 6


@dataclass
class HandleMotion:
    """A sequence of frames plus optional per-frame adaptation ``delta`` ``(N, K, 3)``."""

    frames: list
    delta: np.ndarray = None
    fps: int = 20
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ContractError("HandleMotion needs at least one frame")
        K = self.frames[0].K
        if any(f.K != K for f in self.frames):
            raise ContractError("HandleMotion: frames disagree on K")
        if self.delta is not None:
            self.delta = check_shape(self.delta, (len(self.frames), K, 3), "delta")

    @property
    def K(self):
        return self.frames[0].K

    def __len__(self):
        return len(self.frames)

    def to_tensor(self):
        """``(N, 9K+6)`` array, one row per frame (see ``motion_dim``)."""
        return np.stack([f.to_vector() for f in self.frames])

    @classmethod
    def from_tensor(cls, x, K, delta=None, fps=20, meta=None):
        x = np.asarray(x, dtype=np.float64)
        return cls([HandleFrame.from_vector(row, K) for row in x], delta, fps, dict(meta or {}))

    def adapted_frames(self):
        """Frames with ``delta`` folded into the local translations."""
        if self.delta is None:
            return list(self.frames)
        return [apply_adaptation(f, d) for f, d in zip(self.frames, self.delta)]


def deform(vertices, weights, handles, frame, use_global=True):
    """Drive rest vertices with one frame of handle motion.

    Each vertex is blended over handles as
    ``sum_k w_ik (R_k (v_i - h_k) + t_k + h_k)``, then the global rotation
    (about the origin) and translation are applied. With ``use_global=False``
    only the local part is evaluated.
    """
    if hasattr(vertices, "vertices"):
        vertices = vertices.vertices
    V = check_points(vertices, "vertices")
    W = np.asarray(weights, dtype=np.float64)
    if W.shape != (len(V), frame.K) or handles.K != frame.K:
        raise ContractError(
            f"deform: weights {W.shape}, handles K={handles.K}, frame K={frame.K}, V={len(V)}")
    W = masked_weights(W, handles.active_mask)
    R = frame.local_matrices()
    h = handles.positions
    offsets = frame.local_trans + h - np.einsum("kab,kb->ka", R, h)
    blended_R = np.einsum("ik,kab->iab", W, R)
    out = np.einsum("iab,ib->ia", blended_R, V) + W @ offsets
    if use_global:
        out = out @ frame.global_matrix().T + frame.global_trans
    return out


def handle_trajectory(handles, frames):
    """Positions of the handles themselves under each frame, ``(N, K, 3)``.

    A handle moves as a point rigidly attached to itself, so its local
    rotation drops out: ``Rg (h_k + t_k) + tg``.
    """
    h = handles.positions
    return np.stack([(h + f.local_trans) @ f.global_matrix().T + f.global_trans
                     for f in frames])


def apply_adaptation(frame, delta):
    """Return a copy of ``frame`` with ``delta`` added to its local translations."""
    delta = check_shape(delta, (frame.K, 3), "delta")
    return replace(frame, local_trans=frame.local_trans + delta)


# --- .hmo (JSON) serialization ------------------------------------------------

def motion_to_dict(motion):
    out = {
        "fps": int(motion.fps),
        "K": int(motion.K),
        "frames": [{"t_local": f.local_trans.tolist(), "r_local": f.local_rot.tolist(),
                    "t_global": f.global_trans.tolist(), "r_global": f.global_rot.tolist()}
                   for f in motion.frames],
    }
    if motion.delta is not None:
        out["delta"] = motion.delta.tolist()
    out.update(motion.meta)
    return out


def motion_from_dict(d):
    try:
        frames = [HandleFrame(np.array(f["t_local"]), np.array(f["r_local"]),
                              np.array(f["t_global"]), np.array(f["r_global"]))
                  for f in d["frames"]]
        K = int(d["K"])
    except (KeyError, TypeError) as exc:
        raise ContractError(f".hmo: missing or malformed field {exc}") from None
    if frames and frames[0].K != K:
        raise ContractError(f".hmo: K={K} but frames carry {frames[0].K} handles")
    delta = np.array(d["delta"]) if d.get("delta") is not None else None
    meta = {k: v for k, v in d.items() if k not in ("fps", "K", "frames", "delta")}
    return HandleMotion(frames, delta, int(d.get("fps", 20)), meta)


def save_hmo(motion, path):
    Path(path).write_text(json.dumps(motion_to_dict(motion), indent=1))


def load_hmo(path):
    return motion_from_dict(json.loads(Path(path).read_text()))
