"""Recover handle motion from posed meshes, and skeletal LBS for synthetic rigs."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .handles import HandleFrame, HandleMotion
from .rotations import axis_angle_to_matrix, matrix_to_axis_angle, matrix_to_rot6d
from .validation import ContractError, check_points, check_shape, check_weights


class ProcrustesError(ContractError):
    def __init__(self, handle, message):
        super().__init__(f"handle {handle}: {message}")
        self.handle = handle


@dataclass
class Pose:
    """Per-joint local rotations (axis-angle, ``(J, 3)``) and a root translation."""

    rotations: np.ndarray
    root_trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = check_shape(self.rotations, (None, 3), "pose.rotations")
        self.root_trans = check_shape(self.root_trans, (3,), "pose.root_trans")

    @classmethod
    def zero(cls, J):
        return cls(np.zeros((J, 3)))


@dataclass
class SyntheticRig:
    """An articulated skeleton with ground-truth skinning for one mesh.

    Attributes:
        joints: ``(J, 3)`` rest joint positions; joint 0 is the root (hip).
        parents: parent index per joint, ``-1`` for the root.
        skinning: ``(V, J)`` row-stochastic skeletal weights.
        limb_vertices: indices of vertices on limbs (adversarial samples).
        poses: named poses.
    """

    joints: np.ndarray
    parents: np.ndarray
    skinning: np.ndarray
    limb_vertices: np.ndarray = None
    poses: dict = field(default_factory=dict)

    def __post_init__(self):
        self.joints = check_points(self.joints, "joints")
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.skinning = check_weights(self.skinning)
        J = len(self.joints)
        if self.parents.shape != (J,) or self.skinning.shape[1] != J:
            raise ContractError("rig: joints, parents and skinning disagree on J")
        self.order = _topological_order(self.parents)
        if self.limb_vertices is None:
            self.limb_vertices = np.arange(len(self.skinning))
        self.limb_vertices = np.asarray(self.limb_vertices, dtype=np.int64)

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def root(self):
        return self.joints[0]

    def part_labels(self, threshold=0.9):
        """Dominant joint per vertex where its weight exceeds ``threshold``, else -1."""
        best = self.skinning.argmax(axis=1)
        dominant = self.skinning.max(axis=1) > threshold
        return np.where(dominant, best, -1)


def _topological_order(parents):
    """Joints sorted by depth; rejects forests and cycles."""
    J = len(parents)
    if J == 0 or parents[0] != -1:
        raise ContractError("rig: joint 0 must be the root (parent -1)")
    depth = np.zeros(J, dtype=np.int64)
    for j in range(1, J):
        k, steps = j, 0
        while k != 0:
            parent = parents[k]
            if parent == -1:
                raise ContractError(f"rig: joint {k} is a second root")
            if not 0 <= parent < J:
                raise ContractError(f"rig: joint {k} has invalid parent {parent}")
            k, steps = parent, steps + 1
            if steps > J:
                raise ContractError(f"rig: cyclic parent graph through joint {j}")
        depth[j] = steps
    return np.argsort(depth, kind="stable")


def joint_transforms(rig, pose):
    """World rotation ``(J, 3, 3)`` and posed position ``(J, 3)`` of every joint."""
    if pose.rotations.shape[0] != rig.n_joints:
        raise ContractError("pose: rotation count does not match the rig")
    local = axis_angle_to_matrix(pose.rotations)
    G = np.empty_like(local)
    p = np.empty_like(rig.joints)
    for j in rig.order:
        parent = rig.parents[j]
        if parent < 0:
            G[j] = local[j]
            p[j] = rig.joints[j] + pose.root_trans
        else:
            G[j] = G[parent] @ local[j]
            p[j] = G[parent] @ (rig.joints[j] - rig.joints[parent]) + p[parent]
    return G, p


def skeletal_pose(vertices, rig, pose=None):
    """Forward kinematics followed by linear blend skinning of ``vertices``."""
    if hasattr(vertices, "vertices"):
        vertices = vertices.vertices
    V = check_points(vertices, "vertices", n_rows=len(rig.skinning))
    if pose is None:
        pose = Pose.zero(rig.n_joints)
    G, p = joint_transforms(rig, pose)
    offsets = p - np.einsum("jab,jb->ja", G, rig.joints)
    blended = np.einsum("ij,jab->iab", rig.skinning, G)
    return np.einsum("iab,ib->ia", blended, V) + rig.skinning @ offsets


def weighted_procrustes(X, Y, w, handle=None, rank_tol=1e-9, support_eps=1e-6):
    """Rigid ``(R, t)`` minimizing ``sum_i w_i |R x_i + t - y_i|^2``.

    Kabsch on the weighted cross-covariance with reflection correction.
    Raises ``ProcrustesError`` when the weighted support is collinear.
    """
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ProcrustesError(handle, "no weighted support")
    cx = w @ X / total
    cy = w @ Y / total
    Xc, Yc = X - cx, Y - cy
    support = w > support_eps
    if support.sum() < 3:
        raise ProcrustesError(handle, "fewer than 3 supporting vertices")
    spread = np.linalg.svd(Xc[support] - Xc[support].mean(axis=0), compute_uv=False)
    if spread[0] == 0 or spread[1] <= rank_tol * spread[0]:
        raise ProcrustesError(handle, "support is collinear (rank-deficient covariance)")
    H = (w[:, None] * Xc).T @ Yc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, cy - R @ cx


def fit_frame(rest, posed, weights, handles, local_only=False):
    """Analytic handle motion taking ``rest`` to ``posed``.

    Unless ``local_only``, a single rigid transform over all vertices is fit
    first and factored out as the global rotation/translation. Each active
    handle then gets a weighted Procrustes fit about its own position, with
    the skinning column as weights.
    """
    if hasattr(rest, "vertices"):
        rest = rest.vertices
    rest = check_points(rest, "rest")
    posed = check_points(posed, "posed", n_rows=len(rest))
    W = np.asarray(weights, dtype=np.float64)
    K = handles.K
    frame = HandleFrame.identity(K)
    target = posed
    if not local_only:
        Rg, tg = weighted_procrustes(rest, posed, np.ones(len(rest)), handle="global")
        frame.global_rot = matrix_to_axis_angle(Rg)
        frame.global_trans = tg
        # exact inverse of the global map applied in deform
        target = (posed - tg) @ axis_angle_to_matrix(frame.global_rot)
    for k in np.flatnonzero(handles.active_mask):
        h = handles.positions[k]
        R, t = weighted_procrustes(rest - h, target - h, W[:, k], handle=int(k))
        frame.local_rot[k] = matrix_to_rot6d(R)
        frame.local_trans[k] = t
    return frame


def fit_sequence(rest, posed_seq, weights, handles, local_only=False, fps=20):
    """``fit_frame`` on every posed mesh; failures are reported with frame indices."""
    frames, errors = [], []
    for n, posed in enumerate(posed_seq):
        try:
            frames.append(fit_frame(rest, posed, weights, handles, local_only))
        except ContractError as exc:
            errors.append(f"frame {n}: {exc}")
    if errors:
        raise ContractError("fit_sequence failed; " + "; ".join(errors))
    return HandleMotion(frames, fps=fps)


# --- .rig (JSON) serialization ------------------------------------------------

def rig_to_dict(rig):
    return {
        "joints": rig.joints.tolist(),
        "parents": rig.parents.tolist(),
        "skinning": rig.skinning.tolist(),
        "limb_vertices": rig.limb_vertices.tolist(),
        "poses": {name: [{"rotations": p.rotations.tolist(), "root_trans": p.root_trans.tolist()}
                         for p in seq] for name, seq in rig.poses.items()},
    }


def rig_from_dict(d):
    try:
        poses = {name: [Pose(np.array(p["rotations"]), np.array(p["root_trans"])) for p in seq]
                 for name, seq in d.get("poses", {}).items()}
        return SyntheticRig(np.array(d["joints"]), np.array(d["parents"]),
                            np.array(d["skinning"]), d.get("limb_vertices"), poses)
    except KeyError as exc:
        raise ContractError(f".rig: missing field {exc}") from None


def save_rig(rig, path):
    Path(path).write_text(json.dumps(rig_to_dict(rig)))


def load_rig(path):
    return rig_from_dict(json.loads(Path(path).read_text()))
