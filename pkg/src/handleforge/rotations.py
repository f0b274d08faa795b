"""Rotation parameterizations: continuous 6D features and axis-angle."""

import numpy as np
from scipy.spatial.transform import Rotation

from .validation import ContractError

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class DegenerateRotationError(ContractError):
    def __init__(self, index, message):
        where = "" if index is None else f"handle {index}: "
        super().__init__(f"{where}{message}")
        self.index = index


def rot6d_to_matrix(r, eps=1e-12):
    """Decode 6D features ``(..., 6)`` to rotation matrices ``(..., 3, 3)``.

    The first three values give the first column after normalization, the
    last three are Gram-Schmidt orthogonalized against it to give the second
    column; the third is their cross product.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ContractError(f"rot6d: expected trailing dimension 6, got {r.shape}")
    flat = r.reshape(-1, 6)
    a, b = flat[:, :3], flat[:, 3:]
    na = np.linalg.norm(a, axis=1)
    bad = np.flatnonzero(na < eps)
    if bad.size:
        raise DegenerateRotationError(_index(bad[0], r), "first 6D column is zero")
    b1 = a / na[:, None]
    resid = b - np.sum(b1 * b, axis=1, keepdims=True) * b1
    nr = np.linalg.norm(resid, axis=1)
    bad = np.flatnonzero(nr < eps)
    if bad.size:
        raise DegenerateRotationError(_index(bad[0], r), "6D columns are collinear")
    b2 = resid / nr[:, None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1).reshape(r.shape[:-1] + (3, 3))


def _index(flat_index, r):
    return None if r.ndim == 1 else int(flat_index)


def matrix_to_rot6d(R, atol=1e-4):
    """First two columns of ``R`` flattened column-major, ``(..., 6)``."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ContractError(f"matrix_to_rot6d: expected (..., 3, 3), got {R.shape}")
    check_rotation(R, atol)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def check_rotation(R, atol=1e-4):
    RtR = np.swapaxes(R, -1, -2) @ R
    if not np.allclose(RtR, np.eye(3), atol=atol) or np.any(np.linalg.det(R) < 0):
        raise ContractError("not a rotation matrix (orthonormal with det +1 required)")
    return R


def axis_angle_to_matrix(v):
    """Rodrigues: axis-angle vectors ``(..., 3)`` in radians to matrices."""
    v = np.asarray(v, dtype=np.float64)
    return Rotation.from_rotvec(v.reshape(-1, 3)).as_matrix().reshape(v.shape[:-1] + (3, 3))


def matrix_to_axis_angle(R):
    R = np.asarray(R, dtype=np.float64)
    return Rotation.from_matrix(R.reshape(-1, 3, 3)).as_rotvec().reshape(R.shape[:-2] + (3,))


def random_rotations(n, rng, max_angle=None):
    """``n`` rotations, uniform on SO(3) or with angle uniform in ``[0, max_angle]``."""
    if max_angle is None:
        return Rotation.random(n, random_state=rng).as_matrix()
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0, max_angle, size=(n, 1))
    return axis_angle_to_matrix(axis * angle)
