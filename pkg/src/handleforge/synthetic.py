"""Procedural tube-limb characters with skeletons, skinning and pose sequences."""

from dataclasses import dataclass, field

import numpy as np

from .extraction import Pose, SyntheticRig
from .mesh import Mesh
from .validation import ContractError, check_random_state

ORDINALS = ["first", "second", "third", "fourth", "fifth", "sixth"]
VERBS = ["waves", "swings", "raises", "shakes"]
SPEEDS = ["slowly", "quickly"]


@dataclass
class SyntheticCharacter:
    mesh: Mesh
    rig: SyntheticRig
    sequences: list = field(default_factory=list)
    texts: list = field(default_factory=list)
    limb_chains: list = field(default_factory=list)


def _frame(axis):
    d = axis / np.linalg.norm(axis)
    ref = np.array([1.0, 0, 0]) if abs(d[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    return d, u, np.cross(d, u)


def tube(p0, p1, radius, rings, around):
    """Closed cylinder from ``p0`` to ``p1``: ring vertices plus two cap centers.

    Returns ``(vertices, faces, s)`` where ``s`` is each vertex's arc-length
    parameter measured from ``p0``.
    """
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d, u, v = _frame(p1 - p0)
    length = np.linalg.norm(p1 - p0)
    theta = np.linspace(0, 2 * np.pi, around, endpoint=False)
    ts = np.linspace(0, 1, rings)
    verts, s = [], []
    for t in ts:
        c = p0 + t * (p1 - p0)
        for a in theta:
            verts.append(c + radius * (np.cos(a) * u + np.sin(a) * v))
            s.append(t * length)
    verts += [p0, p1]
    s += [0.0, length]
    faces = []
    for r in range(rings - 1):
        for a in range(around):
            i0 = r * around + a
            i1 = r * around + (a + 1) % around
            j0, j1 = i0 + around, i1 + around
            faces += [(i0, i1, j1), (i0, j1, j0)]
    bottom, top = rings * around, rings * around + 1
    last = (rings - 1) * around
    for a in range(around):
        faces.append((bottom, (a + 1) % around, a))
        faces.append((top, last + a, last + (a + 1) % around))
    return np.array(verts), np.array(faces), np.array(s)


def _ramp(s, center, half_width):
    if half_width <= 0:
        return (s >= center).astype(float)
    x = np.clip((s - (center - half_width)) / (2 * half_width), 0.0, 1.0)
    return x * x * (3 - 2 * x)


def make_character(n_limbs=4, seed=None, rings=6, around=6, blend=0.15,
                   n_sequences=2, n_frames=16):
    """Build a seeded tube-limb character.

    Joints: 0 = hip (root), 1 = chest, then a (shoulder, elbow) pair per limb.
    Even limbs hang from the chest, odd limbs from the hip. ``blend`` is the
    half-width of the skinning transition around each internal joint as a
    fraction of segment length; 0 gives one-hot skinning.
    """
    if not 2 <= n_limbs <= 6:
        raise ContractError("n_limbs must be between 2 and 6")
    rng = check_random_state(seed)
    torso_len = rng.uniform(0.8, 1.2)
    torso_r = rng.uniform(0.12, 0.2)
    hip = np.array([0.0, 0.0, 0.0])
    chest = hip + [0.0, 0.5 * torso_len, 0.0]
    top = hip + [0.0, torso_len, 0.0]

    joints = [hip, chest]
    parents = [-1, 0]
    verts, faces, weight_blocks, limb_vertices, chains = [], [], [], [], []
    offset = 0

    def add_part(v, f, joint_ids, s, seg_len):
        nonlocal offset
        W = np.zeros((len(v), 2))
        w1 = _ramp(s, seg_len, blend * seg_len)
        W[:, 0], W[:, 1] = 1 - w1, w1
        verts.append(v)
        faces.append(f + offset)
        weight_blocks.append((offset, joint_ids, W))
        idx = np.arange(offset, offset + len(v))
        offset += len(v)
        return idx

    # the hip segment extends below the hip joint, like a pelvis around its root
    v, f, s = tube(hip - [0, 0.5 * torso_len, 0], top, torso_r, rings + 4, around)
    add_part(v, f, (0, 1), s, torso_len)

    arms = []
    for i in range(n_limbs):
        angle = np.pi * (i // 2) / max(1, (n_limbs - 1) // 2) + (0 if i % 2 == 0 else np.pi / 3)
        side = 1 if (i // 2) % 2 == 0 else -1
        out = np.array([side * np.cos(angle * 0.5), 0.0, np.sin(angle * 0.5)])
        out /= np.linalg.norm(out)
        if i % 2 == 0:
            base, parent = chest + [0, 0.35 * torso_len, 0], 1
            direction = out + [0, -0.2, 0]
        else:
            base, parent = hip, 0
            direction = 0.5 * out + [0, -1.0, 0]
        direction /= np.linalg.norm(direction)
        upper, lower = rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5)
        radius = rng.uniform(0.05, 0.09)
        shoulder = base + (torso_r + radius) * out
        elbow = shoulder + upper * direction
        end = elbow + lower * direction
        js = len(joints)
        joints += [shoulder, elbow]
        parents += [parent, js]
        v, f, s = tube(shoulder, end, radius, 2 * rings, around)
        idx = add_part(v, f, (js, js + 1), s, upper)
        limb_vertices.append(idx)
        chains.append((js, js + 1))
        if i % 2 == 0:
            arms.append(idx)

    V = np.vstack(verts)
    J = len(joints)
    skin = np.zeros((len(V), J))
    for start, (a, b), W in weight_blocks:
        skin[start:start + len(W), a] += W[:, 0]
        skin[start:start + len(W), b] += W[:, 1]
    limb = np.concatenate(arms if arms else limb_vertices)
    joints = np.array(joints)
    # root pivot at the skinning-weighted centroid of its own segment
    joints[0] = skin[:, 0] @ V / skin[:, 0].sum()
    rig = SyntheticRig(joints, np.array(parents), skin, limb)
    mesh = Mesh(V, np.vstack(faces))

    sequences, texts = [], []
    for _ in range(n_sequences):
        lead = int(rng.integers(n_limbs))
        sequences.append(pose_sequence(rig, n_frames, rng, lead_joints=chains[lead]))
        texts.append(f"a character {VERBS[rng.integers(len(VERBS))]} its {ORDINALS[lead]} limb "
                     f"{SPEEDS[rng.integers(len(SPEEDS))]}")
    rig.poses = {f"seq{k}": seq for k, seq in enumerate(sequences)}
    return SyntheticCharacter(mesh, rig, sequences, texts, chains)


def pose_sequence(rig, n_frames, seed=None, amplitude=0.6, lead_joints=(), root_motion=0.1):
    """Sinusoidal joint angles about fixed random axes; ``lead_joints`` swing harder."""
    rng = check_random_state(seed)
    J = rig.n_joints
    axes = rng.normal(size=(J, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    amp = rng.uniform(0.2, 1.0, size=J) * amplitude
    amp[list(lead_joints)] *= 2.0
    amp[0] *= 0.3
    freq = rng.uniform(0.5, 1.5, size=J)
    phase = rng.uniform(0, 2 * np.pi, size=J)
    t = np.linspace(0, 2 * np.pi, n_frames, endpoint=False)
    root_dir = rng.normal(size=3)
    poses = []
    for tn in t:
        angles = amp * np.sin(freq * tn + phase)
        poses.append(Pose(axes * angles[:, None], root_motion * np.sin(tn) * root_dir))
    return poses


def random_pose(rig, seed=None, amplitude=0.6):
    rng = check_random_state(seed)
    rot = rng.normal(size=(rig.n_joints, 3)) * amplitude / np.sqrt(3)
    rot[0] *= 0.3
    return Pose(rot)
