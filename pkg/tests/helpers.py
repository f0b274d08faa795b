"""Random instance builders shared by the test modules."""

import math

import numpy as np

from handleforge.handles import HandleFrame, handle_positions
from handleforge.mesh import Mesh
from handleforge.rotations import matrix_to_rot6d, random_rotations


def random_weights(rng, V, K, sharpness=1.0):
    logits = rng.normal(size=(V, K)) * sharpness
    W = np.exp(logits - logits.max(axis=1, keepdims=True))
    return W / W.sum(axis=1, keepdims=True)


def random_frame(rng, K, max_angle=np.pi, trans_scale=0.5, with_global=True):
    R = random_rotations(K, rng, max_angle=max_angle)
    frame = HandleFrame(rng.normal(size=(K, 3)) * trans_scale, matrix_to_rot6d(R),
                        np.zeros(3), np.zeros(3))
    if with_global:
        frame.global_trans = rng.normal(size=3)
        frame.global_rot = rng.normal(size=3)
    return frame


def random_mesh(rng, V):
    """Random point cloud with a fan of faces over consecutive vertices."""
    verts = rng.normal(size=(V, 3))
    faces = np.array([(0, i, i + 1) for i in range(1, V - 1)])
    return Mesh(verts, faces)


def one_hot_split(mesh, K):
    """One-hot weights assigning vertices to K slabs along x (each slab non-degenerate)."""
    order = np.argsort(mesh.vertices[:, 0])
    W = np.zeros((mesh.n_vertices, K))
    for k, chunk in enumerate(np.array_split(order, K)):
        W[chunk, k] = 1.0
    return W, handle_positions(W, mesh.vertices)


def naive_deform(vertices, weights, handle_pos, frame, use_global=True):
    """Straight per-vertex, per-handle loop transcription of the blend formula."""
    R_local = frame.local_matrices()
    theta = math.sqrt(sum(c * c for c in frame.global_rot))
    if theta > 0:
        kx, ky, kz = (c / theta for c in frame.global_rot)
        Kx = [[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]]
        Rg = [[(1.0 if a == b else 0.0) + math.sin(theta) * Kx[a][b]
               + (1 - math.cos(theta)) * sum(Kx[a][c] * Kx[c][b] for c in range(3))
               for b in range(3)] for a in range(3)]
    else:
        Rg = [[1.0 if a == b else 0.0 for b in range(3)] for a in range(3)]
    out = np.zeros((len(vertices), 3))
    for i in range(len(vertices)):
        acc = [0.0, 0.0, 0.0]
        for k in range(len(handle_pos)):
            s = weights[i][k]
            rel = [vertices[i][c] - handle_pos[k][c] for c in range(3)]
            for a in range(3):
                rot = sum(R_local[k][a][b] * rel[b] for b in range(3))
                acc[a] += s * (rot + frame.local_trans[k][a] + handle_pos[k][a])
        for a in range(3):
            if use_global:
                out[i][a] = sum(Rg[a][b] * acc[b] for b in range(3)) + frame.global_trans[a]
            else:
                out[i][a] = acc[a]
    return out
