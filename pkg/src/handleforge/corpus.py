"""Synthetic training corpora: characters, their handle motions and training views."""

from dataclasses import dataclass

import numpy as np

from .diffusion import CharacterContext, MotionExample
from .extraction import fit_sequence, skeletal_pose
from .handles import DEFAULT_K, handle_positions
from .losses import derive_adjacency
from .predictor import HandlePredictor
from .synthetic import make_character
from .validation import ContractError, check_random_state


@dataclass
class RiggedCharacter:
    """A synthetic character with handle weights, its feature and extracted motions."""

    character: object
    weights: np.ndarray
    handles: object
    feature: np.ndarray
    posed: list
    motions: list


def ground_truth_weights(rig, n_handles=DEFAULT_K):
    """Joint skinning padded with empty (inactive) handle columns up to ``n_handles``."""
    J = rig.n_joints
    if J > n_handles:
        raise ContractError(f"rig has {J} joints but only {n_handles} handles are available")
    W = np.zeros((len(rig.skinning), n_handles))
    W[:, :J] = rig.skinning
    return W


def rig_character(character, predictor=None, n_handles=DEFAULT_K, feature_seed=0):
    """Attach handles and extract handle motions for every pose sequence.

    With a fitted ``predictor`` its weights and feature are used; otherwise
    the ground-truth skinning is padded to ``n_handles`` and the feature comes
    from an untrained (seeded) predictor.
    """
    mesh, rig = character.mesh, character.rig
    if predictor is not None:
        W, hs, feat = predictor.predict(mesh)
    else:
        W = ground_truth_weights(rig, n_handles)
        hs = handle_positions(W, mesh.vertices)
        feat = HandlePredictor(n_handles=n_handles, random_state=feature_seed).initialize() \
            .predict(mesh)[2]
    posed = [np.stack([skeletal_pose(mesh, rig, p) for p in seq]) for seq in character.sequences]
    motions = []
    for seq, text in zip(posed, character.texts):
        m = fit_sequence(mesh, seq, W, hs)
        m.meta["text"] = text
        motions.append(m)
    return RiggedCharacter(character, W, hs, feat, posed, motions)


def build_corpus(n_characters, seed=0, predictor=None, n_handles=DEFAULT_K, n_sequences=2,
                 n_frames=16, limbs=(2, 6)):
    """Seeded list of ``RiggedCharacter`` with limb counts drawn from ``limbs``."""
    rng = check_random_state(seed)
    out = []
    for _ in range(n_characters):
        c = make_character(int(rng.integers(limbs[0], limbs[1] + 1)),
                           seed=int(rng.integers(2**31)), n_sequences=n_sequences,
                           n_frames=n_frames)
        out.append(rig_character(c, predictor, n_handles, feature_seed=seed))
    return out


def motion_examples(corpus):
    return [MotionExample(m, m.meta["text"], rc.feature) for rc in corpus for m in rc.motions]


def character_contexts(corpus):
    out = []
    for rc in corpus:
        adj = derive_adjacency(rc.character.mesh, rc.weights, rc.handles.active_mask)
        out.append(CharacterContext(rc.character.mesh.vertices, rc.weights, rc.handles.positions,
                                    rc.feature, adj, rc.character.rig.limb_vertices, rc.posed))
    return out


def adaptation_items(corpus):
    """``(mesh, weights, handles, motion)`` tuples for pseudo-label generation."""
    return [(rc.character.mesh, rc.weights, rc.handles, m) for rc in corpus for m in rc.motions]
