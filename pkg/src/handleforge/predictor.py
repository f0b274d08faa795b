"""Mesh handle predictor: a graph-convolutional encoder with a softmax skinning head."""

import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import torch_ops as T
from .checkpoint import load_checkpoint, save_checkpoint
from .extraction import skeletal_pose
from .handles import DEFAULT_K, handle_positions
from .losses import part_labels, sample_pairs
from .mesh import normalized_adjacency
from .synthetic import random_pose
from .validation import ContractError, check_random_state

logger = logging.getLogger(__name__)

FEATURE_DIM = 512


class GraphConv(torch.nn.Module):
    """``relu(A_hat X W + b)`` with a precomputed normalized adjacency."""

    def __init__(self, n_in, n_out):
        super().__init__()
        self.lin = torch.nn.Linear(n_in, n_out, bias=False)
        self.bias = torch.nn.Parameter(torch.zeros(n_out))

    def forward(self, X, A):
        return torch.relu(A @ self.lin(X) + self.bias)


class HandleNet(torch.nn.Module):
    def __init__(self, n_handles, hidden=64, feature_dim=FEATURE_DIM, in_dim=6):
        super().__init__()
        self.gcn = torch.nn.ModuleList([GraphConv(in_dim, hidden), GraphConv(hidden, hidden),
                                        GraphConv(hidden, hidden)])
        self.head = torch.nn.Sequential(
            torch.nn.Linear(hidden, hidden), torch.nn.ReLU(),
            torch.nn.Linear(hidden, hidden), torch.nn.ReLU(),
            torch.nn.Linear(hidden, n_handles))
        self.feature = torch.nn.Linear(hidden, feature_dim)

    def forward(self, X, A):
        for layer in self.gcn:
            X = layer(X, A)
        weights = torch.softmax(self.head(X), dim=-1)
        return weights, self.feature(X.mean(dim=0))


class _MeshData:
    """Tensors derived once per training mesh."""

    def __init__(self, mesh, rig=None):
        self.mesh = mesh
        self.rig = rig
        self.X = T.as_tensor(mesh.features())
        self.A = T.as_tensor(normalized_adjacency(mesh))
        self.V = T.as_tensor(mesh.vertices)
        if rig is not None:
            self.labels = part_labels(rig.skinning)
            self.root = T.as_tensor(rig.root)


class HandlePredictor(BaseEstimator, TransformerMixin):
    """Predicts skinning weights, handle positions and a mesh feature.

    ``fit`` takes a list of ``(Mesh, SyntheticRig)`` pairs and minimizes the
    skinning + pose + root objective with Adam. The first ``pose_warmup``
    steps optimize the pose term alone, which spreads vertices over more
    handles before the skinning and root terms start to sharpen them. ``predict`` returns
    ``(weights, HandleSet, feature)`` for one mesh; ``transform`` stacks the
    512-d features of several meshes.
    """

    def __init__(self, n_handles=DEFAULT_K, hidden=64, learning_rate=1e-4, n_steps=1000,
                 batch_size=4, n_pairs=1024, nu_p=1.0, nu_r=0.1, pose_amplitude=0.6, n_poses=1,
                 pose_warmup=0, grad_clip=10.0, random_state=0):
        self.n_handles = n_handles
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.n_pairs = n_pairs
        self.nu_p = nu_p
        self.nu_r = nu_r
        self.pose_amplitude = pose_amplitude
        self.n_poses = n_poses
        self.pose_warmup = pose_warmup
        self.grad_clip = grad_clip
        self.random_state = random_state

    # --- construction -------------------------------------------------------

    def _init_net(self):
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(int(self.random_state or 0))
        try:
            net = HandleNet(self.n_handles, self.hidden).double()
        finally:
            torch.random.set_rng_state(gen_state)
        return net

    def initialize(self):
        """Create untrained parameters (what ``fit`` starts from)."""
        self.net_ = self._init_net()
        self.loss_history_ = []
        return self

    # --- objective ----------------------------------------------------------

    def _terms(self, data, rng):
        W, _ = self.net_(data.X, data.A)
        i, j, gamma = sample_pairs(data.labels, self.n_pairs, rng)
        l_s = T.skinning_loss(W, torch.as_tensor(i), torch.as_tensor(j),
                              torch.as_tensor(gamma, dtype=torch.float64))
        l_p = 0.0
        for _ in range(self.n_poses):
            pose = random_pose(data.rig, rng, self.pose_amplitude)
            target = T.as_tensor(skeletal_pose(data.mesh, data.rig, pose))
            l_p = l_p + T.pose_loss(data.V, target, W) / self.n_poses
        l_r = T.root_loss(W, data.V, data.root)
        return l_s, l_p, l_r

    def objective_terms(self, dataset, seed=0, pose_only=False):
        """Differentiable batch-mean objective and its parts for a fixed draw.

        The same ``seed`` always draws the same vertex pairs and poses, so
        this is a deterministic function of the parameters.
        """
        rng = check_random_state(seed)
        items = [d if isinstance(d, _MeshData) else _MeshData(*d) for d in dataset]
        parts = [self._terms(d, rng) for d in items]
        l_s = sum(p[0] for p in parts) / len(parts)
        l_p = sum(p[1] for p in parts) / len(parts)
        l_r = sum(p[2] for p in parts) / len(parts)
        if pose_only:
            total = self.nu_p * l_p
        else:
            total = l_s + self.nu_p * l_p + self.nu_r * l_r
        return total, {"skinning": l_s, "pose": l_p, "root": l_r}

    def objective(self, dataset, seed=0):
        with torch.no_grad():
            total, parts = self.objective_terms(dataset, seed)
        return float(total), {k: float(v) for k, v in parts.items()}

    # --- estimator API --------------------------------------------------------

    def fit(self, X, y=None):
        """Train on ``X``, a list of ``(Mesh, SyntheticRig)`` pairs."""
        if not X:
            raise ContractError("HandlePredictor.fit: empty dataset")
        for mesh, rig in X:
            if mesh.n_vertices < self.n_handles:
                raise ContractError(
                    f"mesh has {mesh.n_vertices} vertices, fewer than K={self.n_handles}")
            if len(rig.skinning) != mesh.n_vertices:
                raise ContractError("rig skinning does not match mesh vertex count")
        self.initialize()
        data = [_MeshData(m, r) for m, r in X]
        rng = check_random_state(self.random_state)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        for step in range(self.n_steps):
            batch = [data[k] for k in rng.choice(len(data), size=min(self.batch_size, len(data)),
                                                 replace=False)]
            total, parts = self.objective_terms(batch, rng, pose_only=step < self.pose_warmup)
            if not torch.isfinite(total):
                raise FloatingPointError(
                    f"predictor training diverged at step {step}: "
                    + ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items()))
            opt.zero_grad()
            total.backward()
            if self.grad_clip:
                torch.nn.utils.clip_grad_norm_(self.net_.parameters(), self.grad_clip)
            opt.step()
            self.loss_history_.append(
                {"total": total.item(), **{k: v.item() for k, v in parts.items()}})
            if step % 100 == 0:
                logger.info("predictor step %d loss %.5f", step, total.item())
        return self

    def predict(self, mesh):
        """Return ``(weights (V, K), HandleSet, feature (512,))``."""
        check_is_fitted(self, "net_")
        if mesh.n_vertices < self.n_handles:
            raise ContractError(f"mesh has {mesh.n_vertices} vertices, fewer than K={self.n_handles}")
        d = _MeshData(mesh)
        with torch.no_grad():
            W, f = self.net_(d.X, d.A)
        W = W.numpy()
        return W, handle_positions(W, mesh.vertices), f.numpy()

    def transform(self, X):
        """Mesh features, one row per mesh in ``X``."""
        return np.stack([self.predict(m)[2] for m in X])

    # --- persistence ----------------------------------------------------------

    def state_arrays(self):
        return {k: v.detach().numpy().copy() for k, v in self.net_.state_dict().items()}

    def save(self, path):
        check_is_fitted(self, "net_")
        save_checkpoint(path, self.state_arrays(), kind="predictor",
                        seed=self.random_state, config=self.get_params())

    @classmethod
    def load(cls, path):
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "predictor":
            raise ContractError(f"{path}: not a predictor checkpoint")
        est = cls(**meta["config"]).initialize()
        est.net_.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
        return est


def dominant_part_accuracy(weights, labels):
    """Purity of argmax handle assignment against ground-truth parts.

    Each handle is mapped to the part most of its dominant vertices carry;
    the score is the fraction of labeled vertices whose handle maps to their
    own part.
    """
    labels = np.asarray(labels)
    keep = labels >= 0
    owner = np.asarray(weights).argmax(axis=1)[keep]
    truth = labels[keep]
    correct = 0
    for k in np.unique(owner):
        counts = np.bincount(truth[owner == k])
        correct += counts.max()
    return correct / len(truth)
