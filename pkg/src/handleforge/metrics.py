"""Geometry-quality metrics: edge-length distortion and Handle-FID."""

import csv
import io
import json

import numpy as np

from .losses import edge_length_error
from .validation import ContractError


def arap_loss_metric(rest, animated, edges):
    """Mean squared edge-length change, averaged over frames and edges.

    Absolute values depend on this normalization and on mesh scale; compare
    orderings between methods, not magnitudes across datasets.
    """
    V0 = rest.vertices if hasattr(rest, "vertices") else np.asarray(rest, dtype=np.float64)
    frames = [np.asarray(f, dtype=np.float64) for f in animated]
    if not frames or len(edges) == 0:
        raise ContractError("arap_loss_metric: need at least one frame and one edge")
    total = sum(edge_length_error(V0, f, edges) for f in frames)
    return total / (len(frames) * len(edges))


def _psd_sqrt(S):
    w, Q = np.linalg.eigh((S + S.T) / 2)
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


def frechet_distance(mu1, cov1, mu2, cov2):
    """Frechet distance between two Gaussians."""
    r1 = _psd_sqrt(cov1)
    cross = _psd_sqrt(r1 @ cov2 @ r1)
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(cross))


def handle_fid(real_trajs, gen_trajs):
    """Frechet distance between Gaussian fits of two handle-position sets.

    Each sample (e.g. one frame's ``(K, 3)`` handle positions) is flattened
    to a vector; 1-D inputs are treated as scalar samples.
    """
    a = _samples(real_trajs)
    b = _samples(gen_trajs)
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"handle_fid: sample dims differ ({a.shape[1]} vs {b.shape[1]})")
    if len(a) < 2 or len(b) < 2:
        raise ContractError("handle_fid: need at least 2 samples per side")
    cov = lambda x: np.atleast_2d(np.cov(x, rowvar=False))
    return max(frechet_distance(a.mean(0), cov(a), b.mean(0), cov(b)), 0.0)


def _samples(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x.reshape(len(x), -1)


def report(results, fmt="json"):
    """Serialize a flat metrics dict as JSON or a one-row CSV."""
    if fmt == "json":
        return json.dumps(results, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=sorted(results))
        writer.writeheader()
        writer.writerow(results)
        return buf.getvalue()
    raise ContractError(f"report: unknown format {fmt!r}")
