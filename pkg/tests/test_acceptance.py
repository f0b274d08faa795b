"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a one-line PASS/FAIL verdict (with the measured numbers
and wall time) that ``conftest.py`` prints in the terminal summary. Run
``python3 tests/test_acceptance.py`` to execute them outside pytest.
"""

import functools
import time

import numpy as np
import pytest
import torch

from handleforge import losses as L
from handleforge.arap import build_pseudo_labels
from handleforge.cli import main as cli_main
from handleforge.checkpoint import file_digest
from handleforge.corpus import adaptation_items, build_corpus, character_contexts, motion_examples
from handleforge.diffusion import MotionDiffusion, _batch, ancestral_sample, make_schedule, q_sample
from handleforge.extraction import fit_frame, fit_sequence, skeletal_pose
from handleforge.gradcheck import central_difference, relative_error
from handleforge.handles import HandleFrame, apply_adaptation, deform, handle_positions
from handleforge.mesh import EdgeSet, edge_set, icosphere, save_obj, unit_cube
from handleforge.metrics import arap_loss_metric, handle_fid
from handleforge.predictor import HandlePredictor, dominant_part_accuracy
from handleforge.rotations import random_rotations
from handleforge.synthetic import make_character

from helpers import naive_deform, one_hot_split, random_frame, random_mesh, random_weights
from test_diffusion import make_example

RESULTS = {}


def criterion(number, title, budget):
    """Time the wrapped check, enforce its budget and record a verdict line."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            verdict, detail = "FAIL", ""
            try:
                detail = fn(*args, **kwargs) or ""
                elapsed = time.perf_counter() - start
                assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
                verdict = "PASS"
            except Exception as err:
                detail = str(err).splitlines()[0] if str(err) else type(err).__name__
                raise
            finally:
                elapsed = time.perf_counter() - start
                RESULTS[number] = f"[{verdict}] criterion {number} {title}: {detail} ({elapsed:.1f}s)"
                print(RESULTS[number])
        return run

    return wrap


def rigid(points, R, t):
    return points @ R.T + t


# --- 1 ----------------------------------------------------------------------------

@criterion(1, "deformation oracle", budget=5)
def test_deformation_matches_transcription():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        V, K = int(rng.integers(8, 51)), int(rng.integers(1, 9))
        m = random_mesh(rng, V)
        W = random_weights(rng, V, K, sharpness=2.0)
        hs = handle_positions(W, m.vertices)
        f = random_frame(rng, K)
        worst = max(worst, np.abs(deform(m, W, hs, f) - naive_deform(m.vertices, W, hs.positions, f)).max())
        ident = deform(m, W, hs, HandleFrame.identity(K))
        worst = max(worst, np.abs(ident - m.vertices).max())
    assert worst < 1e-10, f"max deviation {worst:.2e}"
    return f"max deviation {worst:.2e} over 100 instances"


# --- 2 ----------------------------------------------------------------------------

@criterion(2, "Procrustes round trip", budget=10)
def test_procrustes_round_trip():
    rng = np.random.default_rng(2)
    m = icosphere(2)
    worst_r = worst_t = 0.0
    beaten = 0
    trials = 20
    for _ in range(trials):
        K = int(rng.integers(1, 6))
        W, hs = one_hot_split(m, K)
        f = random_frame(rng, K, with_global=False)
        fitted = fit_frame(m, deform(m, W, hs, f), W, hs, local_only=True)
        worst_r = max(worst_r, np.linalg.norm(fitted.local_matrices() - f.local_matrices(), axis=(1, 2)).max())
        worst_t = max(worst_t, np.abs(fitted.local_trans - f.local_trans).max())
        # weighted residual of handle 0 against a noisy target
        target = deform(m, W, hs, f) + rng.normal(size=m.vertices.shape) * 0.02
        R_fit = fit_frame(m, target, W, hs, local_only=True).local_matrices()[0]
        w, h = W[:, 0], hs.positions[0]
        X, Y = m.vertices - h, target - h

        def residual(R):
            t = (w @ (Y - X @ R.T)) / w.sum()
            return np.sum(w * np.sum((X @ R.T + t - Y) ** 2, axis=1))

        best = residual(R_fit)
        beaten += all(best <= residual(R) for R in random_rotations(100, rng))
    assert worst_r < 1e-6 and worst_t < 1e-6, f"rotation {worst_r:.2e}, translation {worst_t:.2e}"
    assert beaten == trials, f"fit beaten by a random rotation in {trials - beaten} trials"
    return f"rotation err {worst_r:.1e}, translation err {worst_t:.1e}, optimal in {beaten}/{trials}"


# --- 3 ----------------------------------------------------------------------------

def _param_fd(objective, params, rng, n=6):
    """Worst relative error between autograd and central differences on sampled entries."""
    worst = 0.0
    for name, p in params:
        flat = p.detach().numpy().reshape(-1).copy()
        idx = rng.choice(flat.size, size=min(n, flat.size), replace=False)

        def f(v, p=p):
            with torch.no_grad():
                old = p.detach().clone()
                p.copy_(torch.as_tensor(v.reshape(p.shape)))
                out = objective()
                p.copy_(old)
            return out

        fd = central_difference(f, flat, eps=1e-6, indices=idx)
        worst = max(worst, relative_error(p.grad.numpy().reshape(-1)[idx], fd[idx]))
    return worst


@criterion(3, "gradient suite", budget=60)
def test_gradient_suite():
    rng = np.random.default_rng(3)
    errs = {}
    # root loss w.r.t. weights
    V0 = rng.normal(size=(12, 3))
    W = random_weights(rng, 12, 4)
    root = rng.normal(size=3)
    dW, droot = L.root_loss_grad(W, V0, root)
    errs["root"] = max(relative_error(dW, central_difference(lambda x: L.root_loss(x, V0, root), W)),
                       relative_error(droot, central_difference(lambda x: L.root_loss(W, V0, x), root)))
    # spring loss w.r.t. handle trajectories
    traj = rng.normal(size=(5, 4, 3))
    pairs = [(0, 1), (1, 2), (2, 3), (0, 3)]
    errs["spring"] = relative_error(L.spring_loss_grad(traj, pairs, sigma=0.3),
                                    central_difference(lambda x: L.spring_loss(x, pairs, sigma=0.3), traj))
    # ARAP objective w.r.t. positions and adaptation
    m = icosphere(1)
    e = edge_set(m)
    X = m.vertices + rng.normal(size=m.vertices.shape) * 0.1
    d, dp = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    gX, gd = L.arap_objective_grad(X, e, d, dp, nu_v=2.0)
    errs["arap_x"] = relative_error(gX, central_difference(
        lambda x: L.arap_objective(m.vertices, x, e, d, dp, nu_v=2.0), X))
    errs["arap_delta"] = relative_error(gd, central_difference(
        lambda z: L.arap_objective(m.vertices, X, e, z, dp, nu_v=2.0), d))
    # motion loss w.r.t. the prediction
    x0, xh = rng.normal(size=(3, 6, 24)), rng.normal(size=(3, 6, 24))
    mask = np.ones((3, 6), bool)
    mask[1, 4:] = False
    errs["motion"] = relative_error(L.motion_loss_grad(x0, xh, mask),
                                    central_difference(lambda z: L.motion_loss(x0, z, mask), xh))
    loss_worst = max(errs.values())

    # predictor objective w.r.t. network parameters
    c = make_character(2, seed=3, rings=3, around=4, n_sequences=0)
    est = HandlePredictor(n_handles=8, hidden=8, n_pairs=64, random_state=2).initialize()
    data = [(c.mesh, c.rig)]
    total, _ = est.objective_terms(data, seed=5)
    est.net_.zero_grad()
    total.backward()
    params = [(n, p) for n, p in est.net_.named_parameters() if not n.startswith("feature.")]
    net_errs = {"predictor": _param_fd(lambda: float(est.objective_terms(data, seed=5)[0]), params, rng)}

    # denoiser motion loss w.r.t. network parameters
    ex = [make_example(rng, 2, 4), make_example(rng, 2, 3)]
    model = MotionDiffusion(n_handles=2, width=16, T=100, random_state=1).initialize()
    batch = _batch(ex)
    t = np.array([7, 60])
    noise = torch.as_tensor(rng.normal(size=batch[0].shape))
    loss, _ = model.motion_loss_terms(batch, t, noise)
    model.net_.zero_grad()
    loss.backward()
    params = [(n, p) for n, p in model.net_.named_parameters() if p.grad is not None]
    net_errs["denoiser"] = _param_fd(lambda: float(model.motion_loss_terms(batch, t, noise)[0]),
                                     params, rng, n=3)
    net_worst = max(net_errs.values())
    summary = ", ".join(f"{k} {v:.1e}" for k, v in {**errs, **net_errs}.items())
    assert loss_worst < 1e-4 and net_worst < 1e-3, summary
    return summary


# --- 4 ----------------------------------------------------------------------------

@criterion(4, "isometry invariances", budget=5)
def test_isometry_invariances():
    rng = np.random.default_rng(4)
    worst_value = worst_shift = 0.0
    m = icosphere(1)
    e = edge_set(m)
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]
    for _ in range(10):
        # non-trivial: every frame has its own rigid motion, plus a shared deformation
        h0 = rng.normal(size=(5, 3))
        Rs, ts = random_rotations(6, rng), rng.normal(size=(6, 3))
        moving = np.stack([rigid(h0, R, t) for R, t in zip(Rs, ts)])
        frames = [rigid(m.vertices, R, t) for R, t in zip(Rs, ts)]
        worst_value = max(worst_value, L.spring_loss(moving, pairs, sigma=0.2),
                          arap_loss_metric(m, frames, e),
                          max(L.edge_length_error(m.vertices, f, e) for f in frames))
        # a deforming trajectory keeps its value under one global rigid motion
        deformed = moving + rng.normal(size=moving.shape) * 0.1
        warped = [f + rng.normal(size=f.shape) * 0.05 for f in frames]
        R, t = random_rotations(1, rng)[0], rng.normal(size=3)
        pairs_before = L.spring_loss(deformed, pairs, sigma=0.2)
        pairs_after = L.spring_loss(rigid(deformed, R, t), pairs, sigma=0.2)
        arap_before = arap_loss_metric(m, warped, e)
        arap_after = arap_loss_metric(m, [rigid(f, R, t) for f in warped], e)
        edge_before = L.edge_length_error(m.vertices, warped[0], e)
        edge_after = L.edge_length_error(m.vertices, rigid(warped[0], R, t), e)
        worst_shift = max(worst_shift, abs(pairs_after - pairs_before), abs(arap_after - arap_before),
                          abs(edge_after - edge_before))
    assert worst_value < 1e-8 and worst_shift < 1e-8, f"value {worst_value:.1e}, shift {worst_shift:.1e}"
    return f"rigid-motion value {worst_value:.1e}, invariance shift {worst_shift:.1e}"


# --- 5 ----------------------------------------------------------------------------

@criterion(5, "hand-computed loss values", budget=1)
def test_hand_values():
    traj = np.array([[[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [2, 0, 0]]], dtype=float)
    spring = L.spring_loss(traj, [(0, 1)], sigma=0.0)
    d_loss, _ = L.adversarial_loss(lambda x: np.full(len(x), 0.5), np.zeros((4, 3)), np.zeros((4, 3)))
    cube = unit_cube()
    e = edge_set(cube)
    unit = EdgeSet(e.edges[np.isclose(e.rest_lengths, 1)], np.ones(12))
    scaled = arap_loss_metric(cube, [2 * cube.vertices], unit)
    assert spring == pytest.approx(np.exp(-1) + 1, abs=1e-12), f"spring {spring}"
    assert abs(d_loss - 2 * np.log(2)) < 1e-9, f"d_loss {d_loss}"
    assert scaled == pytest.approx(1.0, abs=1e-12), f"scaled ARAP {scaled}"
    return f"spring {spring:.6f}, d_loss {d_loss:.9f}, x2 ARAP {scaled:.3f}"


# --- 6 ----------------------------------------------------------------------------

@criterion(6, "Handle-FID closed forms", budget=5)
def test_fid_closed_forms():
    rng = np.random.default_rng(6)
    shift = handle_fid(rng.normal(0, 1, 10_000), rng.normal(3, 1, 10_000))
    x = rng.normal(size=(1000, 6, 3))
    same = handle_fid(x, x)
    assert abs(shift - 9.0) <= 0.3 and same < 1e-8, f"shift {shift:.3f}, identical {same:.1e}"
    return f"N(0,1) vs N(3,1) {shift:.3f}, identical {same:.1e}"


# --- 7 ----------------------------------------------------------------------------

@criterion(7, "DDPM fixed point", budget=30)
def test_ddpm_fixed_point():
    rng = np.random.default_rng(7)
    target = rng.normal(size=(2, 8, 33))
    for kind in ("cosine", "linear"):
        s = make_schedule(1000, kind)
        out, _ = ancestral_sample(lambda x, t: (target, None), s, target.shape, rng)
        assert np.array_equal(out, target), f"{kind} sampler moved the oracle x0"
    s = make_schedule(1000)
    x0 = np.array([3.0, -2.0, 1.0, 4.0])
    worst = 0.0
    for t in (10, 100, 300, 600):
        draws = q_sample(np.tile(x0, (10_000, 1)), np.full(10_000, t), rng.normal(size=(10_000, 4)), s)
        expected = np.sqrt(s.alphas_bar[t]) * x0
        worst = max(worst, np.linalg.norm(draws.mean(0) - expected) / np.linalg.norm(expected))
    assert worst < 0.02, f"forward mean off by {100 * worst:.2f}%"
    return f"oracle x0 reproduced exactly, forward mean within {100 * worst:.2f}%"


# --- 8 ----------------------------------------------------------------------------

PREDICTOR_RIGS = (2, 3, 4, 5)


@pytest.mark.slow
@criterion("8a", "predictor training trend", budget=600)
def test_predictor_training_trend():
    torch.set_num_threads(1)
    chars = [make_character(n, seed=10 + k, blend=0.0, n_sequences=0)
             for k, n in enumerate(PREDICTOR_RIGS)]
    data = [(c.mesh, c.rig) for c in chars]
    est = HandlePredictor(learning_rate=1e-3, n_steps=1000, pose_warmup=700, pose_amplitude=1.0,
                          random_state=0)
    before, _ = est.initialize().objective(data, seed=123)
    est.fit(data)
    after, _ = est.objective(data, seed=123)
    reduction = (before - after) / abs(before)
    purity = [dominant_part_accuracy(est.predict(c.mesh)[0], c.rig.part_labels()) for c in chars]
    summary = (f"objective {before:.4f} -> {after:.4f} ({100 * reduction:.0f}% reduction), "
               f"dominant-part recovery {', '.join(f'{p:.2f}' for p in purity)}")
    assert reduction >= 0.5 and min(purity) >= 0.9, summary
    return summary


DIFFUSION_STEPS = 1000


@pytest.fixture(scope="module")
def diffusion_run():
    torch.set_num_threads(1)
    corpus = build_corpus(5, seed=8, n_sequences=2, n_frames=16)
    examples = motion_examples(corpus)
    model = MotionDiffusion(n_steps=DIFFUSION_STEPS, batch_size=10, random_state=0)
    start = time.perf_counter()
    before = model.initialize().evaluate_motion_loss(examples, seed=99)
    model.fit(examples, contexts=character_contexts(corpus))
    after = model.evaluate_motion_loss(examples, seed=99)
    return corpus, examples, model, before, after, time.perf_counter() - start


@pytest.mark.slow
@criterion("8b", "diffusion training trend", budget=600)
def test_diffusion_training_trend(diffusion_run):
    _, examples, _, before, after, elapsed = diffusion_run
    reduction = (before - after) / before
    summary = (f"L_m {before:.4f} -> {after:.4f} ({100 * reduction:.0f}% reduction) on "
               f"{len(examples)} sequences in {DIFFUSION_STEPS} steps, fit {elapsed:.0f}s")
    assert reduction >= 0.7 and elapsed < 600, summary
    return summary


@pytest.mark.slow
@criterion("8c", "adaptation fine-tuning trend", budget=600)
def test_finetune_trend(diffusion_run):
    corpus, examples, model, *_ = diffusion_run
    labels = build_pseudo_labels(adaptation_items(corpus), steps=100)
    trace = model.finetune_adaptation(examples, labels, n_steps=200)
    summary = f"adaptation error {trace[0]:.3e} -> {trace[-1]:.3e}"
    assert trace[-1] < trace[0], summary
    return summary


# --- 9 ----------------------------------------------------------------------------

@criterion(9, "ARAP adaptation lowers distortion", budget=300)
def test_arap_adaptation_direction():
    wins, trials, ratios = 0, 10, []
    for s in range(trials):
        c = make_character(2 + s % 5, seed=900 + s, n_sequences=1, n_frames=4)
        W = c.rig.skinning
        hs = handle_positions(W, c.mesh.vertices)
        posed = [skeletal_pose(c.mesh, c.rig, p) for p in c.sequences[0]]
        motion = fit_sequence(c.mesh, posed, W, hs)
        delta = build_pseudo_labels([(c.mesh, W, hs, motion)], steps=100)[0]
        e = edge_set(c.mesh)
        plain = arap_loss_metric(c.mesh, [deform(c.mesh, W, hs, f) for f in motion.frames], e)
        adapted = arap_loss_metric(
            c.mesh, [deform(c.mesh, W, hs, apply_adaptation(f, d)) for f, d in zip(motion.frames, delta)], e)
        wins += adapted < plain
        ratios.append(adapted / plain)
    summary = f"lower with adaptation in {wins}/{trials} trials, median ratio {np.median(ratios):.3f}"
    assert wins >= 0.9 * trials, summary
    return summary


# --- 10 ---------------------------------------------------------------------------

@criterion(10, "sampling determinism", budget=120)
def test_sample_byte_identical(tmp_path, capsys):
    c = make_character(3, seed=0, n_sequences=0)
    save_obj(c.mesh, c.mesh.vertices, tmp_path / "m.obj")
    HandlePredictor(random_state=1).initialize().save(tmp_path / "p.ckpt")
    MotionDiffusion(random_state=1).initialize().save(tmp_path / "d.ckpt")
    digests = []
    for out in ("s1", "s2"):
        code = cli_main(["sample", "--prompt", "a character waves", "--mesh", str(tmp_path / "m.obj"),
                         "--predictor", str(tmp_path / "p.ckpt"), "--diffusion", str(tmp_path / "d.ckpt"),
                         "--frames", "12", "--seed", "4", "--out", str(tmp_path / out)])
        capsys.readouterr()
        assert code == 0, f"sample exited {code}"
        files = sorted((tmp_path / out).rglob("*.*"))
        digests.append({f.relative_to(tmp_path / out).as_posix(): file_digest(f) for f in files})
    n_obj = sum(k.endswith(".obj") for k in digests[0])
    assert digests[0] == digests[1], "outputs differ between identical runs"
    assert n_obj == 12, f"{n_obj} frames written"
    return f"{n_obj} OBJ frames byte-identical across runs"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
