"""Conditional DDPM over handle motion tensors.

The denoiser predicts the clean motion ``x0`` (not the noise) together with a
per-frame handle adaptation ``delta``. It is a small transformer decoder whose
queries are motion frames and whose memory is a 31-token condition block: up
to 30 text tokens plus one mesh feature token.
"""

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import torch_ops as T
from .checkpoint import load_checkpoint, save_checkpoint
from .handles import MAX_FRAMES, HandleMotion, motion_dim
from .validation import ContractError, check_random_state

logger = logging.getLogger(__name__)

TEXT_LEN = 30
COND_DIM = 512
DISC_VERTICES = 100
DISC_WINDOW = 2


# --- text ---------------------------------------------------------------------

def _word_vector(word):
    seed = int.from_bytes(hashlib.sha256(word.encode()).digest()[:8], "little")
    return np.random.default_rng(seed).normal(size=COND_DIM)


def text_embed(prompt):
    """Deterministic bag-of-words stand-in for a text encoder.

    Returns ``(tokens (30, 512), mask (30,))``; ``mask`` marks real words.
    Each lowercase word maps to a Gaussian vector seeded by its hash, so the
    same word yields the same row in any prompt.
    """
    words = re.findall(r"[a-z0-9']+", prompt.lower())[:TEXT_LEN]
    tokens = np.zeros((TEXT_LEN, COND_DIM))
    mask = np.zeros(TEXT_LEN, dtype=bool)
    for n, w in enumerate(words):
        tokens[n] = _word_vector(w)
        mask[n] = True
    return tokens, mask


# --- schedule -----------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    kind: str = "cosine"
    alphas_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) == 0 or not np.all((b > 0) & (b < 1)):
            raise ContractError("betas must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas_bar", np.cumprod(1.0 - b))

    @property
    def T(self):
        return len(self.betas)

    def posterior(self, t):
        """Coefficients ``(c_x0, c_xt, variance)`` of ``q(x_{t-1} | x_t, x0)`` for ``t >= 1``."""
        ab, b = self.alphas_bar, self.betas
        prev = ab[t - 1]
        c0 = math.sqrt(prev) * b[t] / (1 - ab[t])
        ct = math.sqrt(1 - b[t]) * (1 - prev) / (1 - ab[t])
        return c0, ct, b[t] * (1 - prev) / (1 - ab[t])


def make_schedule(T=1000, kind="cosine"):
    """``linear``: betas from 1e-4 to 0.02. ``cosine``: squared-cosine alpha_bar, betas capped at 0.999."""
    if T < 1:
        raise ContractError("schedule needs T >= 1")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, T) if T > 1 else np.array([1e-4])
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ContractError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas, kind)


def q_sample(x0, t, noise, schedule):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`` with ``t`` broadcast over the leading axis."""
    ab = schedule.alphas_bar[np.asarray(t)]
    if torch.is_tensor(x0):
        ab = torch.as_tensor(ab, dtype=x0.dtype)
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return ab ** 0.5 * x0 + (1 - ab) ** 0.5 * noise


def ancestral_sample(denoise, schedule, shape, rng):
    """Plain DDPM ancestral loop with an x0-predicting ``denoise(x_t, t) -> (x0_hat, extra)``.

    The final step returns ``x0_hat`` itself, so a denoiser that always
    predicts the same ``x0`` reproduces it exactly.
    """
    x = rng.normal(size=shape)
    extra = None
    for t in range(schedule.T - 1, -1, -1):
        x0_hat, extra = denoise(x, t)
        if t == 0:
            return np.asarray(x0_hat), extra
        c0, ct, var = schedule.posterior(t)
        x = c0 * x0_hat + ct * x + math.sqrt(var) * rng.normal(size=shape)
    raise AssertionError("unreachable")


# --- network ------------------------------------------------------------------

def sinusoidal(positions, dim):
    """Standard sin/cos encoding, ``(len(positions), dim)``."""
    positions = torch.as_tensor(positions, dtype=torch.float64).reshape(-1, 1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    out = torch.zeros(len(positions), dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(positions * freqs)
    out[:, 1::2] = torch.cos(positions * freqs[: dim // 2])
    return out


class Denoiser(torch.nn.Module):
    def __init__(self, n_handles, width=128, n_layers=2, n_heads=4, ffn=None):
        super().__init__()
        self.K = n_handles
        self.D = motion_dim(n_handles)
        self.width = width
        self.in_proj = torch.nn.Linear(self.D, width)
        self.cond_proj = torch.nn.Linear(COND_DIM, width)
        self.t_mlp = torch.nn.Sequential(torch.nn.Linear(width, width), torch.nn.SiLU(),
                                         torch.nn.Linear(width, width))
        layer = torch.nn.TransformerDecoderLayer(width, n_heads, ffn or 2 * width, dropout=0.0,
                                                 batch_first=True)
        self.decoder = torch.nn.TransformerDecoder(layer, n_layers)
        self.motion_head = torch.nn.Linear(width, self.D)
        self.delta_head = torch.nn.Linear(width, 3 * n_handles)
        self.register_buffer("frame_pe", sinusoidal(np.arange(MAX_FRAMES), width), persistent=False)

    def hidden(self, x_t, t, text, text_mask, feature, frame_mask):
        B, N, _ = x_t.shape
        if N > MAX_FRAMES:
            raise ContractError(f"{N} frames exceeds the maximum of {MAX_FRAMES}")
        h = self.in_proj(x_t) + self.frame_pe[:N].to(x_t.dtype)
        cond = torch.cat([text, feature[:, None, :]], dim=1)            # (B, 31, 512)
        temb = self.t_mlp(sinusoidal(t, self.width).to(x_t.dtype))
        memory = self.cond_proj(cond) + temb[:, None, :]
        cond_mask = torch.cat([text_mask, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        return self.decoder(h, memory, tgt_key_padding_mask=~frame_mask,
                            memory_key_padding_mask=~cond_mask)

    def forward(self, x_t, t, text, text_mask, feature, frame_mask):
        h = self.hidden(x_t, t, text, text_mask, feature, frame_mask)
        B, N, _ = x_t.shape
        return self.motion_head(h), self.delta_head(h).reshape(B, N, self.K, 3)


class Discriminator(torch.nn.Module):
    """MLP scoring windows of limb-vertex positions as oracle (1) or generated (0)."""

    def __init__(self, hidden=128):
        super().__init__()
        self.net = torch.nn.Sequential(
            torch.nn.Linear(DISC_VERTICES * 3 * DISC_WINDOW, hidden), torch.nn.LeakyReLU(0.2),
            torch.nn.Linear(hidden, hidden), torch.nn.LeakyReLU(0.2),
            torch.nn.Linear(hidden, 1))

    def forward(self, windows):
        return torch.sigmoid(self.net(windows.reshape(len(windows), -1)))[:, 0]


def limb_windows(frames):
    """``(N, V, 3)`` vertex frames to ``(N - 1, V * 3 * 2)`` consecutive-frame windows."""
    return torch.stack([frames[:-1], frames[1:]], dim=-1).reshape(len(frames) - 1, -1)


# --- data ---------------------------------------------------------------------

@dataclass
class MotionExample:
    """One training sequence with its text and the mesh feature of its character."""

    motion: HandleMotion
    text: str
    feature: np.ndarray


@dataclass
class CharacterContext:
    """A character used for the handle-spring and adversarial terms.

    ``oracle_frames`` are skeletal-LBS vertex sequences of the character's
    own rig (the "real" samples for the discriminator).
    """

    vertices: np.ndarray
    weights: np.ndarray
    handles: np.ndarray
    feature: np.ndarray
    adjacency: np.ndarray
    limb_vertices: np.ndarray
    oracle_frames: list


def _batch(examples, dtype=torch.float64):
    N = max(len(e.motion) for e in examples)
    D = motion_dim(examples[0].motion.K)
    x0 = np.zeros((len(examples), N, D))
    mask = np.zeros((len(examples), N), dtype=bool)
    text = np.zeros((len(examples), TEXT_LEN, COND_DIM))
    tmask = np.zeros((len(examples), TEXT_LEN), dtype=bool)
    feat = np.zeros((len(examples), COND_DIM))
    for b, e in enumerate(examples):
        n = len(e.motion)
        x0[b, :n] = e.motion.to_tensor()
        mask[b, :n] = True
        text[b], tmask[b] = text_embed(e.text)
        feat[b] = e.feature
    return (torch.tensor(x0, dtype=dtype), torch.tensor(mask), torch.tensor(text, dtype=dtype),
            torch.tensor(tmask), torch.tensor(feat, dtype=dtype))


def decode_handles(x0_hat, delta_hat, K):
    """Split motion tensors into per-frame handle transforms (torch, batched)."""
    lead = x0_hat.shape[:-1]
    local_t = x0_hat[..., :3 * K].reshape(*lead, K, 3) + delta_hat
    local_R = T.rot6d_to_matrix(x0_hat[..., 3 * K:9 * K].reshape(*lead, K, 6))
    global_t = x0_hat[..., 9 * K:9 * K + 3]
    global_R = T.axis_angle_to_matrix(x0_hat[..., 9 * K + 3:])
    return local_t, local_R, global_t, global_R


# --- estimator ----------------------------------------------------------------

class MotionDiffusion(BaseEstimator):
    """Text- and shape-conditioned motion diffusion over handle motion tensors.

    ``fit`` takes a list of ``MotionExample`` and optional ``contexts``
    (``CharacterContext``) used by the spring and adversarial terms.
    """

    def __init__(self, n_handles=30, width=128, n_layers=2, n_heads=4, T=1000,
                 schedule="cosine", learning_rate=1e-4, batch_size=32, n_steps=5000,
                 nu_h=0.001, nu_a=0.1, sigma=0.0, grad_clip=1.0, random_state=0):
        self.n_handles = n_handles
        self.width = width
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.T = T
        self.schedule = schedule
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.nu_h = nu_h
        self.nu_a = nu_a
        self.sigma = sigma
        self.grad_clip = grad_clip
        self.random_state = random_state

    def initialize(self):
        state = torch.random.get_rng_state()
        torch.manual_seed(int(self.random_state or 0))
        try:
            self.net_ = Denoiser(self.n_handles, self.width, self.n_layers, self.n_heads).double()
            self.disc_ = Discriminator().double()
        finally:
            torch.random.set_rng_state(state)
        self.schedule_ = make_schedule(self.T, self.schedule)
        self.loss_history_ = []
        return self

    # --- training -------------------------------------------------------------

    def _check_examples(self, examples):
        if not examples:
            raise ContractError("MotionDiffusion.fit: empty dataset")
        for e in examples:
            if e.motion.K != self.n_handles:
                raise ContractError(f"motion has K={e.motion.K}, model expects {self.n_handles}")
            if len(e.motion) > MAX_FRAMES:
                raise ContractError(f"sequence of {len(e.motion)} frames exceeds {MAX_FRAMES}")

    def motion_loss_terms(self, batch, t, noise):
        """Differentiable ``L_m`` for fixed ``(t, noise)``; used by training and gradient checks."""
        x0, fmask, text, tmask, feat = batch
        x_t = q_sample(x0, t, noise, self.schedule_)
        x0_hat, delta_hat = self.net_(x_t, torch.as_tensor(t), text, tmask, feat, fmask)
        return T.motion_loss(x0, x0_hat, fmask), x_t

    def _character_terms(self, x_t, t, batch, ctx, rng):
        x0, fmask, text, tmask, _ = batch
        feat = T.as_tensor(ctx.feature).expand(len(x0), -1)
        x0_hat, delta_hat = self.net_(x_t, torch.as_tensor(t), text, tmask, feat, fmask)
        local_t, local_R, global_t, global_R = decode_handles(x0_hat, delta_hat, self.n_handles)
        h = T.as_tensor(ctx.handles)
        traj = ((h + local_t)[..., None, :] @ global_R[..., None, :, :].transpose(-1, -2))[..., 0, :] \
            + global_t[..., None, :]
        pairs = torch.as_tensor(ctx.adjacency, dtype=torch.long).reshape(-1, 2)
        lengths = fmask.sum(1).tolist()
        l_h = x0.new_zeros(())
        if len(pairs):
            for b, n in enumerate(lengths):
                seq = torch.cat([h[None], traj[b, :n]], dim=0)
                l_h = l_h + T.spring_loss(seq, pairs, self.sigma)
            l_h = l_h / len(lengths)
        idx = ctx.disc_idx
        V, W = T.as_tensor(ctx.vertices[idx]), T.as_tensor(ctx.weights[idx])
        fake = []
        for b, n in enumerate(lengths):
            if n < DISC_WINDOW:
                continue
            verts = T.deform(V, W, h, local_t[b, :n], local_R[b, :n], global_R[b, :n], global_t[b, :n])
            fake.append(limb_windows(verts))
        if not fake:
            return l_h, x0.new_zeros(()), None
        fake = torch.cat(fake)
        pool = ctx.real_windows
        real = pool[rng.choice(len(pool), size=len(fake), replace=len(pool) < len(fake))]
        _, g_loss = T.adversarial_losses(self.disc_(real), self.disc_(fake))
        return l_h, g_loss, (real, fake.detach())

    def _prepare_context(self, ctx, rng):
        limb = np.asarray(ctx.limb_vertices)
        ctx.disc_idx = np.sort(rng.choice(limb, size=DISC_VERTICES, replace=len(limb) < DISC_VERTICES))
        ctx.real_windows = torch.cat([limb_windows(T.as_tensor(np.asarray(seq)[:, ctx.disc_idx]))
                                      for seq in ctx.oracle_frames if len(seq) >= DISC_WINDOW])
        return ctx

    def fit(self, X, y=None, contexts=None):
        self._check_examples(X)
        self.initialize()
        rng = check_random_state(self.random_state)
        contexts = [self._prepare_context(c, rng) for c in (contexts or [])]
        use_chars = bool(contexts) and (self.nu_h > 0 or self.nu_a > 0)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        d_opt = torch.optim.Adam(self.disc_.parameters(), lr=self.learning_rate)
        for step in range(self.n_steps):
            size = min(self.batch_size, len(X))
            batch = _batch([X[k] for k in rng.choice(len(X), size=size, replace=False)])
            t = rng.integers(0, self.schedule_.T, size=size)
            noise = torch.as_tensor(rng.normal(size=batch[0].shape))
            l_m, x_t = self.motion_loss_terms(batch, t, noise)
            parts = {"motion": l_m}
            total = l_m
            disc_batch = None
            if use_chars:
                ctx = contexts[rng.integers(len(contexts))]
                l_h, l_a, disc_batch = self._character_terms(x_t, t, batch, ctx, rng)
                parts.update(spring=l_h, adversarial=l_a)
                total = total + self.nu_h * l_h + self.nu_a * l_a
            if not torch.isfinite(total):
                raise FloatingPointError(
                    f"diffusion training diverged at step {step}: "
                    + ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items()))
            opt.zero_grad()
            total.backward()
            if self.grad_clip:
                torch.nn.utils.clip_grad_norm_(self.net_.parameters(), self.grad_clip)
            opt.step()
            if disc_batch is not None and self.nu_a > 0:
                real, fake = disc_batch
                d_loss, _ = T.adversarial_losses(self.disc_(real), self.disc_(fake))
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()
                parts["discriminator"] = d_loss
            self.loss_history_.append(
                {"total": total.item(), **{k: v.item() for k, v in parts.items()}})
            if step % 250 == 0:
                logger.info("diffusion step %d loss %.5f", step, total.item())
        return self

    def evaluate_motion_loss(self, X, seed=0):
        """``L_m`` on all of ``X`` for one seeded draw of ``(t, noise)``."""
        rng = check_random_state(seed)
        batch = _batch(list(X))
        t = rng.integers(0, self.schedule_.T, size=len(X))
        noise = torch.as_tensor(rng.normal(size=batch[0].shape))
        with torch.no_grad():
            return float(self.motion_loss_terms(batch, t, noise)[0])

    # --- sampling -------------------------------------------------------------

    def sample(self, text, feature, n_frames, seed=0, fps=20):
        """Draw one motion; returns ``(HandleMotion, delta (N, K, 3))``."""
        check_is_fitted(self, "net_")
        if not 1 <= n_frames <= MAX_FRAMES:
            raise ContractError(f"n_frames must be in [1, {MAX_FRAMES}]")
        tokens, tmask = text_embed(text)
        text_t = torch.tensor(tokens)[None]
        tmask_t = torch.tensor(tmask)[None]
        feat = T.as_tensor(feature).reshape(1, COND_DIM)
        fmask = torch.ones(1, n_frames, dtype=torch.bool)

        def denoise(x, t):
            with torch.no_grad():
                x0_hat, delta = self.net_(torch.as_tensor(x), torch.tensor([t]), text_t, tmask_t,
                                          feat, fmask)
            return x0_hat.numpy(), delta.numpy()

        rng = check_random_state(seed)
        x0, delta = ancestral_sample(denoise, self.schedule_, (1, n_frames, self.net_.D), rng)
        motion = HandleMotion.from_tensor(x0[0], self.n_handles, delta[0], fps,
                                          {"text": text, "seed": seed})
        return motion, delta[0]

    # --- adaptation fine-tuning -----------------------------------------------

    def finetune_adaptation(self, examples, pseudo_labels, n_steps=200, learning_rate=1e-3,
                            seed=0):
        """Fit only the adaptation head to ARAP pseudo-labels.

        Noised inputs are drawn once from ``seed`` and held fixed, so the
        frozen trunk yields fixed hidden features and the objective is a
        least-squares problem in the head parameters. Returns the loss trace
        (first entry is before any update).
        """
        check_is_fitted(self, "net_")
        if len(examples) != len(pseudo_labels):
            raise ContractError("one pseudo-label array is required per example")
        rng = check_random_state(seed)
        batch = _batch(list(examples))
        x0, fmask, text, tmask, feat = batch
        target = torch.zeros(x0.shape[:2] + (self.n_handles, 3), dtype=x0.dtype)
        for b, pl in enumerate(pseudo_labels):
            pl = np.asarray(pl, dtype=np.float64)
            if pl.shape != (len(examples[b].motion), self.n_handles, 3):
                raise ContractError(f"pseudo-label {b} has shape {pl.shape}")
            target[b, :len(pl)] = torch.as_tensor(pl)
        t = torch.as_tensor(rng.integers(0, self.schedule_.T, size=len(examples)))
        x_t = q_sample(x0, t.numpy(), torch.as_tensor(rng.normal(size=x0.shape)), self.schedule_)
        with torch.no_grad():
            hidden = self.net_.hidden(x_t, t, text, tmask, feat, fmask)
            motion_before = self.net_.motion_head(hidden).clone()
        m = fmask[..., None, None].to(x0.dtype)
        head = self.net_.delta_head
        opt = torch.optim.Adam(head.parameters(), lr=learning_rate)
        trace = []
        for _ in range(n_steps + 1):
            pred = head(hidden).reshape(target.shape)
            loss = (((pred - target) ** 2) * m).sum() / m.sum()
            trace.append(loss.item())
            if len(trace) > n_steps:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            after = self.net_(x_t, t, text, tmask, feat, fmask)[0]
        if not torch.equal(after, motion_before):
            raise AssertionError("adaptation fine-tuning changed the motion head output")
        return trace

    # --- persistence ----------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "net_")
        tensors = {k: v.detach().numpy().copy() for k, v in self.net_.state_dict().items()}
        save_checkpoint(path, tensors, kind="diffusion", seed=self.random_state,
                        config=self.get_params())

    @classmethod
    def load(cls, path):
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "diffusion":
            raise ContractError(f"{path}: not a diffusion checkpoint")
        est = cls(**meta["config"]).initialize()
        est.net_.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
        return est
