"""Command line entry point: ``handleforge <subcommand> ...``."""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .arap import build_pseudo_labels
from .checkpoint import file_digest
from .config import SEED_ENV, PipelineConfig
from .corpus import (adaptation_items, build_corpus, character_contexts, ground_truth_weights,
                     motion_examples)
from .diffusion import MotionDiffusion
from .extraction import fit_sequence, load_rig, save_rig, skeletal_pose
from .handles import (HandleSet, apply_adaptation, deform, handle_positions, handle_trajectory,
                      load_hmo, save_hmo)
from .mesh import edge_set, load_obj, save_obj
from .metrics import arap_loss_metric, handle_fid, report
from .predictor import HandlePredictor
from .synthetic import make_character
from .validation import ContractError

logger = logging.getLogger("handleforge")


# --- helpers ------------------------------------------------------------------

def resolve_seed(flag, config_seed=0):
    """Explicit flag, then ``HANDLEFORGE_SEED``, then the config value."""
    if flag is not None:
        return flag
    raw = os.environ.get(SEED_ENV)
    if raw:
        try:
            return int(raw)
        except ValueError:
            raise ContractError(f"{SEED_ENV}={raw!r} is not an integer") from None
    return config_seed


def _existing(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise ContractError(f"{what} {p} does not exist")
    return p


def _obj_paths(items):
    """Expand directories to their sorted ``*.obj`` files."""
    out = []
    for item in items:
        p = _existing(item, "OBJ path")
        out += sorted(p.glob("*.obj")) if p.is_dir() else [p]
    if not out:
        raise ContractError("no OBJ files found")
    return out


def save_handles(path, weights, handles, feature):
    np.savez(path, weights=weights, positions=handles.positions,
             active_mask=handles.active_mask, feature=np.asarray(feature))


def load_handles(path):
    with np.load(_existing(path, "handles file")) as z:
        return z["weights"], HandleSet(z["positions"], z["active_mask"]), z["feature"]


def write_frames(mesh, weights, handles, frames, out_dir, threads=1):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(item):
        n, frame = item
        path = out_dir / f"frame_{n:03d}.obj"
        save_obj(mesh, deform(mesh, weights, handles, frame), path)
        return path

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(one, enumerate(frames)))


# --- subcommands --------------------------------------------------------------

def cmd_gen_synthetic(args):
    seed = resolve_seed(args.seed)
    c = make_character(args.limbs, seed=seed, blend=args.blend, n_sequences=args.sequences,
                       n_frames=args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(c.mesh, c.mesh.vertices, out / "character.obj")
    save_rig(c.rig, out / "character.rig")
    seqs = []
    for k, (poses, text) in enumerate(zip(c.sequences, c.texts)):
        d = out / f"seq{k}"
        d.mkdir(exist_ok=True)
        for n, pose in enumerate(poses):
            save_obj(c.mesh, skeletal_pose(c.mesh, c.rig, pose), d / f"frame_{n:03d}.obj")
        seqs.append({"dir": d.name, "text": text, "frames": len(poses)})
    manifest = {"mesh": "character.obj", "rig": "character.rig", "seed": seed,
                "limbs": args.limbs, "sequences": seqs}
    (out / "character.json").write_text(json.dumps(manifest, indent=2))
    print(json.dumps({"out": str(out), "vertices": c.mesh.n_vertices, "joints": c.rig.n_joints}))


def cmd_predict_handles(args):
    mesh = load_obj(_existing(args.mesh, "mesh"))
    if args.checkpoint:
        W, hs, feat = HandlePredictor.load(_existing(args.checkpoint, "checkpoint")).predict(mesh)
    elif args.rig:
        rig = load_rig(_existing(args.rig, "rig"))
        W = ground_truth_weights(rig, args.handles)
        hs = handle_positions(W, mesh.vertices)
        feat = np.zeros(512)
    else:
        raise ContractError("predict-handles needs --checkpoint or --rig")
    save_handles(args.out, W, hs, feat)
    print(json.dumps({"out": args.out, "handles": int(hs.K), "active": int(hs.active_mask.sum())}))


def cmd_extract(args):
    mesh = load_obj(_existing(args.mesh, "mesh"))
    W, hs, _ = load_handles(args.handles)
    posed = [load_obj(p).vertices for p in _obj_paths(args.posed)]
    motion = fit_sequence(mesh, posed, W, hs, local_only=args.local_only, fps=args.fps)
    if args.text:
        motion.meta["text"] = args.text
    save_hmo(motion, args.out)
    print(json.dumps({"out": args.out, "frames": len(motion), "K": motion.K}))


def cmd_animate(args):
    mesh = load_obj(_existing(args.mesh, "mesh"))
    W, hs, _ = load_handles(args.handles)
    motion = load_hmo(_existing(args.motion, "motion"))
    if motion.K != hs.K:
        raise ContractError(f"motion has K={motion.K} but handles file has K={hs.K}")
    frames = motion.frames if args.no_adapt else motion.adapted_frames()
    paths = write_frames(mesh, W, hs, frames, args.out, args.threads)
    print(json.dumps({"out": args.out, "frames": len(paths)}))


def cmd_sample(args):
    seed = resolve_seed(args.seed)
    mesh = load_obj(_existing(args.mesh, "mesh"))
    predictor = HandlePredictor.load(_existing(args.predictor, "predictor checkpoint"))
    model = MotionDiffusion.load(_existing(args.diffusion, "diffusion checkpoint"))
    W, hs, feat = predictor.predict(mesh)
    motion, delta = model.sample(args.prompt, feat, args.frames, seed=seed)
    motion.delta = delta
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_hmo(motion, out / "motion.hmo")
    frames = [apply_adaptation(f, d) for f, d in zip(motion.frames, delta)]
    paths = write_frames(mesh, W, hs, frames, out / "frames", args.threads)
    animated = [load_obj(p).vertices for p in paths]
    edges = edge_set(mesh)
    sidecar = {"arap_loss": arap_loss_metric(mesh, animated, edges), "frames": len(paths),
               "edges": len(edges.edges), "seed": seed, "prompt": args.prompt}
    (out / "metrics.json").write_text(json.dumps(sidecar, sort_keys=True))
    print(json.dumps({"out": str(out), "frames": len(paths)}))


def _corpus(cfg, seed, predictor=None):
    t = cfg.train
    return build_corpus(t.n_characters, seed, predictor, cfg.model.n_handles, t.n_sequences,
                        t.n_frames)


def _diffusion_from(cfg, seed):
    m, t, w = cfg.model, cfg.train, cfg.losses
    return MotionDiffusion(n_handles=m.n_handles, width=m.width, n_layers=m.n_layers, T=m.T,
                           schedule=m.schedule, learning_rate=t.learning_rate,
                           batch_size=t.batch_size, n_steps=t.diffusion_steps, nu_h=w.nu_h,
                           nu_a=w.nu_a, sigma=w.sigma, random_state=seed)


def cmd_train(args):
    cfg = PipelineConfig.load(args.config)
    seed = resolve_seed(args.seed, cfg.seed)
    t, m, w = cfg.train, cfg.model, cfg.losses
    if args.stage == "predictor":
        chars = [make_character(2 + k % 5, seed=seed + k, n_sequences=0)
                 for k in range(t.n_characters)]
        est = HandlePredictor(n_handles=m.n_handles, hidden=m.hidden, learning_rate=t.learning_rate,
                              n_steps=t.predictor_steps, batch_size=t.predictor_batch,
                              nu_p=w.nu_p, nu_r=w.nu_r, pose_warmup=t.pose_warmup,
                              random_state=seed)
        est.fit([(c.mesh, c.rig) for c in chars])
        est.save(cfg.paths.predictor_checkpoint)
        result = {"stage": "predictor", "loss": est.loss_history_[-1] if est.loss_history_ else None}
    elif args.stage == "diffusion":
        cfg.require("predictor_checkpoint")
        before = file_digest(cfg.paths.predictor_checkpoint)
        predictor = HandlePredictor.load(cfg.paths.predictor_checkpoint)
        corpus = _corpus(cfg, seed, predictor)
        model = _diffusion_from(cfg, seed)
        model.fit(motion_examples(corpus), contexts=character_contexts(corpus))
        model.save(cfg.paths.diffusion_checkpoint)
        if file_digest(cfg.paths.predictor_checkpoint) != before:
            raise ContractError("predictor checkpoint changed during diffusion training")
        result = {"stage": "diffusion", "loss": model.loss_history_[-1] if model.loss_history_ else None,
                  "predictor_sha256": before}
    else:
        cfg.require("predictor_checkpoint", "diffusion_checkpoint")
        predictor = HandlePredictor.load(cfg.paths.predictor_checkpoint)
        model = MotionDiffusion.load(cfg.paths.diffusion_checkpoint)
        corpus = _corpus(cfg, seed, predictor)
        labels = build_pseudo_labels(adaptation_items(corpus), steps=t.arap_steps, nu_v=w.nu_v)
        trace = model.finetune_adaptation(motion_examples(corpus), labels, t.finetune_steps,
                                          t.finetune_lr, seed)
        model.save(cfg.paths.diffusion_checkpoint)
        result = {"stage": "finetune", "initial": trace[0], "final": trace[-1]}
    print(json.dumps(result, sort_keys=True))


def cmd_metrics(args):
    rest = load_obj(_existing(args.rest, "rest mesh"))
    frames = [load_obj(p).vertices for p in _obj_paths(args.frames)]
    edges = edge_set(rest)
    fid = None
    if args.real or args.generated:
        if not (args.real and args.generated and args.handles):
            raise ContractError("handle_fid needs --handles, --real and --generated")
        _, hs, _ = load_handles(args.handles)
        traj = lambda paths: np.concatenate(
            [handle_trajectory(hs, load_hmo(_existing(p)).adapted_frames()) for p in paths])
        fid = handle_fid(traj(args.real), traj(args.generated))
    results = {"arap_loss": arap_loss_metric(rest, frames, edges), "handle_fid": fid,
               "frames": len(frames), "edges": len(edges.edges)}
    print(report(results, args.format).rstrip("\n"))


def cmd_config(args):
    """Write a default configuration file."""
    PipelineConfig().save(args.out)
    print(json.dumps({"out": args.out}))


# --- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="handleforge", description=__doc__)
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synthetic", help="write a synthetic rigged character and posed sequences")
    s.add_argument("--out", required=True)
    s.add_argument("--limbs", type=int, default=4)
    s.add_argument("--sequences", type=int, default=2)
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--blend", type=float, default=0.15)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("predict-handles", help="skinning weights, handles and mesh feature")
    s.add_argument("--mesh", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--rig", help="use the rig's joint skinning instead of a trained predictor")
    s.add_argument("--handles", type=int, default=30)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict_handles)

    s = sub.add_parser("extract", help="fit handle motion to a posed OBJ sequence")
    s.add_argument("--mesh", required=True)
    s.add_argument("--handles", required=True)
    s.add_argument("--posed", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fps", type=int, default=20)
    s.add_argument("--text")
    s.add_argument("--local-only", action="store_true")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("animate", help="deform a mesh by a .hmo motion")
    s.add_argument("--mesh", required=True)
    s.add_argument("--handles", required=True)
    s.add_argument("--motion", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-adapt", action="store_true")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("sample", help="generate and apply a motion for a text prompt")
    s.add_argument("--prompt", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--predictor", required=True)
    s.add_argument("--diffusion", required=True)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train", help="train one pipeline stage")
    s.add_argument("--stage", choices=["predictor", "diffusion", "finetune"], required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("metrics", help="ARAP loss (and optionally handle FID) of animations")
    s.add_argument("--rest", required=True)
    s.add_argument("--frames", nargs="+", required=True)
    s.add_argument("--handles")
    s.add_argument("--real", nargs="*")
    s.add_argument("--generated", nargs="*")
    s.add_argument("--format", choices=["json", "csv"], default="json")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("init-config", help="write a default TOML config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except (ContractError, FloatingPointError, OSError) as exc:
        line = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(line), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
