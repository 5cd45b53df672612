"""Command-line pipelines: voxelize, prior, synth, train, eval, render.

``HVR_SEED`` in the environment overrides every ``--seed`` flag.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import formats
from .estimator import JointActionLocalizer
from .evaluation import DEFAULT_FACTORS, evaluate
from .location_prior import DEFAULT_SIGMA, LocationDistribution, make_prior, parse_track
from .mesh_env import (DescriptorKind, GridSpec, MeshFormatError, build_ground_plane, build_hvr,
                       build_semvoxel, parse_mesh, write_mesh)
from .synthgen import SynthConfig, generate_split

DESCRIPTOR_FILES = {
    "hvr": DescriptorKind.HVR,
    "semvoxel": DescriptorKind.SEMVOXEL,
    "ground": DescriptorKind.GROUND_PLANE_2D,
    "affordance": DescriptorKind.AFFORDANCE,
}


class CliError(Exception):
    pass


def _seed(args) -> int:
    env = os.environ.get("HVR_SEED")
    return int(env) if env not in (None, "") else int(args.seed)


def _add_grid_flags(p, dims=(28, 28, 8), M=4):
    p.add_argument("--dims", type=int, nargs=3, default=list(dims), metavar=("X", "Y", "Z"),
                   help="parent voxel counts (default: %(default)s)")
    p.add_argument("--M", type=int, default=M, help="child voxels per parent axis (default: %(default)s)")
    p.add_argument("--origin", type=float, nargs=3, default=None,
                   help="grid origin in meters (default: mesh bounding-box minimum)")
    p.add_argument("--extents", type=float, nargs=3, default=None,
                   help="grid extents in meters (default: mesh bounding-box size)")


def _grid_from_args(args, points=None) -> GridSpec:
    if args.origin is None or args.extents is None:
        if points is None or len(points) == 0:
            raise CliError("--origin and --extents are required here")
        lo, hi = points.min(axis=0), points.max(axis=0)
        origin = lo if args.origin is None else np.asarray(args.origin)
        extents = np.maximum(hi - origin, 1e-9) if args.extents is None else args.extents
    else:
        origin, extents = args.origin, args.extents
    return GridSpec(tuple(origin), tuple(extents), tuple(args.dims), args.M)


def _write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_voxelize(args) -> int:
    with open(args.mesh) as fh:
        mesh = parse_mesh(fh, args.num_classes)
    grid = _grid_from_args(args, mesh.vertices)
    if args.kind == "hvr":
        env = build_hvr(mesh, grid)
        nonempty = int(np.any(env.data != 0, axis=-1).sum())
    else:
        env = build_semvoxel(mesh, grid)
        if args.kind == "ground":
            env = build_ground_plane(env)
        nonempty = int((env.data[..., 0] != 1.0).sum())
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    formats.save_descriptor(env, args.out)
    print("dims " + " ".join(str(d) for d in env.data.shape))
    print(f"nonempty_voxels {nonempty}")
    print(f"outside_vertices {env.info.get('n_outside', 0)}")
    return 0


def cmd_prior(args) -> int:
    with open(args.track) as fh:
        track = parse_track(fh)
    grid = _grid_from_args(args, track.positions if len(track) else None)
    d = make_prior(track, grid, args.sigma)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    formats.save_location(d, args.out)
    print("dims " + " ".join(str(v) for v in d.dims))
    if d.uniform_fallback:
        print("warning: no key frame inside the grid, wrote a uniform prior")
    if args.check:
        back = formats.load_location(args.out)
        total = float(back.probs.sum())
        ok = abs(total - 1.0) <= 1e-9 and bool(np.all(back.probs >= 0))
        print(f"check sum={total!r} {'ok' if ok else 'FAILED'}")
        if not ok:
            return 1
    return 0


def cmd_synth(args) -> int:
    grid = GridSpec(tuple(args.origin or (0.0, 0.0, 0.0)),
                    tuple(args.extents or [0.25 * d for d in args.dims]), tuple(args.dims), args.M)
    config = SynthConfig(seed=_seed(args), grid=grid, num_classes=args.num_classes,
                         num_actions=args.num_actions, num_objects=args.num_objects,
                         n_train=args.n_train, n_test=args.n_test, sigma_obs=args.sigma_obs,
                         rho=args.rho, p_drop=args.p_drop, prior_sigma=args.sigma, split=args.split)
    split = generate_split(config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "world.mesh", "w", newline="\n") as fh:
        write_mesh(split.world.mesh, fh)
    for name, env in split.descriptors.items():
        formats.save_descriptor(env, out / f"train_{name}.envd")
    for name, env in split.test_descriptors.items():
        formats.save_descriptor(env, out / f"test_{name}.envd")
    formats.save_episodes(split.train, config.num_actions, out / "train.episodes")
    formats.save_episodes(split.test, config.num_actions, out / "test.episodes")
    print(f"wrote {len(split.train)} train / {len(split.test)} test episodes to {out}")
    return 0


def _load_data(data_dir: Path, part: str, kind: str):
    config = SynthConfig.from_dict(json.loads((data_dir / "config.json").read_text()))
    env = formats.load_descriptor(data_dir / f"{part}_{kind}.envd", config.grid, config.num_classes)
    episodes = formats.load_episodes(data_dir / f"{part}.episodes", config.grid, config.prior_sigma)
    return config, env, episodes


def cmd_train(args) -> int:
    data_dir = Path(args.data_dir)
    config, env, episodes = _load_data(data_dir, "train", args.kind)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", newline="\n") as log:
        def record(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")

        est = JointActionLocalizer(mode=args.mode, theta=args.theta, lambda_kl=args.lambda_kl,
                                   pool=tuple(args.pool), lr=args.lr, momentum=args.momentum,
                                   weight_decay=args.weight_decay, n_epochs=args.epochs,
                                   max_grad_norm=args.max_grad_norm or None,
                                   n_actions=config.num_actions, random_state=_seed(args),
                                   callback=record)
        X = np.stack([ep.obs for ep in episodes])
        y = np.array([ep.label for ep in episodes])
        priors = np.stack([ep.prior.probs for ep in episodes])
        try:
            est.fit(X, y, env=env, priors=priors)
        except FloatingPointError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    est.save(args.out, extra={"config.env_kind": [list(DESCRIPTOR_FILES).index(args.kind)]})
    last = est.history_[-1] if est.history_ else None
    if last:
        print(f"steps {len(est.history_)} final_loss {last['loss']:.6f}")
    return 0


def cmd_eval(args) -> int:
    data_dir = Path(args.data_dir)
    est = JointActionLocalizer.load(args.checkpoint)
    kind = args.kind or list(DESCRIPTOR_FILES)[int(est.extra_.get("config.env_kind", [0])[0])]
    config, env, episodes = _load_data(data_dir, "test", kind)
    if args.zero_init:
        for t in est.params_.tensors.values():
            t.value = np.zeros_like(t.value)
    report = evaluate(est, episodes, env, grid=config.grid, factors=tuple(args.factors),
                      tau=args.tau, sigma=config.prior_sigma, n_jobs=args.workers)
    _write_text(args.report, report.to_text())
    _write_text(args.record or str(args.report) + ".json", report.to_json())
    _write_text(args.predictions or str(args.report) + ".csv", report.predictions_csv())
    if args.heatmap_out:
        locs = est.predict_location(np.stack([ep.obs for ep in episodes]), env)
        mean = LocationDistribution(np.mean([l.probs for l in locs], axis=0))
        Path(args.heatmap_out).parent.mkdir(parents=True, exist_ok=True)
        formats.save_location(mean, args.heatmap_out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_render(args) -> int:
    d = formats.load_location(args.locd)
    _write_text(args.out, formats.top_down_pgm(d))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egoloc3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="rasterize a semantic mesh into an ENVD descriptor")
    p.add_argument("mesh")
    _add_grid_flags(p)
    p.add_argument("--kind", choices=["hvr", "semvoxel", "ground"], default="hvr")
    p.add_argument("--num-classes", type=int, default=None,
                   help="class count when the mesh has no 'mesh C=' header")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("prior", help="key-frame track -> LOCD location prior")
    p.add_argument("track")
    _add_grid_flags(p)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="Gaussian std in voxels")
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true", help="re-read the output and verify it sums to 1")
    p.set_defaults(func=cmd_prior)

    p = sub.add_parser("synth", help="generate a synthetic world and episode splits")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_grid_flags(p, dims=(12, 12, 4), M=2)
    p.add_argument("--num-classes", type=int, default=9)
    p.add_argument("--num-actions", type=int, default=8)
    p.add_argument("--num-objects", type=int, default=12)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--sigma-obs", type=float, default=0.1)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--p-drop", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="prior Gaussian std in voxels")
    p.add_argument("--split", choices=["seen", "unseen"], default="seen")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the joint model on a synth directory")
    p.add_argument("data_dir")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="JSON-lines training log (default: <out>.log.jsonl)")
    p.add_argument("--kind", choices=list(DESCRIPTOR_FILES), default="hvr")
    p.add_argument("--mode", choices=["full", "deterministic", "global_env", "video_only"], default="full")
    p.add_argument("--epochs", type=float, default=8.0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-grad-norm", type=float, default=5.0, help="0 disables clipping")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--theta", type=float, default=2.0)
    p.add_argument("--lambda-kl", type=float, default=1.0)
    p.add_argument("--pool", type=int, nargs=3, default=[1, 1, 1])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--report", required=True)
    p.add_argument("--record", default=None, help="JSON record path (default: <report>.json)")
    p.add_argument("--predictions", default=None, help="per-episode CSV (default: <report>.csv)")
    p.add_argument("--heatmap-out", default=None, help="write the mean predicted LOCD here")
    p.add_argument("--kind", choices=list(DESCRIPTOR_FILES), default=None)
    p.add_argument("--factors", type=int, nargs=3, default=list(DEFAULT_FACTORS))
    p.add_argument("--tau", type=float, default=None, help="binarization threshold (default: uniform density)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--zero-init", action="store_true", help="zero every weight before evaluating")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="top-down max projection of a LOCD file as PGM")
    p.add_argument("locd")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, MeshFormatError, CliError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
