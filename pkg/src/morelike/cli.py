"""Command-line entry points: dataset generation, training, evaluation,
one-off generation, and the HTTP service."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import engine as eg
from . import semantic as sm
from .data import Dataset, build_fixed_size_test_sets, make_shapes_dataset, to_constraint_set
from .engine import Tensor
from .evaluation import cross_discriminator_scores, emit_report, format_table, mcse
from .generator import generate
from .semantic import TripletPhiConfig, sample_color_triplets, train_triplet_phi
from .training import TrainConfig, load_generator, save_triplet_space, train, train_wgan_baseline


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _train_config(args, overrides: dict | None = None) -> TrainConfig:
    raw = _load_config(args.config)
    raw.update(overrides or {})
    for attr, key in [
        ("data", "dataset_dir"),
        ("out", "out_dir"),
        ("seed", "seed"),
        ("iterations", "iterations"),
        ("gamma", "gamma"),
        ("checkpoint_every", "checkpoint_every"),
        ("warm_start", "warm_start"),
        ("mode", "constraint_mode"),
        ("phi_checkpoint", "phi_checkpoint"),
    ]:
        value = getattr(args, attr, None)
        if value is not None:
            raw[key] = value
    return TrainConfig.from_dict(raw)


def cmd_make_data(args) -> int:
    ds = make_shapes_dataset(args.out, args.count, args.size, args.seed)
    print(f"wrote {len(ds)} images ({args.size}x{args.size}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _, _, rows, final = train(cfg, resume=args.resume)
    last = rows[-1] if rows else {}
    print(f"trained {cfg.iterations} iterations; final checkpoint: {final}")
    if last:
        print(
            f"w_estimate={last['w_estimate']:.4f} "
            f"constraint_loss={last['constraint_loss']}"
        )
    return 0


def cmd_train_wgan(args) -> int:
    cfg = _train_config(args, overrides={"z_dist": "normal", "gamma": 0.0})
    _, _, rows, final = train_wgan_baseline(cfg, resume=args.resume)
    print(f"trained {cfg.iterations} iterations; final checkpoint: {final}")
    return 0


def cmd_train_phi(args) -> int:
    ds = Dataset(args.data)
    train_ids, test_ids = ds.split()
    rng = np.random.default_rng(args.seed)
    train_trips = sample_color_triplets(ds, args.triplets, rng, ids=train_ids)
    test_trips = sample_color_triplets(ds, max(1, args.triplets // 5), rng, ids=test_ids)
    cfg = TripletPhiConfig(iterations=args.iterations, seed=args.seed)
    space, report = train_triplet_phi(ds.images(), train_trips, cfg, test_trips)
    save_triplet_space(
        args.out, space,
        {"dataset_dir": args.data, "iterations": args.iterations, "seed": args.seed},
        report,
    )
    print(
        f"triplet phi saved to {args.out}; "
        f"held-out satisfaction {report['holdout_satisfaction']:.4f}"
    )
    return 0


def cmd_eval(args) -> int:
    gen_params, cfg, space, _ = load_generator(args.checkpoint)
    ds = Dataset(args.data or cfg.dataset_dir)
    if args.suites:
        suite_paths = sorted(
            os.path.join(args.suites, f)
            for f in os.listdir(args.suites)
            if f.startswith("suite_k") and f.endswith(".jsonl")
        )
    else:
        rng = np.random.default_rng(args.seed)
        out = os.path.join(args.out_dir, "suites")
        suite_paths = list(
            build_fixed_size_test_sets(
                ds, space, args.k_values, args.sets_per_k, rng, out
            ).values()
        )
    report = mcse(args.checkpoint, suite_paths, args.trials, args.seed, dataset=ds, space=space)
    if args.cross:
        report.cross = cross_discriminator_scores(
            [args.checkpoint] + args.cross, [args.checkpoint] + args.cross,
            n_samples=args.sets_per_k, seed=args.seed, dataset=ds,
        )
    os.makedirs(args.out_dir, exist_ok=True)
    emit_report(report, os.path.join(args.out_dir, "report.json"), "json")
    emit_report(report, os.path.join(args.out_dir, "report.csv"), "csv")
    print(format_table(report))
    print(f"report written to {args.out_dir}/report.(json|csv)")
    return 0


def cmd_generate(args) -> int:
    gen_params, cfg, space, _ = load_generator(args.checkpoint)
    ds = Dataset(args.data or cfg.dataset_dir)
    pairs = []
    for chunk in args.constraints.split(","):
        pos, neg = chunk.split(":")
        pairs.append((int(pos), int(neg)))
    from .data import SampledSet

    cs = to_constraint_set(ds, SampledSet(reference_id=-1, pairs=pairs))
    rng = np.random.default_rng(args.seed)
    from .training import sample_z

    z = Tensor(sample_z(rng, (cfg.gen.n_z,), cfg.z_dist))
    with eg.no_grad():
        img = generate(cs, z, gen_params, cfg.gen.p).data
    from .data import encode_ppm

    with open(args.out, "wb") as f:
        f.write(encode_ppm(img))
    sat = [sm.satisfies(img, c, space) for c in cs]
    print(f"wrote {args.out}; satisfied {sum(sat)}/{len(sat)} constraints")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.checkpoints, args.data, args.session_dir, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morelike")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-data", help="generate the procedural shapes dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--count", type=int, default=5000)
    d.add_argument("--size", type=int, default=16)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_make_data)

    def train_flags(t):
        t.add_argument("--config", help="JSON file of TrainConfig fields")
        t.add_argument("--data", help="dataset directory")
        t.add_argument("--out", help="output directory for checkpoints/metrics")
        t.add_argument("--seed", type=int)
        t.add_argument("--iterations", type=int)
        t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        t.add_argument("--resume", help="checkpoint directory to resume from")

    t = sub.add_parser("train", help="train the constrained generator")
    train_flags(t)
    t.add_argument("--gamma", type=float)
    t.add_argument("--mode", choices=["uniform", "bin_focused"])
    t.add_argument("--warm-start", dest="warm_start")
    t.add_argument("--phi-checkpoint", dest="phi_checkpoint")
    t.set_defaults(fn=cmd_train)

    w = sub.add_parser("train-wgan", help="train the unconstrained baseline")
    train_flags(w)
    w.set_defaults(fn=cmd_train_wgan, gamma=None, mode=None, warm_start=None,
                   phi_checkpoint=None)

    f = sub.add_parser("train-phi", help="train the triplet embedding network")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--iterations", type=int, default=800)
    f.add_argument("--triplets", type=int, default=20000)
    f.set_defaults(fn=cmd_train_phi)

    e = sub.add_parser("eval", help="constraint satisfaction evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--suites", help="directory of prebuilt suite files")
    e.add_argument("--k-values", dest="k_values", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    e.add_argument("--sets-per-k", dest="sets_per_k", type=int, default=200)
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", dest="out_dir", default="eval_out")
    e.add_argument("--cross", nargs="*", help="extra checkpoints for cross scores")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("generate", help="generate one image from dataset-id constraints")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data")
    g.add_argument("--constraints", required=True, help="pos:neg[,pos:neg...] dataset ids")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="generated.ppm")
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("serve", help="run the interactive feedback service")
    s.add_argument("--checkpoints", required=True, help="directory containing checkpoint dirs")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--session-dir", dest="session_dir", default="service_data")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--ui", help="built frontend directory to mount at /ui")
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
