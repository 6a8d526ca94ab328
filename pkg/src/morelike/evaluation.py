"""Quantitative evaluation: mean constraint satisfaction error per set size
and cross-discriminator score matrices, with JSON/CSV report emission.

Per-set randomness is drawn from streams derived from (seed, k, set index,
trial index), so results do not depend on evaluation order.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .data import ConstraintSampler, Dataset, SampledSet, load_suite, to_constraint_set
from .engine import Tensor
from .generator import PlainGeneratorParams, generate, generate_batch, generate_plain
from .semantic import SemanticSpace
from .training import (
    discriminator_score,
    load_discriminator,
    load_generator,
    sample_z,
)


class EvalError(ValueError):
    pass


@dataclass
class McseRow:
    k: int
    mcse_mean: float
    mcse_std: float
    n_sets: int
    n_trials: int


@dataclass
class EvalReport:
    per_k: list[McseRow]
    cross: dict | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_k": [vars(r) for r in self.per_k],
            "cross": self.cross,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            per_k=[McseRow(**r) for r in d["per_k"]],
            cross=d.get("cross"),
            metadata=d.get("metadata", {}),
        )


def _suite_embeddings(suite: list[SampledSet], dataset: Dataset, space: SemanticSpace):
    ids = sorted({i for s in suite for p in s.pairs for i in p})
    emb = space.embed_array(dataset.images(ids))
    lookup = {i: emb[row] for row, i in enumerate(ids)}
    out = []
    for s in suite:
        pos = np.stack([lookup[p] for p, _ in s.pairs])
        neg = np.stack([lookup[n] for _, n in s.pairs])
        out.append((pos, neg))
    return out


def mcse_from_fn(
    generate_fn,
    suites: dict[int, list[SampledSet]],
    dataset: Dataset,
    space: SemanticSpace,
    trials: int,
    seed: int,
) -> list[McseRow]:
    """generate_fn(sampled_set, rng) -> image array; fresh rng per (k,set,trial)."""
    if trials < 1:
        raise EvalError("trials must be >= 1")
    rows = []
    for k in sorted(suites):
        suite = suites[k]
        pair_embs = _suite_embeddings(suite, dataset, space)
        per_trial = []
        for t in range(trials):
            satisfied = 0
            total = 0
            for si, sampled in enumerate(suite):
                rng = np.random.default_rng(np.random.SeedSequence((seed, k, si, t)))
                img = generate_fn(sampled, rng)
                e = space.embed_array(img[None])[0]
                pos, neg = pair_embs[si]
                dp = ((e - pos) ** 2).sum(axis=1)
                dn = ((e - neg) ** 2).sum(axis=1)
                if space.metric_kind == "euclidean":
                    dp, dn = np.sqrt(dp), np.sqrt(dn)
                satisfied += int((dp < dn).sum())
                total += len(sampled.pairs)
            per_trial.append(1.0 - satisfied / total)
        rows.append(
            McseRow(
                k=int(k),
                mcse_mean=float(np.mean(per_trial)),
                mcse_std=float(np.std(per_trial)),
                n_sets=len(suite),
                n_trials=trials,
            )
        )
    return rows


def checkpoint_generate_fn(checkpoint_path: str, dataset: Dataset):
    """Build a (sampled_set, rng) -> image closure from a trained checkpoint."""
    gen_params, cfg, _, ck = load_generator(checkpoint_path)
    if isinstance(gen_params, PlainGeneratorParams):
        raise EvalError("mcse needs a constrained generator checkpoint")
    if cfg.gen.image_size != dataset.image_size:
        raise EvalError(
            f"checkpoint geometry {cfg.gen.image_size} does not match "
            f"dataset {dataset.image_size}"
        )

    def fn(sampled: SampledSet, rng: np.random.Generator) -> np.ndarray:
        cs = to_constraint_set(dataset, sampled)
        z = Tensor(sample_z(rng, (cfg.gen.n_z,), cfg.z_dist))
        with eg.no_grad():
            return generate(cs, z, gen_params, cfg.gen.p).data
    return fn, cfg


def mcse(
    checkpoint_path: str,
    suite_paths,
    trials: int,
    seed: int,
    dataset: Dataset | None = None,
    space: SemanticSpace | None = None,
) -> EvalReport:
    """MCSE per suite size for a trained generator checkpoint."""
    gen_params, cfg, ckpt_space, _ = load_generator(checkpoint_path)
    dataset = dataset or Dataset(cfg.dataset_dir)
    space = space or ckpt_space
    if space is None:
        raise EvalError("no semantic space available for evaluation")
    fn, cfg = checkpoint_generate_fn(checkpoint_path, dataset)
    suites = {}
    for path in suite_paths:
        suite = load_suite(path)
        if not suite:
            raise EvalError(f"empty suite {path}")
        k = len(suite[0].pairs)
        if any(len(s.pairs) != k for s in suite):
            raise EvalError(f"suite {path} mixes set sizes")
        suites[k] = suite
    rows = mcse_from_fn(fn, suites, dataset, space, trials, seed)
    return EvalReport(
        per_k=rows,
        metadata={
            "checkpoint": checkpoint_path,
            "trials": trials,
            "seed": seed,
            "suites": {int(k): str(p) for k, p in zip(sorted(suites), sorted(suite_paths))},
        },
    )


def cross_discriminator_scores(
    gen_checkpoints: list[str],
    disc_checkpoints: list[str],
    n_samples: int,
    seed: int,
    dataset: Dataset | None = None,
) -> dict:
    """Mean score of every discriminator on samples from every generator."""
    gens = [load_generator(p) for p in gen_checkpoints]
    discs = [load_discriminator(p) for p in disc_checkpoints]
    sizes = {g[1].gen.image_size for g in gens} | {d[1].gen.image_size for d in discs}
    if len(sizes) != 1:
        raise EvalError(f"checkpoints disagree on image geometry: {sorted(sizes)}")

    matrix = np.zeros((len(gens), len(discs)))
    batch = 32
    for gi, (gen_params, cfg, space, _) in enumerate(gens):
        ds = dataset or Dataset(cfg.dataset_dir)
        rng = np.random.default_rng(np.random.SeedSequence((seed, gi)))
        sampler = None
        if not isinstance(gen_params, PlainGeneratorParams):
            train_ids, _ = ds.split()
            sampler = ConstraintSampler(ds, space, train_ids)
        images = []
        remaining = n_samples
        while remaining > 0:
            b = min(batch, remaining)
            z = Tensor(sample_z(rng, (b, cfg.gen.n_z), cfg.z_dist))
            with eg.no_grad():
                if sampler is None:
                    out = generate_plain(z, gen_params)
                else:
                    sets = [
                        to_constraint_set(
                            ds, sampler.sample(cfg.set_size, cfg.constraint_mode, rng)
                        )
                        for _ in range(b)
                    ]
                    out = generate_batch(sets, z, gen_params, cfg.gen.p)
            images.append(out.data)
            remaining -= b
        samples = np.concatenate(images)
        for di, (disc, _, _) in enumerate(discs):
            with eg.no_grad():
                scores = discriminator_score(Tensor(samples), disc).data
            matrix[gi, di] = float(scores.mean())
    return {
        "generators": list(gen_checkpoints),
        "discriminators": list(disc_checkpoints),
        "matrix": matrix.tolist(),
        "n_samples": n_samples,
        "seed": seed,
    }


def emit_report(report: EvalReport, path: str, format: str = "json") -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if format == "json":
        with open(path, "w") as f:
            json.dump(report.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
    elif format == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["k", "mcse_mean", "mcse_std", "n_sets", "n_trials"])
            for r in report.per_k:
                writer.writerow([r.k, r.mcse_mean, r.mcse_std, r.n_sets, r.n_trials])
    else:
        raise EvalError(f"unknown report format {format!r}")
    return path


def format_table(report: EvalReport) -> str:
    """Fixed-size-suite table: one column per constraint-set size."""
    ks = [str(r.k) for r in report.per_k]
    means = [f"{r.mcse_mean:.4f}" for r in report.per_k]
    stds = [f"{r.mcse_std:.4f}" for r in report.per_k]
    width = max(8, *(len(x) for x in ks + means + stds))
    line = lambda cells, label: label.ljust(12) + " ".join(c.rjust(width) for c in cells)
    return "\n".join(
        [
            line(ks, "# sets"),
            line(means, "mcse"),
            line(stds, "std"),
        ]
    )
