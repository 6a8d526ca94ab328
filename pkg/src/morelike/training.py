"""Adversarial training: alternating critic/generator updates with a
gradient penalty and a weighted constraint-critic term.

The discriminator update differentiates through the norm of its own input
gradient (second-order path), which the engine supports because backward
rules are themselves taped ops.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine as eg
from . import nn
from .checkpoint import (
    CheckpointError,
    assign_from_arrays,
    load_checkpoint,
    save_checkpoint,
)
from .data import ConstraintSampler, Dataset, to_constraint_set
from .engine import EngineError, Tape, Tensor
from .generator import (
    GenConfig,
    PlainGeneratorParams,
    generate_batch,
    generate_plain,
    init_generator,
    init_plain_generator,
)
from .semantic import (
    ConstraintSet,
    SemanticSpace,
    critic_loss_from_embeddings,
    init_triplet_phi,
    set_embeddings,
)


@dataclass
class DiscriminatorParams:
    convs: list[nn.ConvParams]  # first stride 1, rest stride 2
    norms: dict[int, nn.LayerNormParams]
    fc: nn.DenseParams  # flattened map -> 1, no activation


def init_discriminator(cfg: GenConfig, rng, dtype=None) -> DiscriminatorParams:
    convs = []
    c_prev = 3
    size = cfg.image_size
    for i, c in enumerate(cfg.disc_channels):
        stride = 1 if i == 0 else 2
        convs.append(nn.init_conv(rng, c_prev, c, k=3, stride=stride, pad=1, dtype=dtype))
        c_prev = c
        if stride == 2:
            size //= 2
    norms = {
        i: nn.init_layer_norm(cfg.disc_channels[i], dtype=dtype)
        for i in range(len(convs))
        if (i + 1) % 2 == 0
    }
    fc = nn.init_dense(rng, c_prev * size * size, 1, dtype=dtype)
    return DiscriminatorParams(convs, norms, fc)


def discriminator_score(x, w: DiscriminatorParams) -> Tensor:
    """Unbounded realness score; [3,H,W] -> scalar, [N,3,H,W] -> [N]."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    batched = t.ndim == 4
    h = t
    for i, conv in enumerate(w.convs):
        h = eg.relu(nn.conv_layer(h, conv))
        if i in w.norms:
            h = nn.layer_norm_nd(h, w.norms[i], batched)
    flat = int(np.prod(h.shape[-3:]))
    h = eg.reshape(h, (h.shape[0], flat) if batched else (flat,))
    out = nn.dense(h, w.fc)
    return eg.reshape(out, (out.shape[0],)) if batched else eg.reshape(out, ())


def gradient_penalty(score_fn, x_real: np.ndarray, x_fake: np.ndarray, eps, lambda_gp: float):
    """lambda * mean((||grad_x score(x_tilde)||_2 - 1)^2) over the batch.

    Must run inside an active Tape; the returned scalar participates in the
    graph so backward() reaches the score function's parameters through the
    gradient norm. Also returns the per-sample norms as plain floats.
    """
    if x_real.shape != x_fake.shape:
        raise EngineError("gradient_penalty operands differ in shape")
    single = x_real.ndim == 3
    if single:
        x_real, x_fake = x_real[None], x_fake[None]
    b = x_real.shape[0]
    eps_arr = np.broadcast_to(np.asarray(eps, dtype=x_real.dtype).reshape(-1, 1, 1, 1), x_real.shape[:1] + (1, 1, 1))
    mix = eps_arr * x_real + (1.0 - eps_arr) * x_fake
    x_tilde = Tensor(np.ascontiguousarray(mix), requires_grad=True)
    scores = score_fn(x_tilde)
    total = eg.tsum(scores) if scores.ndim else scores
    (g,) = eg.grad(total, [x_tilde], create_graph=True)
    sq = eg.tsum(eg.mul(g, g), axis=(1, 2, 3))
    # tiny floor keeps sqrt differentiable when a gradient vanishes exactly
    norms = eg.sqrt(eg.add(sq, 1e-12))
    gap = eg.sub(norms, 1.0)
    penalty = eg.scale(eg.mean(eg.mul(gap, gap)), lambda_gp)
    return penalty, np.sqrt(sq.data.copy())


@dataclass
class TrainConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    lambda_gp: float = 10.0
    gamma: float = 10.0
    n_disc: int = 5
    m: int = 16
    adam_alpha: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    z_dist: str = "uniform"  # uniform(-1,1) | normal
    iterations: int = 3000
    seed: int = 0
    checkpoint_every: int = 1000
    warm_start: str | None = None
    constraint_mode: str = "uniform"  # uniform | bin_focused
    set_size: tuple = (1, 10)
    space: dict = field(
        default_factory=lambda: {
            "kind": "channel_mean",
            "metric_kind": "squared_euclidean",
            "alpha_dof": 1.0,
            "grid": 1,
        }
    )
    phi_checkpoint: str | None = None
    dataset_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.lambda_gp < 0 or self.gamma < 0:
            raise EngineError("lambda_gp and gamma must be nonnegative")
        if self.n_disc < 1 or self.m < 1:
            raise EngineError("n_disc and m must be >= 1")
        if self.z_dist not in ("uniform", "normal"):
            raise EngineError(f"unknown z distribution {self.z_dist!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen"] = self.gen.to_dict()
        d["set_size"] = list(self.set_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "gen" in d:
            d["gen"] = GenConfig.from_dict(d["gen"])
        if "set_size" in d:
            d["set_size"] = tuple(d["set_size"])
        return cls(**d)


def sample_z(rng: np.random.Generator, shape, z_dist: str) -> np.ndarray:
    if z_dist == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
    return rng.standard_normal(size=shape).astype(np.float32)


def build_space(cfg: TrainConfig) -> SemanticSpace:
    spec = dict(cfg.space)
    kind = spec.get("kind", "channel_mean")
    if kind in ("channel_mean", "patch_mean"):
        return SemanticSpace(
            kind,
            spec.get("metric_kind", "squared_euclidean"),
            spec.get("alpha_dof", 1.0),
            grid=spec.get("grid", 1),
        )
    if kind == "triplet_net":
        if not cfg.phi_checkpoint:
            raise EngineError("triplet_net space needs phi_checkpoint")
        return load_triplet_space(cfg.phi_checkpoint)
    raise EngineError(f"unknown space kind {kind!r}")


def load_triplet_space(path: str) -> SemanticSpace:
    ck = load_checkpoint(path)
    if ck.kind != "triplet_phi":
        raise CheckpointError(f"expected a triplet_phi checkpoint, got {ck.kind!r}")
    spec = ck.config["space"]
    net = init_triplet_phi(
        np.random.default_rng(0),
        image_size=spec["image_size"],
        channels=tuple(spec["channels"]),
        emb_dim=spec["emb_dim"],
    )
    assign_from_arrays(nn.named_tensors(net), ck.arrays, prefix="phi.")
    nn.set_requires_grad(net, False)
    return SemanticSpace(
        "triplet_net", spec.get("metric_kind", "squared_euclidean"),
        spec.get("alpha_dof", 1.0), net=net,
    )


def save_triplet_space(path: str, space: SemanticSpace, cfg_echo: dict, report: dict) -> str:
    net = space.net
    spec = {
        "kind": "triplet_net",
        "metric_kind": space.metric_kind,
        "alpha_dof": space.alpha_dof,
        "image_size": net.image_size,
        "emb_dim": net.emb_dim,
        "channels": [c.weight.shape[0] for c in net.convs],
    }
    tensors = {f"phi.{k}": t for k, t in nn.named_tensors(net).items()}
    return save_checkpoint(
        path,
        tensors,
        {"space": spec, "train": cfg_echo, "report": report},
        iteration=cfg_echo.get("iterations", 0),
        rng_state=None,
        kind="triplet_phi",
    )


@dataclass
class DiscBatch:
    x_real: np.ndarray  # [m,3,H,W]
    sets: list[ConstraintSet] | None  # None for the unconstrained baseline
    z: np.ndarray  # [m,n_z]
    eps: np.ndarray  # [m]


@dataclass
class GenBatch:
    sets: list[ConstraintSet] | None
    z: np.ndarray


def _generate_for(gen_params, sets, z: Tensor, p: int) -> Tensor:
    if isinstance(gen_params, PlainGeneratorParams):
        return generate_plain(z, gen_params)
    return generate_batch(sets, z, gen_params, p)


def discriminator_step(
    batch: DiscBatch,
    gen_params,
    disc: DiscriminatorParams,
    cfg: TrainConfig,
    opt: nn.Adam,
) -> dict:
    """One critic update; generator parameters are never touched."""
    if batch.x_real.shape[0] == 0:
        raise EngineError("empty batch")
    with eg.no_grad():
        x_fake = _generate_for(gen_params, batch.sets, Tensor(batch.z), cfg.gen.p).data
    with Tape():
        s_fake = discriminator_score(Tensor(x_fake), disc)
        s_real = discriminator_score(Tensor(batch.x_real), disc)
        penalty, norms = gradient_penalty(
            lambda t: discriminator_score(t, disc),
            batch.x_real,
            x_fake,
            batch.eps,
            cfg.lambda_gp,
        )
        loss = eg.add(eg.sub(eg.mean(s_fake), eg.mean(s_real)), penalty)
        eg.backward(loss)
    opt.step()
    opt.zero_grad()
    return {
        "d_loss": loss.item(),
        "w_estimate": float(np.mean(s_real.data) - np.mean(s_fake.data)),
        "gp": penalty.item(),
        "grad_norm_mean": float(norms.mean()),
    }


def generator_step(
    batch: GenBatch,
    gen_params,
    disc: DiscriminatorParams,
    space: SemanticSpace | None,
    cfg: TrainConfig,
    opt: nn.Adam,
) -> dict:
    """One generator update; critic and phi parameters stay frozen."""
    if batch.z.shape[0] == 0:
        raise EngineError("empty batch")
    nn.set_requires_grad(disc, False)
    try:
        with Tape():
            x_hat = _generate_for(gen_params, batch.sets, Tensor(batch.z), cfg.gen.p)
            score_term = eg.neg(eg.mean(discriminator_score(x_hat, disc)))
            constraint_loss = None
            if batch.sets is not None and space is not None:
                emb = space.embed(x_hat)  # [m,k], gradient flows into x_hat
                k_dim = emb.shape[1]
                per_set = []
                for i, cs in enumerate(batch.sets):
                    pos, neg = set_embeddings(cs, space)
                    e_i = eg.reshape(eg.take_range(emb, 0, i, i + 1), (k_dim,))
                    per_set.append(critic_loss_from_embeddings(e_i, pos, neg, space))
                c_mean = eg.mean(eg.stack(per_set))
                constraint_loss = c_mean.item()
                if cfg.gamma > 0:
                    loss = eg.add(score_term, eg.scale(c_mean, cfg.gamma))
                else:
                    loss = score_term
            else:
                loss = score_term
            eg.backward(loss)
    finally:
        nn.set_requires_grad(disc, True)
    opt.step()
    opt.zero_grad()
    return {
        "g_loss": loss.item(),
        "score_term": score_term.item(),
        "constraint_loss": constraint_loss,
    }


def _collect_tensors(gen_params, disc, space: SemanticSpace | None) -> dict:
    tensors = {f"gen.{k}": t for k, t in nn.named_tensors(gen_params).items()}
    tensors.update({f"disc.{k}": t for k, t in nn.named_tensors(disc).items()})
    if space is not None and space.net is not None:
        tensors.update({f"phi.{k}": t for k, t in nn.named_tensors(space.net).items()})
    return tensors


def _optimizer_tensors(opt: nn.Adam, tag: str) -> dict:
    out = {}
    for name in opt.params:
        out[f"optim.{tag}.m.{name}"] = opt.state.m[name]
        out[f"optim.{tag}.v.{name}"] = opt.state.v[name]
    return out


def _apply_warm_start(gen_params, disc, path: str) -> None:
    """Copy the write network and discriminator from a pretrained baseline."""
    ck = load_checkpoint(path)
    named = {f"gen.{k}": t for k, t in nn.named_tensors(gen_params).items()}
    named.update({f"disc.{k}": t for k, t in nn.named_tensors(disc).items()})
    copied = 0
    for key, arr in ck.arrays.items():
        if not (key.startswith("disc.") or key.startswith("gen.write.")):
            continue
        if key not in named:
            raise CheckpointError(f"warm start tensor {key!r} has no destination")
        if tuple(arr.shape) != named[key].shape:
            raise CheckpointError(
                f"warm start shape mismatch for {key!r}: "
                f"{arr.shape} vs {named[key].shape}"
            )
        named[key].data = arr.copy()
        copied += 1
    if copied == 0:
        raise CheckpointError(f"no warm-start tensors found in {path}")


class MetricsLog:
    def __init__(self, path: str | None):
        self.path = path
        self.rows: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._fh = open(path, "w")
        else:
            self._fh = None

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen


def _train_loop(
    cfg: TrainConfig,
    dataset: Dataset,
    space: SemanticSpace | None,
    constrained: bool,
    resume: str | None = None,
):
    rng = np.random.default_rng(cfg.seed)
    init_rng = np.random.default_rng(rng.integers(2**63))
    gen_params = (
        init_generator(cfg.gen, init_rng)
        if constrained
        else init_plain_generator(cfg.gen, init_rng)
    )
    disc = init_discriminator(cfg.gen, init_rng)
    if cfg.warm_start:
        _apply_warm_start(gen_params, disc, cfg.warm_start)

    train_ids, _ = dataset.split()
    sampler = (
        ConstraintSampler(dataset, space, train_ids) if constrained else None
    )
    train_images = dataset.images(train_ids)

    opt_g = nn.Adam(
        nn.named_tensors(gen_params), cfg.adam_alpha, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    opt_d = nn.Adam(
        nn.named_tensors(disc), cfg.adam_alpha, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    start_iter = 0
    if resume:
        ck = load_checkpoint(resume)
        assign_from_arrays(nn.named_tensors(gen_params), ck.arrays, prefix="gen.")
        assign_from_arrays(nn.named_tensors(disc), ck.arrays, prefix="disc.")
        for tag, opt in (("d", opt_d), ("g", opt_g)):
            for name in opt.params:
                opt.state.m[name][...] = ck.arrays[f"optim.{tag}.m.{name}"]
                opt.state.v[name][...] = ck.arrays[f"optim.{tag}.v.{name}"]
            opt.state.t = int(ck.extra["opt_t"][tag])
        rng = _restore_rng(ck.rng_state)
        start_iter = ck.iteration

    kind = "congan" if constrained else "wgan"
    log = MetricsLog(os.path.join(cfg.out_dir, "metrics.jsonl") if cfg.out_dir else None)

    def sample_sets():
        sampled = [sampler.sample(cfg.set_size, cfg.constraint_mode, rng) for _ in range(cfg.m)]
        return [to_constraint_set(dataset, s) for s in sampled]

    def checkpoint_path(it):
        return os.path.join(cfg.out_dir, f"ckpt_{it:06d}")

    echo = cfg.to_dict()
    if constrained and space is not None and space.net is not None:
        # embed the net structure so the checkpoint loads without the
        # original phi checkpoint on disk
        echo["space"] = {
            "kind": "triplet_net",
            "metric_kind": space.metric_kind,
            "alpha_dof": space.alpha_dof,
            "image_size": space.net.image_size,
            "emb_dim": space.net.emb_dim,
            "channels": [c.weight.shape[0] for c in space.net.convs],
        }

    def save(it, path=None):
        if not cfg.out_dir:
            return None
        tensors = _collect_tensors(gen_params, disc, space if constrained else None)
        tensors.update(_optimizer_tensors(opt_d, "d"))
        tensors.update(_optimizer_tensors(opt_g, "g"))
        return save_checkpoint(
            path or checkpoint_path(it),
            tensors,
            echo,
            iteration=it,
            rng_state=rng.bit_generator.state,
            kind=kind,
            extra={"opt_t": {"d": opt_d.state.t, "g": opt_g.state.t}},
        )

    if space is not None and space.net is not None:
        nn.set_requires_grad(space.net, False)

    for it in range(start_iter + 1, cfg.iterations + 1):
        w_est = []
        d_losses = []
        for _ in range(cfg.n_disc):
            idx = rng.integers(0, len(train_ids), size=cfg.m)
            x_real = train_images[idx]
            sets = sample_sets() if constrained else None
            z = sample_z(rng, (cfg.m, cfg.gen.n_z), cfg.z_dist)
            eps = rng.uniform(0.0, 1.0, size=cfg.m).astype(np.float32)
            stats = discriminator_step(
                DiscBatch(x_real, sets, z, eps), gen_params, disc, cfg, opt_d
            )
            w_est.append(stats["w_estimate"])
            d_losses.append(stats["d_loss"])
        sets = sample_sets() if constrained else None
        z = sample_z(rng, (cfg.m, cfg.gen.n_z), cfg.z_dist)
        g_stats = generator_step(
            GenBatch(sets, z), gen_params, disc, space if constrained else None, cfg, opt_g
        )
        log.write(
            {
                "iteration": it,
                "w_estimate": float(np.mean(w_est)),
                "d_loss": float(np.mean(d_losses)),
                "g_loss": g_stats["g_loss"],
                "constraint_loss": g_stats["constraint_loss"],
            }
        )
        if cfg.out_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save(it)
    final_path = save(cfg.iterations, os.path.join(cfg.out_dir, "final")) if cfg.out_dir else None
    log.close()
    return gen_params, disc, log.rows, final_path


def train(cfg: TrainConfig, dataset: Dataset | None = None, space: SemanticSpace | None = None,
          resume: str | None = None):
    """Full constrained training; deterministic for a fixed seed."""
    dataset = dataset or Dataset(cfg.dataset_dir)
    space = space or build_space(cfg)
    return _train_loop(cfg, dataset, space, constrained=True, resume=resume)


def train_wgan_baseline(cfg: TrainConfig, dataset: Dataset | None = None,
                        resume: str | None = None):
    """Unconstrained baseline: plain write-network generator, no critic term."""
    dataset = dataset or Dataset(cfg.dataset_dir)
    return _train_loop(cfg, dataset, None, constrained=False, resume=resume)


def load_generator(path: str):
    """Rebuild generator (and space when embedded) from a checkpoint."""
    ck = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ck.config)
    rng = np.random.default_rng(0)
    if ck.kind == "congan":
        gen_params = init_generator(cfg.gen, rng)
    elif ck.kind == "wgan":
        gen_params = init_plain_generator(cfg.gen, rng)
    else:
        raise CheckpointError(f"checkpoint kind {ck.kind!r} has no generator")
    assign_from_arrays(nn.named_tensors(gen_params), ck.arrays, prefix="gen.")
    nn.set_requires_grad(gen_params, False)
    space = None
    if ck.kind == "congan":
        if cfg.space.get("kind") == "triplet_net":
            spec = cfg.space
            net = init_triplet_phi(
                rng,
                image_size=spec.get("image_size", cfg.gen.image_size),
                channels=tuple(spec.get("channels", (8, 16))),
                emb_dim=spec.get("emb_dim", 2),
            )
            assign_from_arrays(nn.named_tensors(net), ck.arrays, prefix="phi.")
            nn.set_requires_grad(net, False)
            space = SemanticSpace(
                "triplet_net", spec.get("metric_kind", "squared_euclidean"),
                spec.get("alpha_dof", 1.0), net=net,
            )
        else:
            space = build_space(cfg)
    return gen_params, cfg, space, ck


def load_discriminator(path: str):
    ck = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ck.config)
    disc = init_discriminator(cfg.gen, np.random.default_rng(0))
    assign_from_arrays(nn.named_tensors(disc), ck.arrays, prefix="disc.")
    nn.set_requires_grad(disc, False)
    return disc, cfg, ck
