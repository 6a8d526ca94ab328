"""Semantic spaces and constraint satisfaction.

A space is a differentiable map from images to R^k plus a distance kind and
the degrees-of-freedom of the heavy-tailed comparison kernel. Constraint
satisfaction compares distances in that space; the critic loss averages the
kernel-ratio probability over a constraint set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as eg
from . import nn
from .engine import Tensor


class SemanticError(ValueError):
    pass


@dataclass
class Constraint:
    """Ordered image pair: generate something more like `positive`."""

    positive: np.ndarray  # [3,H,W] in [-1,1]
    negative: np.ndarray
    positive_id: int | None = None
    negative_id: int | None = None

    def __post_init__(self):
        if self.positive.shape != self.negative.shape:
            raise SemanticError(
                f"constraint images differ in shape: "
                f"{self.positive.shape} vs {self.negative.shape}"
            )


@dataclass
class ConstraintSet:
    constraints: list[Constraint]

    def __post_init__(self):
        if not self.constraints:
            raise SemanticError("constraint set must contain at least one constraint")

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)


def phi_channel_mean(image: Tensor) -> Tensor:
    """Per-channel spatial mean; accepts [3,H,W] or [N,3,H,W]."""
    if image.ndim == 3:
        if image.shape[0] != 3:
            raise SemanticError(f"expected 3 channels, got {image.shape[0]}")
        return eg.mean(image, axis=(1, 2))
    if image.ndim == 4:
        if image.shape[1] != 3:
            raise SemanticError(f"expected 3 channels, got {image.shape[1]}")
        return eg.mean(image, axis=(2, 3))
    raise SemanticError(f"expected [3,H,W] or [N,3,H,W], got {image.shape}")


def phi_patch_mean(image: Tensor, grid: int) -> Tensor:
    """Per-channel mean over each cell of a grid x grid partition.

    Cells are concatenated in row-major order; grid=1 reduces to the
    channel mean.
    """
    batched = image.ndim == 4
    h, w = image.shape[-2], image.shape[-1]
    if h % grid or w % grid:
        raise SemanticError(f"image {h}x{w} not divisible into a {grid}x{grid} grid")
    ch, cw = h // grid, w // grid
    haxis, waxis = (2, 3) if batched else (1, 2)
    cells = []
    for i in range(grid):
        rows = eg.take_range(image, haxis, i * ch, (i + 1) * ch)
        for j in range(grid):
            cell = eg.take_range(rows, waxis, j * cw, (j + 1) * cw)
            cells.append(eg.mean(cell, axis=(haxis, waxis)))
    return eg.concat(cells, axis=1 if batched else 0)


@dataclass
class TripletPhiParams:
    convs: list[nn.ConvParams]
    norms: dict[int, nn.LayerNormParams]
    fc: nn.DenseParams
    image_size: int
    emb_dim: int


def init_triplet_phi(
    rng: np.random.Generator,
    image_size: int = 16,
    channels: Sequence[int] = (8, 16),
    emb_dim: int = 2,
    dtype=None,
) -> TripletPhiParams:
    convs = []
    c_prev = 3
    size = image_size
    for c in channels:
        convs.append(nn.init_conv(rng, c_prev, c, k=3, stride=2, pad=1, dtype=dtype))
        c_prev = c
        size //= 2
    norms = {i: nn.init_layer_norm(convs[i].bias.shape[0], dtype=dtype)
             for i in range(len(convs)) if (i + 1) % 2 == 0}
    fc = nn.init_dense(rng, c_prev * size * size, emb_dim, dtype=dtype)
    return TripletPhiParams(convs, norms, fc, image_size, emb_dim)


def triplet_phi_forward(images: Tensor, p: TripletPhiParams) -> Tensor:
    batched = images.ndim == 4
    x = images
    for i, conv in enumerate(p.convs):
        x = eg.relu(nn.conv_layer(x, conv))
        if i in p.norms:
            x = nn.layer_norm_nd(x, p.norms[i], batched)
    flat = int(np.prod(x.shape[-3:]))
    x = eg.reshape(x, (x.shape[0], flat) if batched else (flat,))
    return nn.dense(x, p.fc)


@dataclass(frozen=True)
class SemanticSpace:
    """phi + distance kind + t-kernel degrees of freedom."""

    kind: str  # channel_mean | patch_mean | triplet_net
    metric_kind: str = "squared_euclidean"
    alpha_dof: float = 1.0
    grid: int = 1
    net: TripletPhiParams | None = None

    def __post_init__(self):
        if self.alpha_dof <= 0:
            raise SemanticError("alpha_dof must be positive")
        if self.metric_kind not in ("squared_euclidean", "euclidean"):
            raise SemanticError(f"unknown metric kind {self.metric_kind!r}")

    def embed(self, image: Tensor) -> Tensor:
        if self.kind == "channel_mean":
            return phi_channel_mean(image)
        if self.kind == "patch_mean":
            return phi_patch_mean(image, self.grid)
        if self.kind == "triplet_net":
            return triplet_phi_forward(image, self.net)
        raise SemanticError(f"unknown space kind {self.kind!r}")

    def embed_array(self, images: np.ndarray) -> np.ndarray:
        with eg.no_grad():
            return self.embed(Tensor(images)).data

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "metric_kind": self.metric_kind,
            "alpha_dof": self.alpha_dof,
            "grid": self.grid,
        }


def channel_mean_space(metric_kind="squared_euclidean", alpha_dof=1.0) -> SemanticSpace:
    return SemanticSpace("channel_mean", metric_kind, alpha_dof)


def patch_mean_space(grid: int, metric_kind="squared_euclidean", alpha_dof=1.0) -> SemanticSpace:
    return SemanticSpace("patch_mean", metric_kind, alpha_dof, grid=grid)


def d_S(a: Tensor, b: Tensor, metric_kind: str = "squared_euclidean") -> Tensor:
    if a.shape != b.shape:
        raise SemanticError(f"distance between different dims: {a.shape} vs {b.shape}")
    diff = eg.sub(a, b)
    sq = eg.tsum(eg.mul(diff, diff))
    if metric_kind == "squared_euclidean":
        return sq
    if metric_kind == "euclidean":
        return eg.sqrt(sq)
    raise SemanticError(f"unknown metric kind {metric_kind!r}")


def t_kernel(d, alpha_dof: float):
    """Heavy-tailed similarity kernel (1 + d/alpha)^(-(alpha+1)/2)."""
    if alpha_dof <= 0:
        raise SemanticError("alpha_dof must be positive")
    if isinstance(d, Tensor):
        if np.any(d.data < 0):
            raise SemanticError("t_kernel distance must be nonnegative")
        return eg.powf(eg.add(eg.scale(d, 1.0 / alpha_dof), 1.0), -(alpha_dof + 1) / 2)
    if d < 0:
        raise SemanticError("t_kernel distance must be nonnegative")
    return (1.0 + d / alpha_dof) ** (-(alpha_dof + 1) / 2)


def _kernel_logit(d_ab: Tensor, d_ac: Tensor, alpha_dof: float) -> Tensor:
    # log k(d_ab) - log k(d_ac), computed in log space so the ratio
    # k/(k+k') = sigmoid(logit) never underflows
    c = (alpha_dof + 1) / 2.0
    la = eg.log(eg.add(eg.scale(d_ab, 1.0 / alpha_dof), 1.0))
    lc = eg.log(eg.add(eg.scale(d_ac, 1.0 / alpha_dof), 1.0))
    return eg.scale(eg.sub(lc, la), c)


def p_S(a: Tensor, b: Tensor, c: Tensor, space: SemanticSpace) -> Tensor:
    """Probability-like score that a sits closer to b than to c."""
    d_ab = d_S(a, b, space.metric_kind)
    d_ac = d_S(a, c, space.metric_kind)
    return eg.sigmoid(_kernel_logit(d_ab, d_ac, space.alpha_dof))


def satisfies(x_hat, constraint: Constraint, space: SemanticSpace) -> bool:
    """Eq-style predicate: strictly closer to the positive image; ties fail."""
    with eg.no_grad():
        x = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
        e = space.embed(x)
        dp = d_S(e, space.embed(Tensor(constraint.positive)), space.metric_kind)
        dn = d_S(e, space.embed(Tensor(constraint.negative)), space.metric_kind)
    return float(dp.data) < float(dn.data)


def _pairwise_sq_dists(e: Tensor, points: Tensor) -> Tensor:
    """Squared distances from one embedding [k] to rows of points [n,k]."""
    n, k = points.shape
    diff = eg.sub(eg.broadcast_to(eg.reshape(e, (1, k)), (n, k)), points)
    return eg.tsum(eg.mul(diff, diff), axis=1)


def _dists_from_sq(sq: Tensor, metric_kind: str) -> Tensor:
    return sq if metric_kind == "squared_euclidean" else eg.sqrt(sq)


def critic_loss_from_embeddings(
    e: Tensor, pos: Tensor, neg: Tensor, space: SemanticSpace
) -> Tensor:
    """-(1/n) sum p_S(e, pos_i, neg_i); pos/neg are constant [n,k] rows."""
    d_ab = _dists_from_sq(_pairwise_sq_dists(e, pos), space.metric_kind)
    d_ac = _dists_from_sq(_pairwise_sq_dists(e, neg), space.metric_kind)
    p = eg.sigmoid(_kernel_logit(d_ab, d_ac, space.alpha_dof))
    return eg.neg(eg.mean(p))


def set_embeddings(cs: ConstraintSet, space: SemanticSpace) -> tuple[Tensor, Tensor]:
    """Embed all constraint images as constants: ([n,k] pos, [n,k] neg)."""
    imgs = np.stack(
        [c.positive for c in cs.constraints] + [c.negative for c in cs.constraints]
    )
    emb = space.embed_array(imgs)
    n = len(cs.constraints)
    return Tensor(emb[:n]), Tensor(emb[n:])


def constraint_critic_loss(x_hat, cs: ConstraintSet, space: SemanticSpace) -> Tensor:
    """Average t-STE score over the set, negated; in (-1, 0)."""
    if not isinstance(cs, ConstraintSet):
        cs = ConstraintSet(list(cs))
    x = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    pos, neg = set_embeddings(cs, space)
    return critic_loss_from_embeddings(space.embed(x), pos, neg, space)


@dataclass
class TripletPhiConfig:
    iterations: int = 1500
    batch_size: int = 64
    adam_alpha: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    emb_dim: int = 3  # the octant structure of shape colors needs three axes
    channels: tuple = (8, 16)
    alpha_dof: float = 1.0
    metric_kind: str = "squared_euclidean"
    seed: int = 0
    eval_batch: int = 512


def triplet_satisfaction(
    params: TripletPhiParams, images: np.ndarray, triplets, batch: int = 512
) -> float:
    """Fraction of (a,b,c) index triplets with d(f(a),f(b)) < d(f(a),f(c))."""
    if len(triplets) == 0:
        raise SemanticError("empty triplet list")
    with eg.no_grad():
        emb = []
        for lo in range(0, len(images), batch):
            emb.append(triplet_phi_forward(Tensor(images[lo : lo + batch]), params).data)
        emb = np.concatenate(emb)
    idx = np.asarray(triplets)
    d_ab = ((emb[idx[:, 0]] - emb[idx[:, 1]]) ** 2).sum(axis=1)
    d_ac = ((emb[idx[:, 0]] - emb[idx[:, 2]]) ** 2).sum(axis=1)
    return float((d_ab < d_ac).mean())


def train_triplet_phi(
    images: np.ndarray,
    triplets: Sequence[tuple[int, int, int]],
    cfg: TripletPhiConfig,
    test_triplets: Sequence[tuple[int, int, int]] | None = None,
) -> tuple[SemanticSpace, dict]:
    """Fit a small conv net so triplet anchors sit nearer their B than their C.

    Maximizes the summed log t-STE probability. When no test split is given,
    a tenth of the triplets is held out. Returns the learned space and a
    report with the held-out satisfaction rate.
    """
    triplets = list(triplets)
    if not triplets:
        raise SemanticError("empty triplet source")
    rng = np.random.default_rng(cfg.seed)
    if test_triplets is None:
        order = rng.permutation(len(triplets))
        n_hold = max(1, len(triplets) // 10)
        test_triplets = [triplets[i] for i in order[:n_hold]]
        triplets = [triplets[i] for i in order[n_hold:]]
    else:
        test_triplets = list(test_triplets)

    params = init_triplet_phi(
        rng, image_size=images.shape[-1], channels=tuple(cfg.channels), emb_dim=cfg.emb_dim
    )
    named = nn.named_tensors(params)
    opt = nn.Adam(named, cfg.adam_alpha, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    tri = np.asarray(triplets)
    losses = []
    c = (cfg.alpha_dof + 1) / 2.0
    for _ in range(cfg.iterations):
        take = rng.integers(0, len(tri), size=cfg.batch_size)
        batch = tri[take]
        stackd = np.concatenate([images[batch[:, j]] for j in range(3)])
        with eg.Tape():
            emb = triplet_phi_forward(Tensor(stackd), params)
            b = cfg.batch_size
            ea = eg.take_range(emb, 0, 0, b)
            ebp = eg.take_range(emb, 0, b, 2 * b)
            ec = eg.take_range(emb, 0, 2 * b, 3 * b)
            d_ab = eg.tsum(eg.mul(eg.sub(ea, ebp), eg.sub(ea, ebp)), axis=1)
            d_ac = eg.tsum(eg.mul(eg.sub(ea, ec), eg.sub(ea, ec)), axis=1)
            if cfg.metric_kind == "euclidean":
                d_ab, d_ac = eg.sqrt(d_ab), eg.sqrt(d_ac)
            u = eg.scale(
                eg.sub(
                    eg.log(eg.add(eg.scale(d_ac, 1.0 / cfg.alpha_dof), 1.0)),
                    eg.log(eg.add(eg.scale(d_ab, 1.0 / cfg.alpha_dof), 1.0)),
                ),
                c,
            )
            loss = eg.mean(eg.softplus(eg.neg(u)))  # -mean log p_S
            eg.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())

    space = SemanticSpace(
        "triplet_net", cfg.metric_kind, cfg.alpha_dof, net=params
    )
    rate = triplet_satisfaction(params, images, test_triplets, cfg.eval_batch)
    report = {
        "holdout_satisfaction": rate,
        "n_train_triplets": len(triplets),
        "n_test_triplets": len(test_triplets),
        "final_loss": losses[-1] if losses else None,
    }
    return space, report


def sample_color_triplets(dataset, n: int, rng: np.random.Generator, ids=None):
    """Bin-structured triplets: A,B share a dominant color bin, C does not.

    `dataset` only needs a dominant_bins() list. Bins with fewer than two
    members are skipped. `ids` restricts sampling to a subset (e.g. a split);
    returned indices are always dataset-global.
    """
    all_bins = np.asarray(dataset.dominant_bins())
    pool = np.arange(len(all_bins)) if ids is None else np.asarray(sorted(ids))
    bins = all_bins[pool]
    members = {b: pool[np.flatnonzero(bins == b)] for b in np.unique(bins)}
    eligible = [b for b, m in members.items() if len(m) >= 2 and len(m) < len(pool)]
    if not eligible:
        raise SemanticError("no color bin has two members plus an outside image")
    out = []
    for _ in range(n):
        b = eligible[rng.integers(len(eligible))]
        a_i, b_i = rng.choice(members[b], size=2, replace=False)
        while True:
            c_i = int(pool[rng.integers(len(pool))])
            if all_bins[c_i] != b:
                break
        out.append((int(a_i), int(b_i), int(c_i)))
    return out
