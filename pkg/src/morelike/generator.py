"""The constrained generator: read each pair, fold the set with attended
LSTM iterations, write an image with transpose convolutions.

The fold is order-invariant because constraints only enter through a
softmax-weighted sum of their encodings. A batched path concatenates all
constraint images of a batch through the read stack at once and pads the
per-sample encoding lists for the process loop.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import engine as eg
from . import nn
from .engine import EngineError, Tensor
from .semantic import Constraint, ConstraintSet


@dataclass
class GenConfig:
    image_size: int = 16
    n_z: int = 32
    h: int = 32
    p: int = 5
    read_channels: tuple = (8, 16, 32)
    write_channels: tuple = (64, 32, 16)  # base map channels, then per-upsample
    disc_channels: tuple = (8, 16, 32, 64)  # first conv stride 1, rest stride 2

    def __post_init__(self):
        s = self.image_size
        if s < 8 or (s & (s - 1)) != 0:
            raise EngineError("image_size must be a power of two >= 8")
        if self.p < 1:
            raise EngineError("p must be >= 1")
        ups = int(np.log2(s / 4))
        if len(self.write_channels) != ups + 1:
            raise EngineError(
                f"write_channels needs {ups + 1} entries for {s}x{s} images"
            )
        if s >> len(self.read_channels) < 1:
            raise EngineError("too many read conv layers for this image size")

    @property
    def read_feature_dim(self) -> int:
        side = self.image_size >> len(self.read_channels)
        return self.read_channels[-1] * side * side

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("read_channels", "write_channels", "disc_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for k in ("read_channels", "write_channels", "disc_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _pair_norms(n_layers: int, channels, dtype=None) -> dict:
    return {
        i: nn.init_layer_norm(channels[i], dtype=dtype)
        for i in range(n_layers)
        if (i + 1) % 2 == 0
    }


@dataclass
class ReadParams:
    convs: list[nn.ConvParams]
    norms: dict[int, nn.LayerNormParams]
    fc: nn.DenseParams  # [2F] -> [h], tanh


@dataclass
class WriteParams:
    fc: nn.DenseParams  # [s] -> [c0*4*4]
    tconvs: list[nn.ConvParams]
    norms: dict[int, nn.LayerNormParams]
    out: nn.ConvParams  # 3x3 stride 1 -> 3 channels, tanh
    base_channels: int


@dataclass
class GeneratorParams:
    read: ReadParams
    lstm: nn.LstmCellParams
    fc_s: nn.DenseParams  # [2h] -> [n_z]
    write: WriteParams


@dataclass
class PlainGeneratorParams:
    """Write-network-only generator mapping z directly to an image."""

    write: WriteParams


def init_read(cfg: GenConfig, rng, dtype=None) -> ReadParams:
    convs = []
    c_prev = 3
    for c in cfg.read_channels:
        convs.append(nn.init_conv(rng, c_prev, c, k=3, stride=2, pad=1, dtype=dtype))
        c_prev = c
    norms = _pair_norms(len(convs), cfg.read_channels, dtype)
    fc = nn.init_dense(rng, 2 * cfg.read_feature_dim, cfg.h, dtype=dtype)
    return ReadParams(convs, norms, fc)


def init_write(cfg: GenConfig, rng, dtype=None) -> WriteParams:
    c0 = cfg.write_channels[0]
    fc = nn.init_dense(rng, cfg.n_z, c0 * 4 * 4, dtype=dtype)
    tconvs = []
    c_prev = c0
    for c in cfg.write_channels[1:]:
        tconvs.append(
            nn.init_conv(rng, c_prev, c, k=4, stride=2, pad=1, transpose=True, dtype=dtype)
        )
        c_prev = c
    norms = _pair_norms(len(tconvs), cfg.write_channels[1:], dtype)
    out = nn.init_conv(rng, c_prev, 3, k=3, stride=1, pad=1, dtype=dtype)
    return WriteParams(fc, tconvs, norms, out, c0)


def init_generator(cfg: GenConfig, rng, dtype=None) -> GeneratorParams:
    read = init_read(cfg, rng, dtype)
    # attention dots c_i . q_t require the read encoding dim to equal the
    # LSTM hidden dim, so q*_t = [q_t, r_t] has length 2h
    lstm = nn.init_lstm(rng, cfg.h, 2 * cfg.h + cfg.n_z, dtype=dtype)
    fc_s = nn.init_dense(rng, 2 * cfg.h, cfg.n_z, dtype=dtype)
    write = init_write(cfg, rng, dtype)
    return GeneratorParams(read, lstm, fc_s, write)


def init_plain_generator(cfg: GenConfig, rng, dtype=None) -> PlainGeneratorParams:
    return PlainGeneratorParams(init_write(cfg, rng, dtype))


def read_features(images: Tensor, rp: ReadParams) -> Tensor:
    """Shared conv feature extractor; images [M,3,H,W] -> [M,F]."""
    x = images
    for i, conv in enumerate(rp.convs):
        x = eg.relu(nn.conv_layer(x, conv))
        if i in rp.norms:
            x = nn.layer_norm_nd(x, rp.norms[i], batched=True)
    flat = int(np.prod(x.shape[1:]))
    return eg.reshape(x, (x.shape[0], flat))


def encode_pairs(pair_images: Tensor, rp: ReadParams) -> Tensor:
    """pair_images [2K,3,H,W] ordered (pos0, neg0, pos1, neg1, ...) -> [K,h]."""
    feats = read_features(pair_images, rp)
    k2, f = feats.shape
    paired = eg.reshape(feats, (k2 // 2, 2 * f))
    return eg.tanh(nn.dense(paired, rp.fc))


def read_constraint(c: Constraint, params: GeneratorParams) -> Tensor:
    """Encode one constraint into a vector in (-1,1)^h."""
    imgs = Tensor(np.stack([c.positive, c.negative]).astype(params.read.fc.weight.dtype))
    return eg.reshape(encode_pairs(imgs, params.read), (-1,))


def process(encodings, z: Tensor, params: GeneratorParams, p: int) -> Tensor:
    """Fold a list of [h] encodings into s; invariant to list order."""
    encodings = list(encodings)
    if not encodings:
        raise EngineError("process requires at least one encoding")
    e_mat = eg.stack(encodings)  # [n, h]
    h = encodings[0].shape[0]
    dt = z.dtype
    q_star = eg.zeros((2 * h,), dtype=dt)
    cell = eg.zeros((h,), dtype=dt)
    for _ in range(p):
        q, cell = nn.lstm_cell(z, q_star, cell, params.lstm)
        logits = eg.matmul(e_mat, q)  # [n]
        attn = eg.softmax(logits)
        r = eg.matmul(eg.transpose(e_mat), attn)  # [h]
        q_star = eg.concat([q, r])
    return nn.dense(q_star, params.fc_s)


def attention_trace(encodings, z: Tensor, params: GeneratorParams, p: int):
    """Attention weights per iteration (diagnostics/tests)."""
    weights = []
    e_mat = eg.stack(list(encodings))
    h = e_mat.shape[1]
    q_star = eg.zeros((2 * h,), dtype=z.dtype)
    cell = eg.zeros((h,), dtype=z.dtype)
    for _ in range(p):
        q, cell = nn.lstm_cell(z, q_star, cell, params.lstm)
        attn = eg.softmax(eg.matmul(e_mat, q))
        weights.append(attn.data.copy())
        r = eg.matmul(eg.transpose(e_mat), attn)
        q_star = eg.concat([q, r])
    return weights


def write_image(s: Tensor, wp: WriteParams) -> Tensor:
    """Map s to an image in (-1,1)^(3,H,W); batched when s is [B,n_z]."""
    batched = s.ndim == 2
    x = nn.dense(s, wp.fc)
    c0 = wp.base_channels
    x = eg.reshape(x, (x.shape[0], c0, 4, 4) if batched else (c0, 4, 4))
    for i, tconv in enumerate(wp.tconvs):
        x = eg.relu(nn.conv_layer(x, tconv))
        if i in wp.norms:
            x = nn.layer_norm_nd(x, wp.norms[i], batched)
    return eg.tanh(nn.conv_layer(x, wp.out))


def generate(cs: ConstraintSet, z: Tensor, params: GeneratorParams, p: int = 5) -> Tensor:
    """g(C, z): deterministic image from a non-empty constraint set and noise."""
    if isinstance(cs, (list, tuple)):
        cs = ConstraintSet(list(cs))
    dt = params.read.fc.weight.dtype
    imgs = np.empty((2 * len(cs), 3) + cs.constraints[0].positive.shape[1:], dtype=dt)
    for i, c in enumerate(cs.constraints):
        imgs[2 * i] = c.positive
        imgs[2 * i + 1] = c.negative
    enc = encode_pairs(Tensor(imgs), params.read)
    enc_list = [eg.reshape(eg.take_range(enc, 0, i, i + 1), (-1,)) for i in range(len(cs))]
    s = process(enc_list, z, params, p)
    return write_image(s, params.write)


def generate_plain(z: Tensor, params: PlainGeneratorParams) -> Tensor:
    return write_image(z, params.write)


NEG_MASK = -1e30  # exp() underflows to exactly 0 for padded attention slots


def generate_batch(
    sets: list[ConstraintSet], z: Tensor, params: GeneratorParams, p: int
) -> Tensor:
    """Batched g(C,z): one read pass over all constraint images, padded
    attention in the process loop, one write pass. z is [B, n_z]."""
    if not sets:
        raise EngineError("empty batch")
    sizes = [len(cs) for cs in sets]
    if min(sizes) < 1:
        raise EngineError("constraint sets must be non-empty")
    dt = params.read.fc.weight.dtype
    img_shape = sets[0].constraints[0].positive.shape
    total = sum(sizes)
    imgs = np.empty((2 * total, 3) + img_shape[1:], dtype=dt)
    row = 0
    for cs in sets:
        for c in cs.constraints:
            imgs[row] = c.positive
            imgs[row + 1] = c.negative
            row += 2
    enc = encode_pairs(Tensor(imgs), params.read)  # [total, h]

    b = len(sets)
    h = enc.shape[1]
    n_max = max(sizes)
    mask = np.zeros((b, n_max), dtype=dt)
    chunks = []
    off = 0
    for i, k in enumerate(sizes):
        part = eg.take_range(enc, 0, off, off + k)
        if k < n_max:
            part = eg.pad_range(part, 0, 0, n_max)
            mask[i, k:] = NEG_MASK
        chunks.append(eg.reshape(part, (1, n_max, h)))
        off += k
    e_mat = eg.concat(chunks, axis=0)  # [B, n_max, h]
    mask_t = Tensor(mask)

    q_star = eg.zeros((b, 2 * h), dtype=dt)
    cell = eg.zeros((b, h), dtype=dt)
    for _ in range(p):
        q, cell = nn.lstm_cell(z, q_star, cell, params.lstm)
        qb = eg.broadcast_to(eg.reshape(q, (b, 1, h)), (b, n_max, h))
        logits = eg.add(eg.tsum(eg.mul(e_mat, qb), axis=2), mask_t)
        attn = eg.softmax(logits, axis=1)  # [B, n_max]
        ab = eg.broadcast_to(eg.reshape(attn, (b, n_max, 1)), (b, n_max, h))
        r = eg.tsum(eg.mul(e_mat, ab), axis=1)  # [B, h]
        q_star = eg.concat([q, r], axis=1)
    s = nn.dense(q_star, params.fc_s)
    return write_image(s, params.write)
