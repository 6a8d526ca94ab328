"""Procedural shapes dataset, PPM codec, and constraint-set sampling.

Images are a uniform dark background with one filled square or circle of a
random color. Pair sampling orders each drawn pair by distance to a
reference image in the semantic space, so the reference satisfies every
emitted constraint by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .semantic import Constraint, ConstraintSet, SemanticSpace


BACKGROUND = (-1.0, -1.0, -1.0)
_TIE_RETRIES = 100


class DataError(ValueError):
    pass


def quantize(values: np.ndarray) -> np.ndarray:
    """Snap floats in [-1,1] to the 8-bit codec grid (same arithmetic as decode)."""
    u8 = np.clip(
        np.rint((np.asarray(values, dtype=np.float64) + 1.0) * 127.5), 0, 255
    ).astype(np.uint8)
    return u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def encode_ppm(image: np.ndarray) -> bytes:
    """[3,H,W] floats in [-1,1] -> binary P6 with maxval 255."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected [3,H,W] image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    u8 = np.clip(np.rint((image.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + u8.transpose(1, 2, 0).tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    """Binary P6 -> [3,H,W] float32 in [-1,1]."""
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        return blob[start:pos]

    if token() != b"P6":
        raise DataError("not a P6 PPM file")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise DataError("malformed PPM header") from None
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    raw = blob[pos : pos + need]
    if len(raw) != need:
        raise DataError(f"truncated PPM pixel data: {len(raw)} of {need} bytes")
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).transpose(2, 0, 1)


def color_bin(color: np.ndarray) -> int:
    """Octant of RGB sign pattern around mid-gray."""
    r, g, b = color
    return (int(r > 0) << 2) | (int(g > 0) << 1) | int(b > 0)


def dominant_color_bin(image: np.ndarray, background=BACKGROUND) -> int:
    """Most populated color octant among foreground pixels.

    Pixels matching the background color (within one quantization step) are
    excluded; a featureless image falls back to counting every pixel.
    """
    bg = np.asarray(background, dtype=np.float32).reshape(3, 1, 1)
    fg = np.any(np.abs(image - bg) > 0.5 / 127.5, axis=0)
    if not fg.any():
        fg = np.ones(image.shape[1:], dtype=bool)
    bins = (
        ((image[0] > 0).astype(np.int32) << 2)
        | ((image[1] > 0).astype(np.int32) << 1)
        | (image[2] > 0).astype(np.int32)
    )
    counts = np.bincount(bins[fg].ravel(), minlength=8)
    return int(np.argmax(counts))


@dataclass
class ShapeMeta:
    id: int
    file: str
    shape_kind: str  # square | circle
    color: tuple[float, float, float]
    size: float  # fraction of image width
    center: tuple[float, float]  # (x, y) pixel coords
    dominant_bin: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["color"] = [float(c) for c in self.color]
        d["center"] = [float(c) for c in self.center]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ShapeMeta":
        return cls(
            id=d["id"],
            file=d["file"],
            shape_kind=d["shape_kind"],
            color=tuple(d["color"]),
            size=d["size"],
            center=tuple(d["center"]),
            dominant_bin=d["dominant_bin"],
        )


def render_shape(meta: ShapeMeta, image_size: int) -> np.ndarray:
    img = np.empty((3, image_size, image_size), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND, dtype=np.float32).reshape(3, 1, 1)
    color = np.asarray(meta.color, dtype=np.float32).reshape(3, 1, 1)
    cx, cy = meta.center
    if meta.shape_kind == "square":
        side = max(1, int(round(meta.size * image_size)))
        left = int(round(cx - side / 2.0))
        top = int(round(cy - side / 2.0))
        img[:, top : top + side, left : left + side] = color
    elif meta.shape_kind == "circle":
        r = meta.size * image_size / 2.0
        ys, xs = np.mgrid[0:image_size, 0:image_size]
        mask = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
        img[:, mask] = np.broadcast_to(color, (3, image_size, image_size))[:, mask]
    else:
        raise DataError(f"unknown shape kind {meta.shape_kind!r}")
    return img


def _sample_meta(i: int, image_size: int, rng: np.random.Generator) -> ShapeMeta:
    kind = "square" if rng.random() < 0.5 else "circle"
    color = quantize(rng.uniform(-1.0, 1.0, size=3))
    size = float(rng.uniform(0.25, 0.75))
    if kind == "square":
        side = max(1, int(round(size * image_size)))
        side = min(side, image_size)
        left = int(rng.integers(0, image_size - side + 1))
        top = int(rng.integers(0, image_size - side + 1))
        center = (left + side / 2.0, top + side / 2.0)
    else:
        r = size * image_size / 2.0
        center = (
            float(rng.uniform(r, image_size - r)),
            float(rng.uniform(r, image_size - r)),
        )
    meta = ShapeMeta(
        id=i,
        file=f"img_{i:05d}.ppm",
        shape_kind=kind,
        color=tuple(float(c) for c in color),
        size=size,
        center=center,
        dominant_bin=0,
    )
    meta.dominant_bin = dominant_color_bin(render_shape(meta, image_size))
    return meta


def make_shapes_dataset(out_dir: str, n: int, image_size: int, seed: int) -> "Dataset":
    """Write n PPM images plus meta.jsonl and manifest.json; returns the Dataset."""
    if n < 1:
        raise DataError("dataset needs at least one image")
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    metas = []
    for i in range(n):
        meta = _sample_meta(i, image_size, rng)
        img = render_shape(meta, image_size)
        with open(os.path.join(out_dir, meta.file), "wb") as f:
            f.write(encode_ppm(img))
        metas.append(meta)
    with open(os.path.join(out_dir, "meta.jsonl"), "w") as f:
        for meta in metas:
            f.write(json.dumps(meta.to_json(), sort_keys=True) + "\n")
    manifest = {"image_size": image_size, "count": n, "seed": seed}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return Dataset(out_dir)


class Dataset:
    """Read access to a generated shapes directory; images cached on load."""

    def __init__(self, root: str):
        self.root = root
        try:
            with open(os.path.join(root, "manifest.json")) as f:
                self.manifest = json.load(f)
            with open(os.path.join(root, "meta.jsonl")) as f:
                self.metas = [ShapeMeta.from_json(json.loads(line)) for line in f]
        except FileNotFoundError as e:
            raise DataError(f"not a dataset directory: {root} ({e})") from None
        self.image_size = int(self.manifest["image_size"])
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.metas)

    @property
    def ids(self) -> list[int]:
        return [m.id for m in self.metas]

    def meta(self, image_id: int) -> ShapeMeta:
        try:
            return self.metas[image_id]
        except IndexError:
            raise DataError(f"unknown image id {image_id}") from None

    def image(self, image_id: int) -> np.ndarray:
        cached = self._cache.get(image_id)
        if cached is None:
            meta = self.meta(image_id)
            with open(os.path.join(self.root, meta.file), "rb") as f:
                cached = decode_ppm(f.read())
            self._cache[image_id] = cached
        return cached

    def images(self, ids=None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.stack([self.image(i) for i in ids])

    def dominant_bins(self) -> list[int]:
        return [m.dominant_bin for m in self.metas]

    def split(self, train_frac: float = 0.9) -> tuple[list[int], list[int]]:
        """Deterministic train/test id split, seeded from the manifest seed."""
        rng = np.random.default_rng(int(self.manifest["seed"]) + 1_000_003)
        order = rng.permutation(len(self.metas))
        cut = int(round(train_frac * len(order)))
        return sorted(int(i) for i in order[:cut]), sorted(int(i) for i in order[cut:])


@dataclass
class SampledSet:
    reference_id: int
    pairs: list[tuple[int, int]]  # (pos_id, neg_id)
    focused_bin: int | None = None

    def to_json(self) -> dict:
        return {
            "reference_id": self.reference_id,
            "constraints": [{"pos_id": p, "neg_id": n} for p, n in self.pairs],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SampledSet":
        return cls(
            reference_id=d["reference_id"],
            pairs=[(c["pos_id"], c["neg_id"]) for c in d["constraints"]],
        )


def to_constraint_set(dataset: Dataset, sampled: SampledSet) -> ConstraintSet:
    return ConstraintSet(
        [
            Constraint(dataset.image(p), dataset.image(n), p, n)
            for p, n in sampled.pairs
        ]
    )


class ConstraintSampler:
    """Draws ground-truth constraint sets; precomputes all embeddings once."""

    def __init__(self, dataset: Dataset, space: SemanticSpace, ids=None):
        self.dataset = dataset
        self.space = space
        self.ids = list(dataset.ids if ids is None else ids)
        if len(self.ids) < 3:
            raise DataError("need at least three images to sample constraints")
        emb = space.embed_array(dataset.images(self.ids))
        self._emb = {i: emb[row] for row, i in enumerate(self.ids)}
        bins = dataset.dominant_bins()
        self._by_bin: dict[int, list[int]] = {}
        for i in self.ids:
            self._by_bin.setdefault(bins[i], []).append(i)

    def _dist(self, a: int, b: int) -> float:
        d = float(((self._emb[a] - self._emb[b]) ** 2).sum())
        return d if self.space.metric_kind == "squared_euclidean" else float(np.sqrt(d))

    def _ordered_pair(self, ref: int, rng) -> tuple[int, int]:
        for _ in range(_TIE_RETRIES):
            u = self.ids[rng.integers(len(self.ids))]
            v = self.ids[rng.integers(len(self.ids))]
            du, dv = self._dist(u, ref), self._dist(v, ref)
            if du < dv:
                return u, v
            if dv < du:
                return v, u
        raise DataError("could not draw a tie-free pair after bounded retries")

    def _focused_pair(self, ref: int, bin_ids, other_ids, rng) -> tuple[int, int]:
        for _ in range(_TIE_RETRIES):
            pos = bin_ids[rng.integers(len(bin_ids))]
            neg = other_ids[rng.integers(len(other_ids))]
            if self._dist(pos, ref) < self._dist(neg, ref):
                return pos, neg
        raise DataError(
            "could not order a focused-bin pair against the reference "
            "after bounded retries"
        )

    def sample(self, size_range, mode: str, rng: np.random.Generator) -> SampledSet:
        lo, hi = size_range
        if lo < 1 or hi > 10 or lo > hi:
            raise DataError(f"size range must sit within [1,10], got {size_range}")
        k = int(rng.integers(lo, hi + 1))
        if mode not in ("uniform", "bin_focused"):
            raise DataError(f"unknown sampling mode {mode!r}")
        focused = mode == "bin_focused" and rng.random() >= 0.5
        if not focused:
            ref = self.ids[rng.integers(len(self.ids))]
            pairs = [self._ordered_pair(ref, rng) for _ in range(k)]
            return SampledSet(ref, pairs)
        candidates = [
            b
            for b, members in sorted(self._by_bin.items())
            if members and len(members) < len(self.ids)
        ]
        if not candidates:
            raise DataError("no color bin usable for focused sampling")
        b = candidates[rng.integers(len(candidates))]
        bin_ids = self._by_bin[b]
        other_ids = [i for i in self.ids if i not in set(bin_ids)]
        ref = bin_ids[rng.integers(len(bin_ids))]
        pairs = [self._focused_pair(ref, bin_ids, other_ids, rng) for _ in range(k)]
        return SampledSet(ref, pairs, focused_bin=b)


def sample_constraint_set(
    dataset: Dataset,
    space: SemanticSpace,
    size_range,
    mode: str,
    rng: np.random.Generator,
    ids=None,
) -> tuple[int, ConstraintSet]:
    sampler = ConstraintSampler(dataset, space, ids)
    sampled = sampler.sample(size_range, mode, rng)
    return sampled.reference_id, to_constraint_set(dataset, sampled)


def build_fixed_size_test_sets(
    dataset: Dataset,
    space: SemanticSpace,
    k_values,
    n_per_k: int,
    rng: np.random.Generator,
    out_dir: str,
    ids=None,
) -> dict[int, str]:
    """One JSON-lines suite per k, each set containing exactly k constraints."""
    if ids is None:
        _, ids = dataset.split()
    if len(ids) < 3:
        raise DataError("insufficient test images for suite construction")
    sampler = ConstraintSampler(dataset, space, ids)
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for k in k_values:
        path = os.path.join(out_dir, f"suite_k{k}.jsonl")
        with open(path, "w") as f:
            for _ in range(n_per_k):
                sampled = sampler.sample((k, k), "uniform", rng)
                f.write(json.dumps(sampled.to_json(), sort_keys=True) + "\n")
        paths[int(k)] = path
    return paths


def load_suite(path: str) -> list[SampledSet]:
    with open(path) as f:
        return [SampledSet.from_json(json.loads(line)) for line in f]
