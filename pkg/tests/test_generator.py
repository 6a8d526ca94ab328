import numpy as np
import pytest

from morelike import engine as eg
from morelike import generator as gn
from morelike import nn
from morelike import semantic as sm
from morelike.engine import EngineError, Tape, Tensor

from conftest import random_constraint_set


def make_params(cfg, seed=0, dtype=np.float32):
    return gn.init_generator(cfg, np.random.default_rng(seed), dtype=dtype)


class TestRead:
    def test_deterministic(self, tiny_cfg):
        params = make_params(tiny_cfg)
        rng = np.random.default_rng(1)
        c = random_constraint_set(rng, 1).constraints[0]
        a = gn.read_constraint(c, params)
        b = gn.read_constraint(c, params)
        assert np.array_equal(a.data, b.data)

    def test_range_open_unit(self, tiny_cfg):
        params = make_params(tiny_cfg)
        rng = np.random.default_rng(2)
        c = random_constraint_set(rng, 1).constraints[0]
        enc = gn.read_constraint(c, params)
        assert enc.shape == (tiny_cfg.h,)
        assert np.all(np.abs(enc.data) < 1.0)

    def test_swap_changes_encoding(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=3)
        rng = np.random.default_rng(3)
        c = random_constraint_set(rng, 1).constraints[0]
        fwd = gn.read_constraint(c, params)
        rev = gn.read_constraint(sm.Constraint(c.negative, c.positive), params)
        assert np.max(np.abs(fwd.data - rev.data)) > 1e-6


class TestProcess:
    def test_single_constraint_attention_one(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=4)
        rng = np.random.default_rng(4)
        enc = [Tensor(rng.uniform(-1, 1, tiny_cfg.h).astype(np.float32))]
        z = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z).astype(np.float32))
        for attn in gn.attention_trace(enc, z, params, tiny_cfg.p):
            assert np.allclose(attn, [1.0])

    def test_identical_encodings_share_attention(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=5)
        rng = np.random.default_rng(5)
        e = Tensor(rng.uniform(-1, 1, tiny_cfg.h).astype(np.float32))
        z = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z).astype(np.float32))
        for attn in gn.attention_trace([e, e], z, params, tiny_cfg.p):
            assert np.allclose(attn, [0.5, 0.5])

    def test_attention_positive_sums_to_one(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=6)
        rng = np.random.default_rng(6)
        enc = [
            Tensor(rng.uniform(-1, 1, tiny_cfg.h).astype(np.float32)) for _ in range(7)
        ]
        z = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z).astype(np.float32))
        for attn in gn.attention_trace(enc, z, params, tiny_cfg.p):
            assert np.all(attn > 0)
            assert abs(attn.sum() - 1.0) <= 1e-6

    def test_permutations_near_identical(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=7)
        rng = np.random.default_rng(7)
        enc = [Tensor(rng.uniform(-1, 1, tiny_cfg.h).astype(np.float32)) for _ in range(7)]
        z = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z).astype(np.float32))
        base = gn.process(enc, z, params, tiny_cfg.p)
        for _ in range(50):
            perm = rng.permutation(7)
            out = gn.process([enc[i] for i in perm], z, params, tiny_cfg.p)
            assert np.max(np.abs(out.data - base.data)) <= 1e-5

    def test_empty_rejected(self, tiny_cfg):
        params = make_params(tiny_cfg)
        z = Tensor(np.zeros(tiny_cfg.n_z, dtype=np.float32))
        with pytest.raises(EngineError):
            gn.process([], z, params, tiny_cfg.p)


class TestWrite:
    def test_output_shape_and_range(self, desk_cfg):
        params = make_params(desk_cfg, seed=8)
        rng = np.random.default_rng(8)
        s = Tensor(rng.normal(size=desk_cfg.n_z).astype(np.float32))
        img = gn.write_image(s, params.write)
        assert img.shape == (3, 16, 16)
        assert np.all(np.abs(img.data) < 1.0)

    def test_deterministic(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=9)
        s = Tensor(np.random.default_rng(9).normal(size=tiny_cfg.n_z).astype(np.float32))
        assert np.array_equal(
            gn.write_image(s, params.write).data, gn.write_image(s, params.write).data
        )


class TestGenerate:
    def test_deterministic_bitwise(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=10)
        rng = np.random.default_rng(10)
        cs = random_constraint_set(rng, 3)
        z = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z).astype(np.float32))
        a = gn.generate(cs, z, params, tiny_cfg.p)
        b = gn.generate(cs, z, params, tiny_cfg.p)
        assert np.array_equal(a.data, b.data)

    def test_different_z_changes_output(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=11)
        rng = np.random.default_rng(11)
        cs = random_constraint_set(rng, 2)
        z1 = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z).astype(np.float32))
        z2 = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z).astype(np.float32))
        a = gn.generate(cs, z1, params, tiny_cfg.p)
        b = gn.generate(cs, z2, params, tiny_cfg.p)
        assert not np.array_equal(a.data, b.data)

    def test_permuted_sets_match(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=12)
        rng = np.random.default_rng(12)
        cs = random_constraint_set(rng, 5)
        z = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z).astype(np.float32))
        base = gn.generate(cs, z, params, tiny_cfg.p)
        for _ in range(10):
            perm = rng.permutation(len(cs))
            shuffled = sm.ConstraintSet([cs.constraints[i] for i in perm])
            out = gn.generate(shuffled, z, params, tiny_cfg.p)
            assert np.max(np.abs(out.data - base.data)) <= 1e-5

    def test_empty_set_rejected(self, tiny_cfg):
        params = make_params(tiny_cfg)
        z = Tensor(np.zeros(tiny_cfg.n_z, dtype=np.float32))
        with pytest.raises(sm.SemanticError):
            gn.generate(sm.ConstraintSet([]), z, params, tiny_cfg.p)

    def test_batch_matches_loop(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=13)
        rng = np.random.default_rng(13)
        sets = [random_constraint_set(rng, int(k)) for k in rng.integers(1, 6, size=4)]
        z = rng.uniform(-1, 1, (4, tiny_cfg.n_z)).astype(np.float32)
        batch = gn.generate_batch(sets, Tensor(z), params, tiny_cfg.p)
        for i, cs in enumerate(sets):
            single = gn.generate(cs, Tensor(z[i]), params, tiny_cfg.p)
            assert np.max(np.abs(batch.data[i] - single.data)) <= 2e-6

    def test_plain_generator(self, tiny_cfg):
        params = gn.init_plain_generator(tiny_cfg, np.random.default_rng(14))
        z = Tensor(np.random.default_rng(14).normal(size=tiny_cfg.n_z).astype(np.float32))
        img = gn.generate_plain(z, params)
        assert img.shape == (3, 8, 8)
        assert np.all(np.abs(img.data) < 1.0)


class TestGeneratorGradients:
    def test_full_generator_grad_matches_fd(self, tiny_cfg):
        params = make_params(tiny_cfg, seed=15, dtype=np.float64)
        rng = np.random.default_rng(15)
        cons = [
            sm.Constraint(
                rng.uniform(-1, 1, (3, 8, 8)), rng.uniform(-1, 1, (3, 8, 8))
            )
            for _ in range(2)
        ]
        cs = sm.ConstraintSet(cons)
        z = Tensor(rng.uniform(-1, 1, tiny_cfg.n_z))
        w = Tensor(rng.normal(size=(3, 8, 8)))

        named = nn.named_tensors(params)
        check = {
            "read.convs.0.weight": 4,
            "read.fc.weight": 4,
            "lstm.w_f": 4,
            "lstm.b_o": 2,
            "fc_s.weight": 4,
            "write.fc.weight": 4,
            "write.tconvs.0.weight": 4,
            "write.out.bias": 2,
            "read.norms.1.gain": 2,
        }
        for name, n_coords in check.items():
            t = named[name]
            coords = [
                tuple(rng.integers(0, s) for s in t.shape) for _ in range(n_coords)
            ]

            def f(_t):
                img = gn.generate(cs, z, params, tiny_cfg.p)
                return eg.tsum(eg.mul(img, w))

            err = eg.grad_check(f, t, h=1e-6, coords=coords)
            assert err <= 1e-4, f"{name}: rel err {err}"
