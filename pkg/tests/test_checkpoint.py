import os

import numpy as np
import pytest

from morelike import checkpoint as cp
from morelike.engine import Tensor


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "gen.write.fc.weight": Tensor(rng.normal(size=(4, 3)).astype(np.float32)),
        "disc.fc.bias": Tensor(rng.normal(size=7).astype(np.float32)),
        "gen.read.convs.0.weight": Tensor(rng.normal(size=(2, 3, 3, 3)).astype(np.float32)),
    }


def read_pair(path):
    with open(os.path.join(path, cp.MANIFEST), "rb") as f:
        m = f.read()
    with open(os.path.join(path, cp.WEIGHTS), "rb") as f:
        w = f.read()
    return m, w


class TestRoundTrip:
    def test_bit_exact_arrays(self, tmp_path):
        tensors = sample_tensors()
        rng_state = np.random.default_rng(5).bit_generator.state
        cp.save_checkpoint(
            str(tmp_path / "ck"), tensors, {"m": 16}, 12, rng_state, "congan",
            extra={"opt_t": {"d": 3, "g": 1}},
        )
        ck = cp.load_checkpoint(str(tmp_path / "ck"))
        assert ck.kind == "congan" and ck.iteration == 12
        assert ck.config == {"m": 16}
        assert ck.extra == {"opt_t": {"d": 3, "g": 1}}
        for name, t in tensors.items():
            assert np.array_equal(ck.arrays[name], t.data)
        restored = np.random.default_rng(0)
        restored.bit_generator.state = ck.rng_state
        expect = np.random.default_rng(5)
        assert restored.integers(10**9) == expect.integers(10**9)

    def test_save_load_save_byte_identical(self, tmp_path):
        tensors = sample_tensors()
        cp.save_checkpoint(str(tmp_path / "a"), tensors, {"x": [1, 2]}, 3, None, "wgan")
        ck = cp.load_checkpoint(str(tmp_path / "a"))
        cp.save_checkpoint(
            str(tmp_path / "b"), ck.arrays, ck.config, ck.iteration, ck.rng_state,
            ck.kind, ck.extra,
        )
        assert read_pair(str(tmp_path / "a")) == read_pair(str(tmp_path / "b"))

    def test_non_f32_rejected(self, tmp_path):
        with pytest.raises(cp.CheckpointError):
            cp.save_checkpoint(
                str(tmp_path / "bad"),
                {"w": Tensor(np.zeros(3, dtype=np.float64))},
                {},
                0,
                None,
                "congan",
            )


class TestCorruption:
    def test_tampered_blob_length(self, tmp_path):
        path = str(tmp_path / "ck")
        cp.save_checkpoint(path, sample_tensors(), {}, 0, None, "congan")
        with open(os.path.join(path, cp.WEIGHTS), "ab") as f:
            f.write(b"\x00\x00\x00\x00")
        with pytest.raises(cp.CheckpointError):
            cp.load_checkpoint(path)

    def test_corrupt_manifest(self, tmp_path):
        path = str(tmp_path / "ck")
        cp.save_checkpoint(path, sample_tensors(), {}, 0, None, "congan")
        with open(os.path.join(path, cp.MANIFEST), "w") as f:
            f.write("{not json")
        with pytest.raises(cp.CheckpointError):
            cp.load_checkpoint(path)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(cp.CheckpointError):
            cp.load_checkpoint(str(tmp_path / "nope"))

    def test_assign_shape_mismatch(self, tmp_path):
        path = str(tmp_path / "ck")
        cp.save_checkpoint(path, sample_tensors(), {}, 0, None, "congan")
        ck = cp.load_checkpoint(path)
        target = {"write.fc.weight": Tensor(np.zeros((5, 5), dtype=np.float32))}
        with pytest.raises(cp.CheckpointError):
            cp.assign_from_arrays(target, ck.arrays, prefix="gen.")
