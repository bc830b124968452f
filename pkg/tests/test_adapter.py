import math

import numpy as np
import pytest

from embadapt import (
    EmbeddingTable,
    TrainConfig,
    init_adapter,
    load_checkpoint,
    save_checkpoint,
    transform,
    transform_grad,
)
from embadapt.adapter import mlp_forward, mlp_grad, MlpParams
from embadapt.errors import FormatError, TagMismatchError

REL_TOL = 1e-4
ABS_FLOOR = 1e-6
FD_STEP = 1e-4


def fd_close(analytic, numeric):
    denom = max(abs(numeric), ABS_FLOOR / REL_TOL)
    return abs(analytic - numeric) <= REL_TOL * denom + ABS_FLOOR


class TestInit:
    def test_identity_at_init_with_skip(self):
        model = init_adapter(6, 6, seed=0)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 6)).astype(np.float32)
        assert np.array_equal(transform(model, x), x)

    def test_zero_output_without_skip(self):
        model = init_adapter(6, 6, seed=0, use_skip=False)
        x = np.arange(6, dtype=np.float32)
        assert np.array_equal(transform(model, x), np.zeros(6, dtype=np.float32))

    def test_deterministic(self):
        a = init_adapter(8, 4, seed=42)
        b = init_adapter(8, 4, seed=42)
        for pa, pb in zip(a.f_params.arrays(), b.f_params.arrays()):
            assert np.array_equal(pa, pb)

    def test_parameter_count(self):
        model = init_adapter(4, 4, seed=0)
        count = sum(a.size for a in model.f_params.arrays())
        assert count == 4 * 4 + 4 + 4 * 4 + 4  # == 40

    def test_hidden_bounds(self):
        model = init_adapter(16, 8, seed=3)
        bound = 1.0 / math.sqrt(16)
        assert np.all(np.abs(model.f_params.w1) <= bound)
        assert np.all(model.f_params.w2 == 0.0)
        assert np.all(model.f_params.b2 == 0.0)


class TestTransform:
    def test_scalar_closed_form(self):
        # 1x1 network: f(x) = w2*tanh(w1*x + b1) + b2
        model = init_adapter(1, 1, seed=0)
        model.f_params.w1[:] = 1.0
        model.f_params.b1[:] = 0.0
        model.f_params.w2[:] = 1.0
        model.f_params.b2[:] = 0.0
        out = transform(model, np.array([0.5], dtype=np.float32))
        assert out[0] == pytest.approx(0.5 + math.tanh(0.5), abs=1e-6)

    def test_shared_adapter_same_function(self):
        model = init_adapter(5, 3, seed=9)
        rng = np.random.default_rng(0)
        model.f_params.w2[:] = rng.standard_normal((3, 5)).astype(np.float32)
        x = rng.standard_normal((4, 5)).astype(np.float32)
        assert np.array_equal(transform(model, x, "query"), transform(model, x, "corpus"))

    def test_separate_adapters_differ(self):
        model = init_adapter(5, 3, seed=9, separate_adapters=True)
        rng = np.random.default_rng(0)
        model.f_params.w2[:] = rng.standard_normal((3, 5)).astype(np.float32)
        x = rng.standard_normal((4, 5)).astype(np.float32)
        assert not np.array_equal(transform(model, x, "query"), transform(model, x, "corpus"))

    def test_dimension_mismatch(self):
        model = init_adapter(4, 4, seed=0)
        with pytest.raises(ValueError):
            transform(model, np.zeros(5, dtype=np.float32))


class TestTransformGrad:
    def test_zero_upstream_zero_grads(self):
        model = init_adapter(4, 3, seed=1)
        grads, d_x = transform_grad(model, np.ones(4, dtype=np.float32), np.zeros(4, dtype=np.float32))
        for g in grads.arrays():
            assert np.all(g == 0.0)
        assert np.all(d_x == 0.0)

    def test_input_grad_is_upstream_at_init(self):
        model = init_adapter(4, 3, seed=1)
        upstream = np.array([1.0, -2.0, 0.5, 3.0], dtype=np.float32)
        _, d_x = transform_grad(model, np.ones(4, dtype=np.float32), upstream)
        assert np.array_equal(d_x, upstream)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_finite_differences(self, seed):
        # FD oracle runs in float64 so rounding noise stays below tolerance
        rng = np.random.default_rng(seed)
        d, h, n = int(rng.integers(2, 8)), int(rng.integers(2, 8)), int(rng.integers(1, 4))
        use_skip = bool(seed % 2)
        model = init_adapter(d, h, seed=seed, use_skip=use_skip)
        # move off the zero-init point so w2/b2 grads are non-trivial
        model.f_params.w2[:] = 0.3 * rng.standard_normal((h, d)).astype(np.float32)
        model.f_params.b2[:] = 0.1 * rng.standard_normal(d).astype(np.float32)
        x = rng.standard_normal((n, d))
        upstream = rng.standard_normal((n, d))

        grads, d_x = transform_grad(
            model, x.astype(np.float32), upstream.astype(np.float32)
        )

        params64 = [a.astype(np.float64) for a in model.f_params.arrays()]
        x64 = x.copy()

        def objective():
            w1, b1, w2, b2 = params64
            out = np.tanh(x64 @ w1 + b1) @ w2 + b2
            if use_skip:
                out = x64 + out
            return float(np.sum(upstream * out))

        def fd(arr, flat_idx):
            flat = arr.ravel()
            orig = flat[flat_idx]
            flat[flat_idx] = orig + FD_STEP
            plus = objective()
            flat[flat_idx] = orig - FD_STEP
            minus = objective()
            flat[flat_idx] = orig
            return (plus - minus) / (2 * FD_STEP)

        for g_arr, p_arr in zip(grads.arrays(), params64):
            for idx in range(p_arr.size):
                assert fd_close(float(g_arr.ravel()[idx]), fd(p_arr, idx))

        for idx in range(x64.size):
            assert fd_close(float(d_x.ravel()[idx]), fd(x64, idx))


class TestCheckpoint:
    @staticmethod
    def trained_like_model(seed=5):
        model = init_adapter(6, 4, seed=seed, encoder_tag="enc-a",
                             config=TrainConfig(alpha=0.2, seed=seed))
        rng = np.random.default_rng(seed)
        for _, params in model.trainable():
            for arr in params.arrays():
                arr += 0.1 * rng.standard_normal(arr.shape).astype(np.float32)
        return model

    def test_round_trip_bit_exact(self, tmp_path):
        model = self.trained_like_model()
        path = tmp_path / "m.sadc"
        save_checkpoint(model, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.dim == model.dim
        assert loaded.hidden == model.hidden
        assert loaded.use_skip == model.use_skip
        assert loaded.encoder_tag == model.encoder_tag
        assert loaded.config_snapshot == model.config_snapshot
        for (_, pa), (_, pb) in zip(model.trainable(), loaded.trainable()):
            for a, b in zip(pa.arrays(), pb.arrays()):
                assert np.array_equal(a, b)
        x = np.random.default_rng(0).standard_normal((3, 6)).astype(np.float32)
        assert np.array_equal(transform(model, x), transform(loaded, x))

    def test_separate_adapters_round_trip(self, tmp_path):
        model = init_adapter(4, 4, seed=1, separate_adapters=True, use_skip=False)
        path = tmp_path / "m.sadc"
        save_checkpoint(model, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.separate_adapters
        assert not loaded.use_skip
        assert np.array_equal(loaded.f_corpus_params.w1, model.f_corpus_params.w1)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.sadc"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(str(path))

    def test_corruption_detected_by_checksum(self, tmp_path):
        model = self.trained_like_model()
        path = tmp_path / "m.sadc"
        save_checkpoint(model, str(path))
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="checksum|truncated"):
            load_checkpoint(str(path))

    def test_tag_mismatch_refused_unless_forced(self, tmp_path):
        model = self.trained_like_model()
        table = EmbeddingTable(["a"], np.ones((1, 6), dtype=np.float32), "enc-b")
        with pytest.raises(TagMismatchError):
            model.check_tag(table)
        model.check_tag(table, force=True)
