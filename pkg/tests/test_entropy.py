import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcodec import autodiff as ad
from flowcodec.autodiff import Tensor
from flowcodec.entropy import (TOTAL_FREQ, CdfTable, FactorizedEntropyModel,
                               quantize_pmf, quantize_round, uniform_noise)
from flowcodec.errors import CorruptStream, ShapeError


def perturbed_model(channels, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    model = FactorizedEntropyModel(channels, rng=rng)
    for t in model.params.values():
        t.data = (t.data + rng.normal(0.0, scale, t.data.shape)).astype(t.data.dtype)
    return model


class TestCdfShape:
    def test_monotone_in_t(self):
        model = perturbed_model(4, seed=0)
        t = np.linspace(-40, 40, 401)
        grid = np.broadcast_to(t, (4, 1, t.size)).copy()
        logits = model._logits_np(grid)
        assert np.all(np.diff(logits, axis=-1) > -1e-12)

    def test_limits(self):
        model = perturbed_model(2, seed=1)
        lo = model._logits_np(np.full((2, 1, 1), -1e4))
        hi = model._logits_np(np.full((2, 1, 1), 1e4))
        assert np.all(lo < -20)
        assert np.all(hi > 20)

    def test_tensor_and_numpy_paths_agree(self):
        model = perturbed_model(3, seed=2).cast(np.float64)
        t = np.random.default_rng(3).normal(0, 5, (3, 1, 17))
        got = model._logits(Tensor(t, dtype=np.float64)).data
        want = model._logits_np(t)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_bin_prob_bounds(self):
        model = perturbed_model(2, seed=4)
        t = Tensor(np.random.default_rng(5).normal(0, 30, (2, 1, 100)).astype(np.float32))
        p = model.bin_prob(t).data
        assert np.all(p >= 1e-9)
        assert np.all(p <= 1.0)


class TestBits:
    def test_matches_manual_sum(self):
        model = perturbed_model(3, seed=6)
        rng = np.random.default_rng(7)
        y = rng.normal(0, 4, (2, 4, 4, 3)).astype(np.float32)
        bits = model.total_bits(Tensor(y)).item()
        t = y.transpose(3, 0, 1, 2).reshape(3, 1, -1)
        p = model.bin_prob(Tensor(t)).data
        manual = -np.sum(np.log2(np.maximum(p, 1e-9)))
        assert bits == pytest.approx(manual, rel=1e-5)

    def test_channel_mismatch_raises(self):
        model = FactorizedEntropyModel(4)
        with pytest.raises(ShapeError):
            model.total_bits(Tensor(np.zeros((1, 2, 2, 3), dtype=np.float32)))

    def test_gradients_finite_diff(self):
        model = perturbed_model(2, seed=8).cast(np.float64)
        y = Tensor(np.random.default_rng(9).normal(0, 3, (1, 2, 2, 2)), dtype=np.float64)
        errs = ad.finite_diff_check(lambda: model.total_bits(y), model.params, eps=1e-5)
        assert max(errs.values()) < 1e-5

    def test_wider_data_costs_more_bits(self):
        model = perturbed_model(1, seed=10)
        rng = np.random.default_rng(11)
        narrow = Tensor(rng.normal(0, 1, (1, 8, 8, 1)).astype(np.float32))
        wide = Tensor((narrow.data * 100).astype(np.float32))
        assert model.total_bits(wide).item() > model.total_bits(narrow).item()


class TestQuantizePmf:
    def test_exact_total_and_floor(self):
        counts = quantize_pmf(np.array([0.5, 0.25, 0.25, 0.0]))
        assert counts.sum() == TOTAL_FREQ
        assert counts.min() >= 1

    def test_remainder_goes_to_largest_fraction(self):
        # 3 slots: floor gives 21845 each, remainder 1 goes to slot 0 (ties by index)
        counts = quantize_pmf(np.full(3, 1 / 3))
        assert counts.sum() == TOTAL_FREQ
        assert counts[0] == 21846 and counts[1] == 21845 and counts[2] == 21845

    def test_all_zero_probs(self):
        counts = quantize_pmf(np.zeros(7))
        assert counts.sum() == TOTAL_FREQ
        assert counts.min() >= 1

    def test_peaked_distribution_keeps_floor(self):
        probs = np.zeros(100)
        probs[50] = 1.0
        counts = quantize_pmf(probs)
        assert counts.sum() == TOTAL_FREQ
        assert counts.min() >= 1
        assert counts[50] == TOTAL_FREQ - 99

    def test_too_many_slots_raises(self):
        with pytest.raises(ShapeError):
            quantize_pmf(np.ones(TOTAL_FREQ + 1))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_property_total_exact(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 500))
        probs = rng.random(n) ** 4
        counts = quantize_pmf(probs)
        assert counts.sum() == TOTAL_FREQ
        assert counts.min() >= 1


class TestTables:
    def test_valid_cumulative(self):
        model = perturbed_model(5, seed=12)
        table = model.build_tables()
        assert table.channels == 5
        for c in range(5):
            cdf = table.cdfs[c]
            assert cdf[0] == 0
            assert cdf[-1] == TOTAL_FREQ
            assert np.all(np.diff(cdf).astype(np.int64) >= 1)

    def test_support_is_symmetric_and_capped(self):
        model = perturbed_model(3, seed=13)
        table = model.build_tables()
        for c in range(3):
            n_real = table.n_symbols(c) - 1
            assert n_real % 2 == 1
            assert -table.offsets[c] == (n_real - 1) // 2
            assert n_real <= 2 ** 15 + 1

    def test_table_cost_tracks_model_cost(self):
        # symbols the model finds likely must be cheap in the frozen table
        model = perturbed_model(2, seed=14)
        rng = np.random.default_rng(15)
        y = rng.normal(0, 3, (1, 16, 16, 2)).astype(np.float32)
        sym = quantize_round(y)
        table = model.build_tables()
        model_bits = model.total_bits(Tensor(sym.astype(np.float32))).item()
        table_bits = table.ideal_bits(sym.reshape(-1, 2))
        assert table_bits == pytest.approx(model_bits, rel=0.02)

    def test_serialization_roundtrip(self):
        model = perturbed_model(4, seed=16)
        table = model.build_tables()
        blob = table.to_bytes()
        back, consumed = CdfTable.from_bytes(blob)
        assert consumed == len(blob)
        np.testing.assert_array_equal(back.offsets, table.offsets)
        for a, b in zip(back.cdfs, table.cdfs):
            np.testing.assert_array_equal(a, b)

    def test_corrupt_blob_raises(self):
        model = perturbed_model(1, seed=17)
        blob = bytearray(model.build_tables().to_bytes())
        blob[-1] ^= 0xFF
        with pytest.raises(CorruptStream):
            CdfTable.from_bytes(bytes(blob))

    def test_truncated_blob_raises(self):
        model = perturbed_model(1, seed=18)
        blob = model.build_tables().to_bytes()
        with pytest.raises(CorruptStream):
            CdfTable.from_bytes(blob[:7])


class TestQuantizers:
    def test_round_half_to_even(self):
        y = np.array([0.5, 1.5, -0.5, 2.49, -2.51])
        np.testing.assert_array_equal(quantize_round(y), [0, 2, 0, 2, -3])
        assert quantize_round(y).dtype == np.int32

    def test_uniform_noise_range_and_determinism(self):
        a = uniform_noise(np.random.default_rng(19), (1000,))
        b = uniform_noise(np.random.default_rng(19), (1000,))
        np.testing.assert_array_equal(a, b)
        assert np.all(a >= -0.5) and np.all(a < 0.5)
        assert a.dtype == np.float32


class TestState:
    def test_state_roundtrip(self):
        model = perturbed_model(3, seed=20)
        clone = FactorizedEntropyModel(3)
        clone.load_state(model.state())
        t = Tensor(np.random.default_rng(21).normal(0, 2, (3, 1, 9)).astype(np.float32))
        np.testing.assert_array_equal(clone._logits(t).data, model._logits(t).data)

    def test_mismatch_raises(self):
        model = FactorizedEntropyModel(3)
        state = model.state()
        state.popitem()
        with pytest.raises(ShapeError):
            model.load_state(state)
