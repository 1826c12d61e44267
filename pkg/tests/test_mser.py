import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import erfc

from serbeam.channel import ClusteredChannelConfig, sample_channel
from serbeam.config import ConstellationSpec, SystemConfig
from serbeam.errors import NumericError, SchemaError
from serbeam.gd import init_random
from serbeam.mser import (KernelConfig, batch_loss, clean_outputs, exact_pdf,
                          kernel_pdf, loss, ser_terms_qam, ser_terms_qpsk,
                          stream_gains, tail_integral, true_noise_width)
from serbeam.transceiver import (SymbolBatch, exhaustive_conditioned_batch,
                                 receiver_output, rotate_all_streams,
                                 sample_symbol_batch)

SQRT_PI = math.sqrt(math.pi)

SYS = SystemConfig(n_tx=8, n_rf_tx=4, n_users=2, n_rx_per_user=4,
                   n_rf_rx_per_user=2, streams_per_user=1,
                   noise_std_per_user=0.4)
CHAN = ClusteredChannelConfig(n_clusters=2, n_rays=3, n_tx=8, n_rx_per_user=(4, 4))


@pytest.fixture
def state():
    return init_random(SYS, np.random.default_rng(1))


@pytest.fixture
def channel():
    return sample_channel(CHAN, 3)


class TestTailIntegral:
    def test_at_zero(self):
        assert tail_integral(0.0) == pytest.approx(SQRT_PI / 2, abs=1e-12)

    def test_saturates_to_sqrt_pi(self):
        assert tail_integral(50.0) == pytest.approx(SQRT_PI, abs=1e-12)
        assert tail_integral(-50.0) == pytest.approx(0.0, abs=1e-12)

    def test_against_quadrature(self):
        # independent oracle: adaptive quadrature of exp(-s^2)
        for x in (-3.0, -1.0, -0.2, 0.7, 2.5):
            want, _ = quad(lambda s: math.exp(-s * s), -20.0, x)
            assert tail_integral(x) == pytest.approx(want, abs=1e-12)

    def test_minus_one_value(self):
        # (sqrt(pi)/2) * erfc(1)
        assert tail_integral(-1.0) == pytest.approx(0.5 * SQRT_PI * erfc(1.0),
                                                    abs=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            tail_integral(float("nan"))

    @given(st.floats(-8, 8), st.floats(-8, 8))
    @settings(max_examples=200)
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert tail_integral(lo) <= tail_integral(hi) + 1e-15

    @given(st.floats(-8, 8))
    @settings(max_examples=200)
    def test_reflection(self, x):
        assert tail_integral(x) + tail_integral(-x) == pytest.approx(
            SQRT_PI, abs=1e-12)


class TestKernelPdf:
    def test_standard_peak(self):
        cfg = KernelConfig(rho=1.0, sample_size=1)
        assert kernel_pdf(0.0, [0.0], cfg) == pytest.approx(
            1.0 / math.sqrt(2 * math.pi), abs=1e-12)

    def test_integrates_to_one(self):
        cfg = KernelConfig(rho=0.7, sample_size=4)
        centres = [-2.0, -0.3, 0.9, 3.1]
        val, _ = quad(lambda x: kernel_pdf(x, centres, cfg), -30, 30, limit=200)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_positive_width_required(self):
        with pytest.raises(SchemaError):
            KernelConfig(rho=0.0)

    def test_matches_exact_pdf_with_matched_width(self, state, channel):
        # all interference combinations with the true width reproduce the
        # exact mixture pointwise
        spec = ConstellationSpec("qpsk")
        batch = exhaustive_conditioned_batch(spec, SYS.streams_per_user, 0, 1 + 1j)
        centres = clean_outputs(state, channel, batch)[0][0, :].real
        width = true_noise_width(state, SYS, 0, 0)
        cfg = KernelConfig(rho=width, sample_size=batch.sample_size)
        for x in np.linspace(-3, 3, 11):
            want = exact_pdf(x, state, channel, 0, 0, 1 + 1j, SYS, spec)
            got = kernel_pdf(x, centres, cfg)
            assert got == pytest.approx(want, abs=1e-10)


class TestExactPdf:
    def test_normalized(self, state, channel):
        spec = ConstellationSpec("qpsk")
        val, _ = quad(lambda x: exact_pdf(x, state, channel, 0, 1, 1 + 1j,
                                          SYS, spec), -40, 40, limit=400)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_matches_monte_carlo_histogram(self, state, channel):
        # draw interference + noise, histogram the real part of the output
        spec = ConstellationSpec("qpsk")
        rng = np.random.default_rng(11)
        batch = exhaustive_conditioned_batch(spec, SYS.streams_per_user, 0, 1 + 1j)
        n = 200_000
        picks = rng.integers(0, batch.sample_size, size=n)
        samples = np.empty(n)
        sig = clean_outputs(state, channel, batch)[0][0, :]
        width = true_noise_width(state, SYS, 0, 0)
        samples = sig[picks].real + width * rng.standard_normal(n)
        edges = np.linspace(-3, 3, 25)
        hist, _ = np.histogram(samples, bins=edges)
        for idx in range(len(edges) - 1):
            prob, _ = quad(lambda x: exact_pdf(x, state, channel, 0, 0, 1 + 1j,
                                               SYS, spec),
                           edges[idx], edges[idx + 1], limit=100)
            se = math.sqrt(max(prob * (1 - prob), 1e-12) * n)
            assert abs(hist[idx] - prob * n) < 3 * se + 3.0

    def test_enumeration_guard(self, state, channel):
        spec = ConstellationSpec("mqam", 16)
        big = SystemConfig(n_tx=8, n_rf_tx=6, n_users=1, n_rx_per_user=8,
                           n_rf_rx_per_user=6, streams_per_user=6,
                           noise_std_per_user=0.4)
        bf = init_random(big, np.random.default_rng(0))
        hh = sample_channel(ClusteredChannelConfig(
            n_clusters=2, n_rays=2, n_tx=8, n_rx_per_user=(8,)), 0)
        with pytest.raises(SchemaError):
            exact_pdf(0.0, bf, hh, 0, 0, 3 + 3j, big, spec)


class TestSerTermsQpsk:
    def test_perfect_output_vanishing_width(self, state, channel):
        # clean output equal to the symbol with a tiny width: no error mass
        spec = ConstellationSpec("qpsk")
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        ident = _identity_chain_state(state, channel, batch)
        pr, pi, pt = ser_terms_qpsk(ident, channel, batch, 0, 0,
                                    KernelConfig(rho=1e-6, sample_size=8))
        assert pr == 0.0 and pi == 0.0

    def test_single_sample_closed_form(self):
        # clean output 1, symbol 1, width 1: erfc(1/sqrt(2))/2
        want = 0.5 * erfc(1.0 / math.sqrt(2.0))
        got = float(tail_integral(-1.0 / math.sqrt(2.0))) / SQRT_PI
        assert got == pytest.approx(want, abs=1e-12)
        quad_val, _ = quad(lambda s: math.exp(-s * s), -20,
                           -1.0 / math.sqrt(2.0))
        assert got == pytest.approx(quad_val / SQRT_PI, abs=1e-12)

    def test_bounds(self, state, channel):
        spec = ConstellationSpec("qpsk")
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        pr, pi, pt = ser_terms_qpsk(state, channel, batch, 0, 1, cfg)
        assert 0.0 <= pr <= 1.0 and 0.0 <= pi <= 1.0 and 0.0 <= pt <= 2.0

    def test_batch_permutation_invariance(self, state, channel):
        spec = ConstellationSpec("qpsk")
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        perm = SymbolBatch(batch.vectors[::-1].copy(), spec,
                           batch.streams_per_user)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        assert ser_terms_qpsk(state, channel, batch, 0, 0, cfg) == \
            ser_terms_qpsk(state, channel, perm, 0, 0, cfg)

    def test_bound_dominates_product_form(self, state, channel):
        spec = ConstellationSpec("qpsk")
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        pr, pi, pt = ser_terms_qpsk(state, channel, batch, 0, 0, cfg)
        assert pt >= pr + pi - pr * pi - 1e-15

    def test_monotone_in_alignment(self, state, channel):
        # scaling all clean outputs toward the correct side reduces the terms
        spec = ConstellationSpec("qpsk")
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        ident = _identity_chain_state(state, channel, batch)
        base = ser_terms_qpsk(ident, channel, batch, 0, 0, cfg)[2]
        boosted = ident.replace(digital_rx=[2.0 * w for w in ident.digital_rx])
        assert ser_terms_qpsk(boosted, channel, batch, 0, 0, cfg)[2] <= base


def _identity_chain_state(state, channel, batch):
    """Rescale combiners so each stream's clean output equals its symbol."""
    from serbeam.gd import normalize_stream_gains
    bf = normalize_stream_gains(state, channel, SYS)
    # suppress cross terms by zero-forcing the 2x2 effective matrix
    v = bf.stacked_tx
    rows = []
    for k in range(2):
        chain = bf.digital_rx[k].conj().T @ bf.analog_rx(k) \
            @ channel.matrices[k] @ bf.analog_tx
        rows.append(chain)
    g = np.concatenate([r @ v for r in rows], axis=0)
    v_new = v @ np.linalg.inv(g)
    return bf.replace(digital_tx=[v_new[:, :1], v_new[:, 1:]])


class TestSerTermsQam:
    def test_side_weight_values(self):
        assert ConstellationSpec("mqam", 16).side_weight == pytest.approx(1.5)
        assert ConstellationSpec("mqam", 64).side_weight == pytest.approx(7 / 4)

    def test_requires_rotation(self, state, channel):
        spec = ConstellationSpec("mqam", 16)
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        with pytest.raises(NumericError):
            ser_terms_qam(state, channel, batch, 0, 0, cfg, 16)

    def test_inner_point_closed_form(self):
        # centred clean output at c*b with rho=1, c=1: 1.5 * erfc(1/sqrt2)/2
        want = 1.5 * 0.5 * erfc(1.0 / math.sqrt(2.0))
        arg = (1.0 * (1.0 - 1.0) - 1.0) / math.sqrt(2.0)
        got = 1.5 * float(tail_integral(arg)) / SQRT_PI
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.2380, abs=5e-4)

    def test_rotated_state_accepted(self, state, channel):
        spec = ConstellationSpec("mqam", 16)
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        rotated = rotate_all_streams(state, channel, SYS.streams_per_user)
        pr, pi, pt = ser_terms_qam(rotated, channel, batch, 0, 0, cfg, 16)
        assert 0.0 <= pr <= 1.5 and pt == pytest.approx(pr + pi)


class TestLoss:
    def test_single_channel_equals_summed_terms(self, state, channel):
        spec = ConstellationSpec("qpsk")
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        total = sum(ser_terms_qpsk(state, channel, batch, 0, k, cfg)[2]
                    for k in range(2))
        assert loss(state, [channel], [batch], cfg) == pytest.approx(total,
                                                                     rel=1e-12)

    def test_duplicated_channel_mean_invariance(self, state, channel):
        spec = ConstellationSpec("qpsk")
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        once = loss(state, [channel], [batch], cfg)
        twice = loss(state, [channel, channel], [batch, batch], cfg)
        assert once == pytest.approx(twice, rel=1e-12)

    def test_independent_loop_order(self, state, channel):
        # re-sum with the stream loop outermost
        spec = ConstellationSpec("qpsk")
        batch = sample_symbol_batch(spec, SYS.streams_per_user, 8, seed=2)
        cfg = KernelConfig(rho=0.5, sample_size=8)
        acc = 0.0
        for k in range(2):
            for i in range(SYS.streams_per_user[k]):
                pr, pi, _ = ser_terms_qpsk(state, channel, batch, i, k, cfg)
                acc += pr + pi
        assert batch_loss(state, channel, batch, cfg) == pytest.approx(
            acc, rel=1e-12)

    def test_empty_batch_rejected(self, state):
        with pytest.raises(SchemaError):
            loss(state, [], [], KernelConfig(rho=0.5, sample_size=4))
