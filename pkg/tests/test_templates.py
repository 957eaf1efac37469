import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq, minimize_scalar

from foviq.detectability import NoiseStats, dprime_curve
from foviq.exceptions import EmptyBankError, InvalidArgumentError
from foviq.stimulus import make_signal
from foviq.templates import (
    ChannelBank, EccentricityTemplateSet, build_template_set, cho_template, eye_filter,
    eye_filter_gain, eye_filter_peak, frequency_grid, gabor_channel_bank, npwe_template,
    scaling_factor, stack_3d,
)

PUBLISHED = {
    1: [9.3770, 4.6885, 2.3443, 1.1721, 0.5861, 0.2930],
    2: [4.8672, 2.4336, 1.2168, 0.6084, 0.3042, 0.1521],
    3: [2.8837, 1.4419, 0.7209, 0.3605, 0.1802, 0.0901],
}


class TestScaling:
    """Channel scaling with eccentricity."""

    def test_fovea(self):
        assert scaling_factor(0) == 1.0

    @pytest.mark.parametrize("E", [1, 2, 3])
    def test_published_frequency_lists(self, E):
        got = [16 / 2 ** k / scaling_factor(E) for k in range(6)]
        assert np.round(got, 4).tolist() == PUBLISHED[E]

    def test_negative_rejected(self):
        with pytest.raises(InvalidArgumentError):
            scaling_factor(-0.5)

    @settings(max_examples=50)
    @given(a=st.floats(0, 30), b=st.floats(0, 30))
    def test_strictly_increasing(self, a, b):
        if b - a > 1e-6:
            assert scaling_factor(a) < scaling_factor(b)


class TestChannelBank:
    """Gabor banks and the 0.15 c/deg cutoff."""

    def test_fovea_has_48_channels(self):
        bank = gabor_channel_bank(0, patch_size=32)
        assert bank.n_channels == 48
        assert sorted(set(bank.center_freqs)) == [0.5, 1, 2, 4, 8, 16]
        assert len(set(np.round(bank.orientations, 12))) == 8

    def test_e3_drops_lowest_frequency(self):
        bank = gabor_channel_bank(3, patch_size=32)
        assert bank.n_channels == 40
        kept = sorted(set(np.round(bank.center_freqs, 4)), reverse=True)
        assert kept == PUBLISHED[3][:5]

    def test_empty_bank_threshold_by_bisection(self):
        # largest E at which the 16 c/deg channel survives
        e_star = brentq(lambda E: 16 / (1 + 0.7063 * E ** 1.6953) - 0.15, 1, 100)
        assert 19 < e_star < 19.3
        gabor_channel_bank(e_star - 1e-3, patch_size=8)
        with pytest.raises(EmptyBankError):
            gabor_channel_bank(e_star + 1e-3, patch_size=8)

    def test_count_non_increasing(self):
        counts = [gabor_channel_bank(E, patch_size=8).n_channels for E in np.arange(0, 19, 0.5)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_envelope_grows_with_scaling(self):
        b0 = gabor_channel_bank(0, patch_size=64)
        b2 = gabor_channel_bank(2, patch_size=64)
        # same channel slot at higher E: lower frequency, wider envelope
        i = list(b0.center_freqs).index(4.0)

        def spread(c):
            return np.sum(np.abs(c) > 0.5 * np.abs(c).max())

        assert b2.center_freqs[i] < b0.center_freqs[i]
        assert spread(b2.channels[i]) > spread(b0.channels[i])


class TestCHO:
    """Hotelling template in channel space."""

    def test_two_channel_oracle(self):
        U = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
        bank = ChannelBank(0.0, U.T.reshape(2, 3, 1), np.array([1.0, 2.0]), np.zeros(2), 36.0)
        C = np.array([[2.0, 0.5], [0.5, 1.0]])
        s = np.array([[1.0], [2.0], [3.0]])
        v = U.T @ s.ravel()
        # closed-form 2x2 inverse
        det = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
        inv = np.array([[C[1, 1], -C[0, 1]], [-C[1, 0], C[0, 0]]]) / det
        expected = U @ (inv @ v)
        got = cho_template(bank, s, C, ridge=0.0).ravel()
        assert np.max(np.abs(got - expected)) < 1e-10

    def test_identity_covariance_projects_signal(self):
        bank = gabor_channel_bank(1, patch_size=16)
        s = make_signal("mass", 36).central_slice()[8:24, 8:24]
        w = cho_template(bank, s, np.eye(bank.n_channels), ridge=0.0)
        U = bank.matrix()
        assert np.allclose(w.ravel(), U @ (U.T @ s.ravel()))

    def test_linear_in_signal(self):
        bank = gabor_channel_bank(0, patch_size=16)
        rng = np.random.default_rng(0)
        s = rng.normal(size=(16, 16))
        C = np.cov(rng.normal(size=(500, bank.n_channels)), rowvar=False)
        assert np.allclose(cho_template(bank, 3 * s, C), 3 * cho_template(bank, s, C))

    def test_shape_mismatch(self):
        bank = gabor_channel_bank(0, patch_size=16)
        with pytest.raises(InvalidArgumentError):
            cho_template(bank, np.zeros((8, 8)), np.eye(48))


class TestEyeFilter:
    """Eye filter gain, peak and the NPWE template."""

    def test_zero_frequency(self):
        assert eye_filter_gain(0.0, 3) == 0.0

    def test_scalar_value(self):
        expected = 4 ** 0.83 * np.exp(-0.35 * 4 ** 0.4)
        assert eye_filter_gain(4.0, 1) == pytest.approx(expected, rel=1e-12)
        assert 4 ** 0.4 == pytest.approx(1.7411, abs=1e-4)

    @pytest.mark.parametrize("E", [1.0, 2.0, 4.0, 8.0])
    def test_peak_by_numerical_optimization(self, E):
        res = minimize_scalar(lambda r: -eye_filter_gain(r, E), bounds=(1e-6, 200), method="bounded",
                              options={"xatol": 1e-10})
        assert res.x == pytest.approx(eye_filter_peak(E), rel=1e-4)

    def test_peak_moves_down_with_eccentricity(self):
        peaks = [eye_filter_peak(E) for E in (1, 2, 3, 5, 8)]
        assert all(a > b for a, b in zip(peaks, peaks[1:]))

    def test_fovea_clamped_to_one_degree(self):
        rho = np.linspace(0, 10, 50)
        assert np.array_equal(eye_filter_gain(rho, 0), eye_filter_gain(rho, 1))

    def test_gain_vanishes_at_high_frequency(self):
        assert eye_filter_gain(1e6, 1) < 1e-6
        assert np.all(eye_filter(2, frequency_grid((32, 32), 36)).gain >= 0)

    def test_all_pass_returns_signal(self):
        s = make_signal("mass", 36).central_slice()
        assert np.allclose(npwe_template(s, 1.0), s)

    def test_delta_gives_squared_psf(self):
        n = 32
        delta = np.zeros((n, n))
        delta[0, 0] = 1.0
        filt = eye_filter(2, frequency_grid((n, n), 36))
        psf2 = np.fft.ifft2(filt.gain ** 2).real
        assert np.allclose(npwe_template(delta, filt), psf2)

    def test_mcalc_loses_more_high_frequency_energy(self):
        n = 64
        rho = frequency_grid((n, n), 36)
        filt = eye_filter(6, rho)

        def high_fraction(s):
            F = np.abs(np.fft.fft2(s)) ** 2
            return F[rho > 4].sum() / F.sum()

        def suppression(kind):
            from foviq.detectability import signal_on_support
            s = signal_on_support(make_signal(kind, 36), (n, n))
            return high_fraction(s) - high_fraction(npwe_template(s, filt))

        assert suppression("mcalc") > suppression("mass")


class TestStackAndSets:
    """3D stacking and the template-set builder."""

    def test_single_slice_stack(self):
        t = np.arange(9.0).reshape(3, 3)
        assert np.array_equal(stack_3d([t])[0], t)

    def test_stack_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            stack_3d([np.zeros((3, 3)), np.zeros((4, 4))])

    def test_stack_dot_is_sum_of_slices(self):
        rng = np.random.default_rng(1)
        ts = [rng.normal(size=(5, 5)) for _ in range(4)]
        ss = rng.normal(size=(4, 5, 5))
        assert np.sum(stack_3d(ts) * ss) == pytest.approx(sum(np.sum(t * s) for t, s in zip(ts, ss)))

    def test_mass_stack_depth(self):
        sig = make_signal("mass", 36)
        ts = build_template_set("fnpwe", sig, None, (0,), modality="3d", patch_size=32)
        assert ts.support_shape[0] == sig.voxels.shape[0]

    def test_fcho_channel_counts(self):
        ns = NoiseStats.from_stimulus((64, 64, 1))
        ts = build_template_set("fcho", make_signal("mcalc", 36), ns, (0, 1, 2, 3), patch_size=32)
        assert ts.meta["channel_counts"] == [48, 48, 48, 40]
        assert ts.internal_noise_K == 2.78

    def test_fnpwe_single_bin(self):
        ts = build_template_set("fnpwe", make_signal("mass", 36), ecc_bins=(0,), patch_size=32)
        assert len(ts.templates) == 1 and ts.internal_noise_K == 15.13

    def test_fcho_needs_background(self):
        with pytest.raises(InvalidArgumentError):
            build_template_set("fcho", make_signal("mass", 36), None, (0,))

    def test_fnpwe_mcalc_dprime_decreases(self):
        ns = NoiseStats.from_stimulus((64, 64, 1))
        sig = make_signal("mcalc", 36)
        ts = build_template_set("fnpwe", sig, None, np.arange(0, 7.0), patch_size=32)
        d = dprime_curve(ts, sig, ns, "fourier").dprime
        # bins 0 and 1 share the clamped filter
        assert d[0] == pytest.approx(d[1])
        assert np.all(np.diff(d[1:]) < 0)

    def test_save_load(self, tmp_path):
        ts = build_template_set("fnpwe", make_signal("mass", 36), ecc_bins=(0, 1, 2), patch_size=16)
        ts.save(tmp_path / "t.tset")
        back = EccentricityTemplateSet.load(tmp_path / "t.tset")
        assert back.model == ts.model and np.array_equal(back.ecc_bins, ts.ecc_bins)
        assert all(np.array_equal(a, b) for a, b in zip(back.templates, ts.templates))

    def test_bins_must_start_at_zero(self):
        with pytest.raises(InvalidArgumentError):
            build_template_set("fnpwe", make_signal("mass", 36), ecc_bins=(1, 2))
