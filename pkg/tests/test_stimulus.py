import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foviq.exceptions import InvalidArgumentError, UnphysicalParameterWarning
from foviq.stimulus import (
    Modality, SignalKind, TrialStimulus, extract_2d, generate_noise_volume,
    insert_signal, load_trial, make_signal, radial_power_spectrum, read_volume, slice_nps,
    stimulus_nps, write_volume,
)


def spectral_slope(image):
    """Least-squares slope of log power vs log radial frequency over mid-band bins."""
    freqs, power = radial_power_spectrum(image)
    n = image.shape[0]
    band = (freqs >= 4) & (freqs <= n // 4)
    return np.polyfit(np.log(freqs[band]), np.log(power[band]), 1)[0]


class TestNoiseVolume:
    """Noise generation: renormalization, spectrum and determinism."""

    def test_mean_and_sd_after_renormalization(self):
        vol = generate_noise_volume((64, 48, 5), mean=128, sd=25, exponent=-2.8, seed=3)
        assert abs(vol.voxels.mean() - 128) < 0.5
        assert abs(vol.voxels.std() / 25 - 1) < 0.02
        assert vol.dims == (64, 48, 5)

    def test_white_noise_sd(self):
        vol = generate_noise_volume((64, 64, 1), exponent=0.0, seed=1)
        assert abs(vol.voxels.std() / 25 - 1) < 0.02

    def test_white_noise_is_spectrally_flat(self):
        slopes = [spectral_slope(generate_noise_volume((128, 128, 1), exponent=0.0, seed=s).voxels[0])
                  for s in range(5)]
        assert abs(np.mean(slopes)) < 0.15

    def test_power_law_slope(self):
        slopes = [spectral_slope(generate_noise_volume((256, 256, 1), seed=s).voxels[0])
                  for s in range(5)]
        assert abs(np.mean(slopes) + 2.8) < 0.15

    def test_determinism(self):
        a = generate_noise_volume((32, 32, 4), seed=11)
        b = generate_noise_volume((32, 32, 4), seed=11)
        c = generate_noise_volume((32, 32, 4), seed=12)
        assert np.array_equal(a.voxels, b.voxels)
        assert not np.array_equal(a.voxels, c.voxels)

    def test_zero_dims_rejected(self):
        with pytest.raises(InvalidArgumentError):
            generate_noise_volume((0, 32, 1), seed=0)

    def test_positive_exponent_warns(self):
        with pytest.warns(UnphysicalParameterWarning):
            generate_noise_volume((16, 16, 1), exponent=1.0, seed=0)

    def test_volume_is_read_only(self):
        vol = generate_noise_volume((8, 8, 2), seed=0)
        with pytest.raises(ValueError):
            vol.voxels[0, 0, 0] = 1.0

    def test_slice_nps_is_depth_average(self):
        nps = stimulus_nps((4, 16, 16))
        assert np.allclose(slice_nps(nps), nps.mean(axis=0))
        # NPS integrates to the variance
        assert np.isclose(nps.mean(), 25.0 ** 2)


class TestSignals:
    """MCALC and MASS luminance profiles."""

    def test_mass_sigma_and_peak(self):
        sig = make_signal(SignalKind.MASS, 36)
        assert sig.voxels.max() == 83.0
        c = sig.center
        line = sig.voxels[c[0], c[1]]
        # on-axis profile equals the Gaussian with sigma 0.22 * 36 px
        x = np.arange(line.size) - c[2]
        assert np.allclose(line, 83 * np.exp(-x ** 2 / (2 * 7.92 ** 2)))

    def test_mass_integral_matches_gaussian_integral(self):
        sig = make_signal("mass", 36)
        sigma = 0.22 * 36
        expected = 83 * (np.sqrt(2 * np.pi) * sigma) ** 3
        assert abs(sig.voxels.sum() / expected - 1) < 0.01

    def test_mass_support_threshold(self):
        sig = make_signal("mass", 36)
        v = sig.voxels / 83
        half = v.shape[2] // 2
        # the box edge is above threshold on axis, the next voxel out would not be
        assert v[half, half, 0] > 1e-3
        assert np.exp(-(half + 1) ** 2 / (2 * 7.92 ** 2)) <= 1e-3

    @pytest.mark.parametrize("ppd", [12.0, 36.0, 60.0])
    def test_mcalc_peak_and_non_negative(self, ppd):
        sig = make_signal("mcalc", ppd)
        assert sig.voxels.max() == 83.0
        assert sig.voxels.min() >= 0
        assert set(np.unique(sig.voxels)) <= {0.0, 83.0}

    def test_mcalc_diameter(self):
        sig = make_signal("mcalc", 36)
        c = sig.center
        row = sig.voxels[c[0], c[1]] > 0
        # 0.13 dva at 36 px/deg is 4.68 px: centers within 2.34 px give 5 voxels
        assert row.sum() == 5

    def test_mcalc_unrepresentable(self):
        with pytest.raises(InvalidArgumentError):
            make_signal("mcalc", 5.0)


class TestInsertAndExtract:
    """Signal insertion and 2D slice extraction."""

    def setup_method(self):
        self.vol = generate_noise_volume((96, 96, 60), seed=5)
        self.mass = make_signal("mass", 36)

    def test_center_voxel_rises_by_amplitude(self):
        trial = insert_signal(self.vol, self.mass, (48, 48, 30))
        assert np.isclose(trial.data[30, 48, 48] - self.vol.voxels[30, 48, 48], 83.0)

    def test_zero_signal_is_identity(self):
        trial = insert_signal(self.vol, np.zeros((3, 3, 3)), (10, 10, 10))
        assert np.array_equal(trial.data, self.vol.voxels)

    def test_insert_then_subtract(self):
        trial = insert_signal(self.vol, self.mass, (48, 48, 30))
        back = insert_signal(trial.data, -self.mass.voxels, (48, 48, 30))
        assert np.max(np.abs(back.data - self.vol.voxels)) < 1e-6

    def test_input_not_modified(self):
        before = self.vol.voxels.copy()
        insert_signal(self.vol, self.mass, (48, 48, 30))
        assert np.array_equal(before, self.vol.voxels)

    def test_linearity(self):
        mc = make_signal("mcalc", 36)
        s1 = np.zeros_like(self.mass.voxels)
        c = self.mass.center
        s1[c[0] - 2:c[0] + 3, c[1] - 2:c[1] + 3, c[2] - 2:c[2] + 3] = mc.voxels
        both = insert_signal(self.vol, self.mass.voxels + s1, (48, 48, 30))
        seq = insert_signal(insert_signal(self.vol, self.mass, (48, 48, 30)).data, s1, (48, 48, 30))
        assert np.allclose(both.data, seq.data)

    def test_out_of_bounds(self):
        with pytest.raises(InvalidArgumentError):
            insert_signal(self.vol, self.mass, (5, 48, 30))

    def test_clip_allows_deep_signal(self):
        shallow = generate_noise_volume((96, 96, 10), seed=0)
        trial = insert_signal(shallow, self.mass, (48, 48, 5), clip=True)
        assert np.isclose(trial.data[5, 48, 48] - shallow.voxels[5, 48, 48], 83.0)

    def test_extract_present_uses_signal_slice(self):
        trial = insert_signal(self.vol, self.mass, (48, 48, 30))
        flat = extract_2d(trial)
        assert flat.slice_index == 30
        assert flat.modality is Modality.TWO_D
        # the slice carries the 2D central cross-section of the Gaussian
        diff = flat.data - self.vol.voxels[30]
        y, x = np.mgrid[0:96, 0:96]
        oracle = 83 * np.exp(-((x - 48) ** 2 + (y - 48) ** 2) / (2 * 7.92 ** 2))
        inside = np.abs(diff) > 0
        assert np.allclose(diff[inside], oracle[inside])
        assert diff.max() == pytest.approx(83.0)

    def test_extract_absent_is_seeded(self):
        trial = TrialStimulus(self.vol.voxels, False, None, Modality.THREE_D)
        assert extract_2d(trial, seed=4).slice_index == extract_2d(trial, seed=4).slice_index

    def test_location_iff_present(self):
        with pytest.raises(InvalidArgumentError):
            TrialStimulus(np.zeros((4, 4)), True, None, Modality.TWO_D)


class TestVolumeFiles:
    """The .vol format round-trips."""

    def test_noise_round_trip(self, tmp_path):
        vol = generate_noise_volume((16, 12, 3), seed=2)
        write_volume(tmp_path / "a.vol", vol)
        vox, header = read_volume(tmp_path / "a.vol")
        assert header["dims"] == [16, 12, 3]
        assert header["seed"] == 2
        assert np.allclose(vox, vol.voxels, atol=1e-4)

    def test_trial_round_trip(self, tmp_path):
        vol = generate_noise_volume((32, 32, 8), seed=2)
        trial = insert_signal(vol, make_signal("mcalc", 36), (16, 16, 4))
        write_volume(tmp_path / "t.vol", extract_2d(trial))
        back = load_trial(tmp_path / "t.vol")
        assert back.signal_present and back.signal_location == (16, 16, 4)
        assert back.modality is Modality.TWO_D and back.data.ndim == 2


@settings(max_examples=25, deadline=None)
@given(w=st.integers(4, 24), h=st.integers(4, 24), d=st.integers(1, 4), seed=st.integers(0, 2 ** 16))
def test_renormalization_holds_for_any_seed(w, h, d, seed):
    vol = generate_noise_volume((w, h, d), seed=seed)
    assert abs(vol.voxels.mean() - 128) < 0.5
    assert abs(vol.voxels.std() / 25 - 1) < 0.02
