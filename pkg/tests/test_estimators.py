import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from foviq.detectability import NoiseStats, dprime_curve
from foviq.estimators import FoveatedCHO, FoveatedNPWE, FoveatedSearchModel
from foviq.fsm import Scanpath, make_search_trial
from foviq.stimulus import generate_noise_volume, make_signal
from foviq.templates import build_template_set


def background(n=120, size=32, seed=0):
    vols = [generate_noise_volume((64, 64, 1), seed=(seed, s)).voxels[0] for s in range(-(-n // 4))]
    tiles = [v[y:y + size, x:x + size] for v in vols for x in (0, 32) for y in (0, 32)]
    return np.asarray(tiles[:n])


class TestObservers:
    """Observer estimators follow the scikit-learn conventions."""

    def test_get_params_and_clone(self):
        est = FoveatedCHO(signal="mass", ecc_bins=(0, 1), patch_size=32)
        c = clone(est)
        assert c.get_params() == est.get_params()
        assert not hasattr(c, "template_set_")

    def test_fit_matches_builder(self):
        X = background()
        est = FoveatedNPWE(signal="mass", ecc_bins=(0, 2), patch_size=32).fit(X)
        ts = build_template_set("fnpwe", make_signal("mass", 36), None, (0, 2), patch_size=32)
        assert all(np.allclose(a, b) for a, b in zip(est.template_set_.templates, ts.templates))

    def test_transform_shape(self):
        X = background(480)
        est = FoveatedCHO(signal="mcalc", ecc_bins=(0, 1, 2), patch_size=32).fit(X)
        assert est.transform(X[:40]).shape == (40, 3)
        assert np.array_equal(est.decision_function(X[:40], 1.5), est.transform(X[:40])[:, 1])

    def test_score_separates_signal(self):
        X = background(200)
        sig = make_signal("mass", 36).central_slice()
        c = sig.shape[0] // 2
        s = sig[c - 16:c + 16, c - 16:c + 16]
        est = FoveatedNPWE(signal="mass", ecc_bins=(0,), patch_size=32).fit(X)
        Xs = np.concatenate([X[:100] + s, X[100:]])
        y = np.r_[np.ones(100), np.zeros(100)]
        assert est.score(Xs, y) > 1

    def test_wrong_patch_shape(self):
        with pytest.raises(ValueError):
            FoveatedNPWE(patch_size=32).fit(np.zeros((4, 16, 16)))

    def test_unfitted(self):
        with pytest.raises(NotFittedError):
            FoveatedCHO().transform(np.zeros((2, 64, 64)))

    def test_curve_from_estimator(self):
        est = FoveatedNPWE(signal="mcalc", ecc_bins=(0, 3), patch_size=32).fit(background(8))
        ns = NoiseStats.from_stimulus((64, 64, 1))
        direct = dprime_curve(est.template_set_, make_signal("mcalc", 36), ns)
        assert np.allclose(est.dprime_curve(ns).dprime, direct.dprime)


class TestSearchEstimator:
    """The search model wrapper."""

    def test_fit_predict(self):
        X = background(120)
        obs = FoveatedNPWE(signal="mass", ecc_bins=(0, 1, 2), patch_size=32, internal_noise=False).fit(X)
        ns = NoiseStats.from_stimulus((64, 64, 1))
        model = FoveatedSearchModel(obs, seed=1).fit(X, obs.dprime_curve(ns))
        sig = make_signal("mass", 36)
        stims = [make_search_trial(sig, "2d", (64, 64, 20), (2, i), i % 2 == 0) for i in range(30)]
        sps = [Scanpath([(32, 32, 0)])] * 30
        scores = model.decision_function(stims, sps)
        assert scores.shape == (30,)
        assert model.predict(stims, sps).dtype == bool
        assert model.score(stims, sps) > 0.5
