"""scikit-learn style estimators wrapping the foveated observers and the search model.

Patches are arrays of shape ``(n_samples, P, P)``; each estimator produces
one decision variable per sample and eccentricity bin.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .detectability import DPrimeCurve, NoiseStats, decision_variables, dprime_curve, empirical_dprime
from .fsm import calibrate_bin_stats, run_batch
from .stimulus import DEFAULT_PX_PER_DEG, make_signal
from .templates import DEFAULT_PATCH, ObserverModel, build_template_set


def _check_patches(X, patch_size):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=float)
    if X.ndim != 3 or X.shape[1:] != (patch_size, patch_size):
        raise ValueError(f"expected patches of shape (n, {patch_size}, {patch_size}), got {X.shape}")
    return X


class _FoveatedObserver(BaseEstimator):
    _model = None

    def _signal(self):
        if isinstance(self.signal, str):
            return make_signal(self.signal, self.px_per_deg)
        return self.signal

    def _background(self, X):
        raise NotImplementedError

    def fit(self, X, y=None):
        """Build one template per eccentricity bin.

        Parameters
        ----------
        X : array of shape (n_samples, P, P)
            Signal-absent background patches.
        y : ignored
        """
        X = _check_patches(X, self.patch_size)
        self.template_set_ = build_template_set(
            self._model, self._signal(), self._background(X), self.ecc_bins, self.px_per_deg,
            patch_size=self.patch_size, internal_noise=self.internal_noise)
        self.ecc_bins_ = self.template_set_.ecc_bins
        self.n_features_in_ = self.patch_size * self.patch_size
        return self

    def transform(self, X):
        """Decision variables, shape ``(n_samples, n_bins)``."""
        check_is_fitted(self, "template_set_")
        X = _check_patches(X, self.patch_size)
        return np.column_stack([decision_variables(w, X) for w in self.template_set_.templates])

    def decision_function(self, X, eccentricity=0.0):
        """Decision variable of the bin holding ``eccentricity``."""
        check_is_fitted(self, "template_set_")
        w = self.template_set_.template_for(eccentricity)
        return decision_variables(w, _check_patches(X, self.patch_size))

    def score(self, X, y, eccentricity=0.0):
        """Empirical d' separating signal-present (``y == 1``) from absent patches."""
        y = np.asarray(y).astype(bool)
        lam = self.decision_function(X, eccentricity)
        return empirical_dprime(lam[y], lam[~y])

    def dprime_curve(self, noise_stats: NoiseStats, method="fourier", **kwargs) -> DPrimeCurve:
        check_is_fitted(self, "template_set_")
        return dprime_curve(self.template_set_, self._signal(), noise_stats, method, **kwargs)


class FoveatedCHO(_FoveatedObserver):
    """Foveated channelized Hotelling observer; the channel covariance comes from ``X``."""

    _model = ObserverModel.FCHO

    def __init__(self, signal="mcalc", ecc_bins=(0.0,), px_per_deg=DEFAULT_PX_PER_DEG,
                 patch_size=DEFAULT_PATCH, internal_noise=None):
        self.signal = signal
        self.ecc_bins = ecc_bins
        self.px_per_deg = px_per_deg
        self.patch_size = patch_size
        self.internal_noise = internal_noise

    def _background(self, X):
        return X


class FoveatedNPWE(_FoveatedObserver):
    """Foveated non-prewhitening observer with eye filter; ``X`` only fixes the patch geometry."""

    _model = ObserverModel.FNPWE

    def __init__(self, signal="mcalc", ecc_bins=(0.0,), px_per_deg=DEFAULT_PX_PER_DEG,
                 patch_size=DEFAULT_PATCH, internal_noise=None):
        self.signal = signal
        self.ecc_bins = ecc_bins
        self.px_per_deg = px_per_deg
        self.patch_size = patch_size
        self.internal_noise = internal_noise

    def _background(self, X):
        return None


class FoveatedSearchModel(BaseEstimator):
    """Search model over whole stimuli, driven by a fitted foveated observer.

    Parameters
    ----------
    observer : FoveatedCHO or FoveatedNPWE
        Fitted observer supplying the per-bin templates.
    stride : int
        Candidate-lattice spacing in pixels.
    boundary : {"wrap", "skip"}
    threshold : float
        Likelihood-ratio threshold for a "present" decision.
    seed : int
        Root seed for internal noise.
    """

    def __init__(self, observer=None, stride=4, boundary="wrap", threshold=1.0, seed=0):
        self.observer = observer
        self.stride = stride
        self.boundary = boundary
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, dprime, y=None):
        """Calibrate per-bin background statistics.

        Parameters
        ----------
        X : array of shape (n_samples, P, P)
            Background patches.
        dprime : array-like or DPrimeCurve
            Per-bin d' without internal noise.
        """
        check_is_fitted(self.observer, "template_set_")
        ts = self.observer.template_set_
        X = _check_patches(X, self.observer.patch_size)
        self.bin_stats_ = calibrate_bin_stats(ts, X, dprime, self.observer._signal())
        return self

    def _run(self, stimuli, scanpaths):
        check_is_fitted(self, "bin_stats_")
        return run_batch(stimuli, scanpaths, self.observer.template_set_, self.bin_stats_,
                         self.threshold, self.seed, self.stride, self.boundary)

    def decision_function(self, stimuli, scanpaths):
        """Log of each trial's maximum likelihood ratio."""
        return np.array([v.log_max_lr for v in self._run(stimuli, scanpaths).verdicts])

    def predict(self, stimuli, scanpaths):
        return np.array([v.decision for v in self._run(stimuli, scanpaths).verdicts])

    def score(self, stimuli, scanpaths):
        """Batch d' from the max-LR distributions of present and absent trials."""
        return self._run(stimuli, scanpaths).dprime
