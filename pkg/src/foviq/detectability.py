"""Decision variables and three routes to d': Monte Carlo, spatial covariance, Fourier.

The Fourier route uses the discrete convention ``cov(r) = ifftn(nps)(r)`` so
that for a template ``w`` and signal ``s`` embedded on the same grid::

    w.s      = sum(conj(W) * S) / N
    w'K w    = sum(|W|^2 * nps) / N

with ``W = fftn(w)`` and ``N`` the number of grid points.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy.signal import fftconvolve

from ._validation import check_positive, check_same_shape
from .exceptions import DataError, DegenerateError, InvalidArgumentError
from .stimulus import Modality, sample_stationary_noise, slice_nps, stimulus_nps


class Method(str, enum.Enum):
    EMPIRICAL = "empirical"
    ANALYTIC = "analytic"
    FOURIER = "fourier"


class ResponseClass(str, enum.Enum):
    SIGNAL = "signal"
    NOISE = "noise"


@dataclass(frozen=True)
class DecisionSample:
    value: float
    cls: ResponseClass
    eccentricity_bin: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise InvalidArgumentError("decision variable must be finite")
        object.__setattr__(self, "cls", ResponseClass(self.cls))


@dataclass
class DPrimeCurve:
    model: str
    signal_kind: str
    modality: str
    ecc_bins: np.ndarray
    dprime: np.ndarray
    method: Method
    n_trials: int | None = None
    seed: int | None = None

    def __post_init__(self):
        self.ecc_bins = np.asarray(self.ecc_bins, dtype=float)
        self.dprime = np.asarray(self.dprime, dtype=float)
        self.method = Method(self.method)
        if self.ecc_bins.shape != self.dprime.shape:
            raise InvalidArgumentError("ecc_bins and dprime must have the same length")
        if not np.all(np.isfinite(self.dprime)):
            raise InvalidArgumentError("d' values must be finite")

    def to_dict(self):
        return {"model": self.model, "signal": self.signal_kind, "modality": self.modality,
                "method": self.method.value, "bins": self.ecc_bins.tolist(),
                "dprime": self.dprime.tolist(), "n_trials": self.n_trials, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["model"], d["signal"], d["modality"], d["bins"], d["dprime"], d["method"],
                   d.get("n_trials"), d.get("seed"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: not a d' curve file") from exc


@dataclass
class NoiseStats:
    """Second-order statistics of stationary (or explicitly covariant) noise.

    Either ``nps`` on a periodic grid or a dense ``covariance`` matrix.
    """

    nps: np.ndarray | None = None
    covariance: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.nps is None and self.covariance is None:
            raise InvalidArgumentError("NoiseStats needs an nps or a covariance")
        if self.nps is not None:
            self.nps = np.asarray(self.nps, dtype=float)
            if np.any(self.nps < 0):
                raise InvalidArgumentError("nps must be non-negative")
        if self.covariance is not None:
            c = np.asarray(self.covariance, dtype=float)
            if c.ndim != 2 or c.shape[0] != c.shape[1] or not np.allclose(c, c.T):
                raise InvalidArgumentError("covariance must be a symmetric square matrix")
            self.covariance = c
        self._kernel = None

    @classmethod
    def from_stimulus(cls, dims, sd=25.0, exponent=-2.8, modality=Modality.TWO_D):
        """Stats of noise from :func:`generate_noise_volume` with ``dims=(w, h, d)``."""
        w, h, d = dims
        nps = stimulus_nps((d, h, w), sd, exponent)
        if Modality(modality) is Modality.TWO_D:
            nps = slice_nps(nps)
        return cls(nps=nps, params={"dims": [w, h, d], "sd": sd, "exponent": exponent,
                                    "modality": Modality(modality).value})

    @property
    def kernel(self):
        """Spatial autocovariance on the periodic grid."""
        if self.nps is None:
            raise InvalidArgumentError("kernel needs an nps")
        if self._kernel is None:
            self._kernel = sfft.ifftn(self.nps).real
        return self._kernel

    def _window(self, support_shape):
        if len(support_shape) != self.nps.ndim:
            raise InvalidArgumentError(f"support rank {len(support_shape)} != nps rank {self.nps.ndim}")
        idx = []
        for n, N in zip(support_shape, self.nps.shape):
            if n > N:
                raise InvalidArgumentError(f"support {support_shape} larger than grid {self.nps.shape}")
            idx.append(np.arange(-(n - 1), n) % N)
        return self.kernel[np.ix_(*idx)]

    def apply_covariance(self, w):
        """``K @ w`` for ``w`` on a support patch, via the spatial kernel."""
        w = np.asarray(w, dtype=float)
        if self.nps is None:
            return (self.covariance @ w.ravel()).reshape(w.shape)
        return fftconvolve(self._window(w.shape), w, mode="valid")

    def covariance_matrix(self, support_shape):
        """Dense covariance over a support patch (small supports only)."""
        if self.covariance is not None:
            return self.covariance
        size = int(np.prod(support_shape))
        if size > 16384:
            raise InvalidArgumentError(f"dense covariance of {size}^2 entries is too large")
        coords = np.indices(support_shape).reshape(len(support_shape), -1)
        diff = coords[:, :, None] - coords[:, None, :]
        idx = tuple(diff[i] % self.nps.shape[i] for i in range(len(support_shape)))
        return self.kernel[idx]

    def sample(self, n_samples, rng):
        if self.nps is None:
            chol = np.linalg.cholesky(self.covariance + 1e-12 * np.eye(len(self.covariance)))
            return rng.standard_normal((n_samples, len(chol))) @ chol.T
        return sample_stationary_noise(self.nps, n_samples, rng)


# ---------------------------------------------------------------------------
# Scalar operations
# ---------------------------------------------------------------------------

def decision_variable(template, patch):
    """Template response ``lambda = sum(w * g)``."""
    w, g = check_same_shape(template, patch, "template/patch")
    return float(np.sum(w * g))


def decision_variables(template, patches):
    """Vectorized :func:`decision_variable` over a stack of patches."""
    w = np.asarray(template, dtype=float)
    g = np.asarray(patches, dtype=float)
    if g.shape[1:] != w.shape:
        raise InvalidArgumentError(f"patch shape {g.shape[1:]} != template shape {w.shape}")
    return g.reshape(len(g), -1) @ w.ravel()


def add_internal_noise(lam, sigma_lambda, K, rng):
    """Add Gaussian internal noise with sd ``K * sigma_lambda``."""
    check_positive(sigma_lambda, "sigma_lambda", allow_zero=True)
    check_positive(K, "K", allow_zero=True)
    if K == 0 or sigma_lambda == 0:
        return lam
    eps = rng.normal(0.0, K * sigma_lambda, size=np.shape(lam))
    return lam + eps


def internal_noise_factor(K):
    """Multiplicative d' loss ``1 / sqrt(1 + K^2)`` from internal noise."""
    return 1.0 / np.sqrt(1.0 + float(K) ** 2)


def _split_samples(samples):
    s = [x.value for x in samples if x.cls is ResponseClass.SIGNAL]
    n = [x.value for x in samples if x.cls is ResponseClass.NOISE]
    return np.asarray(s, dtype=float), np.asarray(n, dtype=float)


def empirical_dprime(signal_responses, noise_responses=None):
    """d' from sampled decision variables, in pooled-sd units.

    Accepts either two arrays of responses or one sequence of
    :class:`DecisionSample`.
    """
    if noise_responses is None:
        lam_s, lam_n = _split_samples(signal_responses)
    else:
        lam_s = np.asarray(signal_responses, dtype=float).ravel()
        lam_n = np.asarray(noise_responses, dtype=float).ravel()
    if lam_s.size < 2 or lam_n.size < 2:
        raise InvalidArgumentError("need at least 2 samples in each class")
    pooled = np.sqrt((lam_s.var(ddof=1) + lam_n.var(ddof=1)) / 2.0)
    if pooled == 0:
        raise DegenerateError("zero pooled variance")
    return float((lam_s.mean() - lam_n.mean()) / pooled)


def analytic_dprime(template, signal, covariance, internal_noise=0.0):
    """``w's / sqrt(w'Kw)``, optionally degraded by internal noise ``K_int``.

    ``covariance`` is a dense matrix over the flattened template or a
    :class:`NoiseStats` whose kernel is applied matrix-free.
    """
    w, s = check_same_shape(template, signal, "template/signal")
    w = w.astype(float)
    if isinstance(covariance, NoiseStats):
        kw = covariance.apply_covariance(w)
    else:
        c = np.asarray(covariance, dtype=float)
        if c.shape != (w.size, w.size):
            raise InvalidArgumentError(f"covariance shape {c.shape} does not match template size {w.size}")
        kw = c @ w.ravel()
    var = float(np.dot(w.ravel(), np.ravel(kw)))
    if var <= 0:
        raise DegenerateError("template response variance is zero")
    return float(np.dot(w.ravel(), s.ravel()) / np.sqrt(var)) * internal_noise_factor(internal_noise)


def fourier_dprime(template_ft, signal_ft, nps, internal_noise=0.0):
    """d' from DFTs of template and signal and the noise power spectrum.

    The denominator is the square root of the summed ``|W|^2 N`` so that the
    result equals the spatial formula for circulant covariance.
    """
    W = np.asarray(template_ft)
    S = np.asarray(signal_ft)
    P = np.asarray(nps, dtype=float)
    if not (W.shape == S.shape == P.shape):
        raise InvalidArgumentError(f"grid mismatch: {W.shape}, {S.shape}, {P.shape}")
    if np.any(P < 0):
        raise InvalidArgumentError("nps must be non-negative")
    n = W.size
    num_c = np.sum(np.conj(W) * S)
    scale = max(abs(num_c), np.sum(np.abs(W) * np.abs(S)), 1e-300)
    if abs(num_c.imag) > 1e-8 * scale:
        raise InvalidArgumentError("template and signal spectra are not Hermitian-consistent")
    var = float(np.sum(np.abs(W) ** 2 * P).real)
    if var <= 0:
        raise DegenerateError("template response variance is zero")
    return float(num_c.real / np.sqrt(n * var)) * internal_noise_factor(internal_noise)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------

def embed(arr, grid_shape):
    """Zero-pad ``arr`` into the corner of a grid of ``grid_shape``."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != len(grid_shape) or any(a > g for a, g in zip(arr.shape, grid_shape)):
        raise InvalidArgumentError(f"cannot embed {arr.shape} in grid {tuple(grid_shape)}")
    out = np.zeros(grid_shape)
    out[tuple(slice(0, n) for n in arr.shape)] = arr
    return out


def signal_on_support(signal, support_shape):
    """Center a signal array (or profile) in a zero support of ``support_shape``.

    2D supports get the signal's central slice; 3D supports the slab of
    slices around the center.
    """
    arr = signal.voxels if hasattr(signal, "voxels") else np.asarray(signal, dtype=float)
    if len(support_shape) == 2 and arr.ndim == 3:
        arr = arr[arr.shape[0] // 2]
    if arr.ndim != len(support_shape):
        raise InvalidArgumentError(f"signal rank {arr.ndim} vs support {support_shape}")
    out = np.zeros(support_shape)
    src, dst = [], []
    for n_sig, n_sup in zip(arr.shape, support_shape):
        c_sig, c_sup = n_sig // 2, n_sup // 2
        lo = max(-c_sup, -c_sig)
        hi = min(n_sup - c_sup, n_sig - c_sig)
        src.append(slice(c_sig + lo, c_sig + hi))
        dst.append(slice(c_sup + lo, c_sup + hi))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _seed_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def stationary_patches(noise_stats, support_shape, n, seed, stream):
    """``n`` background patches cut from periodic stationary fields.

    Non-overlapping patches are tiled from each field so one draw serves
    several trials; field ``i`` uses the child seed ``(seed, stream, i)``.
    """
    grid = noise_stats.nps.shape
    per_axis = [max(g // s, 1) for g, s in zip(grid, support_shape)]
    per_field = int(np.prod(per_axis))
    out = np.empty((n,) + tuple(support_shape))
    k = 0
    i = 0
    while k < n:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), stream, i]))
        fld = sample_stationary_noise(noise_stats.nps, 1, rng)[0]
        for offs in np.ndindex(*per_axis):
            if k == n:
                break
            sl = tuple(slice(o * s, o * s + s) for o, s in zip(offs, support_shape))
            out[k] = fld[sl]
            k += 1
        i += 1
    return out


def dprime_curve(template_set, signal, noise_stats, method=Method.FOURIER, trials=None, seed=0,
                 internal_noise=True):
    """Per-eccentricity d' for every template of a set.

    Parameters
    ----------
    template_set : EccentricityTemplateSet
    signal : SignalProfile or ndarray
        Centered onto each template's support.
    noise_stats : NoiseStats
        For FOURIER and EMPIRICAL an ``nps`` on the stimulus grid is required.
    method : Method or str
    trials : int
        Trials per class and bin, EMPIRICAL only (>= 100).
    seed : int
        Root seed; trial noise uses child seeds derived from it.
    internal_noise : bool
        Apply the set's internal-noise constant.

    Returns
    -------
    DPrimeCurve
    """
    method = Method(method)
    K = template_set.internal_noise_K if internal_noise else 0.0
    values = []
    if method is Method.EMPIRICAL:
        if trials is None or trials < 100:
            raise InvalidArgumentError("EMPIRICAL d' needs trials >= 100")
        if noise_stats.nps is None:
            raise InvalidArgumentError("EMPIRICAL d' needs a stationary nps")
        shape = np.shape(template_set.templates[0])
        s = signal_on_support(signal, shape)
        bg_n = stationary_patches(noise_stats, shape, trials, seed, 0)
        bg_s = stationary_patches(noise_stats, shape, trials, seed, 1)
        for i, w in enumerate(template_set.templates):
            lam_n = decision_variables(w, bg_n)
            lam_s = decision_variables(w, bg_s + s)
            if K > 0:
                sigma = lam_n.std(ddof=1)
                rng = _seed_rng(seed, 1000 + i)
                lam_n = add_internal_noise(lam_n, sigma, K, rng)
                lam_s = add_internal_noise(lam_s, sigma, K, rng)
            values.append(empirical_dprime(lam_s, lam_n))
    else:
        for w in template_set.templates:
            s = signal_on_support(signal, np.shape(w))
            if method is Method.ANALYTIC:
                values.append(analytic_dprime(w, s, noise_stats, K))
            else:
                if noise_stats.nps is None:
                    raise InvalidArgumentError("FOURIER d' needs an nps")
                grid = noise_stats.nps.shape
                W = sfft.fftn(embed(w, grid))
                S = sfft.fftn(embed(s, grid))
                values.append(fourier_dprime(W, S, noise_stats.nps, K))
    kind = signal.kind.value if hasattr(signal, "kind") else "custom"
    return DPrimeCurve(template_set.model.value, kind, template_set.modality.value,
                       template_set.ecc_bins, values, method,
                       trials if method is Method.EMPIRICAL else None, seed)


__all__ = [
    "DPrimeCurve", "DecisionSample", "Method", "NoiseStats", "ResponseClass",
    "add_internal_noise", "analytic_dprime", "decision_variable", "decision_variables",
    "dprime_curve", "embed", "empirical_dprime", "fourier_dprime", "internal_noise_factor",
    "signal_on_support",
]
