"""Eccentricity-dependent observer templates.

FCHO: a Gabor channel bank whose center frequencies fall and envelopes grow
with ``1 + 0.7063 * E**1.6953``; the template prewhitens in channel space.
FNPWE: the signal passed twice through an eccentricity-dependent eye filter.
3D templates stack one 2D template per signal slice.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from ._validation import check_ecc_bins, check_eccentricity, check_positive
from .detectability import NoiseStats, embed
from .exceptions import DataError, EmptyBankError, InvalidArgumentError, NumericalFailureError
from .stimulus import DEFAULT_PX_PER_DEG, Modality, SignalProfile

SCALING_ALPHA = 0.7063
SCALING_BETA = 1.6953
FOVEAL_FREQS = (16.0, 8.0, 4.0, 2.0, 1.0, 0.5)
N_ORIENTATIONS = 8
MIN_CHANNEL_FREQ = 0.15
EYE_FILTER_PARAMS = {"alpha": 0.83, "beta": 0.35, "gamma": 0.4, "n": 2.2}
INTERNAL_NOISE = {"fcho": 2.78, "fnpwe": 15.13}
DEFAULT_PATCH = 64


class ObserverModel(str, enum.Enum):
    FCHO = "fcho"
    FNPWE = "fnpwe"


def scaling_factor(E):
    """Channel size multiplier at eccentricity ``E`` (dva)."""
    E = check_eccentricity(E)
    out = 1.0 + SCALING_ALPHA * E ** SCALING_BETA
    return float(out) if out.ndim == 0 else out


def frequency_grid(shape, px_per_deg):
    """Radial spatial frequency (cycles/deg) on the unshifted DFT grid of ``shape``."""
    axes = [np.fft.fftfreq(n) * px_per_deg for n in shape]
    grids = np.meshgrid(*axes, indexing="ij", sparse=True)
    return np.sqrt(sum(g ** 2 for g in grids))


# ---------------------------------------------------------------------------
# Gabor channels
# ---------------------------------------------------------------------------

def gabor_sigma(freq, bandwidth_octaves=1.0):
    """Envelope sd giving a full-width-half-max bandwidth of ``bandwidth_octaves``."""
    b = 2.0 ** bandwidth_octaves
    return np.sqrt(np.log(2.0) / 2.0) / (np.pi * freq) * (b + 1.0) / (b - 1.0)


def gabor(size, freq_cpx, theta, bandwidth_octaves=1.0, phase=0.0):
    """Even-phase Gabor on a ``size x size`` patch centered at index ``size // 2``."""
    ax = np.arange(size, dtype=float) - size // 2
    y, x = np.meshgrid(ax, ax, indexing="ij")
    sigma = gabor_sigma(freq_cpx, bandwidth_octaves)
    carrier = np.cos(2 * np.pi * freq_cpx * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    return np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2)) * carrier


@dataclass
class ChannelBank:
    eccentricity: float
    channels: np.ndarray
    center_freqs: np.ndarray
    orientations: np.ndarray
    px_per_deg: float

    @property
    def n_channels(self):
        return len(self.channels)

    @property
    def patch_shape(self):
        return self.channels.shape[1:]

    def matrix(self):
        """Channels as columns, shape ``(n_pixels, n_channels)``."""
        return self.channels.reshape(self.n_channels, -1).T


def gabor_channel_bank(E, px_per_deg=DEFAULT_PX_PER_DEG, patch_size=DEFAULT_PATCH, *,
                       foveal_freqs=FOVEAL_FREQS, n_orientations=N_ORIENTATIONS,
                       min_freq=MIN_CHANNEL_FREQ, bandwidth_octaves=1.0, phase=0.0):
    """Gabor bank at eccentricity ``E``.

    Center frequencies are the foveal set divided by :func:`scaling_factor`;
    with a constant octave bandwidth the envelopes grow by the same factor.
    Frequencies below ``min_freq`` cycles/deg are dropped.
    """
    E = float(check_eccentricity(E))
    ppd = check_positive(px_per_deg, "px_per_deg")
    scale = scaling_factor(E)
    freqs = np.asarray(foveal_freqs, dtype=float) / scale
    kept = freqs[freqs >= min_freq]
    if kept.size == 0:
        raise EmptyBankError(f"no Gabor channel above {min_freq} c/deg at E={E} dva")
    thetas = np.arange(n_orientations) * np.pi / n_orientations
    chans, cf, ori = [], [], []
    for f in kept:
        for th in thetas:
            chans.append(gabor(patch_size, f / ppd, th, bandwidth_octaves, phase))
            cf.append(f)
            ori.append(th)
    return ChannelBank(E, np.asarray(chans), np.asarray(cf), np.asarray(ori), ppd)


def estimate_channel_covariance(bank, patches, min_ratio=10):
    """Sample covariance of channel responses over background patches."""
    X = np.asarray(patches, dtype=float)
    if X.shape[1:] != tuple(bank.patch_shape):
        raise InvalidArgumentError(f"patch shape {X.shape[1:]} != bank {bank.patch_shape}")
    if len(X) < min_ratio * bank.n_channels:
        raise InvalidArgumentError(
            f"need >= {min_ratio * bank.n_channels} background patches, got {len(X)}")
    R = X.reshape(len(X), -1) @ bank.matrix()
    return np.atleast_2d(np.cov(R, rowvar=False))


def channel_covariance_from_nps(bank, nps2d):
    """Exact channel covariance for stationary noise with a 2D ``nps``."""
    nps2d = np.asarray(nps2d, dtype=float)
    F = sfft.fft2(np.stack([embed(c, nps2d.shape) for c in bank.channels]))
    F = F.reshape(bank.n_channels, -1)
    C = (np.conj(F) * nps2d.ravel()) @ F.T / nps2d.size
    return np.real(C + C.T.conj()) / 2.0


def cho_template(bank, signal_slice, channel_covariance, ridge=1e-6):
    """Hotelling template in channel space mapped back to pixels.

    ``w = U (C + eps I)^-1 U' s`` with ``eps = ridge * trace(C) / n``.
    """
    U = bank.matrix()
    s = np.asarray(signal_slice, dtype=float)
    if s.shape != tuple(bank.patch_shape):
        raise InvalidArgumentError(f"signal slice {s.shape} != channel patch {bank.patch_shape}")
    C = np.asarray(channel_covariance, dtype=float)
    n = bank.n_channels
    if C.shape != (n, n):
        raise InvalidArgumentError(f"channel covariance {C.shape} != ({n}, {n})")
    eps = ridge * np.trace(C) / n
    Cr = C + eps * np.eye(n)
    if not np.all(np.isfinite(Cr)) or np.linalg.cond(Cr) > 1e14:
        raise NumericalFailureError("regularized channel covariance is singular")
    try:
        a = np.linalg.solve(Cr, U.T @ s.ravel())
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("channel covariance solve failed") from exc
    return (U @ a).reshape(s.shape)


# ---------------------------------------------------------------------------
# Eye filter / NPWE
# ---------------------------------------------------------------------------

def eye_filter_gain(rho, E, alpha=0.83, beta=0.35, gamma=0.4, n=2.2):
    """``(rho f)^alpha exp(-beta (rho f)^gamma)`` with ``f = max(E, 1)^n``.

    Below 1 dva the filter is held at its 1 dva shape; the raw formula
    vanishes at the fovea.
    """
    x = np.asarray(rho, dtype=float) * max(float(E), 1.0) ** n
    return x ** alpha * np.exp(-beta * x ** gamma)


def eye_filter_peak(E, alpha=0.83, beta=0.35, gamma=0.4, n=2.2):
    """Frequency (cycles/deg) of peak eye-filter gain."""
    return (alpha / (beta * gamma)) ** (1.0 / gamma) / max(float(E), 1.0) ** n


@dataclass
class EyeFilter:
    eccentricity: float
    freq_grid: np.ndarray
    gain: np.ndarray
    params: dict = field(default_factory=lambda: dict(EYE_FILTER_PARAMS))

    def __call__(self, rho):
        return eye_filter_gain(rho, self.eccentricity, **self.params)


def eye_filter(E, freq_grid, **params):
    E = float(check_eccentricity(E))
    freq_grid = np.asarray(freq_grid, dtype=float)
    if np.any(freq_grid < 0):
        raise InvalidArgumentError("frequencies must be >= 0")
    p = dict(EYE_FILTER_PARAMS, **params)
    return EyeFilter(E, freq_grid, eye_filter_gain(freq_grid, E, **p), p)


def npwe_template(signal_slice, filt):
    """Signal filtered twice by the eye filter: ``ifft(G^2 S)``.

    ``filt`` is an :class:`EyeFilter` on the slice's DFT grid, or a bare gain
    array / scalar.
    """
    s = np.asarray(signal_slice, dtype=float)
    gain = filt.gain if isinstance(filt, EyeFilter) else np.asarray(filt, dtype=float)
    if gain.ndim and gain.shape != s.shape:
        raise InvalidArgumentError(f"filter grid {gain.shape} != signal slice {s.shape}")
    return sfft.ifftn(gain ** 2 * sfft.fftn(s)).real


def stack_3d(templates_per_slice):
    slices = [np.asarray(t, dtype=float) for t in templates_per_slice]
    if not slices:
        raise InvalidArgumentError("nothing to stack")
    shape = slices[0].shape
    if any(t.ndim != 2 or t.shape != shape for t in slices):
        raise InvalidArgumentError("all slice templates must be 2D with equal shape")
    return np.stack(slices)


# ---------------------------------------------------------------------------
# Template sets
# ---------------------------------------------------------------------------

@dataclass
class EccentricityTemplateSet:
    model: ObserverModel
    ecc_bins: np.ndarray
    templates: list
    internal_noise_K: float
    px_per_deg: float = DEFAULT_PX_PER_DEG
    modality: Modality = Modality.TWO_D
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.model = ObserverModel(self.model)
        self.modality = Modality(self.modality)
        self.ecc_bins = check_ecc_bins(self.ecc_bins)
        self.templates = [np.asarray(t, dtype=float) for t in self.templates]
        if len(self.templates) != len(self.ecc_bins):
            raise InvalidArgumentError("need exactly one template per eccentricity bin")
        if len({t.shape for t in self.templates}) > 1:
            raise InvalidArgumentError("templates must share one support shape")

    @property
    def support_shape(self):
        return self.templates[0].shape

    def bin_index(self, E):
        """Bin of eccentricity ``E`` with edges ``[E_k, E_k+1)``; the last bin catches all."""
        idx = np.searchsorted(self.ecc_bins, np.asarray(E, dtype=float), side="right") - 1
        return np.clip(idx, 0, len(self.ecc_bins) - 1)

    def template_for(self, E):
        return self.templates[int(self.bin_index(E))]

    def save(self, path):
        """Write a ``.tset``: one JSON manifest line, then float64 LE arrays per bin."""
        manifest = {
            "model": self.model.value, "modality": self.modality.value,
            "bins": self.ecc_bins.tolist(), "K": self.internal_noise_K,
            "px_per_deg": self.px_per_deg, "shape": list(self.support_shape),
            "meta": self.meta,
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
            for t in self.templates:
                fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return Path(path)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            try:
                m = json.loads(fh.readline().decode("utf-8"))
                shape = tuple(m["shape"])
                n = len(m["bins"])
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}: malformed template-set manifest") from exc
            raw = fh.read()
        size = int(np.prod(shape))
        if len(raw) != 8 * size * n:
            raise DataError(f"{path}: template payload has {len(raw)} bytes, expected {8 * size * n}")
        arr = np.frombuffer(raw, dtype="<f8").reshape((n,) + shape)
        return cls(m["model"], m["bins"], list(arr.copy()), m["K"], m["px_per_deg"],
                   m["modality"], m.get("meta", {}))


def _signal_slices(signal, modality, patch_size, max_depth):
    from .detectability import signal_on_support

    if isinstance(signal, SignalProfile):
        vox = signal.voxels
    else:
        vox = np.asarray(signal, dtype=float)
        if vox.ndim == 2:
            vox = vox[None]
    if modality is Modality.TWO_D:
        return [signal_on_support(vox, (patch_size, patch_size))]
    depth = vox.shape[0] if max_depth is None else min(vox.shape[0], max_depth)
    slab = signal_on_support(vox, (depth, patch_size, patch_size))
    return list(slab)


def build_template_set(model, signal, background_stats=None, ecc_bins=(0.0,),
                       px_per_deg=DEFAULT_PX_PER_DEG, *, modality=Modality.TWO_D,
                       patch_size=DEFAULT_PATCH, max_depth=None, internal_noise=None,
                       ridge=1e-6, bandwidth_octaves=1.0, eye_params=None):
    """One template per eccentricity bin.

    Parameters
    ----------
    model : ObserverModel or str
    signal : SignalProfile or ndarray
    background_stats : NoiseStats or ndarray, optional
        Needed by FCHO for the channel covariance: a :class:`NoiseStats` with a
        2D (slice) or 3D nps, or a stack of 2D background patches.
    ecc_bins : sequence of float
        Bin left edges in dva, starting at 0.
    modality : Modality
        TWO_D uses the signal's central slice; THREE_D stacks every slice,
        limited to ``max_depth`` slices around the center.
    """
    model = ObserverModel(model)
    modality = Modality(modality)
    bins = check_ecc_bins(ecc_bins)
    ppd = check_positive(px_per_deg, "px_per_deg")
    slices = _signal_slices(signal, modality, patch_size, max_depth)
    K = INTERNAL_NOISE[model.value] if internal_noise is None else float(internal_noise)
    meta = {"patch_size": patch_size}
    templates = []
    if model is ObserverModel.FCHO:
        if background_stats is None:
            raise InvalidArgumentError("FCHO needs background statistics for its channel covariance")
        counts = []
        for E in bins:
            bank = gabor_channel_bank(E, ppd, patch_size, bandwidth_octaves=bandwidth_octaves)
            if isinstance(background_stats, NoiseStats):
                nps = background_stats.nps
                if nps.ndim == 3:
                    nps = nps.mean(axis=0)
                C = channel_covariance_from_nps(bank, nps)
            else:
                C = estimate_channel_covariance(bank, background_stats)
            per_slice = [cho_template(bank, s, C, ridge) for s in slices]
            templates.append(per_slice[0] if modality is Modality.TWO_D else stack_3d(per_slice))
            counts.append(bank.n_channels)
        meta.update({"channel_counts": counts, "gabor": {
            "bandwidth_octaves": bandwidth_octaves, "phase": "even", "envelope": "circular",
            "orientations": N_ORIENTATIONS, "foveal_freqs": list(FOVEAL_FREQS),
            "min_freq": MIN_CHANNEL_FREQ}, "ridge": ridge})
    else:
        p = dict(EYE_FILTER_PARAMS, **(eye_params or {}))
        rho = frequency_grid((patch_size, patch_size), ppd)
        for E in bins:
            filt = eye_filter(E, rho, **p)
            per_slice = [npwe_template(s, filt) for s in slices]
            templates.append(per_slice[0] if modality is Modality.TWO_D else stack_3d(per_slice))
        meta["eye_filter"] = p
    if isinstance(signal, SignalProfile):
        meta["signal"] = signal.kind.value
    return EccentricityTemplateSet(model, bins, templates, K, ppd, modality, meta)
