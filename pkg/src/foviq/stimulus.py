"""Synthetic stimuli: power-law noise volumes, MCALC/MASS signals, trial assembly.

Arrays are stored slice-first, ``voxels[slice, y, x]``; dims and locations are
given the other way round, ``(width, height, depth)`` and ``(x, y, slice)``.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from ._validation import check_positive
from .exceptions import DataError, InvalidArgumentError, UnphysicalParameterWarning

DEFAULT_PX_PER_DEG = 36.0
MCALC_DIAMETER_DEG = 0.13
MASS_SIGMA_DEG = 0.22
SIGNAL_AMPLITUDE = 83.0
SUPPORT_THRESHOLD = 1e-3


class SignalKind(str, enum.Enum):
    MCALC = "mcalc"
    MASS = "mass"


class Modality(str, enum.Enum):
    TWO_D = "2d"
    THREE_D = "3d"


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class NoiseVolume:
    voxels: np.ndarray
    mean: float
    sd: float
    exponent: float
    seed: int | None

    def __post_init__(self):
        object.__setattr__(self, "voxels", _readonly(np.asarray(self.voxels, dtype=float)))

    @property
    def dims(self):
        d, h, w = self.voxels.shape
        return (w, h, d)


@dataclass(frozen=True)
class SignalProfile:
    kind: SignalKind
    voxels: np.ndarray
    peak_amplitude: float
    angular_size: float
    px_per_deg: float

    def __post_init__(self):
        object.__setattr__(self, "kind", SignalKind(self.kind))
        object.__setattr__(self, "voxels", _readonly(np.asarray(self.voxels, dtype=float)))

    @property
    def center(self):
        """Index of the signal center as ``(slice, y, x)``."""
        return tuple(n // 2 for n in self.voxels.shape)

    def central_slice(self):
        return self.voxels[self.center[0]]

    def crop_depth(self, max_depth):
        """Keep at most ``max_depth`` slices, centered on the signal center."""
        d = self.voxels.shape[0]
        if max_depth >= d:
            return self
        c = self.center[0]
        lo = c - max_depth // 2
        return SignalProfile(self.kind, self.voxels[lo:lo + max_depth], self.peak_amplitude,
                             self.angular_size, self.px_per_deg)

    def scaled(self, factor):
        return SignalProfile(self.kind, self.voxels * factor, self.peak_amplitude * factor,
                             self.angular_size, self.px_per_deg)


@dataclass(frozen=True)
class TrialStimulus:
    data: np.ndarray
    signal_present: bool
    signal_location: tuple | None
    modality: Modality
    slice_index: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "data", _readonly(np.asarray(self.data, dtype=float)))
        if self.signal_present != (self.signal_location is not None):
            raise InvalidArgumentError("signal_location must be given iff the signal is present")
        if self.signal_location is not None:
            object.__setattr__(self, "signal_location", tuple(int(v) for v in self.signal_location))

    @classmethod
    def absent(cls, volume):
        data = volume.voxels if isinstance(volume, NoiseVolume) else volume
        data = np.asarray(data)
        modality = Modality.TWO_D if data.ndim == 2 else Modality.THREE_D
        return cls(data, False, None, modality)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

def radial_frequency_index(shape, rfft=False):
    """Isotropic radial frequency in raw DFT index units for an array ``shape``."""
    axes = []
    for i, n in enumerate(shape):
        if rfft and i == len(shape) - 1:
            axes.append(np.arange(n // 2 + 1, dtype=float))
        else:
            axes.append(np.fft.fftfreq(n) * n)
    grids = np.meshgrid(*axes, indexing="ij", sparse=True)
    return np.sqrt(sum(g ** 2 for g in grids))


def _amplitude_filter(shape, exponent, rfft=False):
    f = radial_frequency_index(shape, rfft=rfft)
    amp = np.zeros_like(f)
    nz = f > 0
    amp[nz] = f[nz] ** (exponent / 2.0)
    return amp


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        dims = dims + (1,)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise InvalidArgumentError(f"dims must be three positive sizes (w, h, d), got {dims}")
    return dims


def generate_noise_volume(dims, mean=128.0, sd=25.0, exponent=-2.8, seed=None):
    """Power-law filtered Gaussian noise volume.

    White Gaussian noise is transformed, multiplied by ``f**(exponent / 2)`` on
    the isotropic index-frequency ``f = sqrt(u^2 + v^2 + w^2)`` so that the
    *power* spectrum falls as ``f**exponent``, transformed back, and affinely
    renormalized to the requested sample mean and sd. The DC term is zeroed.

    Parameters
    ----------
    dims : tuple
        ``(width, height, depth)`` in voxels; depth 1 gives a 2D field.
    mean, sd : float
        Target gray-level mean and standard deviation.
    exponent : float
        Power-spectrum exponent, e.g. -2.8.
    seed : int or None
        Seed for ``numpy.random.default_rng``.

    Returns
    -------
    NoiseVolume
    """
    w, h, d = _check_dims(dims)
    check_positive(sd, "sd")
    if exponent > 0:
        warnings.warn(f"positive spectral exponent {exponent} boosts high frequencies",
                      UnphysicalParameterWarning, stacklevel=2)
    rng = np.random.default_rng(seed)
    shape = (d, h, w)
    white = rng.standard_normal(shape)
    coef = sfft.rfftn(white)
    coef *= _amplitude_filter(shape, exponent, rfft=True)
    field_ = sfft.irfftn(coef, s=shape)
    std = field_.std()
    if std == 0:
        # a single voxel has no non-DC frequency to keep
        field_ = white - white.mean()
        std = field_.std() or 1.0
    voxels = (field_ - field_.mean()) * (sd / std) + mean
    return NoiseVolume(voxels, float(mean), float(sd), float(exponent), seed)


def stimulus_nps(shape, sd=25.0, exponent=-2.8):
    """Expected noise power spectrum of :func:`generate_noise_volume` output.

    ``shape`` is the array shape ``(depth, height, width)`` (or any rank). The
    returned array ``P`` lives on the unshifted DFT grid and satisfies
    ``cov(r) = ifftn(P)(r)``, so ``mean(P) == sd**2``.
    """
    amp2 = _amplitude_filter(tuple(shape), exponent) ** 2
    norm = amp2.mean()
    if norm == 0:
        return np.full(shape, float(sd) ** 2)
    return (sd ** 2) * amp2 / norm


def slice_nps(nps3d):
    """NPS of a single 2D slice taken from a stationary 3D field."""
    return np.asarray(nps3d).mean(axis=0)


def sample_stationary_noise(nps, n_samples, rng, mean=0.0):
    """Draw zero-mean Gaussian fields whose covariance kernel is ``ifftn(nps)``."""
    nps = np.asarray(nps, dtype=float)
    if np.any(nps < 0):
        raise InvalidArgumentError("noise power spectrum must be non-negative")
    axes = tuple(range(1, nps.ndim + 1))
    white = rng.standard_normal((n_samples,) + nps.shape)
    out = sfft.ifftn(sfft.fftn(white, axes=axes) * np.sqrt(nps), axes=axes).real
    return out + mean


def radial_power_spectrum(image):
    """Radially averaged periodogram of a 2D image in integer index bins."""
    image = np.asarray(image, dtype=float)
    power = np.abs(np.fft.fft2(image - image.mean())) ** 2
    f = radial_frequency_index(image.shape)
    idx = np.rint(f).astype(int)
    sums = np.bincount(idx.ravel(), power.ravel())
    counts = np.bincount(idx.ravel())
    freqs = np.arange(sums.size)
    keep = counts > 0
    return freqs[keep], sums[keep] / counts[keep]


# ---------------------------------------------------------------------------
# Signals
# ---------------------------------------------------------------------------

def make_signal(kind, px_per_deg=DEFAULT_PX_PER_DEG, *, amplitude=SIGNAL_AMPLITUDE,
                mcalc_diameter_deg=MCALC_DIAMETER_DEG, mass_sigma_deg=MASS_SIGMA_DEG):
    """Build the MCALC (sharp sphere) or MASS (3D Gaussian) luminance profile.

    The MCALC sphere keeps voxels whose centers lie within the radius. The
    MASS array is cropped to the smallest box holding every value above
    ``1e-3`` of the peak. Both peak at exactly ``amplitude``.
    """
    kind = SignalKind(kind)
    ppd = check_positive(px_per_deg, "px_per_deg")
    if kind is SignalKind.MCALC:
        diameter_px = mcalc_diameter_deg * ppd
        if diameter_px < 1.0:
            raise InvalidArgumentError(
                f"MCALC diameter {diameter_px:.3f} px < 1 px at {ppd} px/deg; signal unrepresentable")
        radius = diameter_px / 2.0
        half = int(np.floor(radius))
        ax = np.arange(-half, half + 1, dtype=float)
        z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
        voxels = (np.sqrt(x ** 2 + y ** 2 + z ** 2) <= radius) * float(amplitude)
        size = mcalc_diameter_deg
    else:
        sigma = mass_sigma_deg * ppd
        # largest integer offset whose on-axis value is still above threshold
        half = int(np.ceil(sigma * np.sqrt(2.0 * np.log(1.0 / SUPPORT_THRESHOLD))))
        while half > 0 and np.exp(-half ** 2 / (2 * sigma ** 2)) <= SUPPORT_THRESHOLD:
            half -= 1
        ax = np.arange(-half, half + 1, dtype=float)
        z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
        voxels = float(amplitude) * np.exp(-(x ** 2 + y ** 2 + z ** 2) / (2 * sigma ** 2))
        size = 3.0 * mass_sigma_deg
    return SignalProfile(kind, voxels, float(amplitude), float(size), ppd)


def insert_signal(volume, signal, location, *, clip=False):
    """Add ``signal`` to a copy of ``volume`` with its center at ``location``.

    Parameters
    ----------
    volume : NoiseVolume or ndarray
        Background, shape ``(depth, height, width)``.
    signal : SignalProfile or ndarray
    location : (x, y, slice)
    clip : bool
        Drop the part of the signal falling outside the volume instead of
        raising. Needed for deep signals in shallow volumes.

    Returns
    -------
    TrialStimulus
    """
    data = volume.voxels if isinstance(volume, NoiseVolume) else np.asarray(volume, dtype=float)
    sig = signal.voxels if isinstance(signal, SignalProfile) else np.asarray(signal, dtype=float)
    if data.ndim != 3 or sig.ndim != 3:
        raise InvalidArgumentError("insert_signal expects 3D volume and signal arrays")
    x, y, z = (int(v) for v in location)
    center = [n // 2 for n in sig.shape]
    out = np.array(data, dtype=float, copy=True)
    dst, src = [], []
    for pos, c, n_sig, n_vol in zip((z, y, x), center, sig.shape, data.shape):
        lo = pos - c
        hi = lo + n_sig
        if lo < 0 or hi > n_vol:
            if not clip:
                raise InvalidArgumentError(
                    f"signal of shape {sig.shape} at {tuple(location)} does not fit volume {data.shape}")
            if pos < 0 or pos >= n_vol:
                raise InvalidArgumentError(f"signal center {tuple(location)} outside volume")
        a, b = max(lo, 0), min(hi, n_vol)
        dst.append(slice(a, b))
        src.append(slice(a - lo, b - lo))
    out[tuple(dst)] += sig[tuple(src)]
    return TrialStimulus(out, True, (x, y, z), Modality.THREE_D)


def extract_2d(trial, seed=None):
    """Take the 2D trial slice: the signal's center slice, or a random one if absent."""
    if trial.modality is not Modality.THREE_D or trial.data.ndim != 3:
        raise InvalidArgumentError("extract_2d needs a 3D trial")
    if trial.signal_present:
        k = trial.signal_location[2]
    else:
        k = int(np.random.default_rng(seed).integers(trial.data.shape[0]))
    return TrialStimulus(trial.data[k], trial.signal_present, trial.signal_location,
                         Modality.TWO_D, slice_index=k, meta=dict(trial.meta))


# ---------------------------------------------------------------------------
# .vol files: one JSON header line, then little-endian float32 voxels (x fastest)
# ---------------------------------------------------------------------------

def write_volume(path, volume, **extra):
    """Write a NoiseVolume, TrialStimulus or bare array as a ``.vol`` file."""
    if isinstance(volume, NoiseVolume):
        voxels = volume.voxels
        header = {"mean": volume.mean, "sd": volume.sd, "exponent": volume.exponent,
                  "seed": volume.seed}
    elif isinstance(volume, TrialStimulus):
        voxels = volume.data if volume.data.ndim == 3 else volume.data[None]
        header = dict(volume.meta)
        header.update({"signal_present": volume.signal_present,
                       "signal_xyz": list(volume.signal_location) if volume.signal_present else None,
                       "modality": volume.modality.value})
        if volume.slice_index is not None:
            header["slice_index"] = volume.slice_index
    else:
        voxels = np.asarray(volume)
        if voxels.ndim == 2:
            voxels = voxels[None]
        header = {}
    header.update(extra)
    d, h, w = voxels.shape
    header["dims"] = [w, h, d]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes())
    return path


def read_volume(path):
    """Read a ``.vol`` file; returns ``(voxels, header)`` with voxels ``(d, h, w)``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
            w, h, d = header["dims"]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed volume header") from exc
        raw = fh.read()
    expected = w * h * d * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes of voxels, found {len(raw)}")
    voxels = np.frombuffer(raw, dtype="<f4").astype(float).reshape(d, h, w)
    return voxels, header


def load_noise_volume(path):
    voxels, header = read_volume(path)
    return NoiseVolume(voxels, header.get("mean", float(voxels.mean())),
                       header.get("sd", float(voxels.std())), header.get("exponent", 0.0),
                       header.get("seed"))


def load_trial(path):
    voxels, header = read_volume(path)
    modality = Modality(header.get("modality", "3d"))
    data = voxels[0] if modality is Modality.TWO_D else voxels
    present = bool(header.get("signal_present", False))
    loc = header.get("signal_xyz") if present else None
    meta = {k: v for k, v in header.items()
            if k not in ("dims", "signal_present", "signal_xyz", "modality", "slice_index")}
    return TrialStimulus(data, present, loc, modality, header.get("slice_index"), meta)
