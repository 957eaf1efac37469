"""Weighting functions over eccentricity bins and the aggregate figure of merit.

Bins are left edges ``E_k``; eccentricity ``x`` falls in bin ``k`` when
``E_k <= x < E_k+1``, and everything beyond the last edge lands in the last bin.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_ecc_bins, check_positive
from .exceptions import DataError, DegenerateError, InvalidArgumentError
from .stimulus import DEFAULT_PX_PER_DEG, Modality

log = logging.getLogger(__name__)

REFERENCE_TIMING = {
    Modality.TWO_D: {"fixation_ms": 250.0, "response_s": 3.16},
    Modality.THREE_D: {"fixation_ms": 500.0, "response_s": 22.62},
}
REFERENCE_SLICES = 100


class Scheme(str, enum.Enum):
    AVERAGE = "avg"
    DPRIME_WEIGHTED = "dprime"
    ET_CLOSEST = "et"
    TIME_CLOSEST = "time"


@dataclass
class WeightVector:
    ecc_bins: np.ndarray
    weights: np.ndarray
    scheme: Scheme
    provenance: str = ""

    def __post_init__(self):
        self.ecc_bins = check_ecc_bins(self.ecc_bins)
        self.weights = np.asarray(self.weights, dtype=float)
        self.scheme = Scheme(self.scheme)
        if self.weights.shape != self.ecc_bins.shape:
            raise InvalidArgumentError("one weight per eccentricity bin")
        if np.any(self.weights < 0):
            raise InvalidArgumentError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError(f"weights sum to {self.weights.sum()}, not 1")

    def to_dict(self):
        return {"scheme": self.scheme.value, "bins": self.ecc_bins.tolist(),
                "weights": self.weights.tolist(), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d):
        return cls(d["bins"], d["weights"], d["scheme"], d.get("provenance", ""))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: not a weights file") from exc


@dataclass
class FixationTrial:
    trial_id: str
    modality: Modality
    signal_present: bool
    signal_location: tuple | None
    fixations: list = field(default_factory=list)  # (x, y, slice, duration_ms)

    def __post_init__(self):
        self.modality = Modality(self.modality)
        for fx in self.fixations:
            if len(fx) != 4 or fx[3] <= 0:
                raise InvalidArgumentError(f"trial {self.trial_id}: bad fixation {fx!r}")


@dataclass
class FixationLog:
    trials: list

    @classmethod
    def read(cls, path):
        """Read JSON Lines, one trial per line."""
        trials = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                trials.append(FixationTrial(
                    str(d["trial_id"]), d["modality"], bool(d["signal_present"]),
                    tuple(d["signal_xyz"]) if d.get("signal_xyz") is not None else None,
                    [tuple(f) for f in d["fixations"]]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad fixation record") from exc
        return cls(trials)

    def write(self, path):
        with open(path, "w") as fh:
            for t in self.trials:
                fh.write(json.dumps({
                    "trial_id": t.trial_id, "modality": t.modality.value,
                    "signal_present": t.signal_present,
                    "signal_xyz": list(t.signal_location) if t.signal_location is not None else None,
                    "fixations": [list(f) for f in t.fixations]}) + "\n")

    def check_bounds(self, display, n_slices=None):
        w, h = display
        for t in self.trials:
            for x, y, z, _ in t.fixations:
                if not (0 <= x < w and 0 <= y < h) or (n_slices is not None and not 0 <= z < n_slices):
                    raise InvalidArgumentError(f"trial {t.trial_id}: fixation ({x}, {y}, {z}) off display")


@dataclass
class SearchTimingParams:
    median_fixation_ms: float
    median_response_s: float
    display: tuple
    n_slices: int = 1
    px_per_deg: float = DEFAULT_PX_PER_DEG

    def __post_init__(self):
        check_positive(self.median_fixation_ms, "median_fixation_ms")
        check_positive(self.median_response_s, "median_response_s")
        check_positive(self.px_per_deg, "px_per_deg")
        if len(self.display) != 2 or min(self.display) < 1 or self.n_slices < 1:
            raise InvalidArgumentError("display and n_slices must be positive")
        self.display = tuple(int(v) for v in self.display)

    @classmethod
    def reference(cls, modality, display=(1024, 820), n_slices=REFERENCE_SLICES, px_per_deg=DEFAULT_PX_PER_DEG):
        t = REFERENCE_TIMING[Modality(modality)]
        return cls(t["fixation_ms"], t["response_s"], display,
                   n_slices if Modality(modality) is Modality.THREE_D else 1, px_per_deg)


def bin_indices(ecc, ecc_bins):
    idx = np.searchsorted(np.asarray(ecc_bins, dtype=float), np.asarray(ecc, dtype=float), side="right") - 1
    return np.clip(idx, 0, len(ecc_bins) - 1)


def _histogram(ecc, ecc_bins):
    counts = np.bincount(bin_indices(ecc, ecc_bins).ravel(), minlength=len(ecc_bins)).astype(float)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# Schemes
# ---------------------------------------------------------------------------

def average_weights(ecc_bins):
    bins = check_ecc_bins(ecc_bins)
    return WeightVector(bins, np.full(bins.size, 1.0 / bins.size), Scheme.AVERAGE, "uniform")


def dprime_weights(curve):
    d = np.asarray(curve.dprime, dtype=float)
    total = d.sum()
    if not total > 0:
        raise DegenerateError("d'-weighting needs a curve with positive sum")
    return WeightVector(curve.ecc_bins, d / total, Scheme.DPRIME_WEIGHTED,
                        f"{curve.model}/{curve.signal_kind}/{curve.modality}/{curve.method.value}")


def closest_fixation_eccentricities(log_, px_per_deg=DEFAULT_PX_PER_DEG):
    """Per signal-present trial, the smallest in-plane fixation-to-signal distance in dva.

    Returns ``(minima, n_skipped)``; trials without fixations are skipped.
    """
    minima, skipped = [], 0
    for t in log_.trials:
        if not t.signal_present:
            continue
        if not t.fixations:
            skipped += 1
            continue
        sx, sy = t.signal_location[0], t.signal_location[1]
        fx = np.asarray([(f[0], f[1]) for f in t.fixations], dtype=float)
        minima.append(np.min(np.hypot(fx[:, 0] - sx, fx[:, 1] - sy)) / px_per_deg)
    return np.asarray(minima), skipped


def et_closest_fix_weights(log_, ecc_bins, px_per_deg=DEFAULT_PX_PER_DEG, modality=None):
    """Histogram of each trial's minimum signal eccentricity, from recorded fixations."""
    bins = check_ecc_bins(ecc_bins)
    if modality is not None:
        log_ = FixationLog([t for t in log_.trials if t.modality is Modality(modality)])
    if not any(t.signal_present for t in log_.trials):
        raise InvalidArgumentError("fixation log has no signal-present trials")
    minima, skipped = closest_fixation_eccentricities(log_, px_per_deg)
    if skipped:
        log.warning("skipped %d signal-present trials without fixations", skipped)
    if minima.size == 0:
        raise InvalidArgumentError("no signal-present trial has a fixation")
    return WeightVector(bins, _histogram(minima, bins), Scheme.ET_CLOSEST,
                        f"{minima.size} trials, {skipped} skipped")


def estimate_fixation_count(params, modality):
    """Fixations per trial (2D) or per slice (3D) from response and fixation times.

    Returns ``(total, per_slice)``; ``per_slice == total`` in 2D.
    """
    n = max(1, math.floor(params.median_response_s * 1000.0 / params.median_fixation_ms + 0.5))
    if Modality(modality) is Modality.TWO_D:
        return n, n
    return n, max(1, n // params.n_slices)


def grid_shape(count, display):
    """Rows and columns of the fixation grid.

    Among grids with no removable row or column, pick the one whose
    rows/cols ratio best matches height/width; ties go to fewer cells.
    """
    if count < 1:
        raise InvalidArgumentError("need at least one fixation")
    w, h = display
    target = h / w
    best = None
    for rows in range(1, count + 1):
        cols = -(-count // rows)
        if (rows - 1) * cols >= count:
            continue
        key = (abs(rows / cols - target), rows * cols, -rows)
        if best is None or key < best[0]:
            best = (key, rows, cols)
    return best[1], best[2]


def grid_fixations(count, display):
    """``count`` fixation points at grid-cell centers, row-major, in pixel-index coordinates."""
    w, h = display
    rows, cols = grid_shape(count, display)
    pts = [((c + 0.5) * w / cols - 0.5, (r + 0.5) * h / rows - 0.5)
           for r in range(rows) for c in range(cols)]
    return pts[:count]


def min_distance_map(fixations, display):
    """Distance (px) from every pixel to its closest fixation, shape ``(h, w)``."""
    w, h = display
    yy, xx = np.mgrid[0:h, 0:w]
    tree = cKDTree(np.asarray(fixations, dtype=float))
    dist, _ = tree.query(np.column_stack([xx.ravel(), yy.ravel()]))
    return dist.reshape(h, w)


def time_closest_fix_weights(params, modality, ecc_bins):
    """Minimum-eccentricity distribution for a signal at every pixel, grid fixations assumed."""
    bins = check_ecc_bins(ecc_bins)
    total, per_slice = estimate_fixation_count(params, modality)
    fix = grid_fixations(per_slice, params.display)
    ecc = min_distance_map(fix, params.display) / params.px_per_deg
    return WeightVector(bins, _histogram(ecc, bins), Scheme.TIME_CLOSEST,
                        f"{Modality(modality).value}: {total} fixations, {per_slice} per slice, "
                        f"display {params.display[0]}x{params.display[1]}")


def aggregate_dprime(curve, weights):
    """Weighted sum of the per-bin d' values."""
    if curve.ecc_bins.shape != weights.ecc_bins.shape or not np.allclose(curve.ecc_bins, weights.ecc_bins):
        raise InvalidArgumentError("curve and weights use different eccentricity bins")
    return float(np.dot(weights.weights, curve.dprime))


def largest_eccentricity(display, px_per_deg=DEFAULT_PX_PER_DEG):
    """Image diagonal in dva, the largest possible retinal eccentricity."""
    w, h = display
    return math.hypot(w, h) / px_per_deg
