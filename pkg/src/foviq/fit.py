"""Gaussian negative log-likelihood of reference (human) d' given model predictions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import DataError, InvalidArgumentError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ReferencePoint:
    signal: str
    modality: str
    human_dprime: float
    stderr: float

    def __post_init__(self):
        if not self.stderr > 0:
            raise InvalidArgumentError(f"stderr must be > 0, got {self.stderr}")

    @property
    def label(self):
        return (self.signal, self.modality)


def _nll(residual, stderr):
    if not stderr > 0:
        raise InvalidArgumentError(f"stderr must be > 0, got {stderr}")
    return LOG_SQRT_2PI + math.log(stderr) + residual ** 2 / (2.0 * stderr ** 2)


def neg_log_likelihood(ref, model_dprime):
    """Gaussian NLL with sd equal to the reference standard error.

    ``ref`` may be one :class:`ReferencePoint` (with a scalar prediction) or a
    sequence of points with matching predictions; sequences are summed.
    """
    if isinstance(ref, ReferencePoint):
        return _nll(ref.human_dprime - float(model_dprime), ref.stderr)
    refs = list(ref)
    preds = np.atleast_1d(np.asarray(model_dprime, dtype=float))
    if len(refs) != preds.size:
        raise InvalidArgumentError("one prediction per reference point required")
    return float(sum(_nll(r.human_dprime - p, r.stderr) for r, p in zip(refs, preds)))


def ratio_point(ref_a, ref_b):
    """Reference for ``a / b`` with a first-order (delta-method) standard error."""
    if ref_b.human_dprime == 0:
        raise InvalidArgumentError("reference ratio with zero denominator")
    r = ref_a.human_dprime / ref_b.human_dprime
    se = abs(r) * math.hypot(ref_a.stderr / ref_a.human_dprime, ref_b.stderr / ref_b.human_dprime)
    return ReferencePoint(f"{ref_a.signal}/{ref_b.signal}", ref_a.modality, r, se)


def nll_table(refs, predictions, on="raw", numerator="mcalc", denominator="mass"):
    """NLL for every (model, scheme) in ``predictions``.

    Parameters
    ----------
    refs : list of ReferencePoint
    predictions : dict
        ``{model: {scheme: {"signal/modality": dprime}}}``.
    on : {"raw", "ratio"}
        ``"ratio"`` compares the numerator/denominator signal ratio per modality.

    Returns
    -------
    dict
        ``{model: {scheme: nll}}``.
    """
    if on not in ("raw", "ratio"):
        raise InvalidArgumentError(f"unknown comparison {on!r}")
    by_label = {(r.signal.lower(), r.modality.lower()): r for r in refs}
    out = {}
    for model, schemes in predictions.items():
        out[model] = {}
        for scheme, values in schemes.items():
            vals = {tuple(k.lower().split("/")): float(v) for k, v in values.items()}
            pts, preds = [], []
            if on == "raw":
                for key, v in sorted(vals.items()):
                    if key not in by_label:
                        raise DataError(f"no reference for {'/'.join(key)}")
                    pts.append(by_label[key])
                    preds.append(v)
            else:
                mods = sorted({m for _, m in vals})
                for m in mods:
                    try:
                        ra, rb = by_label[(numerator, m)], by_label[(denominator, m)]
                        pa, pb = vals[(numerator, m)], vals[(denominator, m)]
                    except KeyError as exc:
                        raise DataError(f"ratio needs {numerator} and {denominator} for {m}") from exc
                    pts.append(ratio_point(ra, rb))
                    preds.append(pa / pb)
            out[model][scheme] = neg_log_likelihood(pts, preds)
    return out


def load_reference(path):
    """Reference points from JSON: a list of {signal, modality, dprime, stderr}."""
    try:
        raw = json.loads(Path(path).read_text())
        items = raw["points"] if isinstance(raw, dict) else raw
        return [ReferencePoint(str(d["signal"]), str(d["modality"]), float(d["dprime"]), float(d["stderr"]))
                for d in items]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidArgumentError):
            raise
        raise DataError(f"{path}: not a reference file") from exc


def published_nll_table():
    """The published negative log-likelihoods, kept for side-by-side display only."""
    text = resources.files("foviq").joinpath("data/published_nll.json").read_text()
    return json.loads(text)
