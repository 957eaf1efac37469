"""Foveated search model: eccentricity-dependent responses everywhere, LR integration, max rule.

Candidate locations form a lattice with spacing ``stride`` in x and y (every
slice in 3D). For each fixation the response at a candidate uses the template
of the candidate's eccentricity bin. Responses become equal-variance Gaussian
likelihood ratios, which multiply across fixations; the trial decision
thresholds the largest product.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.stats import norm

from ._validation import check_positive
from .detectability import DPrimeCurve, decision_variables, empirical_dprime, signal_on_support
from .exceptions import DegenerateError, InvalidArgumentError
from .stimulus import Modality, TrialStimulus, extract_2d, generate_noise_volume, insert_signal
from .weighting import estimate_fixation_count, grid_fixations

log = logging.getLogger(__name__)


class ScanpathSource(str, enum.Enum):
    RECORDED = "recorded"
    GRID_SYNTHETIC = "grid_synthetic"


@dataclass
class Scanpath:
    fixations: list
    source: ScanpathSource = ScanpathSource.RECORDED

    def __post_init__(self):
        if not self.fixations:
            raise InvalidArgumentError("scanpath needs at least one fixation")
        self.fixations = [(float(f[0]), float(f[1]), int(f[2])) for f in self.fixations]
        self.source = ScanpathSource(self.source)

    def check_bounds(self, shape):
        d, h, w = shape
        for x, y, z in self.fixations:
            if not (0 <= x < w and 0 <= y < h and 0 <= z < d):
                raise InvalidArgumentError(f"fixation ({x}, {y}, {z}) outside stimulus {shape}")


@dataclass
class BinStats:
    """Background response mean and sd per bin plus the bin's d' (no internal noise)."""

    mu_n: np.ndarray
    sigma_lambda: np.ndarray
    dprime: np.ndarray
    K: float = 0.0
    depth_gain: np.ndarray | None = None

    def __post_init__(self):
        if self.depth_gain is not None:
            self.depth_gain = np.atleast_2d(np.asarray(self.depth_gain, dtype=float))
            if self.depth_gain.shape[1] % 2 == 0:
                raise InvalidArgumentError("depth_gain needs an odd number of slice offsets")
        self.mu_n = np.asarray(self.mu_n, dtype=float)
        self.sigma_lambda = np.asarray(self.sigma_lambda, dtype=float)
        self.dprime = np.asarray(self.dprime, dtype=float)
        if not (self.mu_n.shape == self.sigma_lambda.shape == self.dprime.shape):
            raise InvalidArgumentError("bin statistics must share one length")
        if self.depth_gain is not None and self.depth_gain.shape[0] != self.mu_n.size:
            raise InvalidArgumentError("one depth-gain row per bin required")

    @property
    def total_sd(self):
        return self.sigma_lambda * np.sqrt(1.0 + self.K ** 2)

    @property
    def effective_dprime(self):
        return self.dprime / np.sqrt(1.0 + self.K ** 2)

    @property
    def depth_reach(self):
        """Largest slice offset a fixated slice informs (0 without a depth profile)."""
        return 0 if self.depth_gain is None else self.depth_gain.shape[1] // 2

    def to_dict(self):
        d = {"mu_n": self.mu_n.tolist(), "sigma_lambda": self.sigma_lambda.tolist(),
             "dprime": self.dprime.tolist(), "K": self.K}
        if self.depth_gain is not None:
            d["depth_gain"] = self.depth_gain.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["mu_n"], d["sigma_lambda"], d["dprime"], d.get("K", 0.0), d.get("depth_gain"))


@dataclass
class ResponseMap:
    lam: np.ndarray
    fixation: tuple
    ecc: np.ndarray
    bins: np.ndarray
    xs: np.ndarray
    ys: np.ndarray

    @property
    def covered(self):
        return np.isfinite(self.lam)


@dataclass
class TrialVerdict:
    max_lr: float
    log_max_lr: float
    decision: bool
    argmax_location: tuple
    truth: bool | None = None
    trial_id: str | None = None
    per_fixation_trace: list | None = None

    def to_dict(self):
        return {"trial_id": self.trial_id, "decision": bool(self.decision), "max_lr": self.max_lr,
                "log_max_lr": self.log_max_lr, "argmax": list(self.argmax_location),
                "truth": self.truth}


@dataclass
class BatchResult:
    verdicts: list
    dprime: float
    pc: float
    auc: float
    hit_rate: float
    fa_rate: float
    meta: dict = field(default_factory=dict)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for v in self.verdicts:
                fh.write(json.dumps(v.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Template responses
# ---------------------------------------------------------------------------

def candidate_axes(shape, stride):
    """Candidate x and y coordinates for a stimulus of array ``shape``."""
    h, w = shape[-2:]
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    if w % stride or h % stride:
        log.warning("stride %d does not divide %dx%d; trailing locations dropped", stride, w, h)
    return np.arange(0, w - w % stride, stride), np.arange(0, h - h % stride, stride)


def _as_volume(data):
    data = np.asarray(data, dtype=float)
    if data.ndim == 2:
        return data[None]
    if data.ndim != 3:
        raise InvalidArgumentError(f"stimulus must be 2D or 3D, got shape {data.shape}")
    return data


def _centered_roll(template, shape):
    """Zero-pad ``template`` to ``shape`` with its center moved to index 0."""
    out = np.zeros(shape)
    out[tuple(slice(0, n) for n in template.shape)] = template
    return np.roll(out, [-(n // 2) for n in template.shape], axis=tuple(range(template.ndim)))


def template_responses(data, template_set, stride=4, boundary="wrap"):
    """Responses of every bin's template at every candidate, shape ``(n_bins, d, ny, nx)``.

    2D templates are applied to each slice; 3D templates are anchored with
    their center slice on the candidate's slice. With ``boundary="skip"``
    candidates whose patch leaves the stimulus are NaN; ``"wrap"`` treats the
    stimulus as periodic.
    """
    if boundary not in ("wrap", "skip"):
        raise InvalidArgumentError(f"unknown boundary mode {boundary!r}")
    vol = _as_volume(data)
    d, h, w = vol.shape
    xs, ys = candidate_axes(vol.shape, stride)
    tshape = template_set.support_shape
    if tshape[-1] > w or tshape[-2] > h or (len(tshape) == 3 and tshape[0] > d):
        raise InvalidArgumentError(f"template {tshape} larger than stimulus {vol.shape}")
    out = np.empty((len(template_set.templates), d, ys.size, xs.size))
    if len(tshape) == 2:
        G = sfft.rfft2(vol)
        for b, t in enumerate(template_set.templates):
            Wt = sfft.rfft2(_centered_roll(t, (h, w)))
            corr = sfft.irfft2(G * np.conj(Wt), s=(h, w))
            out[b] = corr[:, ys][:, :, xs]
    else:
        G = sfft.rfftn(vol)
        for b, t in enumerate(template_set.templates):
            Wt = sfft.rfftn(_centered_roll(t, (d, h, w)))
            corr = sfft.irfftn(G * np.conj(Wt), s=(d, h, w))
            out[b] = corr[:, ys][:, :, xs]
    if boundary == "skip":
        cy, cx = tshape[-2] // 2, tshape[-1] // 2
        bad_x = (xs - cx < 0) | (xs - cx + tshape[-1] > w)
        bad_y = (ys - cy < 0) | (ys - cy + tshape[-2] > h)
        out[:, :, bad_y, :] = np.nan
        out[:, :, :, bad_x] = np.nan
        if len(tshape) == 3:
            zs = np.arange(d)
            cz = tshape[0] // 2
            out[:, (zs - cz < 0) | (zs - cz + tshape[0] > d)] = np.nan
    return out


def response_map(stimulus, fixation, template_set, rng=None, bin_stats=None, stride=4,
                 boundary="wrap", responses=None):
    """Template responses for one fixation, with per-bin internal noise.

    A fixation on slice ``z`` covers candidates on the slices its template
    slab reaches: only ``z`` for 2D templates, ``z - T//2 .. z + (T-1)//2``
    for 3D templates of depth ``T``. Uncovered candidates are NaN.
    ``responses`` may carry a precomputed :func:`template_responses` array.
    """
    data = stimulus.data if hasattr(stimulus, "data") else stimulus
    vol = _as_volume(data)
    d = vol.shape[0]
    if responses is None:
        responses = template_responses(vol, template_set, stride, boundary)
    xs, ys = candidate_axes(vol.shape, stride)
    fx, fy, fz = fixation
    fz = 0 if d == 1 else int(fz)
    if not 0 <= fz < d:
        raise InvalidArgumentError(f"fixation slice {fz} outside stimulus depth {d}")
    tshape = template_set.support_shape
    depth = tshape[0] if len(tshape) == 3 and d > 1 else 1
    zs = np.arange(fz - depth // 2, fz + (depth - 1) // 2 + 1)
    zs = zs[(zs >= 0) & (zs < d)]
    ecc2d = np.hypot(xs[None, :] - fx, ys[:, None] - fy) / template_set.px_per_deg
    b2d = template_set.bin_index(ecc2d)
    iy, ix = np.indices(b2d.shape)
    lam_slab = responses[b2d[None], zs[:, None, None], iy[None], ix[None]]
    if bin_stats is not None and bin_stats.K > 0:
        if rng is None:
            raise InvalidArgumentError("internal noise needs an rng")
        lam_slab = lam_slab + (rng.normal(0.0, 1.0, lam_slab.shape) * bin_stats.K
                               * bin_stats.sigma_lambda[b2d][None])
    lam = np.full((d,) + b2d.shape, np.nan)
    ecc = np.full_like(lam, np.nan)
    bins = np.full(lam.shape, -1, dtype=int)
    lam[zs] = lam_slab
    ecc[zs] = ecc2d
    bins[zs] = b2d
    return ResponseMap(lam, (fx, fy, fz), ecc, bins, xs, ys)


def to_log_likelihood_ratio(lambda_p, bin_stats, bin_idx, offset=0):
    """``d z - d^2 / 2`` with ``z`` the response in total-sd units, per bin.

    ``offset`` is the slice distance between the observed slice and the
    candidate's center slice; the bin's d' is scaled by the depth gain.
    """
    bin_idx = np.asarray(bin_idx)
    safe = np.where(bin_idx < 0, 0, bin_idx)
    sd = bin_stats.total_sd[safe]
    if np.any(sd[np.isfinite(lambda_p)] <= 0):
        raise DegenerateError("zero response sd in a likelihood-ratio bin")
    dp = bin_stats.effective_dprime[safe]
    if offset:
        reach = bin_stats.depth_reach
        if abs(offset) > reach:
            raise InvalidArgumentError(f"slice offset {offset} beyond depth reach {reach}")
        dp = dp * bin_stats.depth_gain[safe, reach + offset]
    with np.errstate(invalid="ignore", divide="ignore"):
        z = (np.asarray(lambda_p, dtype=float) - bin_stats.mu_n[safe]) / sd
    out = dp * z - dp ** 2 / 2.0
    return np.where(np.isfinite(out), out, 0.0)


def to_likelihood_ratio(lambda_p, bin_stats, bin_idx):
    return np.exp(to_log_likelihood_ratio(lambda_p, bin_stats, bin_idx))


def integrate_fixations(lr_maps, log_space=False):
    """Per-location product of LR maps (sum of logs); NaN entries count as 1."""
    maps = [np.asarray(m, dtype=float) for m in lr_maps]
    if not maps:
        raise InvalidArgumentError("no maps to integrate")
    if any(m.shape != maps[0].shape for m in maps):
        raise InvalidArgumentError("LR maps must share geometry")
    total = np.zeros(maps[0].shape)
    for m in maps:
        lm = m if log_space else np.log(m)
        total += np.where(np.isfinite(lm), lm, 0.0)
    return total if log_space else np.exp(total)


def _verdict(log_map, log_threshold, xs, ys, d2d):
    flat = int(np.argmax(log_map))
    z, iy, ix = np.unravel_index(flat, log_map.shape)
    top = float(log_map.flat[flat])
    loc = (int(xs[ix]), int(ys[iy]), 0 if d2d else int(z))
    with np.errstate(over="ignore"):
        return TrialVerdict(float(np.exp(top)), top, bool(top >= log_threshold), loc)


def decide(final_map, threshold, xs=None, ys=None):
    """Max rule on an LR map of shape ``(d, ny, nx)`` (or 2D); ties go to the first in row-major order."""
    m = np.asarray(final_map, dtype=float)
    if m.size == 0:
        raise InvalidArgumentError("empty map")
    m3 = m[None] if m.ndim == 2 else m
    xs = np.arange(m3.shape[2]) if xs is None else xs
    ys = np.arange(m3.shape[1]) if ys is None else ys
    flat = int(np.argmax(m3))
    z, iy, ix = np.unravel_index(flat, m3.shape)
    top = float(m3.flat[flat])
    with np.errstate(divide="ignore"):
        log_top = float(np.log(top)) if top > 0 else -np.inf
    return TrialVerdict(top, log_top, bool(top >= threshold),
                        (int(xs[ix]), int(ys[iy]), int(z)))


# ---------------------------------------------------------------------------
# Scanpaths, calibration, batches
# ---------------------------------------------------------------------------

def synthesize_scanpath(params, modality, seed=None, jitter_px=0.0, slices=None):
    """Grid fixations per slice, slices visited in order.

    ``slices`` defaults to every slice of ``params``. ``seed`` only matters
    when ``jitter_px > 0``.
    """
    modality = Modality(modality)
    _, per_slice = estimate_fixation_count(params, modality)
    pts = grid_fixations(per_slice, params.display)
    if modality is Modality.TWO_D:
        slices = [0]
    elif slices is None:
        slices = range(params.n_slices)
    rng = np.random.default_rng(seed)
    w, h = params.display
    fix = []
    for z in slices:
        for x, y in pts:
            if jitter_px > 0:
                x = float(np.clip(x + rng.normal(0, jitter_px), 0, w - 1))
                y = float(np.clip(y + rng.normal(0, jitter_px), 0, h - 1))
            fix.append((x, y, int(z)))
    return Scanpath(fix, ScanpathSource.GRID_SYNTHETIC)


def depth_gain(template_set, signal, cutoff=0.01):
    """Per-bin response to off-center signal slices relative to the center slice.

    Row ``b``, column ``reach + o`` holds ``w_b . s_o / w_b . s_0`` with
    ``s_o`` the signal slice ``o`` away from its center. Offsets where every
    bin's gain is below ``cutoff`` are trimmed from the ends.
    """
    if len(template_set.support_shape) != 2:
        raise InvalidArgumentError("depth gain applies to 2D templates")
    vox = signal.voxels if hasattr(signal, "voxels") else np.asarray(signal, dtype=float)
    if vox.ndim == 2:
        return None
    c = vox.shape[0] // 2
    half = min(c, vox.shape[0] - 1 - c)
    offsets = np.arange(-half, half + 1)
    gains = np.empty((len(template_set.templates), offsets.size))
    for b, w in enumerate(template_set.templates):
        resp = [float(np.sum(w * signal_on_support(vox[c + o], w.shape))) for o in offsets]
        if resp[half] == 0:
            raise DegenerateError(f"template of bin {b} does not respond to the signal")
        gains[b] = np.asarray(resp) / resp[half]
    keep = np.max(np.abs(gains), axis=0) >= cutoff
    reach = int(np.max(np.abs(offsets[keep])))
    return gains[:, half - reach:half + reach + 1]


def calibrate_bin_stats(template_set, background_patches, dprime, signal=None):
    """Background response mean/sd per bin from patches of the template's support.

    ``dprime`` is the per-bin d' without internal noise (array or DPrimeCurve).
    With a 3D ``signal`` and 2D templates, the depth gain is stored too so a
    fixated slice also informs candidates centered on nearby slices.
    """
    X = np.asarray(background_patches, dtype=float)
    if len(X) < 2:
        raise InvalidArgumentError("need at least 2 background patches")
    mu, sd = [], []
    for t in template_set.templates:
        lam = decision_variables(t, X)
        mu.append(lam.mean())
        sd.append(lam.std(ddof=1))
    d = dprime.dprime if isinstance(dprime, DPrimeCurve) else np.asarray(dprime, dtype=float)
    if len(d) != len(mu):
        raise InvalidArgumentError("one d' per template bin required")
    gain = None
    if signal is not None and len(template_set.support_shape) == 2:
        gain = depth_gain(template_set, signal)
    return BinStats(mu, sd, d, template_set.internal_noise_K, gain)


def run_trial(stimulus, scanpath, template_set, bin_stats, threshold, rng, stride=4,
              boundary="wrap", keep_trace=False):
    data = stimulus.data if hasattr(stimulus, "data") else stimulus
    vol = _as_volume(data)
    d = vol.shape[0]
    # 2D stimuli accept any slice index; fixations off slice 0 are skipped below
    depth = d if d > 1 else max(f[2] for f in scanpath.fixations) + 1
    scanpath.check_bounds((depth,) + vol.shape[1:])
    responses = template_responses(vol, template_set, stride, boundary)
    slab_reach = bin_stats.depth_reach if d > 1 and len(template_set.support_shape) == 2 else 0
    total = None
    trace = [] if keep_trace else None
    for fx in scanpath.fixations:
        if d == 1 and fx[2] != 0:
            continue
        rm = response_map(vol, fx, template_set, rng, bin_stats, stride, boundary, responses)
        llr = to_log_likelihood_ratio(rm.lam, bin_stats, rm.bins)
        if slab_reach:
            z = rm.fixation[2]
            for o in range(-slab_reach, slab_reach + 1):
                if o and 0 <= z - o < d:
                    llr[z - o] += to_log_likelihood_ratio(rm.lam[z], bin_stats, rm.bins[z], o)
        total = llr if total is None else total + llr
        if keep_trace:
            trace.append((fx, float(np.max(llr))))
    if total is None:
        raise InvalidArgumentError("no fixation falls on the stimulus")
    xs, ys = candidate_axes(vol.shape, stride)
    v = _verdict(total, np.log(threshold) if threshold > 0 else -np.inf, xs, ys, vol.shape[0] == 1)
    v.per_fixation_trace = trace
    if hasattr(stimulus, "signal_present"):
        v.truth = bool(stimulus.signal_present)
    return v


def dprime_from_rates(hit_rate, fa_rate):
    return float(norm.ppf(hit_rate) - norm.ppf(fa_rate))


def auc_from_scores(pos, neg):
    """Mann-Whitney area under the ROC curve, ties counted half."""
    pos = np.asarray(pos, dtype=float)
    neg = np.asarray(neg, dtype=float)
    allv = np.concatenate([pos, neg])
    order = allv.argsort(kind="mergesort")
    ranks = np.empty(allv.size)
    ranks[order] = np.arange(1, allv.size + 1)
    # average ranks over ties
    uniq, inv, counts = np.unique(allv, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, ranks)
    ranks = (sums / counts)[inv]
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def run_batch(stimuli, scanpaths, template_set, bin_stats, threshold=1.0, seed=0, stride=4,
              boundary="wrap", keep_trace=False):
    """Run the search model on paired stimuli and scanpaths.

    Trial ``i`` draws internal noise from the child seed ``(seed, i)``.
    Batch d' compares log max-LR of present and absent trials in pooled-sd
    units; ``auc`` and ``pc`` use the same scores.
    """
    check_positive(threshold, "threshold", allow_zero=True)
    verdicts = []
    for i, (stim, sp) in enumerate(zip(stimuli, scanpaths)):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        v = run_trial(stim, sp, template_set, bin_stats, threshold, rng, stride, boundary, keep_trace)
        if v.trial_id is None:
            v.trial_id = str(getattr(stim, "meta", {}).get("trial_id", i))
        verdicts.append(v)
    return summarize_verdicts(verdicts)


def summarize_verdicts(verdicts):
    truth = np.array([bool(v.truth) for v in verdicts])
    scores = np.array([v.log_max_lr for v in verdicts])
    dec = np.array([v.decision for v in verdicts])
    pos, neg = scores[truth], scores[~truth]
    if pos.size >= 2 and neg.size >= 2:
        try:
            dp = empirical_dprime(pos, neg)
        except DegenerateError:
            dp = 0.0
        auc = auc_from_scores(pos, neg)
    else:
        dp, auc = float("nan"), float("nan")
    hit = float(dec[truth].mean()) if pos.size else float("nan")
    fa = float(dec[~truth].mean()) if neg.size else float("nan")
    pc = float((dec == truth).mean()) if truth.size else float("nan")
    return BatchResult(verdicts, dp, pc, auc, hit, fa)


def make_search_trial(signal, modality, dims, seed, present, stride=4, mean=128.0, sd=25.0,
                      exponent=-2.8):
    """One search stimulus with the signal (if present) on the candidate lattice.

    The signal center stays far enough from the x/y edges to fit whole; its
    slice is drawn from the middle half of the volume and the signal is
    clipped in depth. 2D trials are the signal's center slice (random slice
    when absent).
    """
    modality = Modality(modality)
    w, h, d = dims
    ss = np.random.SeedSequence(int(seed) if np.isscalar(seed) else list(seed))
    noise_seed, loc_seed = ss.spawn(2)
    vol = generate_noise_volume(dims, mean, sd, exponent, seed=noise_seed)
    rng = np.random.default_rng(loc_seed)
    if present:
        half = [n // 2 for n in signal.voxels.shape]
        xs = np.arange(0, w - w % stride, stride)
        ys = np.arange(0, h - h % stride, stride)
        xs = xs[(xs - half[2] >= 0) & (xs + signal.voxels.shape[2] - half[2] <= w)]
        ys = ys[(ys - half[1] >= 0) & (ys + signal.voxels.shape[1] - half[1] <= h)]
        if xs.size == 0 or ys.size == 0:
            raise InvalidArgumentError("signal does not fit the display")
        z = int(rng.integers(d // 4, d - d // 4)) if d > 1 else 0
        trial = insert_signal(vol, signal, (int(rng.choice(xs)), int(rng.choice(ys)), z), clip=True)
    else:
        trial = TrialStimulus(vol.voxels, False, None, Modality.THREE_D)
    if modality is Modality.TWO_D:
        trial = extract_2d(trial, seed=rng.integers(2 ** 32))
    return trial
