"""Configuration, orchestration and result tables.

Everything random flows from the config's root seed. Output files carry the
seed and a hash of the resolved config; only the ``timestamp`` field differs
between two runs of the same config.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_positive, parse_bins, parse_dims
from .detectability import DPrimeCurve, Method, NoiseStats, stationary_patches, dprime_curve
from .exceptions import DataError, FoviqError, InvalidArgumentError
from .fit import load_reference, nll_table
from .fsm import calibrate_bin_stats, make_search_trial, run_batch, synthesize_scanpath
from .stimulus import DEFAULT_PX_PER_DEG, Modality, SignalKind, make_signal
from .templates import DEFAULT_PATCH, ObserverModel, build_template_set
from .weighting import (
    REFERENCE_SLICES, REFERENCE_TIMING, FixationLog, Scheme, SearchTimingParams, WeightVector, aggregate_dprime,
    average_weights, dprime_weights, et_closest_fix_weights, largest_eccentricity,
    time_closest_fix_weights,
)

log = logging.getLogger(__name__)

ENV_PREFIX = "FOVIQ_"
CSV_COLUMNS = ("model", "signal", "modality", "scheme", "dprime", "curve_ref", "weights_ref",
               "seed", "config_hash", "timestamp")


class PipelineError(FoviqError):
    """A pipeline stage failed; ``exit_code`` follows the underlying cause."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


def _split(value):
    if isinstance(value, (list, tuple)):
        return [str(v).strip().lower() for v in value if str(v).strip()]
    return [v.strip().lower() for v in str(value).split(",") if v.strip()]


def _bool(value):
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InvalidArgumentError(f"not a boolean: {value!r}")


@dataclass
class RunConfig:
    """Resolved pipeline settings.

    ``bins`` is ``start:step:stop`` or ``auto`` (0 to the display diagonal in
    1 dva steps). ``curve_modality="2d"`` uses the 2D d' curve for both
    modalities; ``"match"`` builds stacked 3D templates for 3D records.
    """

    px_per_deg: float = DEFAULT_PX_PER_DEG
    bins: str = "auto"
    seed: int = 0
    dims: str = "256x256x20"
    mean: float = 128.0
    sd: float = 25.0
    exponent: float = -2.8
    models: list = field(default_factory=lambda: ["fcho", "fnpwe"])
    signals: list = field(default_factory=lambda: ["mcalc", "mass"])
    modalities: list = field(default_factory=lambda: ["2d", "3d"])
    schemes: list = field(default_factory=lambda: ["avg", "dprime", "et", "time"])
    method: str = "fourier"
    trials: int = 2000
    internal_noise: bool = True
    curve_modality: str = "2d"
    patch_size: int = DEFAULT_PATCH
    fixation_log: str = ""
    fix_time_ms_2d: float = REFERENCE_TIMING[Modality.TWO_D]["fixation_ms"]
    resp_time_s_2d: float = REFERENCE_TIMING[Modality.TWO_D]["response_s"]
    fix_time_ms_3d: float = REFERENCE_TIMING[Modality.THREE_D]["fixation_ms"]
    resp_time_s_3d: float = REFERENCE_TIMING[Modality.THREE_D]["response_s"]
    reference_slices: int = REFERENCE_SLICES
    timing_display: str = ""
    fsm_trials: int = 0
    fsm_stride: int = 4
    fsm_boundary: str = "wrap"
    fsm_calibration: int = 2000
    reference: str = ""
    fit_on: str = "raw"
    out_dir: str = "foviq_out"

    _LISTS = ("models", "signals", "modalities", "schemes")

    def __post_init__(self):
        for name in self._LISTS:
            setattr(self, name, _split(getattr(self, name)))
        self.validate()

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def coerce(cls, name, value):
        """Convert a text value to the type of field ``name``."""
        defaults = cls.__dataclass_fields__
        if name not in defaults:
            raise InvalidArgumentError(f"unknown config key {name!r}")
        if name in cls._LISTS:
            return _split(value)
        default = defaults[name].default
        try:
            if isinstance(default, bool):
                return _bool(value)
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except ValueError:
            raise InvalidArgumentError(f"config key {name!r}: bad value {value!r}") from None
        return str(value)

    def validate(self):
        check_positive(self.px_per_deg, "px_per_deg")
        check_positive(self.sd, "sd")
        self.ecc_bins()
        parse_dims(self.dims, 3)
        for name, allowed in (("models", [m.value for m in ObserverModel]),
                              ("signals", [s.value for s in SignalKind]),
                              ("modalities", [m.value for m in Modality]),
                              ("schemes", [s.value for s in Scheme])):
            bad = [v for v in getattr(self, name) if v not in allowed]
            if bad:
                raise InvalidArgumentError(f"{name}: unknown value(s) {bad}; expected {allowed}")
        Method(self.method)
        if self.curve_modality not in ("2d", "match"):
            raise InvalidArgumentError("curve_modality must be '2d' or 'match'")
        if self.fit_on not in ("raw", "ratio"):
            raise InvalidArgumentError("fit_on must be 'raw' or 'ratio'")
        if self.fsm_boundary not in ("wrap", "skip"):
            raise InvalidArgumentError("fsm_boundary must be 'wrap' or 'skip'")
        return self

    def volume_dims(self):
        return parse_dims(self.dims, 3)

    def display(self):
        if self.timing_display:
            return parse_dims(self.timing_display, 2)
        w, h, _ = self.volume_dims()
        return (w, h)

    def ecc_bins(self):
        if str(self.bins).strip().lower() == "auto":
            w, h, _ = parse_dims(self.dims, 3)
            e = largest_eccentricity((w, h), self.px_per_deg)
            return np.arange(0.0, math.floor(e) + 1.0)
        return parse_bins(self.bins)

    def to_dict(self):
        return {f: getattr(self, f) for f in self.field_names()}

    def config_hash(self):
        """SHA-256 of the resolved settings, ignoring where outputs go."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def timing(self, modality):
        """Search timing at stimulus scale.

        3D response time is scaled by depth / reference slices so the
        fixations-per-slice rate of the reference display is preserved.
        """
        modality = Modality(modality)
        disp = self.display()
        if modality is Modality.TWO_D:
            return SearchTimingParams(self.fix_time_ms_2d, self.resp_time_s_2d, disp, 1, self.px_per_deg)
        depth = self.volume_dims()[2]
        resp = self.resp_time_s_3d * depth / self.reference_slices
        return SearchTimingParams(self.fix_time_ms_3d, resp, disp, depth, self.px_per_deg)


def _read_config_file(path):
    text = Path(path).read_text()
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = "[foviq]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise DataError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        out.update(parser[section])
    return out


def load_config(path=None, overrides=None, environ=None):
    """Defaults, then the INI file, then ``FOVIQ_*`` variables, then ``overrides``."""
    values = {}
    if path:
        if not Path(path).exists():
            raise InvalidArgumentError(f"config file {path} does not exist")
        values.update(_read_config_file(path))
    env = os.environ if environ is None else environ
    for key, val in env.items():
        if key.startswith(ENV_PREFIX):
            values[key[len(ENV_PREFIX):].lower()] = val
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    kwargs = {k: RunConfig.coerce(k, v) for k, v in values.items()}
    return RunConfig(**kwargs)


# ---------------------------------------------------------------------------
# Records and tables
# ---------------------------------------------------------------------------

@dataclass
class FigureOfMeritRecord:
    model: str
    signal: str
    modality: str
    scheme: str
    dprime: float
    curve_ref: str
    weights_ref: str
    seed: int
    config_hash: str
    timestamp: str = ""

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in CSV_COLUMNS})


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def verify_records(records, base_dir):
    """Recompute every weighted record from its referenced curve and weights."""
    for r in records:
        if not r.curve_ref or not r.weights_ref:
            continue
        curve = DPrimeCurve.load(Path(base_dir) / r.curve_ref)
        weights = WeightVector.load(Path(base_dir) / r.weights_ref)
        expect = aggregate_dprime(curve, weights)
        if abs(expect - r.dprime) > 1e-9:
            raise DataError(f"record {r.model}/{r.signal}/{r.modality}/{r.scheme}: "
                            f"stored {r.dprime} != recomputed {expect}")


def export_table(records, fmt, path=None, base_dir=None):
    """Write records as CSV (6 significant digits) or JSON (full precision).

    With ``base_dir`` each record is first checked against its curve and
    weights files. Returns the text; writes it atomically when ``path`` is set.
    """
    records = list(records)
    if not records:
        raise InvalidArgumentError("no records to export")
    if fmt not in ("csv", "json"):
        raise InvalidArgumentError(f"unknown table format {fmt!r}")
    if base_dir is not None:
        verify_records(records, base_dir)
    if fmt == "json":
        text = json.dumps([r.to_dict() for r in records], indent=2) + "\n"
    else:
        lines = [",".join(CSV_COLUMNS)]
        for r in records:
            row = []
            for col in CSV_COLUMNS:
                v = getattr(r, col)
                row.append(f"{v:.6g}" if isinstance(v, float) else str(v))
            lines.append(",".join(row))
        text = "\n".join(lines) + "\n"
    if path is not None:
        _atomic_write(path, text)
    return text


def import_table(path):
    """Read records back from a JSON or CSV table."""
    path = Path(path)
    try:
        if path.suffix == ".csv":
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            for row in rows:
                row["dprime"] = float(row["dprime"])
                row["seed"] = int(row["seed"])
        else:
            rows = json.loads(path.read_text())
        return [FigureOfMeritRecord.from_dict(r) for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: not a results table") from exc


class OutputLock:
    """Single-instance guard for one output directory."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".foviq.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"{self.path.parent} is in use by another run ({self.path} exists)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, typ, exc, tb):
        if exc is not None and isinstance(exc, Exception) and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def build_curves(cfg):
    """Template sets and d' curves per (model, signal, modality), keyed by name."""
    dims = cfg.volume_dims()
    bins = cfg.ecc_bins()
    ns2 = NoiseStats.from_stimulus(dims, cfg.sd, cfg.exponent, Modality.TWO_D)
    out = {}
    for model in cfg.models:
        for signal in cfg.signals:
            sig = make_signal(signal, cfg.px_per_deg).crop_depth(dims[2])
            ts2 = build_template_set(model, sig, ns2, bins, cfg.px_per_deg, patch_size=cfg.patch_size)
            for modality in cfg.modalities:
                if modality == "3d" and cfg.curve_modality == "match":
                    ns3 = NoiseStats.from_stimulus(dims, cfg.sd, cfg.exponent, Modality.THREE_D)
                    ts = build_template_set(model, sig, ns2, bins, cfg.px_per_deg, modality="3d",
                                            patch_size=cfg.patch_size, max_depth=dims[2])
                    ns = ns3
                else:
                    ts, ns = ts2, ns2
                curve = dprime_curve(ts, sig, ns, cfg.method,
                                     trials=cfg.trials if cfg.method == "empirical" else None,
                                     seed=cfg.seed, internal_noise=cfg.internal_noise)
                out[(model, signal, modality)] = (ts, curve, sig, ns)
    return out


def build_weights(cfg, curve, modality, fix_log):
    bins = cfg.ecc_bins()
    weights = {}
    for scheme in cfg.schemes:
        if scheme == "avg":
            weights[scheme] = average_weights(bins)
        elif scheme == "dprime":
            weights[scheme] = dprime_weights(curve)
        elif scheme == "time":
            weights[scheme] = time_closest_fix_weights(cfg.timing(modality), modality, bins)
        elif scheme == "et":
            if fix_log is None:
                log.warning("no fixation log given; skipping the et scheme")
                continue
            try:
                weights[scheme] = et_closest_fix_weights(fix_log, bins, cfg.px_per_deg, modality)
            except InvalidArgumentError as exc:
                log.warning("skipping et scheme for %s: %s", modality, exc)
    return weights


def run_fsm(cfg, ts, curve, sig, ns, modality, stream):
    """Grid-scanpath search batch for one condition; returns the batch result."""
    dims = cfg.volume_dims()
    calib = stationary_patches(ns, ts.support_shape, cfg.fsm_calibration, cfg.seed, 100 + stream)
    nocurve = dprime_curve(ts, sig, ns, Method.FOURIER, internal_noise=False)
    bs = calibrate_bin_stats(ts, calib + cfg.mean, nocurve, sig)
    sp = synthesize_scanpath(cfg.timing(modality), modality)
    n = cfg.fsm_trials
    stims = (make_search_trial(sig, modality, dims, (cfg.seed, stream, i), i % 2 == 0,
                               cfg.fsm_stride, cfg.mean, cfg.sd, cfg.exponent) for i in range(n))
    return run_batch(stims, [sp] * n, ts, bs, 1.0, cfg.seed * 1000 + stream, cfg.fsm_stride,
                     cfg.fsm_boundary)


def run_pipeline(cfg, timestamp=None):
    """Run every requested stage and write results under ``cfg.out_dir``.

    Returns the list of :class:`FigureOfMeritRecord`.
    """
    out = Path(cfg.out_dir)
    stamp = timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    chash = cfg.config_hash()
    with OutputLock(out):
        fix_log = None
        if "et" in cfg.schemes and cfg.fixation_log:
            with _Stage("load-fixations"):
                fix_log = FixationLog.read(cfg.fixation_log)
                fix_log.check_bounds(cfg.display())
        with _Stage("curves"):
            curves = build_curves(cfg)
            for (model, signal, modality), (ts, curve, _, _) in curves.items():
                _atomic_write(out / "curves" / f"{model}_{signal}_{modality}.json",
                              _json(curve.to_dict()))
        records = []
        with _Stage("weights"):
            for (model, signal, modality), (ts, curve, _, _) in curves.items():
                for scheme, wv in build_weights(cfg, curve, modality, fix_log).items():
                    wname = (f"weights/{scheme}_{model}_{signal}_{modality}.json" if scheme == "dprime"
                             else f"weights/{scheme}_{modality}.json")
                    _atomic_write(out / wname, _json(wv.to_dict()))
                    records.append(FigureOfMeritRecord(
                        model, signal, modality, scheme, aggregate_dprime(curve, wv),
                        f"curves/{model}_{signal}_{modality}.json", wname, cfg.seed, chash, stamp))
        if cfg.fsm_trials > 0:
            with _Stage("fsm"):
                for stream, ((model, signal, modality), (ts, curve, sig, ns)) in enumerate(curves.items()):
                    res = run_fsm(cfg, ts, curve, sig, ns, modality, stream)
                    (out / "fsm").mkdir(parents=True, exist_ok=True)
                    res.write_jsonl(out / "fsm" / f"{model}_{signal}_{modality}.jsonl")
                    records.append(FigureOfMeritRecord(model, signal, modality, "fsm", res.dprime,
                                                       "", "", cfg.seed, chash, stamp))
        with _Stage("export"):
            export_table(records, "json", out / "fom.json", base_dir=out)
            export_table(records, "csv", out / "fom.csv")
            _atomic_write(out / "run.json", _json({"config": cfg.to_dict(), "config_hash": chash,
                                                   "seed": cfg.seed, "timestamp": stamp}))
        if cfg.reference:
            with _Stage("fit"):
                refs = load_reference(cfg.reference)
                table = nll_table(refs, predictions_from_records(records), on=cfg.fit_on)
                _atomic_write(out / "nll.json", _json(table))
    return records


def predictions_from_records(records):
    """``{model: {scheme: {"signal/modality": dprime}}}`` for the fit stage."""
    out = {}
    for r in records:
        out.setdefault(r.model, {}).setdefault(r.scheme, {})[f"{r.signal}/{r.modality}"] = r.dprime
    return out
