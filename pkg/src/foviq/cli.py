"""Command-line front end: ``foviq <subcommand> ...``.

Exit codes: 0 success, 2 invalid arguments, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._validation import parse_bins, parse_dims
from .detectability import DPrimeCurve, NoiseStats, dprime_curve, stationary_patches
from .exceptions import DataError, FoviqError, InvalidArgumentError
from .fit import load_reference, nll_table
from .fsm import BinStats, Scanpath, calibrate_bin_stats, make_search_trial, run_batch, synthesize_scanpath
from .pipeline import FigureOfMeritRecord, export_table, load_config, predictions_from_records, run_pipeline
from .stimulus import (
    Modality, generate_noise_volume, insert_signal, load_trial, make_signal, read_volume, write_volume,
)
from .templates import EccentricityTemplateSet, build_template_set
from .weighting import (
    FixationLog, SearchTimingParams, WeightVector, aggregate_dprime, average_weights, dprime_weights,
    et_closest_fix_weights, time_closest_fix_weights,
)

log = logging.getLogger("foviq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InvalidArgumentError(message)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _location(text):
    try:
        x, y, z = (int(v) for v in text.split(","))
    except ValueError:
        raise InvalidArgumentError(f"location must be x,y,slice, got {text!r}") from None
    return x, y, z


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_stimuli(args):
    dims = parse_dims(args.dims, 3)
    if args.trials:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        sig = make_signal(args.signal or "mcalc", args.px_per_deg).crop_depth(dims[2])
        for i in range(args.trials):
            trial = make_search_trial(sig, args.modality, dims, (args.seed, i), i % 2 == 0,
                                      args.stride, args.mean, args.sd, args.exponent)
            write_volume(out / f"trial_{i:05d}.vol", trial, trial_id=f"{i:05d}", seed=args.seed,
                         signal=sig.kind.value)
        print(f"wrote {args.trials} trials to {out}")
        return 0
    vol = generate_noise_volume(dims, args.mean, args.sd, args.exponent, seed=args.seed)
    if args.signal:
        if not args.location:
            raise InvalidArgumentError("--signal needs --location x,y,slice")
        sig = make_signal(args.signal, args.px_per_deg)
        trial = insert_signal(vol, sig, _location(args.location), clip=True)
        write_volume(args.out, trial, mean=args.mean, sd=args.sd, exponent=args.exponent,
                     seed=args.seed, signal=sig.kind.value)
    else:
        write_volume(args.out, vol)
    print(f"wrote {args.out}")
    return 0


def _background(path, dims, sd, exponent):
    if path:
        p = Path(path)
        if not p.exists():
            raise DataError(f"{path} does not exist")
        if p.suffix == ".npy":
            return np.load(p)
        vox, header = read_volume(p)
        return NoiseStats.from_stimulus(header["dims"], float(np.std(vox)), header.get("exponent", exponent))
    return NoiseStats.from_stimulus(dims, sd, exponent)


def cmd_build_templates(args):
    dims = parse_dims(args.dims, 3)
    bg = _background(args.bg_samples, dims, args.sd, args.exponent)
    sig = make_signal(args.signal, args.px_per_deg).crop_depth(dims[2])
    ts = build_template_set(args.model, sig, bg, parse_bins(args.bins), args.px_per_deg,
                            modality=args.modality, patch_size=args.patch, max_depth=dims[2])
    ts.save(args.out)
    print(f"wrote {len(ts.templates)} templates to {args.out}")
    return 0


def cmd_dprime_curve(args):
    ts = EccentricityTemplateSet.load(args.templates)
    dims = parse_dims(args.dims, 3)
    ns = NoiseStats.from_stimulus(dims, args.sd, args.exponent, ts.modality)
    sig = make_signal(args.signal, ts.px_per_deg).crop_depth(dims[2])
    curve = dprime_curve(ts, sig, ns, args.method, trials=args.trials, seed=args.seed,
                         internal_noise=not args.no_internal_noise)
    curve.save(args.out)
    print(" ".join(f"{v:.4g}" for v in curve.dprime))
    return 0


def cmd_weights(args):
    bins = parse_bins(args.bins)
    if args.scheme == "avg":
        wv = average_weights(bins)
    elif args.scheme == "dprime":
        if not args.curve:
            raise InvalidArgumentError("--scheme dprime needs --curve")
        wv = dprime_weights(DPrimeCurve.load(args.curve))
    elif args.scheme == "et":
        if not args.log:
            raise InvalidArgumentError("--scheme et needs --log")
        wv = et_closest_fix_weights(FixationLog.read(args.log), bins, args.px_per_deg, args.modality)
    else:
        if args.fix_time_ms is None or args.resp_time_s is None or not args.display:
            raise InvalidArgumentError("--scheme time needs --fix-time-ms, --resp-time-s and --display")
        params = SearchTimingParams(args.fix_time_ms, args.resp_time_s, parse_dims(args.display, 2),
                                    args.slices, args.px_per_deg)
        wv = time_closest_fix_weights(params, args.modality, bins)
    wv.save(args.out)
    print(" ".join(f"{v:.4g}" for v in wv.weights))
    return 0


def cmd_fom(args):
    curve = DPrimeCurve.load(args.curve)
    wv = WeightVector.load(args.weights)
    value = aggregate_dprime(curve, wv)
    if args.out:
        _write_json(args.out, {"dprime": value, "curve": args.curve, "weights": args.weights,
                               "scheme": wv.scheme.value})
    print(f"{value:.6g}")
    return 0


def cmd_fsm_run(args):
    ts = EccentricityTemplateSet.load(args.templates)
    files = sorted(Path(args.stimuli).glob("*.vol"))
    if not files:
        raise DataError(f"no .vol stimuli in {args.stimuli}")
    trials = [load_trial(f) for f in files]
    first = trials[0]
    modality = first.modality
    if args.bin_stats:
        bs = BinStats.from_dict(json.loads(Path(args.bin_stats).read_text()))
    else:
        h, w = first.data.shape[-2:]
        d = first.data.shape[0] if first.data.ndim == 3 else 1
        dims = (w, h, max(d, 1))
        ns = NoiseStats.from_stimulus(dims, args.sd, args.exponent, Modality.TWO_D
                                      if len(ts.support_shape) == 2 else Modality.THREE_D)
        sig = make_signal(args.signal, ts.px_per_deg).crop_depth(dims[2])
        curve = dprime_curve(ts, sig, ns, internal_noise=False)
        patches = stationary_patches(ns, ts.support_shape, args.calibration, args.seed, 99) + args.mean
        bs = calibrate_bin_stats(ts, patches, curve, sig)
    if args.synthetic:
        h, w = first.data.shape[-2:]
        depth = first.data.shape[0] if first.data.ndim == 3 else 1
        params = SearchTimingParams(args.fix_time_ms, args.resp_time_s, (w, h), depth, ts.px_per_deg)
        scanpaths = [synthesize_scanpath(params, modality)] * len(trials)
    elif args.scanpaths:
        flog = FixationLog.read(args.scanpaths)
        by_id = {t.trial_id: Scanpath([f[:3] for f in t.fixations]) for t in flog.trials}
        try:
            scanpaths = [by_id[str(t.meta.get("trial_id", f.stem))] for t, f in zip(trials, files)]
        except KeyError as exc:
            raise DataError(f"no scanpath for trial {exc}") from None
    else:
        raise InvalidArgumentError("fsm-run needs --scanpaths or --synthetic")
    for t, f in zip(trials, files):
        t.meta.setdefault("trial_id", f.stem)
    res = run_batch(trials, scanpaths, ts, bs, args.threshold, args.seed, args.stride, args.boundary)
    res.write_jsonl(args.out)
    print(f"d'={res.dprime:.4g} PC={res.pc:.4g} AUC={res.auc:.4g}")
    return 0


def cmd_fit(args):
    refs = load_reference(args.reference)
    try:
        preds = json.loads(Path(args.predictions).read_text())
    except ValueError as exc:
        raise DataError(f"{args.predictions}: not JSON") from exc
    if isinstance(preds, list):
        preds = predictions_from_records([FigureOfMeritRecord.from_dict(r) for r in preds])
    table = nll_table(refs, preds, on=args.on)
    _write_json(args.out, table)
    for model, row in table.items():
        print(model, " ".join(f"{k}={v:.4g}" for k, v in row.items()))
    return 0


def cmd_pipeline(args):
    overrides = {
        "seed": args.seed, "out_dir": args.out, "bins": args.bins, "dims": args.dims,
        "models": args.models, "signals": args.signals, "modalities": args.modalities,
        "schemes": args.schemes, "fixation_log": args.log, "fsm_trials": args.fsm_trials,
        "method": args.method, "reference": args.reference,
    }
    cfg = load_config(args.config, overrides)
    records = run_pipeline(cfg)
    sys.stdout.write(export_table(records, "csv"))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="foviq", description="Foveated model-observer detectability metrics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def noise_opts(sp):
        sp.add_argument("--dims", default="256x256x20", help="WxHxD")
        sp.add_argument("--mean", type=float, default=128.0)
        sp.add_argument("--sd", type=float, default=25.0)
        sp.add_argument("--exponent", type=float, default=-2.8)
        sp.add_argument("--px-per-deg", type=float, default=36.0)

    sp = sub.add_parser("gen-stimuli", help="power-law noise volumes and search trials")
    noise_opts(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--signal", choices=["mcalc", "mass"])
    sp.add_argument("--location", help="x,y,slice of the signal center")
    sp.add_argument("--trials", type=int, default=0, help="write N search trials into the --out directory")
    sp.add_argument("--modality", choices=["2d", "3d"], default="3d")
    sp.add_argument("--stride", type=int, default=4)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_stimuli)

    sp = sub.add_parser("build-templates", help="per-eccentricity observer templates")
    noise_opts(sp)
    sp.add_argument("--model", choices=["fcho", "fnpwe"], required=True)
    sp.add_argument("--signal", choices=["mcalc", "mass"], required=True)
    sp.add_argument("--bins", default="0:1:10")
    sp.add_argument("--bg-samples", help=".npy patch stack or .vol background volume")
    sp.add_argument("--modality", choices=["2d", "3d"], default="2d")
    sp.add_argument("--patch", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_templates)

    sp = sub.add_parser("dprime-curve", help="d' per eccentricity bin")
    noise_opts(sp)
    sp.add_argument("--templates", required=True)
    sp.add_argument("--signal", choices=["mcalc", "mass"], required=True)
    sp.add_argument("--method", choices=["empirical", "analytic", "fourier"], default="fourier")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-internal-noise", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dprime_curve)

    sp = sub.add_parser("weights", help="weighting functions over eccentricity bins")
    sp.add_argument("--scheme", choices=["avg", "dprime", "et", "time"], required=True)
    sp.add_argument("--bins", default="0:1:10")
    sp.add_argument("--curve", help="d' curve JSON (dprime scheme)")
    sp.add_argument("--log", help="fixation log JSONL (et scheme)")
    sp.add_argument("--fix-time-ms", type=float)
    sp.add_argument("--resp-time-s", type=float)
    sp.add_argument("--display", help="WxH")
    sp.add_argument("--slices", type=int, default=1)
    sp.add_argument("--modality", choices=["2d", "3d"], default="2d")
    sp.add_argument("--px-per-deg", type=float, default=36.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_weights)

    sp = sub.add_parser("fom", help="aggregate d' from a curve and weights")
    sp.add_argument("--curve", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fom)

    sp = sub.add_parser("fsm-run", help="foveated search model on a directory of trials")
    sp.add_argument("--stimuli", required=True)
    sp.add_argument("--scanpaths")
    sp.add_argument("--synthetic", action="store_true")
    sp.add_argument("--templates", required=True)
    sp.add_argument("--signal", choices=["mcalc", "mass"], default="mcalc")
    sp.add_argument("--bin-stats", help="calibrated per-bin statistics JSON")
    sp.add_argument("--calibration", type=int, default=2000)
    sp.add_argument("--threshold", type=float, default=1.0)
    sp.add_argument("--stride", type=int, default=4)
    sp.add_argument("--boundary", choices=["wrap", "skip"], default="wrap")
    sp.add_argument("--fix-time-ms", type=float, default=250.0)
    sp.add_argument("--resp-time-s", type=float, default=3.16)
    sp.add_argument("--mean", type=float, default=128.0)
    sp.add_argument("--sd", type=float, default=25.0)
    sp.add_argument("--exponent", type=float, default=-2.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fsm_run)

    sp = sub.add_parser("fit", help="negative log-likelihood against reference d'")
    sp.add_argument("--reference", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--on", choices=["raw", "ratio"], default="raw")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("pipeline", help="run every stage from one config")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--bins")
    sp.add_argument("--dims")
    sp.add_argument("--models")
    sp.add_argument("--signals")
    sp.add_argument("--modalities")
    sp.add_argument("--schemes")
    sp.add_argument("--log")
    sp.add_argument("--fsm-trials", type=int)
    sp.add_argument("--method")
    sp.add_argument("--reference")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        return args.func(args)
    except FoviqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
