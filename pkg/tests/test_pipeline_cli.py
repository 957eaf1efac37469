import json

import numpy as np
import pytest

from foviq.cli import main
from foviq.exceptions import DataError, InvalidArgumentError
from foviq.pipeline import (
    FigureOfMeritRecord, OutputLock, PipelineError, RunConfig, export_table, import_table, load_config,
    run_pipeline,
)
from foviq.stimulus import load_trial

SMALL = dict(dims="64x64x4", bins="0:1:2", patch_size=32)


def record(**kw):
    base = dict(model="fcho", signal="mass", modality="2d", scheme="avg", dprime=1.23456789,
                curve_ref="", weights_ref="", seed=0, config_hash="abc", timestamp="t")
    base.update(kw)
    return FigureOfMeritRecord(**base)


class TestConfig:
    """Layered configuration."""

    def test_precedence(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("seed = 1\ntrials = 300\nsd = 20\n")
        cfg = load_config(ini, {"seed": 3}, environ={"FOVIQ_TRIALS": "500", "FOVIQ_SEED": "2"})
        assert (cfg.seed, cfg.trials, cfg.sd) == (3, 500, 20.0)

    def test_unknown_key(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[run]\nbogus = 1\n")
        with pytest.raises(InvalidArgumentError):
            load_config(ini, environ={})

    def test_bad_value(self):
        with pytest.raises(InvalidArgumentError):
            load_config(None, {"models": "cho"}, environ={})

    def test_auto_bins(self):
        assert RunConfig().ecc_bins().tolist() == list(range(11))

    def test_hash_ignores_out_dir(self):
        assert RunConfig(out_dir="a").config_hash() == RunConfig(out_dir="b").config_hash()
        assert RunConfig(seed=1).config_hash() != RunConfig(seed=2).config_hash()

    def test_3d_timing_scales_with_depth(self):
        t = RunConfig().timing("3d")
        assert t.n_slices == 20 and t.median_response_s == pytest.approx(22.62 * 20 / 100)


class TestTables:
    """Export, import and verification of figure-of-merit tables."""

    def test_csv_single_record(self):
        text = export_table([record()], "csv")
        lines = text.strip().splitlines()
        assert len(lines) == 2
        assert lines[0].split(",")[:5] == ["model", "signal", "modality", "scheme", "dprime"]
        assert "1.23457" in lines[1]

    def test_json_round_trip_full_precision(self, tmp_path):
        recs = [record(), record(scheme="time", dprime=0.1 + 0.2)]
        export_table(recs, "json", tmp_path / "t.json")
        assert import_table(tmp_path / "t.json") == recs

    def test_csv_round_trip(self, tmp_path):
        export_table([record(dprime=2.5)], "csv", tmp_path / "t.csv")
        assert import_table(tmp_path / "t.csv")[0] == record(dprime=2.5)

    def test_empty_and_unknown(self):
        with pytest.raises(InvalidArgumentError):
            export_table([], "csv")
        with pytest.raises(InvalidArgumentError):
            export_table([record()], "xml")

    def test_bad_table(self, tmp_path):
        (tmp_path / "t.json").write_text('[{"model": "x"}]')
        with pytest.raises(DataError):
            import_table(tmp_path / "t.json")

    def test_lock(self, tmp_path):
        with OutputLock(tmp_path):
            with pytest.raises(DataError):
                with OutputLock(tmp_path):
                    pass
        assert not (tmp_path / ".foviq.lock").exists()


class TestPipeline:
    """End-to-end runs on a small grid."""

    def test_records_and_files(self, tmp_path, caplog):
        cfg = RunConfig(out_dir=str(tmp_path / "out"), **SMALL)
        recs = run_pipeline(cfg, timestamp="fixed")
        # 2 models x 2 signals x 2 modalities x 3 schemes; et needs a fixation log
        assert len(recs) == 24
        assert "skipping the et scheme" in caplog.text
        out = tmp_path / "out"
        assert import_table(out / "fom.json") == recs
        assert len((out / "fom.csv").read_text().strip().splitlines()) == 25
        assert len(list((out / "curves").glob("*.json"))) == 8
        assert json.loads((out / "run.json").read_text())["config_hash"] == cfg.config_hash()

    def test_avg_record_is_curve_mean(self, tmp_path):
        cfg = RunConfig(out_dir=str(tmp_path), models=["fnpwe"], signals=["mass"], modalities=["2d"],
                        schemes=["avg"], **SMALL)
        rec = run_pipeline(cfg)[0]
        curve = json.loads((tmp_path / rec.curve_ref).read_text())
        assert rec.dprime == pytest.approx(np.mean(curve["dprime"]))

    def test_repeat_is_identical(self, tmp_path):
        kw = dict(models=["fnpwe"], signals=["mcalc"], schemes=["avg", "time"], **SMALL)
        a = run_pipeline(RunConfig(out_dir=str(tmp_path / "a"), **kw), timestamp="x")
        b = run_pipeline(RunConfig(out_dir=str(tmp_path / "b"), **kw), timestamp="x")
        assert a == b
        assert (tmp_path / "a" / "fom.csv").read_bytes() == (tmp_path / "b" / "fom.csv").read_bytes()

    def test_stage_failure_keeps_exit_code(self, tmp_path):
        cfg = RunConfig(out_dir=str(tmp_path), models=["fnpwe"], signals=["mass"], modalities=["2d"],
                        schemes=["avg"], reference=str(tmp_path / "missing.json"), **SMALL)
        with pytest.raises(PipelineError) as info:
            run_pipeline(cfg)
        assert info.value.stage == "fit"

    def test_fit_stage(self, tmp_path):
        ref = tmp_path / "ref.json"
        ref.write_text(json.dumps([{"signal": "mass", "modality": "2d", "dprime": 1.0, "stderr": 0.2}]))
        cfg = RunConfig(out_dir=str(tmp_path / "o"), models=["fnpwe"], signals=["mass"],
                        modalities=["2d"], schemes=["avg", "time"], reference=str(ref), **SMALL)
        run_pipeline(cfg)
        table = json.loads((tmp_path / "o" / "nll.json").read_text())
        assert set(table["fnpwe"]) == {"avg", "time"}

    def test_fsm_stage(self, tmp_path):
        cfg = RunConfig(out_dir=str(tmp_path), models=["fnpwe"], signals=["mass"], modalities=["2d"],
                        schemes=["avg"], fsm_trials=8, fsm_calibration=200, **SMALL)
        recs = run_pipeline(cfg)
        assert [r.scheme for r in recs] == ["avg", "fsm"]
        assert len((tmp_path / "fsm" / "fnpwe_mass_2d.jsonl").read_text().splitlines()) == 8


class TestCLI:
    """Subcommands and exit codes."""

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--help"])
        assert info.value.code == 0

    def test_invalid_argument_exit_2(self):
        assert main(["gen-stimuli", "--dims", "0x4x4", "--out", "x.vol"]) == 2
        assert main(["no-such-command"]) == 2

    def test_missing_file_exit_3(self, tmp_path):
        assert main(["fom", "--curve", str(tmp_path / "nope.json"), "--weights", "w.json"]) == 3

    def test_degenerate_exit_4(self, tmp_path):
        curve = tmp_path / "c.json"
        curve.write_text(json.dumps({"model": "fcho", "signal": "mass", "modality": "2d",
                                     "bins": [0, 1], "dprime": [0, 0], "method": "fourier"}))
        assert main(["weights", "--scheme", "dprime", "--bins", "0:1:1", "--curve", str(curve),
                     "--out", str(tmp_path / "w.json")]) == 4

    def test_chain(self, tmp_path, capsys):
        t = tmp_path
        assert main(["build-templates", "--model", "fnpwe", "--signal", "mass", "--bins", "0:1:2",
                     "--patch", "32", "--dims", "64x64x4", "--out", str(t / "m.tset")]) == 0
        assert main(["dprime-curve", "--templates", str(t / "m.tset"), "--signal", "mass",
                     "--dims", "64x64x4", "--out", str(t / "c.json")]) == 0
        assert main(["weights", "--scheme", "time", "--bins", "0:1:2", "--fix-time-ms", "250",
                     "--resp-time-s", "3.16", "--display", "64x64", "--out", str(t / "w.json")]) == 0
        capsys.readouterr()
        assert main(["fom", "--curve", str(t / "c.json"), "--weights", str(t / "w.json")]) == 0
        assert float(capsys.readouterr().out) > 0

    def test_gen_stimuli_and_fsm_run(self, tmp_path, capsys):
        t = tmp_path
        assert main(["gen-stimuli", "--dims", "64x64x4", "--signal", "mass", "--trials", "6",
                     "--modality", "2d", "--out", str(t / "trials")]) == 0
        assert load_trial(t / "trials" / "trial_00000.vol").signal_present
        assert main(["build-templates", "--model", "fnpwe", "--signal", "mass", "--bins", "0:1:2",
                     "--patch", "32", "--dims", "64x64x4", "--out", str(t / "m.tset")]) == 0
        assert main(["fsm-run", "--stimuli", str(t / "trials"), "--templates", str(t / "m.tset"),
                     "--signal", "mass", "--synthetic", "--calibration", "200",
                     "--out", str(t / "v.jsonl")]) == 0
        assert len((t / "v.jsonl").read_text().splitlines()) == 6

    def test_single_volume(self, tmp_path):
        out = tmp_path / "s.vol"
        assert main(["gen-stimuli", "--dims", "32x32x3", "--signal", "mcalc", "--location", "16,16,1",
                     "--out", str(out)]) == 0
        assert load_trial(out).signal_location == (16, 16, 1)

    def test_pipeline_command(self, tmp_path, capsys):
        assert main(["pipeline", "--dims", "64x64x4", "--bins", "0:1:2", "--models", "fnpwe",
                     "--signals", "mass", "--modalities", "2d", "--schemes", "avg",
                     "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.startswith("model,signal")
