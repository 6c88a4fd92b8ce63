"""Experiment pipeline: scoring, config parsing, reports, CLI verbs."""

import contextlib
import dataclasses
import io
import tempfile
from pathlib import Path

import numpy as np
import pytest

from wavegp import cli, experiment
from wavegp.experiment import (METHOD_DIFFUSE, METHOD_DK, METHOD_DKPDE,
                               NMSE_FLOOR_DB, EvalReport, ExperimentConfig,
                               ParseError, ReportRow, ZeroReference,
                               band_nmse, band_split, fit_predict,
                               method_label, nmse, parse_config, run,
                               write_report_csv, write_timing_csv)
from wavegp.featurenet import load_checkpoint, normalization_for
from wavegp.gp import GPModel, posterior_mean
from wavegp.kernels import DeepKernel, WaveOperatorSpec
from wavegp.trainer import ModelParams, load_train_state

DESK = dict(
    room=(4.0, 3.0, 2.5), source=(0.8, 1.5, 1.2), array_center=(2.8, 1.8, 1.3),
    array_side=0.4, max_order=6, fs=3000, mics=6, batch_samples=24, n_batches=2,
    snr_db=40.0, eval_points=5, band=(50.0, 1000.0), source_taps=101,
    epochs=3, learning_rate=1e-4, depth=2, hidden=8, omega0=4.0,
    colloc=3, realizations=2, seed=11, diffuse_n_freqs=65,
    bands=((50.0, 500.0), (500.0, 1000.0)))


def _desk_config(**over):
    kw = dict(DESK)
    kw.update(over)
    return ExperimentConfig(**kw)


def _write_config(tmp, text):
    path = Path(tmp) / "exp.cfg"
    path.write_text(text)
    return path


# ------------------------------------------------------------------ scoring

def test_nmse_exact_reconstruction_hits_floor():
    rng = np.random.default_rng(0)
    for _ in range(5):
        u = rng.standard_normal((4, 20))
        assert nmse(u, u.copy()) == NMSE_FLOOR_DB
    # near-exact reconstruction also clips at the floor
    u = np.ones(100)
    assert nmse(u, u + 1e-9) == NMSE_FLOOR_DB


def test_nmse_trivial_ratios():
    rng = np.random.default_rng(1)
    for _ in range(5):
        u = rng.standard_normal(64)
        assert nmse(u, np.zeros_like(u)) == 0.0
        assert abs(nmse(u, 2.0 * u)) < 1e-12
    # 3-4-5 hand value: err 16, ref 25
    db = nmse(np.array([3.0, 4.0]), np.array([3.0, 0.0]))
    assert abs(db - 10.0 * np.log10(16.0 / 25.0)) < 1e-12
    # scale invariance of the ratio
    u = rng.standard_normal(32)
    v = u + 0.1 * rng.standard_normal(32)
    assert abs(nmse(u, v) - nmse(5.0 * u, 5.0 * v)) < 1e-12
    print(f"3-4-5 value {db:.6f} dB")


def test_nmse_rejects_bad_operands():
    with pytest.raises(ValueError):
        nmse(np.ones(4), np.ones(5))
    with pytest.raises(ZeroReference):
        nmse(np.zeros(8), np.ones(8))
    # pooling flattens, so any same-size shapes compare
    u = np.arange(12.0)
    assert nmse(u.reshape(3, 4), u.reshape(4, 3)) == NMSE_FLOOR_DB


def test_band_nmse_identity_and_edges():
    rng = np.random.default_rng(2)
    u = rng.standard_normal((2, 256))
    bands = ((50.0, 200.0), (200.0, 400.0), (400.0, 700.0), (700.0, 1000.0))
    rows = band_nmse(u, u.copy(), 3000.0, bands)
    assert [(lo, hi) for lo, hi, _ in rows] == list(bands)
    for lo, hi, db in rows:
        assert db == NMSE_FLOOR_DB, (lo, hi, db)


def test_band_nmse_single_band_estimate_fft():
    # estimate = truth masked to one band: that band floors, others 0 dB
    rng = np.random.default_rng(3)
    fs, n = 3000.0, 512
    bands = ((50.0, 200.0), (200.0, 400.0), (400.0, 700.0), (700.0, 1000.0))
    u = rng.standard_normal((3, n))
    spec = np.fft.rfft(u, axis=1)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    mask = (freqs >= 200.0) & (freqs < 400.0)
    uhat = np.fft.irfft(spec * mask, n=n, axis=1)
    rows = band_nmse(u, uhat, fs, bands, mode="fft")
    for lo, hi, db in rows:
        if (lo, hi) == (200.0, 400.0):
            assert db == NMSE_FLOOR_DB
        else:
            assert abs(db) < 1e-9, (lo, hi, db)
        print(f"fft band {lo:.0f}-{hi:.0f}: {db:.3f} dB")


def test_band_nmse_single_band_estimate_fir():
    # two tones; the estimate keeps only the 500 Hz part
    fs, n = 3000.0, 600
    t = np.arange(n) / fs
    rng = np.random.default_rng(7)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, 2))
    u = np.stack([np.sin(2 * np.pi * 120 * t + a) + np.sin(2 * np.pi * 500 * t + b)
                  for a, b in phases])
    uhat = np.stack([np.sin(2 * np.pi * 500 * t + b) for _, b in phases])
    bands = ((50.0, 200.0), (200.0, 400.0), (400.0, 700.0), (700.0, 1000.0))
    rows = {(lo, hi): db for lo, hi, db in band_nmse(u, uhat, fs, bands, taps=101)}
    # the dropped 120 Hz tone dominates its band: ratio 1
    assert abs(rows[(50.0, 200.0)]) < 0.1
    # the kept tone's band reconstructs well
    assert rows[(400.0, 700.0)] < -20.0
    print(f"fir bands: drop {rows[(50.0, 200.0)]:.4f} dB, "
          f"keep {rows[(400.0, 700.0)]:.2f} dB")


def test_band_split_fir_rejects_even_taps():
    with pytest.raises(ValueError):
        band_split(np.ones((1, 64)), 3000.0, ((50.0, 1000.0),), taps=10)
    with pytest.raises(ValueError):
        band_split(np.ones((1, 64)), 3000.0, ((50.0, 1000.0),), mode="iir")


def test_fullband_matches_energy_weighted_fft_partition():
    # bands tiling [0, fs/2] partition the energy exactly, so the
    # full-band ratio is the energy-weighted mix of the band ratios
    rng = np.random.default_rng(4)
    fs = 3000.0
    bands = ((0.0, 300.0), (300.0, 800.0), (800.0, 1500.0))
    for trial in range(4):
        u = rng.standard_normal((2, 128))
        uhat = u + 0.3 * rng.standard_normal((2, 128))
        rows = band_nmse(u, uhat, fs, bands, mode="fft")
        refs = [float(np.sum(b * b)) for b in band_split(u, fs, bands, mode="fft")]
        errs = [r * 10.0 ** (db / 10.0) for r, (_, _, db) in zip(refs, rows)]
        combined = 10.0 * np.log10(sum(errs) / sum(refs))
        full = nmse(u, uhat)
        assert abs(combined - full) < 1e-10, trial
    print(f"partition check: full {full:.4f} dB, recombined {combined:.4f} dB")


# ------------------------------------------------------------------- config

def test_parse_config_empty_file_gives_defaults():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_config(tmp, "# comment only\n\n   \n")
        cfg = parse_config(path)
    assert cfg == ExperimentConfig()
    assert cfg.mics == 30
    assert cfg.array_side == 0.5
    assert cfg.fs == 3000
    assert cfg.snr_db == 40.0
    assert cfg.learning_rate == 1e-5
    assert cfg.method == (METHOD_DIFFUSE, METHOD_DK, METHOD_DKPDE)
    assert cfg.bands == ((50.0, 200.0), (200.0, 400.0),
                         (400.0, 700.0), (700.0, 1000.0))


def test_parse_config_overrides():
    text = """
# desk setup
mics = 10
room = 7, 5, 3.2
array_side = 0.3
band = 50 800
bands = 50-300 300-800
method = diffuse dk
train_noise = yes
band_filter = fft
learning_rate = 1e-3
seed = 42
"""
    with tempfile.TemporaryDirectory() as tmp:
        cfg = parse_config(_write_config(tmp, text))
    assert cfg.mics == 10
    assert cfg.room == (7.0, 5.0, 3.2)
    assert cfg.array_side == 0.3
    assert cfg.band == (50.0, 800.0)
    assert cfg.bands == ((50.0, 300.0), (300.0, 800.0))
    assert cfg.method == ("diffuse", "dk")
    assert cfg.train_noise is True
    assert cfg.band_filter == "fft"
    assert cfg.learning_rate == 1e-3
    assert cfg.scenario(5).n_mics == 10
    assert cfg.scenario(5).seed == 5


def test_parse_config_diagnostics():
    cases = [
        ("# a\n# b\nfrobnicate = 1\n", 3, "frobnicate", "unknown key"),
        ("mics = 10\nmics = 12\n", 2, "mics", "duplicate"),
        ("mics = ten\n", 1, "mics", "mics"),
        ("room = 1 2\n", 1, "room", "expected 3 numbers"),
        ("train_noise = maybe\n", 1, "train_noise", "boolean"),
        ("bands = 50:200\n", 1, "bands", "bands"),
        ("method =\n", 1, "method", "at least one"),
    ]
    with tempfile.TemporaryDirectory() as tmp:
        for text, line, key, frag in cases:
            with pytest.raises(ParseError) as ei:
                parse_config(_write_config(tmp, text))
            err = ei.value
            assert err.line == line, text
            assert err.key == key, text
            assert frag in str(err), text
            print(f"parse error ok: {err}")
        # missing '=' carries the line but no key
        with pytest.raises(ParseError) as ei:
            parse_config(_write_config(tmp, "mics 10\n"))
        assert ei.value.line == 1 and ei.value.key is None
        # constructor violations surface as ParseError too
        with pytest.raises(ParseError, match="colloc"):
            parse_config(_write_config(tmp, "method = dkpde\ncolloc = 0\n"))
        with pytest.raises(ParseError, match="unknown method"):
            parse_config(_write_config(tmp, "method = dk bogus\n"))


def test_parser_covers_every_config_field():
    # each dataclass field must have a parse rule, and vice versa
    handled = (set(experiment._VEC_KEYS) | experiment._INT_KEYS
               | experiment._FLOAT_KEYS | experiment._BOOL_KEYS
               | experiment._STR_KEYS | {"method", "bands"})
    declared = {f.name for f in dataclasses.fields(ExperimentConfig)}
    assert handled == declared, handled ^ declared


def test_config_validation_and_helpers():
    with pytest.raises(ValueError):
        ExperimentConfig(method=("dk", "bogus"))
    with pytest.raises(ValueError):
        ExperimentConfig(method=("dkpde",), colloc=0)
    with pytest.raises(ValueError):
        ExperimentConfig(band_filter="iir")
    with pytest.raises(ValueError):
        ExperimentConfig(eval_batch=20, n_batches=20)

    cfg = _desk_config()
    # SNR 40 dB and unit signal RMS give sigma = 1e-2
    assert cfg.resolved_noise_std() == 10.0 ** (-40.0 / 20.0)
    assert _desk_config(noise_std=0.3).resolved_noise_std() == 0.3

    net = cfg.net_config()
    assert net.out_dim == cfg.hidden
    assert _desk_config(feature_dim=3).net_config().out_dim == 3
    scale, offset = normalization_for(cfg.array_center, cfg.array_side / 2.0,
                                      cfg.batch_samples / cfg.fs)
    assert net.norm_scale == scale and net.norm_offset == offset

    tc = cfg.train_config(7, 123)
    assert tc.n_colloc == 7 and tc.seed == 123
    assert tc.epochs == cfg.epochs and tc.learning_rate == cfg.learning_rate

    sc = cfg.scenario(9)
    assert sc.n_mics == cfg.mics and sc.fs == cfg.fs and sc.seed == 9
    assert sc.batch_samples == cfg.batch_samples


def test_config_hash_tracks_content():
    a = _desk_config()
    b = _desk_config()
    c = _desk_config(mics=7)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 16
    int(a.config_hash(), 16)


def test_method_label():
    assert method_label(METHOD_DKPDE, 20) == "dkpde20"
    assert method_label(METHOD_DKPDE, 7) == "dkpde7"
    assert method_label(METHOD_DK, 20) == "dk"
    assert method_label(METHOD_DIFFUSE, 5) == "diffuse"


def test_derived_seed_spread():
    seen = set()
    for r in range(4):
        for slot in range(3):
            s = experiment._derived_seed(0, r, slot)
            assert s == experiment._derived_seed(0, r, slot)
            assert 0 <= s < 2 ** 32
            seen.add(s)
    assert len(seen) == 12
    assert experiment._derived_seed(1, 0, 0) != experiment._derived_seed(0, 0, 0)


# ------------------------------------------------------------------- report

def test_eval_report_accessors():
    rows = [
        ReportRow(0, "dk", None, None, 1.0),
        ReportRow(0, "dk", 50.0, 200.0, 99.0),   # band rows never pool
        ReportRow(1, "dk", None, None, 2.0),
        ReportRow(2, "dk", None, None, 4.0),
        ReportRow(0, "diffuse", None, None, 0.5),
    ]
    report = EvalReport(rows, {}, "deadbeef")
    assert report.methods() == ["dk", "diffuse"]
    assert report.full_band("dk") == [1.0, 2.0, 4.0]
    assert abs(report.mean_nmse("dk") - 7.0 / 3.0) < 1e-15
    assert report.median_nmse("dk") == 2.0
    assert report.mean_nmse("diffuse") == 0.5


def test_report_csv_format():
    report = EvalReport([ReportRow(0, "dk", None, None, -3.5),
                         ReportRow(0, "dk", 50.0, 200.0, -1.25)],
                        {(0, "dk"): 1.23456}, "cafe")
    with tempfile.TemporaryDirectory() as tmp:
        rp = Path(tmp) / "report.csv"
        tp = Path(tmp) / "timing.csv"
        write_report_csv(rp, report)
        write_timing_csv(tp, report)
        lines = rp.read_text().splitlines()
        assert lines[0] == "realization,method,band_lo,band_hi,nmse_db"
        assert lines[1] == "0,dk,,,-3.5"
        assert lines[2] == "0,dk,50.0,200.0,-1.25"
        assert tp.read_text().splitlines() == [
            "realization,method,seconds", "0,dk,1.235"]
        first = rp.read_bytes()
        write_report_csv(rp, report)
        assert rp.read_bytes() == first


# ------------------------------------------------------- fit_predict / run

def test_fit_predict_diffuse_skips_training():
    cfg = _desk_config()
    from wavegp.acoustics import simulate
    data = simulate(cfg.scenario(3))
    xhat, y_true = data.eval_points(cfg.eval_batch)
    y1, state = fit_predict(cfg, METHOD_DIFFUSE, data, xhat,
                            train_seed=1, net_seed=2, n_colloc=0)
    assert state is None
    assert y1.shape == y_true.shape
    assert np.all(np.isfinite(y1))
    y2, _ = fit_predict(cfg, METHOD_DIFFUSE, data, xhat,
                        train_seed=9, net_seed=8, n_colloc=0)
    # no training and no sampling: seeds cannot matter
    assert np.array_equal(y1, y2)
    print(f"diffuse desk nmse {nmse(y_true, y1):.2f} dB")


def test_fit_predict_predicts_with_trained_parameters():
    cfg = _desk_config(epochs=25, learning_rate=1e-3)
    from wavegp.acoustics import simulate
    data = simulate(cfg.scenario(3))
    xhat, _ = data.eval_points(cfg.eval_batch)
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        y_hat, state = fit_predict(cfg, METHOD_DK, data, xhat, train_seed=5,
                                   net_seed=6, n_colloc=0, out_dir=out, tag="dk")
        assert state.step == 25 and len(state.loss_history) == 25
        # the checkpoint holds moved weights, not the init draw
        _, saved = load_checkpoint(out / "net_dk.ckpt")
        fresh = ModelParams.create(cfg.net_config(), 6).net().params
        assert any(np.any(w != f) for w, f in zip(saved.weights, fresh.weights))
        # the returned prediction comes from the trained state
        loaded = load_train_state(out / "state_dk.npz").params
        op = WaveOperatorSpec(c=cfg.speed_of_sound)
        model = GPModel(DeepKernel(loaded.net(), loaded.hyper(), op),
                        loaded.noise_std(), loaded.source_noise_std())
        y_rebuilt = posterior_mean(model, data.batch_dataset(cfg.eval_batch), xhat)
        assert np.array_equal(y_rebuilt, y_hat)
        assert (out / "loss_dk.csv").exists()


def test_run_tiny_end_to_end():
    cfg = _desk_config()
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "exp"
        report = run(cfg, out)
        labels = ["diffuse", "dk", "dkpde3"]
        assert report.methods() == labels
        # per realization and method: one full row plus one row per band
        assert len(report.rows) == cfg.realizations * len(labels) * 3
        assert set(report.seconds) == {(r, m) for r in range(cfg.realizations)
                                       for m in labels}
        assert all(s >= 0.0 for s in report.seconds.values())
        for m in labels:
            assert len(report.full_band(m)) == cfg.realizations
            assert np.isfinite(report.mean_nmse(m))
            print(f"desk {m}: mean {report.mean_nmse(m):.2f} dB")
        for name in ["report.csv", "timing.csv", "run_meta.txt",
                     "dataset_r0.npz", "dataset_r1.npz",
                     "state_dk_r0.npz", "net_dk_r0.ckpt", "loss_dk_r0.csv",
                     "state_dkpde3_r1.npz", "net_dkpde3_r1.ckpt",
                     "figures/band_nmse.png", "figures/training_loss.png"]:
            assert (out / name).exists(), name
        meta = (out / "run_meta.txt").read_text()
        assert f"config_hash {cfg.config_hash()}" in meta
        assert "methods diffuse dk dkpde3" in meta
        assert f"realizations {cfg.realizations}" in meta
        n_lines = len((out / "report.csv").read_text().splitlines())
        assert n_lines == 1 + len(report.rows)


def test_run_report_bytes_reproduce():
    cfg = _desk_config(realizations=1, method=(METHOD_DIFFUSE, METHOD_DK),
                       epochs=2)
    with tempfile.TemporaryDirectory() as tmp:
        a = Path(tmp) / "a"
        b = Path(tmp) / "b"
        c = Path(tmp) / "c"
        run(cfg, a, save_datasets=False)
        run(cfg, b, save_datasets=False)
        bytes_a = (a / "report.csv").read_bytes()
        assert bytes_a == (b / "report.csv").read_bytes()
        assert (a / "run_meta.txt").read_bytes() == (b / "run_meta.txt").read_bytes()
        assert not (a / "dataset_r0.npz").exists()
        # a different base seed moves the scores
        run(cfg, c, save_datasets=False, seed=cfg.seed + 1)
        assert (c / "report.csv").read_bytes() != bytes_a
    print("report bytes stable across reruns")


def test_run_rejects_bad_method_plans():
    cfg = _desk_config(realizations=1)
    with tempfile.TemporaryDirectory() as tmp:
        with pytest.raises(ValueError, match="unknown method"):
            run(cfg, Path(tmp) / "x", methods=("bogus",))
        with pytest.raises(ValueError, match="colloc"):
            run(cfg, Path(tmp) / "y", methods=(METHOD_DKPDE,), colloc=0)


# ---------------------------------------------------------------------- CLI

def _cli(argv):
    out = io.StringIO()
    err = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main(argv)
    return code, out.getvalue(), err.getvalue()


def _desk_config_text(**over):
    kw = dict(DESK)
    kw.update(over)
    lines = []
    for key, val in kw.items():
        if key == "bands":
            lines.append("bands = " + " ".join(f"{lo:g}-{hi:g}" for lo, hi in val))
        elif isinstance(val, tuple):
            lines.append(f"{key} = " + " ".join(f"{v:g}" for v in val))
        else:
            lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def test_cli_simulate_train_evaluate():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg_path = _write_config(tmp, _desk_config_text(epochs=2))
        code, out, _ = _cli(["simulate", "--config", str(cfg_path),
                             "--seed", "3", "--out", str(tmp / "sim")])
        assert code == 0
        assert (tmp / "sim" / "dataset.npz").exists()
        assert "measured snr" in out

        code, out, _ = _cli(["train", "--config", str(cfg_path),
                             "--data", str(tmp / "sim" / "dataset.npz"),
                             "--method", "dk", "--out", str(tmp / "fit")])
        assert code == 0
        assert "holdout nmse" in out
        assert (tmp / "fit" / "state_dk.npz").exists()
        assert (tmp / "fit" / "net_dk.ckpt").exists()

        code, out, _ = _cli(["evaluate", "--config", str(cfg_path),
                             "--data", str(tmp / "sim" / "dataset.npz"),
                             "--checkpoint", str(tmp / "fit" / "state_dk.npz"),
                             "--out", str(tmp / "score")])
        assert code == 0
        assert "full-band nmse" in out
        assert (tmp / "score" / "report.csv").exists()
        print(out.strip().splitlines()[0])


def test_cli_run_diffuse_only():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg_path = _write_config(tmp, _desk_config_text(realizations=1))
        code, out, _ = _cli(["run", "--config", str(cfg_path),
                             "--method", "diffuse", "--seed", "1",
                             "--out", str(tmp / "exp")])
        assert code == 0
        assert "diffuse: mean nmse" in out
        assert (tmp / "exp" / "figures" / "band_nmse.png").exists()
        # no trained method, so no loss chart
        assert not (tmp / "exp" / "figures" / "training_loss.png").exists()


def test_cli_error_reporting():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        code, _, err = _cli(["run", "--config", str(tmp / "missing.cfg"),
                             "--out", str(tmp / "x")])
        assert code == 2
        assert err.startswith("error: FileNotFoundError")

        cfg_path = _write_config(tmp, "frobnicate = 1\n")
        code, _, err = _cli(["run", "--config", str(cfg_path),
                             "--out", str(tmp / "y")])
        assert code == 2
        assert err.startswith("error: ParseError")
        assert "frobnicate" in err

        cfg_path2 = Path(tmp) / "ok.cfg"
        cfg_path2.write_text(_desk_config_text(realizations=1))
        code, _, err = _cli(["run", "--config", str(cfg_path2),
                             "--method", "bogus", "--out", str(tmp / "z")])
        assert code == 2
        assert "unknown method" in err
        print(f"error line: {err.strip()}")


def test_cli_gradcheck_passes():
    code, out, _ = _cli(["gradcheck", "--seed", "0", "--omega0", "2"])
    assert code == 0
    assert "PASS" in out
    assert "max rel err" in out
    print(out.strip())
