"""Command-line interface.

Verbs: simulate (render one dataset), train (fit one method), evaluate
(score a checkpoint), run (full multi-realization experiment),
gradcheck (finite-difference validation of both objectives).  Errors
exit nonzero with a single machine-readable `error: <Type>: <message>`
line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .acoustics import load_dataset, save_dataset, simulate, t60_schroeder, render_rir
from .experiment import (ExperimentConfig, ParseError, band_nmse, fit_predict,
                         method_label, nmse, parse_config)
from .featurenet import SirenConfig
from .gp import Dataset, GPModel, posterior_mean, sample_collocation
from .kernels import DeepKernel, WaveOperatorSpec
from .trainer import (ModelParams, load_train_state, validate_gradients)


def _load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(path)


def _cmd_simulate(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    data = simulate(config.scenario(seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.npz"
    save_dataset(path, data)
    t60 = t60_schroeder(render_rir(data.scenario, data.mic_pos[0]))
    print(f"wrote {path}")
    print(f"mics {len(data.mic_pos)} eval {len(data.eval_pos)} "
          f"batches {data.batches.shape[0]}x{data.batches.shape[2]} samples")
    print(f"measured snr {data.measured_snr_db:.2f} dB, t60 {t60:.3f} s")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data is not None:
        data = load_dataset(args.data)
    else:
        data = simulate(config.scenario(experiment._derived_seed(seed, 0, 0)))
    n_colloc = args.colloc if args.colloc is not None else config.colloc
    label = method_label(args.method, n_colloc)
    xhat, y_true = data.eval_points(config.eval_batch)
    y_hat, state = fit_predict(
        config, args.method, data, xhat,
        train_seed=experiment._derived_seed(seed, 0, 1),
        net_seed=experiment._derived_seed(seed, 0, 2),
        n_colloc=n_colloc, out_dir=out, tag=label)
    print(f"method {label}: final objective {state.loss_history[-1]:.6f} "
          f"after {state.step} steps")
    print(f"holdout nmse {nmse(y_true, y_hat):.2f} dB")
    print(f"wrote {out / f'state_{label}.npz'}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    data = load_dataset(args.data)
    state = load_train_state(args.checkpoint)
    params = state.params
    op = WaveOperatorSpec(c=config.speed_of_sound)
    kernel = DeepKernel(params.net(), params.hyper(), op)
    model = GPModel(kernel, params.noise_std(), params.source_noise_std())
    xhat, y_true = data.eval_points(config.eval_batch)
    y_hat = posterior_mean(model, data.batch_dataset(config.eval_batch), xhat)
    p, n = data.eval_clean.shape[1:]
    full = nmse(y_true, y_hat)
    per_band = band_nmse(y_true.reshape(p, n), y_hat.reshape(p, n),
                         config.fs, config.bands, config.band_filter,
                         config.band_taps)
    print(f"full-band nmse {full:.2f} dB")
    for lo, hi, db in per_band:
        print(f"band {lo:.0f}-{hi:.0f} Hz: {db:.2f} dB")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        tag = Path(args.checkpoint).stem
        rows = [experiment.ReportRow(0, tag, None, None, full)]
        rows += [experiment.ReportRow(0, tag, lo, hi, db) for lo, hi, db in per_band]
        report = experiment.EvalReport(rows, {}, config.config_hash())
        experiment.write_report_csv(out / "report.csv", report)
        print(f"wrote {out / 'report.csv'}")
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args.config)
    methods = tuple(args.method.replace(",", " ").split()) if args.method else None
    report = experiment.run(config, args.out, methods=methods, seed=args.seed,
                            colloc=args.colloc)
    for method in report.methods():
        print(f"{method}: mean nmse {report.mean_nmse(method):.2f} dB "
              f"(median {report.median_nmse(method):.2f})")
    print(f"wrote {Path(args.out) / 'report.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    config = _load_config(args.config)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    net_cfg = SirenConfig(depth=2, hidden=8, out_dim=8, omega0=args.omega0)
    params = ModelParams.create(net_cfg, rng.integers(2 ** 31), ell=1.0,
                                sigma_kappa=1.0, noise_std=0.1,
                                source_noise_std=0.05)
    x = rng.uniform(-1.0, 1.0, size=(10, 4))
    y = rng.standard_normal(10)
    colloc = sample_collocation((np.full(3, -1.0), np.full(3, 1.0)),
                                (0.0, 1.0), 4, rng)
    op = WaveOperatorSpec(c=config.speed_of_sound)
    report = validate_gradients(params, Dataset(x, y), colloc, op, step=args.step)
    print(f"parameters checked: {report.n_params}")
    print(f"plain objective    max rel err {report.simple_err:.3e}")
    print(f"collocation objective max rel err {report.joint_err:.3e}")
    tol = 1e-5
    if report.ok(tol):
        print(f"PASS (tolerance {tol:g})")
        return 0
    print(f"FAIL (tolerance {tol:g})")
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavegp",
        description="Sound-field reconstruction with a learned spacetime kernel")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="render one room dataset to .npz")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="fit one method on one dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None, help="dataset .npz (default: simulate)")
    p.add_argument("--method", default="dk",
                   choices=[experiment.METHOD_DK, experiment.METHOD_DKPDE,
                            experiment.METHOD_DIFFUSE])
    p.add_argument("--colloc", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a trained checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="full multi-realization experiment")
    p.add_argument("--config", default=None)
    p.add_argument("--method", default=None,
                   help="override the config's method list, e.g. 'diffuse dk dkpde'")
    p.add_argument("--colloc", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--omega0", type=float, default=30.0)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - single reporting point
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
