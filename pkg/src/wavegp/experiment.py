"""Experiment pipeline: simulate -> fit -> predict -> score -> report.

A flat `key = value` config file selects the room, the signal plan, the
model, and the method list.  Each realization draws a fresh room
dataset; every method fits the same data, predictions are scored
against the noiseless field at held-out positions, Normalized
Mean-Square Error in dB, full band and per frequency band.  Reports are
CSV plus rendered figures; all randomness descends from one base seed,
and report bytes are reproducible run to run.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from statistics import median

import numpy as np
from scipy.signal import firwin

from .acoustics import RoomScenario, SoundFieldData, save_dataset, simulate
from .featurenet import SirenConfig, normalization_for, save_checkpoint
from .gp import Dataset, GPModel, posterior_mean
from .kernels import DeepKernel, DiffuseKernel, WaveOperatorSpec, diffuse_freqs
from .trainer import (ModelParams, TrainConfig, TrainState, train,
                      save_train_state, write_loss_csv)

METHOD_DIFFUSE = "diffuse"
METHOD_DK = "dk"
METHOD_DKPDE = "dkpde"
_KNOWN_METHODS = (METHOD_DIFFUSE, METHOD_DK, METHOD_DKPDE)


class ParseError(Exception):
    """Config file rejected; carries the offending line number and key."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        super().__init__(message)
        self.line = line
        self.key = key


class ZeroReference(Exception):
    """NMSE is undefined: the reference signal has zero energy."""


NMSE_FLOOR_DB = -120.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything `run` needs; defaults reproduce the reference setup."""

    # room and signals
    room: tuple = (6.0, 5.0, 3.0)
    absorption: float = 0.55
    max_order: int = 26
    speed_of_sound: float = 343.0
    fs: int = 3000
    source: tuple = (1.0, 2.0, 1.5)
    array_center: tuple = (4.0, 3.0, 1.5)
    array_side: float = 0.5
    mics: int = 30
    batch_samples: int = 50
    n_batches: int = 20
    snr_db: float = 40.0
    eval_points: int = 100
    band: tuple = (50.0, 1000.0)
    source_taps: int = 257
    # optimizer
    epochs: int = 20000
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_strategy: str = "cycle"
    grad_clip: float = 0.0
    checkpoint_interval: int = 0
    # feature network and kernel
    depth: int = 5
    hidden: int = 100
    feature_dim: int = 0          # 0 = same as hidden
    omega0: float = 30.0
    c0: float = 6.0
    first_layer_init: str = "layer-count"
    ell_init: float = 1.0
    sigma_kappa_init: float = 0.0  # 0 = empirical std of the training batch
    noise_std: float = 0.0         # 0 = from the SNR
    sigma_z: float = 0.0           # 0 = 1e-2 * sigma_kappa
    train_noise: bool = False
    train_sigma_z: bool = False
    # experiment plan
    method: tuple = (METHOD_DIFFUSE, METHOD_DK, METHOD_DKPDE)
    colloc: int = 20
    realizations: int = 10
    seed: int = 0
    eval_batch: int = 0
    bands: tuple = ((50.0, 200.0), (200.0, 400.0), (400.0, 700.0), (700.0, 1000.0))
    band_filter: str = "fir"
    band_taps: int = 0             # 0 = adapt to the batch length
    diffuse_n_freqs: int = 1025
    diffuse_scale: float = 0.0     # 0 = empirical variance of the training batch
    time_norm: str = "axis"        # "wave" = time in travel-distance units

    def __post_init__(self):
        for m in self.method:
            if m not in _KNOWN_METHODS:
                raise ValueError(f"unknown method '{m}'")
        if METHOD_DKPDE in self.method and self.colloc <= 0:
            raise ValueError("the collocation method needs colloc > 0")
        if self.band_filter not in ("fir", "fft"):
            raise ValueError(f"unknown band_filter '{self.band_filter}'")
        if self.time_norm not in ("axis", "wave"):
            raise ValueError(f"unknown time_norm '{self.time_norm}'")
        if not 0 <= self.eval_batch < self.n_batches:
            raise ValueError("eval_batch out of range")

    def scenario(self, seed: int) -> RoomScenario:
        return RoomScenario(
            room=self.room, absorption=self.absorption, max_order=self.max_order,
            c=self.speed_of_sound, fs=self.fs, source=self.source,
            array_center=self.array_center, array_side=self.array_side,
            n_mics=self.mics, batch_samples=self.batch_samples,
            n_batches=self.n_batches, snr_db=self.snr_db, n_eval=self.eval_points,
            band=self.band, source_taps=self.source_taps, seed=seed)

    def net_config(self) -> SirenConfig:
        scale, offset = normalization_for(self.array_center, self.array_side / 2.0,
                                          self.batch_samples / self.fs)
        if self.time_norm == "wave":
            # time in travel-distance units shares the spatial half
            # extent, so content bandwidth is isotropic over spacetime
            half = self.array_side / 2.0
            scale = scale[:3] + (self.speed_of_sound / half,)
        return SirenConfig(
            depth=self.depth, hidden=self.hidden,
            out_dim=self.feature_dim if self.feature_dim > 0 else self.hidden,
            omega0=self.omega0, c0=self.c0, norm_scale=scale, norm_offset=offset,
            first_layer_init=self.first_layer_init)

    def train_config(self, n_colloc: int, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate,
            beta1=self.adam_beta1, beta2=self.adam_beta2, eps=self.adam_eps,
            n_colloc=n_colloc, batch_strategy=self.batch_strategy, seed=seed,
            grad_clip=self.grad_clip, checkpoint_interval=self.checkpoint_interval)

    def resolved_noise_std(self) -> float:
        return self.noise_std if self.noise_std > 0 else 10.0 ** (-self.snr_db / 20.0)

    def canonical_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


# ------------------------------------------------------------- config file

_VEC_KEYS = {"room": 3, "source": 3, "array_center": 3, "band": 2}
_INT_KEYS = {"max_order", "fs", "mics", "batch_samples", "n_batches", "eval_points",
             "source_taps", "epochs", "checkpoint_interval", "depth", "hidden",
             "feature_dim", "colloc", "realizations", "seed", "eval_batch",
             "band_taps", "diffuse_n_freqs"}
_FLOAT_KEYS = {"absorption", "speed_of_sound", "array_side", "snr_db",
               "learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
               "grad_clip", "omega0", "c0", "ell_init", "sigma_kappa_init",
               "noise_std", "sigma_z", "diffuse_scale"}
_BOOL_KEYS = {"train_noise", "train_sigma_z"}
_STR_KEYS = {"batch_strategy", "first_layer_init", "band_filter", "time_norm"}


def _parse_value(key: str, raw: str, line_no: int):
    def fail(why: str):
        raise ParseError(f"line {line_no}: bad value for '{key}': {why}",
                         line=line_no, key=key)
    parts = raw.replace(",", " ").split()
    try:
        if key in _VEC_KEYS:
            if len(parts) != _VEC_KEYS[key]:
                fail(f"expected {_VEC_KEYS[key]} numbers")
            return tuple(float(p) for p in parts)
        if key in _INT_KEYS:
            return int(raw.strip())
        if key in _FLOAT_KEYS:
            return float(raw.strip())
        if key in _BOOL_KEYS:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            fail("expected a boolean")
        if key in _STR_KEYS:
            return raw.strip()
        if key == "method":
            methods = tuple(p.lower() for p in parts)
            if not methods:
                fail("expected at least one method")
            return methods
        if key == "bands":
            out = []
            for p in parts:
                lo, _, hi = p.partition("-")
                out.append((float(lo), float(hi)))
            return tuple(out)
    except ParseError:
        raise
    except ValueError as e:
        fail(str(e))
    fail("unhandled key type")  # pragma: no cover


def parse_config(path) -> ExperimentConfig:
    """Read a flat `key = value` file; '#' starts a comment.

    Unknown keys and malformed values raise ParseError carrying the
    line number and key.  An empty file yields the full default setup.
    """
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    text = Path(path).read_text()
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"line {line_no}: expected 'key = value'", line=line_no)
        key, _, raw = body.partition("=")
        key = key.strip()
        if key not in known:
            raise ParseError(f"line {line_no}: unknown key '{key}'",
                             line=line_no, key=key)
        if key in values:
            raise ParseError(f"line {line_no}: duplicate key '{key}'",
                             line=line_no, key=key)
        values[key] = _parse_value(key, raw, line_no)
    try:
        return ExperimentConfig(**values)
    except ValueError as e:
        raise ParseError(str(e)) from e


# ------------------------------------------------------------------ scoring

def nmse(u_true: np.ndarray, u_est: np.ndarray) -> float:
    """10 log10(|u - u_hat|^2 / |u|^2), floored at -120 dB."""
    u_true = np.asarray(u_true, dtype=np.float64).reshape(-1)
    u_est = np.asarray(u_est, dtype=np.float64).reshape(-1)
    if u_true.shape != u_est.shape:
        raise ValueError("NMSE operands differ in shape")
    ref = float(np.sum(u_true * u_true))
    if ref == 0.0:
        raise ZeroReference("reference signal has zero energy")
    err = float(np.sum((u_true - u_est) ** 2))
    if err == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(err / ref), NMSE_FLOOR_DB)


def _fir_bandpass(lo: float, hi: float, fs: float, taps: int) -> np.ndarray:
    return firwin(taps, [lo, hi], fs=fs, pass_zero=False)


def band_split(signals: np.ndarray, fs: float, bands, mode: str = "fir",
               taps: int = 0) -> list[np.ndarray]:
    """Per-band versions of row signals (P, N).

    fir: zero-phase odd-length bandpass applied identically per row
    ('same' convolution of a linear-phase filter).  fft: hard
    rectangular masks on rfft bins, lo <= f < hi with the top band
    closed; bands tiling [0, fs/2] then partition the signal exactly.
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    n = signals.shape[1]
    out = []
    if mode == "fir":
        if taps <= 0:
            taps = min(101, n if n % 2 == 1 else n - 1)
        if taps % 2 == 0:
            raise ValueError("band filter length must be odd for zero phase")
        for lo, hi in bands:
            h = _fir_bandpass(lo, hi, fs, taps)
            filt = np.stack([np.convolve(row, h, mode="same") for row in signals])
            out.append(filt)
        return out
    if mode != "fft":
        raise ValueError(f"unknown band mode '{mode}'")
    spec = np.fft.rfft(signals, axis=1)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    top = max(hi for _, hi in bands)
    for lo, hi in bands:
        mask = (freqs >= lo) & ((freqs < hi) | ((hi == top) & (freqs == hi)))
        out.append(np.fft.irfft(spec * mask, n=n, axis=1))
    return out


def band_nmse(u_true: np.ndarray, u_est: np.ndarray, fs: float, bands,
              mode: str = "fir", taps: int = 0) -> list[tuple[float, float, float]]:
    """[(band_lo, band_hi, nmse_db)] with the identical filter applied
    to the truth and the estimate."""
    true_b = band_split(u_true, fs, bands, mode, taps)
    est_b = band_split(u_est, fs, bands, mode, taps)
    return [(lo, hi, nmse(tb, eb))
            for (lo, hi), tb, eb in zip(bands, true_b, est_b)]


# ------------------------------------------------------------------- report

@dataclass
class ReportRow:
    realization: int
    method: str
    band_lo: float | None   # None = full band
    band_hi: float | None
    nmse_db: float


@dataclass
class EvalReport:
    """All scored rows of one run plus run metadata."""

    rows: list = field(default_factory=list)
    seconds: dict = field(default_factory=dict)   # (realization, method) -> s
    config_hash: str = ""

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def full_band(self, method: str) -> list[float]:
        return [r.nmse_db for r in self.rows
                if r.method == method and r.band_lo is None]

    def mean_nmse(self, method: str) -> float:
        return float(np.mean(self.full_band(method)))

    def median_nmse(self, method: str) -> float:
        return float(median(self.full_band(method)))


def write_report_csv(path, report: EvalReport) -> None:
    """Deterministic scores table: full-band rows have empty band columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["realization", "method", "band_lo", "band_hi", "nmse_db"])
        for r in report.rows:
            lo = "" if r.band_lo is None else repr(float(r.band_lo))
            hi = "" if r.band_hi is None else repr(float(r.band_hi))
            writer.writerow([r.realization, r.method, lo, hi, repr(float(r.nmse_db))])


def write_timing_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["realization", "method", "seconds"])
        for (realization, method), sec in report.seconds.items():
            writer.writerow([realization, method, f"{sec:.3f}"])


# --------------------------------------------------------------------- run

def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def method_label(method: str, n_colloc: int) -> str:
    return f"{METHOD_DKPDE}{n_colloc}" if method == METHOD_DKPDE else method


def fit_predict(config: ExperimentConfig, method: str, data: SoundFieldData,
                xhat: np.ndarray, train_seed: int, net_seed: int,
                n_colloc: int, out_dir: Path | None = None,
                tag: str = "") -> tuple[np.ndarray, TrainState | None]:
    """Fit one method on one realization and predict at xhat.

    The posterior conditions on the eval batch's measurements; deep
    methods first learn hyperparameters from all batches.  The diffuse
    baseline performs zero optimizer steps by construction.
    """
    train_data = data.batch_dataset(config.eval_batch)
    sigma = config.resolved_noise_std()
    if method == METHOD_DIFFUSE:
        scale = (config.diffuse_scale if config.diffuse_scale > 0
                 else float(np.var(train_data.y)))
        kernel = DiffuseKernel(
            diffuse_freqs(config.diffuse_n_freqs, config.band[0], config.band[1]),
            c=config.speed_of_sound, scale=scale)
        model = GPModel(kernel, sigma)
        return posterior_mean(model, train_data, xhat), None

    sigma_kappa = (config.sigma_kappa_init if config.sigma_kappa_init > 0
                   else float(np.std(train_data.y)))
    sigma_z = config.sigma_z if config.sigma_z > 0 else None
    params = ModelParams.create(
        config.net_config(), net_seed, ell=config.ell_init,
        sigma_kappa=sigma_kappa, noise_std=sigma,
        source_noise_std=sigma_z, train_noise=config.train_noise,
        train_source_noise=config.train_sigma_z)
    op = WaveOperatorSpec(c=config.speed_of_sound)
    batches = [data.batch_dataset(b) for b in range(config.n_batches)]
    lo, hi = data.scenario.array_bounds()
    tcfg = config.train_config(n_colloc if method == METHOD_DKPDE else 0, train_seed)
    state = train(params, batches, tcfg, op,
                  colloc_region=(lo, hi), colloc_tspan=(0.0, data.scenario.batch_span))
    trained = state.params
    if out_dir is not None:
        save_train_state(out_dir / f"state_{tag}.npz", state)
        save_checkpoint(out_dir / f"net_{tag}.ckpt", trained.net_config,
                        trained.net().params)
        write_loss_csv(out_dir / f"loss_{tag}.csv", state, include_seconds=False)
    kernel = DeepKernel(trained.net(), trained.hyper(), op)
    model = GPModel(kernel, trained.noise_std(), trained.source_noise_std())
    return posterior_mean(model, train_data, xhat), state


def run(config: ExperimentConfig, out_dir, methods=None, seed=None,
        colloc=None, save_datasets: bool = True) -> EvalReport:
    """Full experiment: per realization, simulate once and score every
    method on identical data.  Writes report.csv, timing.csv, loss
    traces, checkpoints, and figures under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = tuple(methods) if methods is not None else config.method
    for m in methods:
        if m not in _KNOWN_METHODS:
            raise ValueError(f"unknown method '{m}'")
    base_seed = config.seed if seed is None else seed
    n_colloc = colloc if colloc is not None else config.colloc
    if METHOD_DKPDE in methods and n_colloc <= 0:
        raise ValueError("the collocation method needs colloc > 0")

    report = EvalReport(config_hash=config.config_hash())
    losses: dict[str, list] = {}
    for r in range(config.realizations):
        data = simulate(config.scenario(_derived_seed(base_seed, r, 0)))
        if save_datasets:
            save_dataset(out / f"dataset_r{r}.npz", data)
        xhat, y_true = data.eval_points(config.eval_batch)
        p, n = data.eval_clean.shape[1:]
        for method in methods:
            label = method_label(method, n_colloc)
            t0 = time.perf_counter()
            y_hat, state = fit_predict(
                config, method, data, xhat,
                train_seed=_derived_seed(base_seed, r, 1),
                net_seed=_derived_seed(base_seed, r, 2),
                n_colloc=n_colloc, out_dir=out, tag=f"{label}_r{r}")
            report.seconds[(r, label)] = time.perf_counter() - t0
            report.rows.append(ReportRow(r, label, None, None,
                                         nmse(y_true, y_hat)))
            for lo, hi, db in band_nmse(y_true.reshape(p, n),
                                        y_hat.reshape(p, n), config.fs,
                                        config.bands, config.band_filter,
                                        config.band_taps):
                report.rows.append(ReportRow(r, label, lo, hi, db))
            if state is not None:
                losses.setdefault(label, []).append(state.loss_history)

    write_report_csv(out / "report.csv", report)
    write_timing_csv(out / "timing.csv", report)
    (out / "run_meta.txt").write_text(
        f"config_hash {report.config_hash}\n"
        f"methods {' '.join(method_label(m, n_colloc) for m in methods)}\n"
        f"realizations {config.realizations}\n"
        f"seed {base_seed}\n")
    from . import figures
    figures.render_report_figures(out, report, losses)
    return report
