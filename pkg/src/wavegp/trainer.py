"""Marginal-likelihood training of the deep kernel.

One gradient step = one batch: build the objective on a fresh tape,
backward, Adam update.  When collocation is enabled the points are
redrawn every step from a per-step seeded stream, so a run is
reproducible bit for bit on one thread and resuming from a checkpoint
replays the identical draw sequence.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteGradient, Tape, Var
from .featurenet import SirenConfig, SirenNet, SirenParams, init
from .gp import CollocationSet, Dataset, GPModel, nll_joint_schur, nll_simple, sample_collocation
from .kernels import DeepKernel, KernelHyper, WaveOperatorSpec

BATCH_CYCLE = "cycle"
BATCH_SINGLE = "single"


@dataclass
class TrainConfig:
    epochs: int = 20000
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_colloc: int = 0              # 0 = no collocation term
    batch_strategy: str = BATCH_CYCLE
    seed: int = 0
    grad_clip: float = 0.0         # 0 = off; else global-norm ceiling
    checkpoint_interval: int = 0   # 0 = only at the end

    def __post_init__(self):
        if self.batch_strategy not in (BATCH_CYCLE, BATCH_SINGLE):
            raise ValueError(f"unknown batch strategy: {self.batch_strategy}")
        if self.epochs < 0 or self.n_colloc < 0:
            raise ValueError("epochs and n_colloc must be non-negative")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("adam betas must lie in (0, 1)")


@dataclass
class ModelParams:
    """Everything the optimizer sees: network weights, log length-scale,
    log kernel scale, log noise levels (the last two optionally fixed)."""

    net_config: SirenConfig
    weights: list
    biases: list
    log_ell: np.ndarray
    log_sigma_kappa: np.ndarray
    log_noise: np.ndarray
    log_source_noise: np.ndarray
    train_noise: bool = False
    train_source_noise: bool = False

    @classmethod
    def create(cls, net_config: SirenConfig, seed, ell: float = 1.0,
               sigma_kappa: float = 1.0, noise_std: float = 1e-2,
               source_noise_std: float | None = None,
               train_noise: bool = False,
               train_source_noise: bool = False) -> "ModelParams":
        """Fresh parameters; source_noise_std defaults to 1e-2 * sigma_kappa."""
        net = init(net_config, seed)
        if source_noise_std is None:
            source_noise_std = 1e-2 * sigma_kappa
        return cls(
            net_config=net_config,
            weights=net.weights,
            biases=net.biases,
            log_ell=np.float64(math.log(ell)),
            log_sigma_kappa=np.float64(math.log(sigma_kappa)),
            log_noise=np.float64(math.log(noise_std)),
            log_source_noise=np.float64(math.log(source_noise_std)),
            train_noise=train_noise,
            train_source_noise=train_source_noise,
        )

    def leaves(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in a fixed order."""
        out = []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{l}", w))
            out.append((f"b{l}", b))
        out.append(("log_ell", self.log_ell))
        out.append(("log_sigma_kappa", self.log_sigma_kappa))
        if self.train_noise:
            out.append(("log_noise", self.log_noise))
        if self.train_source_noise:
            out.append(("log_source_noise", self.log_source_noise))
        return out

    def n_params(self) -> int:
        return int(sum(np.size(arr) for _, arr in self.leaves()))

    def clone(self) -> "ModelParams":
        """Independent copy; training a clone never touches the original."""
        return ModelParams(
            net_config=self.net_config,
            weights=[np.array(w) for w in self.weights],
            biases=[np.array(b) for b in self.biases],
            log_ell=np.float64(self.log_ell),
            log_sigma_kappa=np.float64(self.log_sigma_kappa),
            log_noise=np.float64(self.log_noise),
            log_source_noise=np.float64(self.log_source_noise),
            train_noise=self.train_noise,
            train_source_noise=self.train_source_noise,
        )

    def set_leaves(self, values: list[np.ndarray]) -> None:
        """Write a leaf list (same order as leaves()) back into place."""
        n_layers = len(self.weights)
        for l in range(n_layers):
            self.weights[l] = values[2 * l]
            self.biases[l] = values[2 * l + 1]
        k = 2 * n_layers
        self.log_ell = values[k]
        self.log_sigma_kappa = values[k + 1]
        k += 2
        if self.train_noise:
            self.log_noise = values[k]
            k += 1
        if self.train_source_noise:
            self.log_source_noise = values[k]

    def noise_std(self) -> float:
        return float(np.exp(self.log_noise))

    def source_noise_std(self) -> float:
        return float(np.exp(self.log_source_noise))

    def net(self) -> SirenNet:
        return SirenNet(self.net_config,
                        SirenParams(list(self.weights), list(self.biases)))

    def hyper(self) -> KernelHyper:
        return KernelHyper(log_sigma_kappa=float(self.log_sigma_kappa),
                           log_ell=float(self.log_ell))


def build_loss(template: ModelParams, leaf_values: list, data: Dataset,
               colloc: CollocationSet | None, op: WaveOperatorSpec):
    """Objective as a pure function of the leaf list.

    `leaf_values` entries may be Vars (training / analytic gradients)
    or plain arrays (finite-difference probes); order must match
    template.leaves().  The same function serves nll_simple (colloc
    None/empty) and the collocation objective.
    """
    n_layers = len(template.weights)
    sp = SirenParams(list(leaf_values[0:2 * n_layers:2]),
                     list(leaf_values[1:2 * n_layers:2]))
    k = 2 * n_layers
    hyper = KernelHyper(log_sigma_kappa=leaf_values[k + 1], log_ell=leaf_values[k])
    k += 2
    if template.train_noise:
        noise = ad.exp(leaf_values[k])
        k += 1
    else:
        noise = template.noise_std()
    if template.train_source_noise:
        source_noise = ad.exp(leaf_values[k])
    else:
        source_noise = template.source_noise_std()
    kernel = DeepKernel(SirenNet(template.net_config, sp), hyper, op)
    model = GPModel(kernel, noise, source_noise)
    if colloc is None or len(colloc) == 0:
        return nll_simple(model, data)
    return nll_joint_schur(model, data, colloc)


@dataclass
class TrainState:
    params: ModelParams
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    loss_history: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        params = params.clone()
        leaves = params.leaves()
        return cls(params=params,
                   m=[np.zeros_like(arr) for _, arr in leaves],
                   v=[np.zeros_like(arr) for _, arr in leaves])


def adam_step(state: TrainState, grads: list[np.ndarray], config: TrainConfig) -> None:
    """Standard bias-corrected Adam update, in place.

    Raises NonFiniteGradient naming the offending leaf before any
    parameter is touched.
    """
    leaves = state.params.leaves()
    if len(grads) != len(leaves):
        raise ValueError("gradient list does not match parameter leaves")
    for (name, _), g in zip(leaves, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in leaf '{name}'")
    if config.grad_clip > 0.0:
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if gnorm > config.grad_clip:
            scale = config.grad_clip / gnorm
            grads = [g * scale for g in grads]
    t = state.step + 1
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    new_leaves = []
    for i, ((name, p), g) in enumerate(zip(leaves, grads)):
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new_leaves.append(p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps))
    state.params.set_leaves(new_leaves)
    state.step = t


def train(params: ModelParams, batches: list[Dataset], config: TrainConfig,
          op: WaveOperatorSpec, colloc_region=None, colloc_tspan=None,
          state: TrainState | None = None,
          checkpoint_path=None) -> TrainState:
    """Run (or resume) training; returns the final state.

    With n_colloc > 0 a fresh uniform collocation set is drawn every
    step from region x tspan using a stream keyed on (seed, step).
    batch_strategy 'cycle' walks the batch list round-robin; 'single'
    always uses batches[0].
    """
    if not batches:
        raise ValueError("need at least one batch")
    if config.n_colloc > 0 and (colloc_region is None or colloc_tspan is None):
        raise ValueError("collocation enabled but no region/tspan given")
    if state is None:
        state = TrainState.fresh(params)

    for step in range(state.step, config.epochs):
        t0 = time.perf_counter()
        if config.batch_strategy == BATCH_CYCLE:
            data = batches[step % len(batches)]
        else:
            data = batches[0]
        colloc = None
        if config.n_colloc > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence(config.seed, spawn_key=(step,)))
            colloc = sample_collocation(colloc_region, colloc_tspan,
                                        config.n_colloc, rng)
        leaves = state.params.leaves()
        with Tape() as tape:
            leaf_vars = [Var(arr) for _, arr in leaves]
            loss = build_loss(state.params, leaf_vars, data, colloc, op)
            grads = ad.backward(loss, leaf_vars, tape)
        adam_step(state, grads, config)
        state.loss_history.append(float(loss.value))
        state.step_seconds.append(time.perf_counter() - t0)
        if (checkpoint_path is not None and config.checkpoint_interval > 0
                and state.step % config.checkpoint_interval == 0):
            save_train_state(checkpoint_path, state)
    if checkpoint_path is not None:
        save_train_state(checkpoint_path, state)
    return state


@dataclass
class GradCheckReport:
    simple_err: float
    joint_err: float
    n_params: int

    def ok(self, tol: float = 1e-5) -> bool:
        return self.simple_err < tol and self.joint_err < tol


def validate_gradients(params: ModelParams, data: Dataset,
                       colloc: CollocationSet, op: WaveOperatorSpec,
                       step: float = 1e-4) -> GradCheckReport:
    """Central-difference check of both objectives on a small model.

    The collocation set is held fixed during the check.  Refuses to run
    on more than 500 scalar parameters.
    """
    n = params.n_params()
    if n > 500:
        raise ValueError(f"gradient validation capped at 500 parameters, got {n}")
    if len(colloc) == 0:
        raise ValueError("gradient validation needs a non-empty collocation set")
    arrays = [np.array(arr, dtype=np.float64) for _, arr in params.leaves()]
    err_simple = ad.grad_check(
        lambda leaves: build_loss(params, leaves, data, None, op), arrays, step)
    err_joint = ad.grad_check(
        lambda leaves: build_loss(params, leaves, data, colloc, op), arrays, step)
    return GradCheckReport(err_simple, err_joint, n)


# ------------------------------------------------------------ persistence

def save_train_state(path, state: TrainState) -> None:
    """Full optimizer checkpoint (params + Adam moments) as .npz."""
    p = state.params
    cfg = p.net_config
    payload = {
        "depth": cfg.depth, "hidden": cfg.hidden, "out_dim": cfg.out_dim,
        "omega0": cfg.omega0, "c0": cfg.c0,
        "norm_scale": np.asarray(cfg.norm_scale),
        "norm_offset": np.asarray(cfg.norm_offset),
        "first_layer_init": cfg.first_layer_init,
        "log_ell": p.log_ell, "log_sigma_kappa": p.log_sigma_kappa,
        "log_noise": p.log_noise, "log_source_noise": p.log_source_noise,
        "train_noise": p.train_noise, "train_source_noise": p.train_source_noise,
        "step": state.step,
        "loss_history": np.asarray(state.loss_history),
        "step_seconds": np.asarray(state.step_seconds),
        "n_layers": len(p.weights),
    }
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        payload[f"w{l}"] = w
        payload[f"b{l}"] = b
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        payload[f"adam_m{i}"] = m
        payload[f"adam_v{i}"] = v
    np.savez(path, **payload)


def load_train_state(path) -> TrainState:
    with np.load(path, allow_pickle=False) as z:
        cfg = SirenConfig(
            depth=int(z["depth"]), hidden=int(z["hidden"]), out_dim=int(z["out_dim"]),
            omega0=float(z["omega0"]), c0=float(z["c0"]),
            norm_scale=tuple(z["norm_scale"]), norm_offset=tuple(z["norm_offset"]),
            first_layer_init=str(z["first_layer_init"]))
        n_layers = int(z["n_layers"])
        params = ModelParams(
            net_config=cfg,
            weights=[z[f"w{l}"] for l in range(n_layers)],
            biases=[z[f"b{l}"] for l in range(n_layers)],
            log_ell=np.float64(z["log_ell"]),
            log_sigma_kappa=np.float64(z["log_sigma_kappa"]),
            log_noise=np.float64(z["log_noise"]),
            log_source_noise=np.float64(z["log_source_noise"]),
            train_noise=bool(z["train_noise"]),
            train_source_noise=bool(z["train_source_noise"]))
        n_leaves = len(params.leaves())
        state = TrainState(
            params=params,
            m=[z[f"adam_m{i}"] for i in range(n_leaves)],
            v=[z[f"adam_v{i}"] for i in range(n_leaves)],
            step=int(z["step"]),
            loss_history=[float(x) for x in z["loss_history"]],
            step_seconds=[float(x) for x in z["step_seconds"]])
    return state


def write_loss_csv(path, state: TrainState, include_seconds: bool = True) -> None:
    """Per-step loss trace; the seconds column is optional so pipeline
    outputs stay byte-identical across repeat runs."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if include_seconds:
            writer.writerow(["step", "loss", "seconds"])
            for i, (loss, sec) in enumerate(zip(state.loss_history, state.step_seconds)):
                writer.writerow([i, repr(loss), f"{sec:.6f}"])
        else:
            writer.writerow(["step", "loss"])
            for i, loss in enumerate(state.loss_history):
                writer.writerow([i, repr(loss)])
