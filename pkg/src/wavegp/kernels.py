"""Covariance functions and Gram assembly.

Deep squared-exponential kernel: k(x, x') = s^2 exp(-|u - u'|^2 / (2 l^2))
with u = phi(x) a learned feature map.  The wave-operator blocks apply
L = laplacian_r - (1/c^2) d^2/dt^2, written as sum_i w_i d^2/dx_i^2 with
w = (1, 1, 1, -1/c^2), to one or both kernel arguments.

Derivative bookkeeping happens in feature space: with d = u - u' and
b = 1/l^2, the Gaussian derivative tensors w.r.t. d are (all times k)

    D1_a     = -b d_a
    D2_ab    =  b^2 d_a d_b - b delta_ab
    D3_abc   = -b^3 d_a d_b d_c + b^2 (delta_ab d_c + delta_ac d_b + delta_bc d_a)
    D4_abce  =  b^4 d_a d_b d_c d_e
               - b^3 (delta_ab d_c d_e + five more pairings)
               + b^2 (delta_ab delta_ce + delta_ac delta_be + delta_ae delta_bc)

and d/du = +d/dd, d/du' = -d/dd.  Chain rule through phi uses order-2
jets A = dphi/dx_i, B = d^2 phi/dx_i^2, so every contraction reduces to
inner products of feature-space vectors; derivative tensors above order
2 are never materialized in the fast path.  Everything runs on plain
arrays or on tape Vars unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad


class DegenerateGrid(Exception):
    """Duplicate measurement points with zero noise: Gram is singular."""


@dataclass
class KernelHyper:
    """Kernel amplitude and length-scale, stored as logs.

    Components may be floats or tape Vars; training operates on the
    logs so positivity is structural.
    """

    log_sigma_kappa: Any
    log_ell: Any

    @classmethod
    def from_values(cls, sigma_kappa: float, ell: float) -> "KernelHyper":
        if sigma_kappa <= 0 or ell <= 0:
            raise ValueError("kernel hyperparameters must be positive")
        return cls(math.log(sigma_kappa), math.log(ell))

    def variance(self):
        """sigma_kappa^2"""
        return ad.exp(2.0 * self.log_sigma_kappa)

    def beta(self):
        """1 / ell^2"""
        return ad.exp(-2.0 * self.log_ell)

    def numeric(self) -> tuple[float, float]:
        """(sigma_kappa, ell) as plain floats."""
        return (float(np.exp(ad.value_of(self.log_sigma_kappa))),
                float(np.exp(ad.value_of(self.log_ell))))


@dataclass(frozen=True)
class WaveOperatorSpec:
    """Coefficients of L = sum_i w_i d^2/dx_i^2 on (x, y, z, t)."""

    c: float = 343.0

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("wave speed must be positive")

    def weights(self) -> np.ndarray:
        return np.array([1.0, 1.0, 1.0, -1.0 / (self.c * self.c)])


# -------------------------------------------------- reference derivatives

@dataclass
class SEDerivs:
    """Derivative tensors of the squared-exponential w.r.t. d = u - v."""

    kappa: float
    d1: np.ndarray | None = None
    d2: np.ndarray | None = None
    d3: np.ndarray | None = None
    d4: np.ndarray | None = None


def se_feature_derivs(u, v, hyper: KernelHyper, order: int = 4) -> SEDerivs:
    """Closed-form Gaussian derivative tensors up to the given order.

    Reference/oracle path: materializes the full (h, h, ...) tensors,
    so keep h small.  The fast Gram path never calls this.
    """
    if not 0 <= order <= 4:
        raise ValueError("order must be in 0..4")
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    sk, ell = hyper.numeric()
    d = u - v
    b = 1.0 / (ell * ell)
    kappa = sk * sk * math.exp(-0.5 * b * float(d @ d))
    out = SEDerivs(kappa=kappa)
    if order >= 1:
        out.d1 = -b * d * kappa
    if order >= 2:
        eye = np.eye(d.size)
        out.d2 = (b * b * np.outer(d, d) - b * eye) * kappa
    if order >= 3:
        ddd = np.einsum("a,b,c->abc", d, d, d)
        sym1 = (np.einsum("ab,c->abc", eye, d)
                + np.einsum("ac,b->abc", eye, d)
                + np.einsum("bc,a->abc", eye, d))
        out.d3 = (-(b ** 3) * ddd + b * b * sym1) * kappa
    if order >= 4:
        dddd = np.einsum("a,b,c,e->abce", d, d, d, d)
        sym2 = (np.einsum("ab,c,e->abce", eye, d, d)
                + np.einsum("ac,b,e->abce", eye, d, d)
                + np.einsum("ae,b,c->abce", eye, d, d)
                + np.einsum("bc,a,e->abce", eye, d, d)
                + np.einsum("be,a,c->abce", eye, d, d)
                + np.einsum("ce,a,b->abce", eye, d, d))
        sym3 = (np.einsum("ab,ce->abce", eye, eye)
                + np.einsum("ac,be->abce", eye, eye)
                + np.einsum("ae,bc->abce", eye, eye))
        out.d4 = ((b ** 4) * dddd - (b ** 3) * sym2 + b * b * sym3) * kappa
    return out


# ------------------------------------------------------- scalar kernels

def _difference_view(feature_map):
    """Every kernel below depends on the features only through
    differences and coordinate derivatives, so evaluate through the
    map's difference view when it offers one.  This keeps the kernels
    bitwise invariant to (and exactly gradient-free in) parameters that
    cancel, instead of leaking cancellation residue."""
    view = getattr(feature_map, "difference_view", None)
    return view() if view is not None else feature_map


def deep_kernel(feature_map, hyper: KernelHyper, x, y):
    """k(x, y) through the feature map; exact s^2 at x == y, exactly
    symmetric in its arguments."""
    feature_map = _difference_view(feature_map)
    u = feature_map.forward(np.asarray(x, dtype=np.float64))
    v = feature_map.forward(np.asarray(y, dtype=np.float64))
    d = u - v
    s = ad.sum(d * d)
    return hyper.variance() * ad.exp(-0.5 * hyper.beta() * s)


def wave_cross(feature_map, hyper: KernelHyper, op: WaveOperatorSpec, x, xz):
    """(L applied to the second argument) k(x, xz), a single entry."""
    feature_map = _difference_view(feature_map)
    u = feature_map.forward(np.asarray(x, dtype=np.float64))
    jets = [feature_map.forward_jet(np.asarray(xz, dtype=np.float64), j)
            for j in range(4)]
    v = jets[0].v
    d = u - v
    beta = hyper.beta()
    kappa = hyper.variance() * ad.exp(-0.5 * beta * ad.sum(d * d))
    w = op.weights()
    acc = None
    for j in range(4):
        a, bb = jets[j].d1, jets[j].d2
        t1 = ad.sum(d * a)
        t2 = ad.sum(a * a)
        t3 = ad.sum(d * bb)
        term = w[j] * (beta * beta * t1 * t1 - beta * t2 + beta * t3)
        acc = term if acc is None else acc + term
    return kappa * acc


def wave_row(feature_map, hyper: KernelHyper, op: WaveOperatorSpec, x, xz):
    """(L applied to the first argument) k(x, xz); equals
    wave_cross with swapped arguments for a symmetric kernel."""
    feature_map = _difference_view(feature_map)
    jets = [feature_map.forward_jet(np.asarray(x, dtype=np.float64), i)
            for i in range(4)]
    v2 = feature_map.forward(np.asarray(xz, dtype=np.float64))
    u = jets[0].v
    d = u - v2
    beta = hyper.beta()
    kappa = hyper.variance() * ad.exp(-0.5 * beta * ad.sum(d * d))
    w = op.weights()
    acc = None
    for i in range(4):
        a, bb = jets[i].d1, jets[i].d2
        t1 = ad.sum(d * a)
        t2 = ad.sum(a * a)
        t3 = ad.sum(d * bb)
        term = w[i] * (beta * beta * t1 * t1 - beta * t2 - beta * t3)
        acc = term if acc is None else acc + term
    return kappa * acc


def wave_double(feature_map, hyper: KernelHyper, op: WaveOperatorSpec, x, xz):
    """(L applied to both arguments) k(x, xz), a single entry."""
    feature_map = _difference_view(feature_map)
    jets_u = [feature_map.forward_jet(np.asarray(x, dtype=np.float64), i)
              for i in range(4)]
    jets_v = [feature_map.forward_jet(np.asarray(xz, dtype=np.float64), j)
              for j in range(4)]
    u, v = jets_u[0].v, jets_v[0].v
    d = u - v
    beta = hyper.beta()
    b2 = beta * beta
    b3 = b2 * beta
    b4 = b2 * b2
    kappa = hyper.variance() * ad.exp(-0.5 * beta * ad.sum(d * d))
    w = op.weights()
    acc = None
    for i in range(4):
        a, bb = jets_u[i].d1, jets_u[i].d2
        da = ad.sum(d * a)
        na = ad.sum(a * a)
        db = ad.sum(d * bb)
        for j in range(4):
            ap, bp = jets_v[j].d1, jets_v[j].d2
            dap = ad.sum(d * ap)
            nap = ad.sum(ap * ap)
            dbp = ad.sum(d * bp)
            aap = ad.sum(a * ap)
            apb = ad.sum(ap * bb)
            bpa = ad.sum(bp * a)
            bpb = ad.sum(bp * bb)
            t4 = (b4 * dap * dap * da * da
                  - b3 * (nap * da * da + na * dap * dap + 4.0 * aap * da * dap)
                  + b2 * (nap * na + 2.0 * aap * aap))
            t3b = -b3 * dap * dap * db + b2 * (nap * db + 2.0 * apb * dap)
            t3a = -b3 * dbp * da * da + b2 * (2.0 * bpa * da + na * dbp)
            t2 = b2 * dbp * db - beta * bpb
            term = (w[i] * w[j]) * (t4 + t3b - t3a - t2)
            acc = term if acc is None else acc + term
    return kappa * acc


# ----------------------------------------------------- vectorized grams

def _rowdot_col(a, b):
    """Row-wise dot product as a column, shape (n, 1)."""
    return ad.reshape(ad.sum(a * b, axis=1), (-1, 1))


def _rowdot_row(a, b):
    """Row-wise dot product as a row, shape (1, n)."""
    return ad.reshape(ad.sum(a * b, axis=1), (1, -1))


def _sqdist_cross(u, v):
    un = _rowdot_col(u, u)
    vn = _rowdot_row(v, v)
    return un + vn - 2.0 * ad.matmul(u, ad.transpose(v))


def _sqdist_self(u):
    n = ad.value_of(u).shape[0]
    un = _rowdot_col(u, u)
    s = un + ad.reshape(un, (1, -1)) - 2.0 * ad.matmul(u, ad.transpose(u))
    # force exact symmetry, then pin the self-distances to exactly zero
    s = 0.5 * (s + ad.transpose(s))
    return s * (1.0 - np.eye(n))


def _se_from_sqdist(s, variance, beta):
    return variance * ad.exp(-0.5 * (beta * s))


def gram_values(feature_map, hyper: KernelHyper, x, x2=None):
    """Deep-kernel Gram; the self version is exactly symmetric with an
    exact s^2 diagonal."""
    feature_map = _difference_view(feature_map)
    u = feature_map.forward(np.asarray(x, dtype=np.float64))
    if x2 is None:
        s = _sqdist_self(u)
    else:
        v = feature_map.forward(np.asarray(x2, dtype=np.float64))
        s = _sqdist_cross(u, v)
    return _se_from_sqdist(s, hyper.variance(), hyper.beta())


def _wave_cross_block(u, jets_v, variance, beta, w):
    v = jets_v[0].v
    kappa = _se_from_sqdist(_sqdist_cross(u, v), variance, beta)
    acc = None
    for j in range(4):
        a, bb = jets_v[j].d1, jets_v[j].d2
        t1 = ad.matmul(u, ad.transpose(a)) - _rowdot_row(v, a)
        t2 = _rowdot_row(a, a)
        t3 = ad.matmul(u, ad.transpose(bb)) - _rowdot_row(v, bb)
        term = w[j] * (beta * beta * t1 * t1 - beta * t2 + beta * t3)
        acc = term if acc is None else acc + term
    return kappa * acc


def _wave_double_block(jets, variance, beta, w):
    v = jets[0].v
    kappa = _se_from_sqdist(_sqdist_self(v), variance, beta)
    b2 = beta * beta
    b3 = b2 * beta
    b4 = b2 * b2
    vt = ad.transpose(v)
    acc = None
    for i in range(4):
        a_i, b_i = jets[i].d1, jets[i].d2
        da = _rowdot_col(v, a_i) - ad.matmul(a_i, vt)
        db = _rowdot_col(v, b_i) - ad.matmul(b_i, vt)
        na = _rowdot_col(a_i, a_i)
        da2 = da * da
        for j in range(4):
            a_j, b_j = jets[j].d1, jets[j].d2
            dap = ad.matmul(v, ad.transpose(a_j)) - _rowdot_row(v, a_j)
            dbp = ad.matmul(v, ad.transpose(b_j)) - _rowdot_row(v, b_j)
            nap = _rowdot_row(a_j, a_j)
            aap = ad.matmul(a_i, ad.transpose(a_j))
            apb = ad.matmul(b_i, ad.transpose(a_j))
            bpa = ad.matmul(a_i, ad.transpose(b_j))
            bpb = ad.matmul(b_i, ad.transpose(b_j))
            dap2 = dap * dap
            t4 = (b4 * dap2 * da2
                  - b3 * (nap * da2 + na * dap2 + 4.0 * aap * da * dap)
                  + b2 * (nap * na + 2.0 * aap * aap))
            t3b = -b3 * dap2 * db + b2 * (nap * db + 2.0 * apb * dap)
            t3a = -b3 * dbp * da2 + b2 * (2.0 * bpa * da + na * dbp)
            t2 = b2 * dbp * db - beta * bpb
            term = (w[i] * w[j]) * (t4 + t3b - t3a - t2)
            acc = term if acc is None else acc + term
    k = kappa * acc
    return 0.5 * (k + ad.transpose(k))


def gram_cross_wave(feature_map, hyper: KernelHyper, op: WaveOperatorSpec, x, xz):
    """(N, Nz) block of (L on the second argument) k; rows are
    measurement points, columns collocation points."""
    feature_map = _difference_view(feature_map)
    u = feature_map.forward(np.asarray(x, dtype=np.float64))
    jets = [feature_map.forward_jet(np.asarray(xz, dtype=np.float64), j)
            for j in range(4)]
    return _wave_cross_block(u, jets, hyper.variance(), hyper.beta(), op.weights())


def gram_wave_wave(feature_map, hyper: KernelHyper, op: WaveOperatorSpec, xz):
    """(Nz, Nz) block of (L on both arguments) k; exactly symmetric."""
    feature_map = _difference_view(feature_map)
    jets = [feature_map.forward_jet(np.asarray(xz, dtype=np.float64), j)
            for j in range(4)]
    return _wave_double_block(jets, hyper.variance(), hyper.beta(), op.weights())


# ---------------------------------------------------------- joint gram

@dataclass
class JointGram:
    """Blocks of the stacked measurement + collocation covariance.

    kuu has the measurement noise variance on its diagonal, kzz the
    collocation noise variance; kzu is the exact transpose of kuz.
    """

    kuu: Any
    kuz: Any
    kzu: Any
    kzz: Any

    def dense(self) -> np.ndarray:
        return np.block([
            [ad.value_of(self.kuu), ad.value_of(self.kuz)],
            [ad.value_of(self.kzu), ad.value_of(self.kzz)],
        ])


def assemble_joint(feature_map, hyper: KernelHyper, op: WaveOperatorSpec,
                   x, xz, noise_std, source_noise_std) -> JointGram:
    """Build all four joint-Gram blocks.

    Raises DegenerateGrid when duplicate measurement points meet zero
    measurement noise (the Gram is then singular beyond jitter rescue).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 4:
        raise ValueError(f"measurement points must be (N, 4), got {x.shape}")
    n = x.shape[0]
    if float(ad.value_of(noise_std)) == 0.0 and len(np.unique(x, axis=0)) < n:
        raise DegenerateGrid("duplicate measurement points with zero noise")

    feature_map = _difference_view(feature_map)
    u = feature_map.forward(x)
    variance = hyper.variance()
    beta = hyper.beta()
    kuu = _se_from_sqdist(_sqdist_self(u), variance, beta) \
        + ad.power(noise_std, 2.0) * np.eye(n)

    xz = np.asarray(xz, dtype=np.float64).reshape(-1, 4)
    nz = xz.shape[0]
    if nz == 0:
        return JointGram(kuu, np.zeros((n, 0)), np.zeros((0, n)), np.zeros((0, 0)))
    jets = [feature_map.forward_jet(xz, j) for j in range(4)]
    w = op.weights()
    kuz = _wave_cross_block(u, jets, variance, beta, w)
    kzu = ad.transpose(kuz)
    kzz = _wave_double_block(jets, variance, beta, w) \
        + ad.power(source_noise_std, 2.0) * np.eye(nz)
    return JointGram(kuu, kuz, kzu, kzz)


# -------------------------------------------------------- diffuse kernel

def diffuse_freqs(n: int = 1025, lo: float = 50.0, hi: float = 1000.0) -> np.ndarray:
    return np.linspace(lo, hi, n)


def diffuse_kernel(x, xz, freqs: np.ndarray, c: float = 343.0) -> float:
    """Ideal diffuse-field spacetime covariance, one entry.

    Mean over the frequency grid of sinc(2 pi f dr / c) cos(2 pi f dt);
    equals 1 at coincidence.
    """
    x = np.asarray(x, dtype=np.float64)
    xz = np.asarray(xz, dtype=np.float64)
    dr = float(np.linalg.norm(x[:3] - xz[:3]))
    dt = float(x[3] - xz[3])
    args_r = 2.0 * np.pi * freqs * dr / c
    args_t = 2.0 * np.pi * freqs * dt
    return float(np.mean(np.sinc(args_r / np.pi) * np.cos(args_t)))


def diffuse_gram(x1, x2, freqs: np.ndarray, c: float = 343.0,
                 scale: float = 1.0) -> np.ndarray:
    """Diffuse-kernel Gram, frequency loop accumulated in place to keep
    memory flat.  Symmetric (bitwise) when x1 is x2."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    r = cdist(x1[:, :3], x2[:, :3])
    dt = x1[:, 3:4] - x2[None, :, 3]
    acc = np.zeros_like(r)
    two_pi = 2.0 * np.pi
    for f in freqs:
        acc += np.sinc(two_pi * f / c * r / np.pi) * np.cos(two_pi * f * dt)
    acc *= scale / len(freqs)
    return acc


class DeepKernel:
    """Learned-feature kernel plus its wave-operator blocks."""

    def __init__(self, feature_map, hyper: KernelHyper, op: WaveOperatorSpec):
        self.feature_map = feature_map
        self.hyper = hyper
        self.op = op

    def gram(self, x, x2=None):
        return gram_values(self.feature_map, self.hyper, x, x2)

    def joint(self, x, xz, noise_std, source_noise_std) -> JointGram:
        return assemble_joint(self.feature_map, self.hyper, self.op,
                              x, xz, noise_std, source_noise_std)


class DiffuseKernel:
    """Training-free diffuse-field baseline kernel."""

    def __init__(self, freqs: np.ndarray | None = None, c: float = 343.0,
                 scale: float = 1.0):
        self.freqs = diffuse_freqs() if freqs is None else np.asarray(freqs, float)
        self.c = c
        self.scale = float(scale)

    def gram(self, x, x2=None):
        x2 = x if x2 is None else x2
        return diffuse_gram(x, x2, self.freqs, self.c, self.scale)
