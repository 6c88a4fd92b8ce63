"""Gaussian-process regression on spacetime sound-field data.

Observations y = f(x) + noise with kernel k; the joint objective
additionally conditions on pseudo-observations (L f)(x_z) = 0 at
collocation points, where L is the wave operator.  Both negative log
marginal likelihoods drop the constant and the global 1/2 factor:

    nll = y^T (K + s^2 I)^{-1} y + log det(K + s^2 I)

The joint version is evaluated in Schur form so only the two diagonal
blocks are factored:

    y^T (Kuu_hat - Kuz Kzz_hat^{-1} Kzu)^{-1} y
      + log det(Kuu_hat) + log det(Kzz_hat - Kzu Kuu_hat^{-1} Kuz)

which is algebraically identical to the stacked objective with targets
(y, 0).  With an empty collocation set it IS nll_simple, same code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from . import linalg
from .kernels import assemble_joint


class SchurNotPD(Exception):
    """A Schur complement failed to factor; collocation noise too small
    relative to the wave-block conditioning."""


@dataclass
class Dataset:
    """Measurement locations (N, 4) spacetime rows and values (N,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x.ndim != 2 or self.x.shape[1] != 4:
            raise ValueError(f"dataset locations must be (N, 4), got {self.x.shape}")
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("locations and values disagree in length")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class CollocationSet:
    """Collocation locations; targets are structurally zero."""

    xz: np.ndarray
    z: np.ndarray = field(init=False)

    def __post_init__(self):
        self.xz = np.asarray(self.xz, dtype=np.float64).reshape(-1, 4)
        self.z = np.zeros(self.xz.shape[0])

    def __len__(self) -> int:
        return self.xz.shape[0]


@dataclass
class GPModel:
    """Kernel plus noise levels.

    kernel            exposes gram(x, x2=None); the deep kernel also
                      exposes joint(...) for the collocation objective
    noise_std         measurement noise sigma (float or tape Var)
    source_noise_std  collocation noise sigma_z (float or tape Var)
    """

    kernel: Any
    noise_std: Any
    source_noise_std: Any = 0.0


def sample_collocation(region, tspan, n: int, rng: np.random.Generator) -> CollocationSet:
    """Uniform spacetime draw: `region` is (lo, hi) corner triples,
    `tspan` is (t0, t1).  n = 0 consumes no randomness."""
    lo, hi = (np.asarray(v, dtype=np.float64) for v in region)
    t0, t1 = float(tspan[0]), float(tspan[1])
    if np.any(hi < lo) or t1 < t0:
        raise ValueError("collocation region is empty")
    if n == 0:
        return CollocationSet(np.zeros((0, 4)))
    low = np.array([lo[0], lo[1], lo[2], t0])
    high = np.array([hi[0], hi[1], hi[2], t1])
    return CollocationSet(rng.uniform(low, high, size=(n, 4)))


def _noisy_gram(model: GPModel, x):
    k = model.kernel.gram(x)
    n = ad.value_of(k).shape[0]
    return k + ad.power(model.noise_std, 2.0) * np.eye(n)


def posterior_mean(model: GPModel, data: Dataset, xhat) -> np.ndarray:
    """Posterior mean at query rows xhat; linear in the observations."""
    khat = ad.value_of(_noisy_gram(model, data.x))
    factor = linalg.factor_with_rescue(khat)
    alpha = linalg.solve(factor, data.y.reshape(-1, 1))
    ks = ad.value_of(model.kernel.gram(np.asarray(xhat, dtype=np.float64), data.x))
    return (ks @ alpha).reshape(-1)


def posterior_cov(model: GPModel, data: Dataset, xhat) -> np.ndarray:
    """Posterior covariance at query rows; never reads the observations."""
    xhat = np.asarray(xhat, dtype=np.float64)
    khat = ad.value_of(_noisy_gram(model, data.x))
    factor = linalg.factor_with_rescue(khat)
    ks = ad.value_of(model.kernel.gram(xhat, data.x))
    kss = ad.value_of(model.kernel.gram(xhat))
    cov = kss - ks @ linalg.solve(factor, ks.T)
    return 0.5 * (cov + cov.T)


def nll_simple(model: GPModel, data: Dataset):
    """Marginal-likelihood objective without collocation."""
    khat = _noisy_gram(model, data.x)
    y = data.y.reshape(-1, 1)
    q = linalg.solve_psd(khat, y)
    return ad.sum(y * q) + linalg.logdet_psd(khat)


def nll_joint_schur(model: GPModel, data: Dataset, colloc: CollocationSet | None):
    """Collocation-regularized objective in Schur form.

    Empty collocation set falls through to nll_simple (same code path,
    bitwise-equal value).  Raises SchurNotPD when a complement block
    cannot be factored even with jitter rescue.
    """
    if colloc is None or len(colloc) == 0:
        return nll_simple(model, data)
    joint = model.kernel.joint(data.x, colloc.xz,
                               model.noise_std, model.source_noise_std)
    y = data.y.reshape(-1, 1)
    try:
        m_data = joint.kuu - ad.matmul(joint.kuz, linalg.solve_psd(joint.kzz, joint.kzu))
        q = linalg.solve_psd(m_data, y)
        quad = ad.sum(y * q)
        ld_uu = linalg.logdet_psd(joint.kuu)
        m_z = joint.kzz - ad.matmul(joint.kzu, linalg.solve_psd(joint.kuu, joint.kuz))
        ld_schur = linalg.logdet_psd(m_z)
    except linalg.NotPositiveDefinite as e:
        raise SchurNotPD(str(e)) from e
    return quad + ld_uu + ld_schur
