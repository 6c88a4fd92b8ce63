"""GP inference: posteriors, marginal-likelihood objectives, collocation."""

import math

import numpy as np
import pytest

from wavegp import autodiff as ad
from wavegp import linalg
from wavegp.featurenet import (IdentityFeatureMap, SirenConfig, SirenNet,
                               init, normalization_for)
from wavegp.gp import (CollocationSet, Dataset, GPModel, SchurNotPD,
                       nll_joint_schur, nll_simple, posterior_cov,
                       posterior_mean, sample_collocation)
from wavegp.kernels import (DeepKernel, JointGram, KernelHyper,
                            WaveOperatorSpec)


def _val(x):
    return float(ad.value_of(x))


def _desk_model(seed=3, sigma_kappa=1.2, ell=0.9, noise=0.1, sigma_z=0.05,
                c=343.0):
    scale, offset = normalization_for((0.0, 0.0, 0.0), 0.6, 0.02)
    cfg = SirenConfig(depth=3, hidden=8, out_dim=6, omega0=2.0,
                      norm_scale=scale, norm_offset=offset)
    net = SirenNet(cfg, init(cfg, seed))
    kernel = DeepKernel(net, KernelHyper.from_values(sigma_kappa, ell),
                        WaveOperatorSpec(c=c))
    return GPModel(kernel, noise, sigma_z)


def _desk_points(rng, n):
    r = rng.uniform(-0.5, 0.5, size=(n, 3))
    t = rng.uniform(0.0, 0.02, size=(n, 1))
    return np.concatenate([r, t], axis=1)


class _DiagKernel:
    """Unit test stand-in: k(x, x) = variance, zero across points."""

    def __init__(self, variance):
        self.variance = variance

    def gram(self, x, x2=None):
        x = np.asarray(x, dtype=np.float64)
        if x2 is None:
            return self.variance * np.eye(x.shape[0])
        return np.zeros((x.shape[0], np.asarray(x2).shape[0]))


# ------------------------------------------------------------- containers

def test_dataset_validation():
    x = np.zeros((3, 4))
    data = Dataset(x, np.arange(3.0))
    assert len(data) == 3
    with pytest.raises(ValueError):
        Dataset(x, np.arange(4.0))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 3)), np.arange(3.0))
    with pytest.raises(ValueError):
        Dataset(x, np.array([0.0, np.nan, 1.0]))


def test_collocation_targets_are_zero():
    colloc = CollocationSet(np.random.default_rng(0).normal(size=(5, 4)))
    assert len(colloc) == 5
    assert colloc.z.shape == (5,)
    assert np.all(colloc.z == 0.0)


# ------------------------------------------------------------- sampling

def test_sample_collocation_bounds_and_determinism():
    region = (np.array([-0.2, -0.3, 0.1]), np.array([0.4, 0.1, 0.5]))
    tspan = (0.002, 0.008)
    a = sample_collocation(region, tspan, 64, np.random.default_rng(9))
    b = sample_collocation(region, tspan, 64, np.random.default_rng(9))
    assert np.array_equal(a.xz, b.xz)
    rng = np.random.default_rng(9)
    c1 = sample_collocation(region, tspan, 64, rng)
    c2 = sample_collocation(region, tspan, 64, rng)
    assert not np.array_equal(c1.xz, c2.xz)
    lo = np.array([-0.2, -0.3, 0.1, 0.002])
    hi = np.array([0.4, 0.1, 0.5, 0.008])
    assert np.all(a.xz >= lo) and np.all(a.xz <= hi)


def test_sample_collocation_empty_consumes_no_randomness():
    region = (np.zeros(3), np.ones(3))
    rng = np.random.default_rng(33)
    empty = sample_collocation(region, (0.0, 1.0), 0, rng)
    assert len(empty) == 0 and empty.xz.shape == (0, 4)
    assert np.array_equal(rng.uniform(size=5),
                          np.random.default_rng(33).uniform(size=5))
    with pytest.raises(ValueError):
        sample_collocation((np.ones(3), np.zeros(3)), (0.0, 1.0), 4, rng)


# ------------------------------------------------------------ posteriors

def test_posterior_mean_zero_and_scalar_case():
    model = _desk_model()
    rng = np.random.default_rng(5)
    x = _desk_points(rng, 6)
    zero = posterior_mean(model, Dataset(x, np.zeros(6)), x)
    assert np.all(zero == 0.0)

    x0 = x[:1]
    y0 = 1.7
    got = posterior_mean(model, Dataset(x0, [y0]), x0)[0]
    sk2 = 1.2 ** 2
    want = y0 * sk2 / (sk2 + 0.1 ** 2)
    assert abs(got - want) <= 1e-12 * abs(want)


def test_posterior_mean_linear_in_observations():
    model = _desk_model(seed=7)
    rng = np.random.default_rng(13)
    x = _desk_points(rng, 12)
    xq = _desk_points(rng, 9)
    y1 = rng.normal(size=12)
    y2 = rng.normal(size=12)
    lhs = posterior_mean(model, Dataset(x, y1 + y2), xq)
    rhs = posterior_mean(model, Dataset(x, y1), xq) \
        + posterior_mean(model, Dataset(x, y2), xq)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_posterior_cov_shape_bounds_and_y_independence():
    model = _desk_model(seed=9)
    rng = np.random.default_rng(17)
    x = _desk_points(rng, 10)
    xq = _desk_points(rng, 7)
    cov1 = posterior_cov(model, Dataset(x, rng.normal(size=10)), xq)
    cov2 = posterior_cov(model, Dataset(x, rng.normal(size=10)), xq)
    assert np.array_equal(cov1, cov2)  # never reads the observations
    assert np.array_equal(cov1, cov1.T)
    sk2 = 1.2 ** 2
    assert np.all(np.diag(cov1) >= -1e-10)
    assert np.all(np.diag(cov1) <= sk2 + 1e-10)


def test_posterior_cov_prior_recovery_far_away():
    """Identity feature map: a very distant query point reverts to the
    prior variance."""
    kernel = DeepKernel(IdentityFeatureMap(),
                        KernelHyper.from_values(1.3, 0.5), WaveOperatorSpec())
    model = GPModel(kernel, 0.1, 0.0)
    rng = np.random.default_rng(19)
    x = rng.uniform(-1, 1, (8, 4))
    far = np.array([[50.0, 0.0, 0.0, 0.0]])
    var = posterior_cov(model, Dataset(x, rng.normal(size=8)), far)[0, 0]
    assert abs(var - 1.3 ** 2) < 1e-10


def test_posterior_cov_interpolates_noiseless_data():
    model = _desk_model(seed=11, noise=1e-6)
    rng = np.random.default_rng(23)
    x = _desk_points(rng, 5)
    cov = posterior_cov(model, Dataset(x, rng.normal(size=5)), x)
    assert np.all(np.diag(cov) < 1e-8)


# ------------------------------------------------------------ objectives

def test_nll_simple_trivial_cases():
    x = np.array([[0.0, 0, 0, 0], [1.0, 0, 0, 0], [0.0, 1, 0, 0]])
    model = GPModel(_DiagKernel(0.36), math.sqrt(0.64))
    assert _val(nll_simple(model, Dataset(x, np.zeros(3)))) == 0.0
    one = GPModel(_DiagKernel(1.0), 0.0)
    got = _val(nll_simple(one, Dataset(x[:1], [2.0])))
    assert got == 4.0


def test_nll_simple_matches_dense_oracle():
    model = _desk_model(seed=13)
    rng = np.random.default_rng(29)
    x = _desk_points(rng, 10)
    y = rng.normal(size=10)
    got = _val(nll_simple(model, Dataset(x, y)))
    khat = ad.value_of(model.kernel.gram(x)) + 0.1 ** 2 * np.eye(10)
    want = float(y @ np.linalg.inv(khat) @ y + np.linalg.slogdet(khat)[1])
    rel = abs(got - want) / abs(want)
    print(f"nll_simple vs dense oracle rel: {rel:.3e}")
    assert rel < 1e-9


def test_nll_joint_empty_collocation_is_nll_simple():
    model = _desk_model(seed=15)
    rng = np.random.default_rng(31)
    data = Dataset(_desk_points(rng, 8), rng.normal(size=8))
    want = _val(nll_simple(model, data))
    assert _val(nll_joint_schur(model, data, None)) == want
    empty = CollocationSet(np.zeros((0, 4)))
    assert _val(nll_joint_schur(model, data, empty)) == want


def test_nll_joint_schur_matches_naive_stacked():
    model = _desk_model(seed=17, c=343.0)
    rng = np.random.default_rng(37)
    data = Dataset(_desk_points(rng, 40), rng.normal(size=40))
    colloc = CollocationSet(_desk_points(rng, 8))
    got = _val(nll_joint_schur(model, data, colloc))
    joint = model.kernel.joint(data.x, colloc.xz, 0.1, 0.05)
    dense = joint.dense()
    ytil = np.concatenate([data.y, np.zeros(8)])
    want = float(ytil @ np.linalg.inv(dense) @ ytil
                 + np.linalg.slogdet(dense)[1])
    rel = abs(got - want) / abs(want)
    print(f"schur vs naive stacked rel: {rel:.3e}")
    assert rel < 1e-8


def test_nll_joint_decouples_for_large_source_noise():
    """sigma_z -> inf reduces the joint objective to nll_simple plus the
    collocation block log-determinant."""
    rng = np.random.default_rng(41)
    data = Dataset(_desk_points(rng, 12), rng.normal(size=12))
    xz = _desk_points(rng, 5)
    simple = _val(nll_simple(_desk_model(seed=19), data))

    def excess(sigma_z):
        model = _desk_model(seed=19, sigma_z=sigma_z)
        joint = _val(nll_joint_schur(model, data, CollocationSet(xz)))
        blocks = model.kernel.joint(data.x, xz, 0.1, sigma_z)
        ld_zz = _val(linalg.logdet_psd(ad.value_of(blocks.kzz)))
        return abs(joint - ld_zz - simple)

    d1, d2, d3 = excess(1e2), excess(1e4), excess(1e6)
    print(f"decoupling excess: {d1:.3e} -> {d2:.3e} -> {d3:.3e}")
    # coupling decays like 1 / sigma_z^2
    assert d2 < 1e-3 * d1 and d3 < 1e-3 * d2
    assert d3 < 1e-8 * abs(simple)


def test_nll_joint_schur_not_pd():
    class _Broken:
        def joint(self, x, xz, noise, sigma_z):
            n = np.asarray(x).shape[0]
            return JointGram(np.eye(n), np.zeros((n, 2)), np.zeros((2, n)),
                             np.array([[1.0, 2.0], [2.0, 1.0]]))

    rng = np.random.default_rng(43)
    data = Dataset(_desk_points(rng, 4), rng.normal(size=4))
    colloc = CollocationSet(_desk_points(rng, 2))
    with pytest.raises(SchurNotPD):
        nll_joint_schur(GPModel(_Broken(), 0.1, 0.01), data, colloc)


# --------------------------------------------------- collocation value

def test_collocation_shrinks_wave_residual_variance():
    """Conditioning on zero-valued operator pseudo-observations can only
    reduce the posterior variance of the operator field."""
    model = _desk_model(seed=21, c=1.0)
    rng = np.random.default_rng(47)
    x = rng.uniform(-1.0, 1.0, (10, 4))
    y = rng.normal(size=10)
    xz = rng.uniform(-1.0, 1.0, (4, 4))
    sigma_z = 0.05
    joint = model.kernel.joint(x, xz, 0.1, sigma_z)
    kuu = ad.value_of(joint.kuu)
    kuz = ad.value_of(joint.kuz)
    kzz_noisy = ad.value_of(joint.kzz)
    kzz = kzz_noisy - sigma_z ** 2 * np.eye(4)

    var_without = np.diag(kzz - kuz.T @ np.linalg.solve(kuu, kuz))
    stacked = np.block([[kuu, kuz], [kuz.T, kzz_noisy]])
    cross = np.concatenate([kuz.T, kzz], axis=1)
    var_with = np.diag(kzz - cross @ np.linalg.solve(stacked, cross.T))
    assert np.all(var_with <= var_without + 1e-10)
    assert np.max(var_without - var_with) > 0.0
    assert np.all(var_with >= -1e-10)
