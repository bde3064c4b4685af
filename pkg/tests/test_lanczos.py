import json

import numpy as np
import pytest
from scipy.linalg import eigh

from shardhess.lanczos import (
    SpectralDensity, Tridiagonal, delocalization, ghost_detect, lanczos, probe_vector, ritz,
    slq_density, total_variation, tridiagonal_perturbation,
)
from shardhess.objectives import random_symmetric
from shardhess.precision import quantize


def test_tridiagonal_shape_check():
    with pytest.raises(ValueError):
        Tridiagonal([1.0, 2.0], [0.5, 0.5])
    T = Tridiagonal([1.0, 2.0], [0.5])
    np.testing.assert_array_equal(T.to_dense(), [[1.0, 0.5], [0.5, 2.0]])


def test_full_run_reproduces_dense_spectrum():
    A = random_symmetric(40, 7)
    res = lanczos(A.__matmul__, 40, 40, seed=0)
    lam, gam = ritz(res.T)
    np.testing.assert_allclose(lam, eigh(A, eigvals_only=True), atol=1e-9)
    assert gam.sum() == pytest.approx(1.0, abs=1e-12)


def test_basis_orthonormal_and_recurrence():
    A = random_symmetric(30, 1)
    res = lanczos(A.__matmul__, 30, 12, seed=3)
    Q = res.basis.vectors
    np.testing.assert_allclose(Q @ Q.T, np.eye(12), atol=1e-12)
    np.testing.assert_allclose(Q @ A @ Q.T, res.T.to_dense(), atol=1e-10)


def test_ritz_values_interlace():
    A = random_symmetric(25, 2)
    res = lanczos(A.__matmul__, 25, 15, seed=1)
    for k in range(2, 15):
        small = ritz(Tridiagonal(res.T.alpha[:k - 1], res.T.beta[:k - 2]))[0]
        big = ritz(Tridiagonal(res.T.alpha[:k], res.T.beta[:k - 1]))[0]
        assert np.all(big[:-1] <= small + 1e-12) and np.all(small <= big[1:] + 1e-12)


def test_single_step_is_rayleigh_quotient(rng):
    A = random_symmetric(10, 5)
    v = rng.standard_normal(10)
    lam, gam = ritz(lanczos(A.__matmul__, 10, 1, v0=v).T)
    assert lam[0] == pytest.approx(v @ A @ v / (v @ v))
    assert gam[0] == 1.0


def test_breakdown_on_invariant_subspace():
    res = lanczos(np.eye(8).__matmul__, 8, 5, seed=0)
    assert res.breakdown and res.T.m == 1
    # two distinct eigenvalues: the Krylov space is two-dimensional
    res = lanczos(np.diag([1.0] * 4 + [3.0] * 4).__matmul__, 8, 6, seed=0)
    assert res.breakdown and res.T.m == 2
    np.testing.assert_allclose(ritz(res.T)[0], [1.0, 3.0])


def test_no_breakdown_flag_on_last_step():
    res = lanczos(np.eye(4).__matmul__, 4, 1, seed=0)
    assert not res.breakdown


def test_bf16_storage_rounds_basis():
    A = random_symmetric(20, 0)
    Q = lanczos(A.__matmul__, 20, 8, seed=0, storage="bf16").basis.vectors
    np.testing.assert_array_equal(Q, quantize(Q, "bf16"))
    norms = np.linalg.norm(Q, axis=1)
    assert np.all(np.abs(norms - 1) < 2 * 2.0**-8)


def test_window_arguments():
    A = random_symmetric(20, 0)
    a = lanczos(A.__matmul__, 20, 6, seed=0, reorth=3)
    b = lanczos(A.__matmul__, 20, 6, seed=0, reorth="window:3")
    np.testing.assert_array_equal(a.T.alpha, b.T.alpha)
    with pytest.raises(ValueError):
        lanczos(A.__matmul__, 20, 6, reorth=2, store_basis=False)
    with pytest.raises(ValueError):
        lanczos(A.__matmul__, 20, 21)


def test_inner_product_is_used():
    A = random_symmetric(10, 0)
    calls = []

    def inner(x, y):
        calls.append(1)
        return float(x @ y)

    lanczos(A.__matmul__, 10, 4, seed=0, reorth="none", inner=inner)
    # start normalisation plus alpha and beta per step
    assert len(calls) == 1 + 2 * 4


def test_probe_vectors():
    rng = np.random.default_rng(0)
    for dist in ("gaussian", "rademacher"):
        assert np.linalg.norm(probe_vector(50, rng, dist)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        probe_vector(5, rng, "uniform")


def test_delocalization_extremes():
    assert delocalization(np.eye(4)) == pytest.approx(1.0)
    assert delocalization(np.full((2, 16), 0.25)) == pytest.approx(16.0)


def test_slq_diagonal_nodes():
    d = np.arange(1.0, 33.0)
    dens = slq_density(np.diag(d).__matmul__, 32, 32, 1, seed=0)
    np.testing.assert_allclose(dens.nodes[0], d, atol=1e-9)


def test_slq_trace_estimate_unbiased():
    A = random_symmetric(30, 3) + 10 * np.eye(30)
    dens = slq_density(A.__matmul__, 30, 10, 400, seed=1)
    # Hutchinson on unit probes: dim * E[u^T A u] = tr(A); 400 probes give ~1% spread
    assert dens.trace_estimate() == pytest.approx(np.trace(A), rel=0.03)
    assert dens.moment(1) * 30 == pytest.approx(dens.trace_estimate())


def test_slq_deterministic_and_probe_order():
    A = random_symmetric(20, 3)
    a = slq_density(A.__matmul__, 20, 8, 3, seed=5)
    b = slq_density(A.__matmul__, 20, 8, 3, seed=5)
    for x, y in zip(a.nodes, b.nodes):
        np.testing.assert_array_equal(x, y)
    c = slq_density(A.__matmul__, 20, 8, 1, seed=5)
    np.testing.assert_array_equal(a.nodes[0], c.nodes[0])


def test_density_integrates_to_one():
    A = random_symmetric(20, 3)
    dens = slq_density(A.__matmul__, 20, 8, 4, seed=0)
    g = dens.grid(4001, pad=8)
    assert np.trapezoid(dens.density(g), g) == pytest.approx(1.0, abs=1e-6)
    assert dens.mass(-np.inf, np.inf) == pytest.approx(1.0)


def test_total_variation_bounds():
    A = random_symmetric(20, 3)
    a = slq_density(A.__matmul__, 20, 8, 2, seed=0)
    far = SpectralDensity([a.nodes[0] + 1e3], [a.weights[0]], 20, a.smoothing_sigma)
    assert total_variation(a, a) == pytest.approx(0.0, abs=1e-12)
    assert total_variation(a, far) == pytest.approx(1.0, abs=1e-6)


def test_outputs(tmp_path):
    dens = slq_density(np.diag(np.arange(1.0, 6.0)).__matmul__, 5, 5, 2, seed=0)
    dens.write_json(tmp_path / "s.json", {"config": {"x": 1}})
    d = json.loads((tmp_path / "s.json").read_text())
    assert d["config"] == {"x": 1} and d["probes"] == 2 and d["m"] == 5
    dens.write_stem_csv(tmp_path / "stem.csv")
    dens.write_density_csv(tmp_path / "density.csv", 11)
    assert (tmp_path / "stem.csv").read_text().splitlines()[0] == "probe,lambda,gamma"
    assert len((tmp_path / "density.csv").read_text().splitlines()) == 12


def test_ghost_detect_clusters_and_reference():
    nodes = np.array([1.0, 2.0, 5.0, 5.0 + 1e-9, 5.0 + 2e-9])
    rep = ghost_detect(nodes, tol=1e-6)
    assert rep.count == 1 and len(rep.clusters[0].values) == 3
    assert rep.clusters[0].splitting == pytest.approx(2e-9)
    assert ghost_detect(nodes, tol=1e-6, reference=[1.0, 2.0, 5.0, 5.0, 5.0]).count == 0
    assert ghost_detect(nodes[:3]).count == 0


def gapped_spectrum():
    return np.diag(np.concatenate([np.linspace(0.0, 1.0, 99), [10.0]]))


def test_ghosts_appear_without_reorth_in_bf16():
    H = gapped_spectrum()
    for seed in range(3):
        v0 = probe_vector(100, np.random.default_rng(seed))
        full = ritz(lanczos(H.__matmul__, 100, 60, v0=v0, reorth="full", storage="bf16").T)[0]
        none = ritz(lanczos(H.__matmul__, 100, 60, v0=v0, reorth="none", storage="bf16").T)[0]
        assert ghost_detect(none, storage="bf16", reference=full).count >= 1
        assert ghost_detect(full, storage="bf16", reference=np.diag(H)).count == 0


def test_backward_perturbation_zero_without_noise():
    A = random_symmetric(30, 0)
    v0 = probe_vector(30, np.random.default_rng(0))
    err = tridiagonal_perturbation(A.__matmul__, 30, 10, 0.0, np.random.default_rng(1), v0=v0, H=A)
    assert err < 1e-12
    with pytest.raises(ValueError):
        tridiagonal_perturbation(A.__matmul__, 30, 10, 0.1, np.random.default_rng(1), v0=v0)
