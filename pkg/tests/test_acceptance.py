"""End-to-end acceptance checks, one or more tests per criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import json
import math
import time

import numpy as np
import pytest

from shardhess.blockdiag import BlockPartition, block_diag_test, sample_probes
from shardhess.cli import main
from shardhess.costmodel import compare_step_times, dp_vs_fsdp
from shardhess.fdhvp import (
    NoiseModel, curvature_field, fd_error_sweep, hvp_central, kernel_average_reference,
    kernel_moment, optimal_epsilon, second_difference,
)
from shardhess.lanczos import (
    fd_lanczos_noise_scaling, ghost_detect, lanczos, probe_vector, ritz, slq_density,
    total_variation,
)
from shardhess.objectives import (
    QuadraticObjective, RippledSpec, block_coupled_matrix, make_mlp, make_rippled,
    random_symmetric,
)
from shardhess.optbench import adaptive_nesterov, fd_curvature_2x2, run_optimizer
from shardhess.precision import machine_eps
from shardhess.sharded import ShardedOperator, SimulatedCluster, audit_lanczos, partition, sharded_hvp

criterion = pytest.mark.criterion


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - b) / np.linalg.norm(b))


# 1 ---------------------------------------------------------------------------

@criterion(1, "FD-HVP exact on random quadratics")
def test_fd_hvp_exact_on_quadratics():
    rng = np.random.default_rng(0)
    worst = {}
    with Timer() as t:
        for k in range(20):
            dim = int(rng.integers(2, 65))
            A = random_symmetric(dim, k)
            q = QuadraticObjective(A)
            theta, v = rng.standard_normal(dim), rng.standard_normal(dim)
            for eps in 10.0 ** np.arange(-6, 0):
                err = rel(hvp_central(q, theta, v, eps), A @ v)
                worst[eps] = max(worst.get(eps, 0.0), err)
    print({f"{e:.0e}": f"{w:.2e}" for e, w in worst.items()})
    assert t.elapsed < 5
    assert max(worst.values()) < 1e-10, worst


# 2 ---------------------------------------------------------------------------

@criterion(2, "truncation/roundoff regimes and step rule")
def test_error_regimes_fp32():
    f = make_rippled(RippledSpec(b=0.05, omega=4.0, dims=1, a=1.0))
    with Timer() as t:
        sweep = fd_error_sweep(f, [0.7], [1.0], np.logspace(-8, 0, 81), precision="fp32")
        above, below = sweep.regime_slopes(upper=0.1)
    print(f"slopes above {above:.3f} below {below:.3f}, minimiser {sweep.minimizer():.3g}, "
          f"predicted {sweep.predicted_epsilon:.3g}")
    assert above == pytest.approx(2.0, abs=0.3)
    assert below == pytest.approx(-1.0, abs=0.3)
    assert abs(math.log10(sweep.minimizer() / sweep.predicted_epsilon)) <= 1.0
    assert t.elapsed < 30


@criterion(2, "truncation/roundoff regimes and step rule")
def test_step_rule_unit_norms():
    unit = NoiseModel(d3_grad_norm=1.0, grad_norm=1.0)
    assert optimal_epsilon(unit, machine_eps("fp32")) == pytest.approx(4.9e-3, rel=0.02)
    assert optimal_epsilon(unit, machine_eps("bf16")) == pytest.approx(1.6e-1, rel=0.03)


# 3 ---------------------------------------------------------------------------

@criterion(3, "noise law of the noise-optimal step")
def test_noise_law_exponent():
    f = make_rippled(RippledSpec(b=0.05, omega=4.0, dims=1, a=1.0))
    sigmas = np.array([1e-8, 1e-6, 1e-4])
    with Timer() as t:
        e_hat = [fd_error_sweep(f, [0.7], [1.0], np.logspace(-5, 0, 61), sigma_f=s,
                                estimator="second_difference", trials=200, seed=1).minimizer()
                 for s in sigmas]
    slope = np.polyfit(np.log(sigmas), np.log(e_hat), 1)[0]
    print(f"minimisers {e_hat}, exponent {slope:.3f}")
    assert slope == pytest.approx(0.25, abs=0.1)
    assert t.elapsed < 60


# 4 ---------------------------------------------------------------------------

def _kernel_cases():
    mlp = make_mlp([4, 8, 8, 2], n_points=32, n_batches=4, seed=0)
    theta0 = mlp.initial_params(0)
    rng = np.random.default_rng(7)
    yield ("quadratic", QuadraticObjective(random_symmetric(8, 3)),
           lambda: rng.standard_normal(8), 0.1)
    yield ("rippled", make_rippled(RippledSpec(b=0.05, omega=40.0, dims=2)),
           lambda: rng.uniform(-2, 2, 2), 0.05)
    yield ("mlp", mlp, lambda: theta0 + 0.1 * rng.standard_normal(mlp.dim), 1e-2)


@criterion(4, "second difference is a triangular-kernel average")
def test_kernel_identity():
    rng = np.random.default_rng(8)
    for name, f, point, eps in _kernel_cases():
        for _ in range(10):
            x = point()
            v = rng.standard_normal(f.dim)
            sd = second_difference(f, x, v, eps)
            ref = kernel_average_reference(curvature_field(f, x, v), eps)
            assert abs(sd - ref) <= 1e-6 * abs(ref), name


@criterion(4, "second difference is a triangular-kernel average")
@pytest.mark.parametrize("eps", [1e-3, 0.1, 1.0])
def test_kernel_second_moment(eps):
    assert kernel_moment(2, eps) == pytest.approx(eps**2 / 6, rel=1e-10, abs=1e-10)


# 5 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mlp_point():
    mlp = make_mlp([4, 8, 8, 2], n_points=32, n_batches=4, seed=0)
    return mlp, mlp.initial_params(0)


@criterion(5, "shard-local HVP equivalence and collective budget")
def test_shard_equivalence(mlp_point):
    mlp, theta = mlp_point
    v = np.random.default_rng(5).standard_normal(mlp.dim)
    ref = None
    for R in (1, 2, 4, 8):
        lay = partition(mlp.dim, R)
        out = lay.concat(sharded_hvp(mlp, lay.split(theta), lay.split(v), 1e-4, lay))
        if ref is None:
            ref = out
        assert rel(out, ref) < 1e-12, R


@criterion(5, "shard-local HVP equivalence and collective budget")
@pytest.mark.parametrize("R", [2, 4, 8])
@pytest.mark.parametrize("r", [0, 3, 5])
def test_lanczos_collective_budget(mlp_point, R, r):
    mlp, theta = mlp_point
    op = ShardedOperator(mlp, theta, 1e-4, SimulatedCluster(partition(mlp.dim, R)))
    _, audit = audit_lanczos(op, 12, reorth=r if r else "none", seed=0)
    assert audit.extra_parameter_sized == 0
    assert max(audit.per_iteration_scalar) <= 2 + r


# 6 ---------------------------------------------------------------------------

@criterion(6, "Lanczos matches dense eigensolver")
@pytest.mark.parametrize("seed", range(5))
def test_full_lanczos_dense_spectrum(seed):
    A = random_symmetric(64, seed)
    res = lanczos(A.__matmul__, 64, 64, reorth="full", seed=seed)
    assert np.abs(ritz(res.T)[0] - np.linalg.eigvalsh(A)).max() < 1e-8


@criterion(6, "Lanczos matches dense eigensolver")
def test_interlacing_and_weights():
    rng = np.random.default_rng(6)
    for run in range(100):
        A = random_symmetric(64, 100 + run)
        m = int(rng.integers(2, 41))
        res = lanczos(A.__matmul__, 64, m, reorth="full", seed=run)
        lam, gam = ritz(res.T)
        assert abs(gam.sum() - 1.0) < 1e-10
        prev = np.linalg.eigvalsh(res.T.to_dense()[:-1, :-1])
        tol = 1e-10 * np.abs(lam).max()
        assert np.all(lam[:-1] <= prev + tol) and np.all(prev <= lam[1:] + tol)


# 7 ---------------------------------------------------------------------------

@criterion(7, "FD-Lanczos perturbation scaling and ghosts")
def test_fd_lanczos_scaling():
    H = np.diag(np.linspace(-1.0, 1.0, 512))
    with Timer() as t:
        res = fd_lanczos_noise_scaling(H, [8, 16, 32, 64, 128], [1e-8, 1e-6, 1e-4], trials=20)
    print(f"exponent in m {res.slope_m:.3f}, in noise {res.slope_sigma:.3f}, "
          f"delocalisation {res.eta_bar:.1f}")
    assert res.slope_m == pytest.approx(0.5, abs=0.2)
    assert res.slope_sigma == pytest.approx(0.5, abs=0.2)
    assert t.elapsed < 300


@criterion(7, "FD-Lanczos perturbation scaling and ghosts")
@pytest.mark.parametrize("seed", range(3))
def test_ghosts_on_gapped_spectrum(seed):
    H = np.diag(np.concatenate([np.linspace(0.0, 1.0, 99), [10.0]]))
    v0 = probe_vector(100, np.random.default_rng(seed))
    none = ritz(lanczos(H.__matmul__, 100, 60, v0=v0, reorth="none", storage="bf16").T)[0]
    full = ritz(lanczos(H.__matmul__, 100, 60, v0=v0, reorth="full", storage="bf16").T)[0]
    assert ghost_detect(none, storage="bf16", reference=full).count >= 1
    assert ghost_detect(full, storage="bf16", reference=np.diag(H)).count == 0


# 8 ---------------------------------------------------------------------------

@criterion(8, "bf16-stored Krylov basis suffices for SLQ")
def test_bf16_basis_density(mlp_point):
    mlp, theta = mlp_point

    def matvec(v):
        return hvp_central(mlp, theta, v, 1e-4)

    dens = {s: slq_density(matvec, mlp.dim, 30, 8, seed=0, storage=s) for s in ("bf16", "fp64")}
    tv = total_variation(dens["bf16"], dens["fp64"])
    print(f"total variation {tv:.4f}")
    assert tv < 0.1


# 9 ---------------------------------------------------------------------------

def _dense_block_metrics(A, partition, probes):
    rows = []
    for v in probes:
        full = A @ v
        for b in range(len(partition)):
            sl = partition.slice(b)
            masked = np.zeros_like(v)
            masked[sl] = v[sl]
            hb, mb = full[sl], (A @ masked)[sl]
            d = np.linalg.norm(hb - mb)
            rows.append((d, d / np.linalg.norm(hb), hb @ mb / (np.linalg.norm(hb) * np.linalg.norm(mb))))
    return np.array(rows)


@criterion(9, "block-diagonal test")
def test_blockdiag_exact_on_block_diagonal():
    A = block_coupled_matrix([6, 6, 6, 6], 0.0, seed=5)
    q = QuadraticObjective(A)
    part = BlockPartition.equal(24, 4)
    theta = np.random.default_rng(9).standard_normal(24)
    stats = block_diag_test(q, theta, part, n_probes=10, epsilon=1e-4)
    assert np.nanmax(stats.rel_error) < 1e-8


@criterion(9, "block-diagonal test")
def test_blockdiag_dense_oracle_on_coupled():
    A = block_coupled_matrix([6, 6, 6, 6], 0.5, seed=5)
    q = QuadraticObjective(A)
    part = BlockPartition.equal(24, 4)
    theta = np.random.default_rng(9).standard_normal(24)
    stats = block_diag_test(q, theta, part, n_probes=10, epsilon=1e-4, seed=3)
    dense = _dense_block_metrics(A, part, sample_probes(24, 10, 3))
    got = np.column_stack([stats.abs_diff.ravel(), stats.rel_error.ravel(), stats.cosine.ravel()])
    assert np.abs(got - dense).max() <= 1e-8 * np.abs(dense).max()


@criterion(9, "block-diagonal test")
def test_blockdiag_monotone_in_coupling():
    part = BlockPartition.equal(24, 4)
    means = []
    for c in (0.0, 0.1, 0.3, 1.0):
        q = QuadraticObjective(block_coupled_matrix([6, 6, 6, 6], c, seed=5))
        means.append(block_diag_test(q, np.zeros(24), part, method="exact").aggregate("rel_error")["mean"])
    print(f"mean rel_error by coupling {means}")
    assert all(a < b for a, b in zip(means, means[1:]))


@criterion(9, "block-diagonal test")
def test_blockdiag_mlp_not_block_diagonal(mlp_point):
    mlp, theta = mlp_point
    rep = block_diag_test(mlp, theta).report()
    print(f"MLP mean cosine {rep['cosine']['mean']:.3f}, rel_error {rep['rel_error']['mean']:.3f}")
    assert rep["cosine"]["mean"] < 0.9


# 10 --------------------------------------------------------------------------

@criterion(10, "DP vs FSDP cost model")
def test_worked_step_times():
    r = compare_step_times(0.080, 0.020, 0.055)
    assert r.t_dp == pytest.approx(0.100, rel=0.01)
    assert r.t_fsdp == pytest.approx(0.135, rel=0.01)
    assert r.relative_overhead == pytest.approx(0.35, rel=0.01)


@criterion(10, "DP vs FSDP cost model")
def test_fsdp_excess_positive():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        r = dp_vs_fsdp(C=rng.uniform(0, 10), K=int(rng.integers(2, 65)), P=rng.uniform(1e3, 1e10),
                       L=int(rng.integers(2, 200)), alpha=rng.uniform(0, 1e-3),
                       beta=rng.uniform(1e-12, 1e-9))
        assert r.delta > 0 and r.gap > 0


# 11 --------------------------------------------------------------------------

@criterion(11, "optimizer benchmark")
def test_bowl_one_step():
    bowl = make_rippled(RippledSpec(b=0.0, omega=40.0, dims=2))
    t = run_optimizer(bowl, "gd", 1.0, steps=1)
    assert t.losses[1] == 0.0


@criterion(11, "optimizer benchmark")
def test_nesterov_rate_on_quadratic_bowl():
    kappa = 10.0
    q = QuadraticObjective(np.diag([1.0, kappa]))
    f = adaptive_nesterov(q, "pointwise", 150).losses
    per_step = (f[120] / f[20]) ** (1 / 100)
    gd = run_optimizer(q, "gd", 1 / kappa, 150).losses
    assert per_step <= (1 - math.sqrt(1 / kappa)) ** 2 + 0.05
    assert per_step < (gd[120] / gd[20]) ** (1 / 100)


@criterion(11, "optimizer benchmark")
def test_curvature_modes_differ():
    f = make_rippled(RippledSpec(b=0.05, omega=40.0, dims=2))
    point = adaptive_nesterov(f, "pointwise").final_loss
    avg = adaptive_nesterov(f, ("fd_averaged", 2 * math.pi / 40)).final_loss
    print(f"final loss pointwise {point:.4g}, fd_averaged {avg:.4g}")
    assert max(point, avg) >= 10 * min(point, avg)


@criterion(11, "optimizer benchmark")
def test_fd_curvature_is_kernel_average():
    f = make_rippled(RippledSpec(b=0.05, omega=40.0, dims=2))
    rng = np.random.default_rng(11)
    eps = 2 * math.pi / 40
    for _ in range(5):
        x = rng.uniform(-2, 2, 2)
        H = fd_curvature_2x2(f, x, eps)
        for d in ([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]):
            u = np.array(d) / np.linalg.norm(d)
            ref = kernel_average_reference(curvature_field(f, x, u), eps)
            assert u @ H @ u == pytest.approx(ref, rel=1e-6, abs=1e-6)


# 12 --------------------------------------------------------------------------

MLP = "mlp:layers=4-8-8-2,points=32,batches=4,seed=0"


@criterion(12, "manifest reruns are bit-identical")
@pytest.mark.parametrize("argv", [
    ["spectrum", "--oracle", "quadratic:diag1..32", "--m", "32", "--reorth", "full"],
    ["spectrum", "--oracle", MLP, "--m", "20", "--s", "2", "--precision", "bf16"],
    ["spectrum", "--oracle", MLP, "--m", "8", "--hvp", "sharded", "--ranks", "4"],
    ["blockdiag", "--oracle", MLP],
    ["epssweep", "--oracle", "rippled1d:b=0.05,omega=4,a=1", "--theta", "0.7",
     "--precision", "fp32"],
    ["cost", "--profile", "{profile}"],
    ["optbench", "--method", "nesterov", "--curvature", "pointwise", "--steps", "100"],
    ["optbench", "--method", "momentum", "--steps", "50"],
])
def test_manifest_rerun(tmp_path, argv):
    profile = tmp_path / "profile.json"
    profile.write_text(json.dumps({"alpha": 1e-5, "beta": 1e-10, "gamma": 1e-12, "F_fwd": 1e9,
                                   "F_bwd": 1e9, "P": 1e8, "ranks": [1, 2, 8],
                                   "windows": [0, 5], "steps": [10, 100]}))
    argv = [a.replace("{profile}", str(profile)) for a in argv]
    assert main([*argv, "--out", str(tmp_path / "first")]) == 0
    assert main(["rerun", str(tmp_path / "first/manifest.json"), "--out", str(tmp_path / "again")]) == 0
    first = sorted(p.name for p in (tmp_path / "first").iterdir())
    assert first == sorted(p.name for p in (tmp_path / "again").iterdir())
    for name in first:
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name
