import math

import numpy as np
import pytest

from shardhess.fdhvp import curvature_field, kernel_average_reference
from shardhess.objectives import QuadraticObjective, RippledSpec, make_rippled
from shardhess.optbench import (
    DEFAULT_LR_GRID, Trajectory, adaptive_nesterov, fd_curvature_2x2, grid_search_lr,
    nesterov_coefficients, run_optimizer,
)


@pytest.fixture
def bowl():
    return make_rippled(RippledSpec(b=0.0, omega=40.0, dims=2))


def test_default_grid():
    assert len(DEFAULT_LR_GRID) == 25
    assert DEFAULT_LR_GRID[0] == pytest.approx(1e-4) and DEFAULT_LR_GRID[-1] == pytest.approx(1.0)


@pytest.mark.parametrize("start", [(2.0, 2.0), (-3.0, 0.5)])
def test_gd_unit_step_converges_in_one_step(bowl, start):
    t = run_optimizer(bowl, "gd", 1.0, steps=3, start=start)
    np.testing.assert_array_equal(t.iterates[1], [0.0, 0.0])
    assert t.losses[1] == 0.0


def test_gd_diverges_above_stability_threshold(bowl):
    t = run_optimizer(bowl, "gd", 2.5, steps=500)
    assert t.diverged and t.final_loss == math.inf
    assert len(t.iterates) < 501
    assert t.losses[-1] > 1e12


def test_methods_deterministic(rippled2d):
    for method in ("gd", "momentum", "adam"):
        a = run_optimizer(rippled2d, method, 0.01, steps=50)
        b = run_optimizer(rippled2d, method, 0.01, steps=50)
        np.testing.assert_array_equal(a.iterates, b.iterates)


def test_unknown_method(bowl):
    with pytest.raises(ValueError):
        run_optimizer(bowl, "sgd", 0.1)
    with pytest.raises(ValueError):
        run_optimizer(bowl, "gd", 0.0)


def test_adam_first_step_is_sign_step(bowl):
    t = run_optimizer(bowl, "adam", 0.1, steps=1)
    np.testing.assert_allclose(t.iterates[1], [1.9, 1.9], rtol=1e-7)


def test_grid_search_bowl_picks_unit_rate(bowl):
    lr, traj = grid_search_lr(bowl, "gd", [0.1, 0.5, 1.0, 1.5], steps=5)
    assert lr == 1.0 and traj.final_loss == 0.0


def test_grid_search_single_and_ties(bowl):
    assert grid_search_lr(bowl, "gd", [0.3], steps=5)[0] == 0.3
    # started at the minimum every rate ties at zero loss
    lr, _ = grid_search_lr(bowl, "gd", [0.5, 0.01, 1.0], steps=5, start=(0.0, 0.0))
    assert lr == 0.01


def test_grid_search_parallel_matches_serial(rippled2d):
    grid = [1e-3, 1e-2, 5e-2]
    a = grid_search_lr(rippled2d, "momentum", grid, steps=100)
    b = grid_search_lr(rippled2d, "momentum", grid, steps=100, workers=3)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1].iterates, b[1].iterates)


def test_grid_search_rejects_empty(bowl):
    with pytest.raises(ValueError):
        grid_search_lr(bowl, "gd", [])


def test_nesterov_coefficients():
    lr, mom, L, m = nesterov_coefficients(np.diag([1.0, 4.0]))
    assert (lr, L, m) == (0.25, 4.0, 1.0)
    assert mom == pytest.approx(1.0 / 3.0)
    # indefinite: m clamped to the floor
    _, mom, L, m = nesterov_coefficients(np.diag([-1.0, 4.0]))
    assert m == pytest.approx(4e-6) and mom == pytest.approx((2 - 2e-3) / (2 + 2e-3))
    # no positive curvature: spectral radius fallback keeps the step finite
    lr, _, L, _ = nesterov_coefficients(np.diag([-2.0, -1.0]))
    assert L == 2.0 and lr == 0.5


def test_nesterov_bowl_modes_identical(bowl):
    a = adaptive_nesterov(bowl, "pointwise", 20)
    b = adaptive_nesterov(bowl, ("fd_averaged", 0.1), 20)
    np.testing.assert_allclose(a.iterates, b.iterates, atol=1e-12)
    assert a.final_loss < 1e-20


@pytest.mark.parametrize("kappa", [10.0, 100.0])
def test_nesterov_accelerated_rate(kappa):
    q = QuadraticObjective(np.diag([1.0, kappa]))
    t = adaptive_nesterov(q, "pointwise", 150)
    f = t.losses
    per_step = (f[120] / f[20]) ** (1 / 100)
    # asymptotic loss rate (1 - sqrt(m/L))^2; the k * rho^k transient adds a few percent
    assert per_step <= (1 - math.sqrt(1 / kappa)) ** 2 + 0.05
    gd = run_optimizer(q, "gd", 1 / kappa, 150).losses
    assert per_step < (gd[120] / gd[20]) ** (1 / 100)


def test_fd_curvature_equals_kernel_averages(rippled2d, rng):
    for _ in range(5):
        x = rng.uniform(-1, 1, 2)
        eps = 2 * np.pi / 40
        H = fd_curvature_2x2(rippled2d, x, eps)
        avg = {}
        for name, d in (("x", [1.0, 0.0]), ("y", [0.0, 1.0]), ("d", [1.0, 1.0])):
            avg[name] = kernel_average_reference(curvature_field(rippled2d, x, np.array(d)), eps)
        ref = np.array([[avg["x"], avg["d"] - 0.5 * (avg["x"] + avg["y"])],
                        [avg["d"] - 0.5 * (avg["x"] + avg["y"]), avg["y"]]])
        np.testing.assert_allclose(H, ref, rtol=1e-6, atol=1e-6 * np.abs(ref).max())


def test_fd_curvature_approaches_hessian(rippled2d, rng):
    x = rng.uniform(-1, 1, 2)
    H = rippled2d.hessian(x)
    errs = [np.abs(fd_curvature_2x2(rippled2d, x, e) - H).max() for e in (1e-2, 1e-3, 1e-4)]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-4 * np.abs(H).max()


def test_fd_trajectory_continuity_on_bowl(bowl):
    a = adaptive_nesterov(bowl, "pointwise", 10, start=(2.0, -1.0))
    b = adaptive_nesterov(bowl, ("fd_averaged", 1e-4), 10, start=(2.0, -1.0))
    assert np.abs(a.iterates - b.iterates).max() < 1e-4


def test_mode_parsing(bowl):
    assert adaptive_nesterov(bowl, "fd_averaged:0.1", 2).meta["epsilon"] == 0.1
    with pytest.raises(ValueError):
        adaptive_nesterov(bowl, "averaged", 2)
    with pytest.raises(ValueError):
        adaptive_nesterov(bowl, ("fd_averaged", 0.0), 2)


def test_trajectory_lengths_and_csv(tmp_path, rippled2d):
    t = adaptive_nesterov(rippled2d, "pointwise", 5)
    assert len(t.iterates) == 6 and len(t.alphas) == 5
    t.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,x,y,loss,alpha_t,beta_t" and len(lines) == 7
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), np.zeros(3), np.zeros(1), np.zeros(1))
