"""Optimizers on the rippled surface.

Fixed-step GD, heavy-ball momentum and Adam with grid-searched learning
rates, plus Nesterov acceleration whose step and momentum are set every
iteration from a local 2x2 curvature estimate: ``lr = 1/L`` and
``momentum = (sqrt(L) - sqrt(m)) / (sqrt(L) + sqrt(m))`` with ``L, m`` the
extreme eigenvalues of the estimate. The estimate is either the analytic
Hessian at the look-ahead point or a finite-difference one assembled from
second differences with step ``eps``, which averages curvature over a
window of width ``2 eps``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fdhvp import second_difference
from .objectives import Objective

DIVERGENCE_LOSS = 1e12
DEFAULT_START = (2.0, 2.0)
DEFAULT_STEPS = 500
DEFAULT_LR_GRID = tuple(np.logspace(-4, 0, 25))
MOMENTUM = 0.9
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
M_FLOOR_RATIO = 1e-6
METHODS = ("gd", "momentum", "adam")


@dataclass
class Trajectory:
    """Iterates ``x_t`` and losses ``f(x_t)`` for ``t = 0..T``.

    ``alphas``/``betas`` hold the per-step learning rate and momentum used to
    produce ``x_{t+1}``, so they are one shorter than ``iterates``. On
    divergence the trajectory stops at the first iterate whose loss exceeds
    the threshold or is not finite.
    """

    iterates: np.ndarray
    losses: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.iterates)
        if len(self.losses) != n or len(self.alphas) != len(self.betas) or len(self.alphas) != n - 1:
            raise ValueError("inconsistent trajectory lengths")

    @property
    def final_loss(self) -> float:
        return float("inf") if self.diverged else float(self.losses[-1])

    @property
    def steps(self) -> int:
        return len(self.alphas)

    def rows(self):
        for t, (x, f) in enumerate(zip(self.iterates, self.losses)):
            a = self.alphas[t] if t < self.steps else math.nan
            b = self.betas[t] if t < self.steps else math.nan
            yield t, *(float(c) for c in x), float(f), float(a), float(b)

    def to_csv(self, path) -> None:
        coords = ["x", "y"] if self.iterates.shape[1] == 2 else [f"x{i}" for i in range(self.iterates.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *coords, "loss", "alpha_t", "beta_t"])
            for row in self.rows():
                w.writerow([row[0], *(repr(v) for v in row[1:])])

    def summary(self) -> dict:
        return {**self.meta, "steps": self.steps, "diverged": self.diverged,
                "final_loss": None if self.diverged else self.final_loss,
                "final_iterate": self.iterates[-1].tolist()}

    def write_json(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump({**self.summary(), **(extra or {})}, fh, indent=2)


class _Recorder:
    def __init__(self, oracle: Objective, x0):
        self.oracle = oracle
        self.xs = [np.array(x0, dtype=np.float64)]
        self.fs = [oracle.loss(self.xs[0])]
        self.alphas: list[float] = []
        self.betas: list[float] = []
        self.diverged = not self._ok(self.fs[0])

    @staticmethod
    def _ok(f) -> bool:
        return math.isfinite(f) and f <= DIVERGENCE_LOSS

    def push(self, x, alpha, beta) -> bool:
        """Record a step; return False once the run has diverged."""
        with np.errstate(over="ignore", invalid="ignore"):
            f = self.oracle.loss(x) if np.all(np.isfinite(x)) else math.inf
        self.xs.append(np.array(x, dtype=np.float64))
        self.fs.append(f)
        self.alphas.append(float(alpha))
        self.betas.append(float(beta))
        if not self._ok(f):
            self.diverged = True
        return not self.diverged

    def result(self, meta) -> Trajectory:
        return Trajectory(np.array(self.xs), np.array(self.fs), np.array(self.alphas),
                          np.array(self.betas), self.diverged, meta)


def run_optimizer(oracle: Objective, method: str, lr: float, steps: int = DEFAULT_STEPS,
                  start=DEFAULT_START, seed: int = 0) -> Trajectory:
    """Full-batch GD, heavy-ball momentum (0.9) or Adam (0.9, 0.999, 1e-8).

    The runs are deterministic; ``seed`` is recorded for provenance only.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    rec = _Recorder(oracle, start)
    x = rec.xs[0].copy()
    buf = np.zeros_like(x)
    m2 = np.zeros_like(x)
    b1, b2 = ADAM_BETAS
    for t in range(1, steps + 1):
        if rec.diverged:
            break
        g = oracle.grad(x)
        if method == "gd":
            x = x - lr * g
            beta = 0.0
        elif method == "momentum":
            buf = MOMENTUM * buf + g
            x = x - lr * buf
            beta = MOMENTUM
        else:
            buf = b1 * buf + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            mhat = buf / (1 - b1**t)
            vhat = m2 / (1 - b2**t)
            x = x - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
            beta = b1
        rec.push(x, lr, beta)
    return rec.result({"method": method, "lr": float(lr), "seed": seed,
                       "start": [float(c) for c in np.atleast_1d(start)]})


def grid_search_lr(oracle: Objective, method: str, lr_grid=DEFAULT_LR_GRID,
                   steps: int = DEFAULT_STEPS, start=DEFAULT_START, *, workers: int = 1):
    """Learning rate with the lowest final loss; ties go to the smaller rate.

    Returns ``(best_lr, best_trajectory)``.
    """
    grid = sorted(float(lr) for lr in lr_grid)
    if not grid:
        raise ValueError("empty learning-rate grid")

    def run(lr):
        return run_optimizer(oracle, method, lr, steps, start)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trajs = list(pool.map(run, grid))
    else:
        trajs = [run(lr) for lr in grid]
    best = min(range(len(grid)), key=lambda i: (trajs[i].final_loss, grid[i]))
    return grid[best], trajs[best]


_DIAG = np.array([1.0, 1.0])


def fd_curvature_2x2(oracle: Objective, x, epsilon: float) -> np.ndarray:
    """2x2 curvature from three second differences with step ``epsilon``.

    Axis directions give the diagonal entries; the unit diagonal direction
    ``d`` gives ``d^T H d = (H11 + H22)/2 + H12``, from which the
    off-diagonal entry follows.
    """
    h11 = second_difference(oracle, x, np.array([1.0, 0.0]), epsilon)
    h22 = second_difference(oracle, x, np.array([0.0, 1.0]), epsilon)
    hdd = second_difference(oracle, x, _DIAG, epsilon)
    h12 = hdd - 0.5 * (h11 + h22)
    return np.array([[h11, h12], [h12, h22]])


def nesterov_coefficients(H) -> tuple[float, float, float, float]:
    """``(lr, momentum, L, m)`` for a symmetric curvature estimate.

    ``m`` is clamped to ``1e-6 L``. If the estimate has no positive
    eigenvalue, ``L`` falls back to the spectral radius so the step stays
    finite.
    """
    lam = np.linalg.eigvalsh(np.atleast_2d(H))
    L = float(lam[-1])
    if not L > 0:
        L = float(np.max(np.abs(lam)))
        if not L > 0:
            raise FloatingPointError("zero curvature estimate")
    m = max(float(lam[0]), M_FLOOR_RATIO * L)
    sL, sm = math.sqrt(L), math.sqrt(m)
    return 1.0 / L, (sL - sm) / (sL + sm), L, m


def _parse_mode(curvature_mode):
    if curvature_mode == "pointwise":
        return "pointwise", None
    if isinstance(curvature_mode, str) and curvature_mode.startswith("fd_averaged:"):
        return "fd_averaged", float(curvature_mode.split(":", 1)[1])
    if isinstance(curvature_mode, (tuple, list)) and len(curvature_mode) == 2 \
            and curvature_mode[0] == "fd_averaged":
        return "fd_averaged", float(curvature_mode[1])
    raise ValueError(f"curvature mode must be 'pointwise' or ('fd_averaged', eps), got {curvature_mode!r}")


def adaptive_nesterov(oracle: Objective, curvature_mode="pointwise", steps: int = DEFAULT_STEPS,
                      start=DEFAULT_START) -> Trajectory:
    """Nesterov's method with per-iteration ``(lr, momentum)`` from local curvature.

    ``y_t = x_t + beta_{t-1} (x_t - x_{t-1})``, curvature is estimated at
    ``y_t``, then ``x_{t+1} = y_t - alpha_t grad f(y_t)``.
    """
    mode, eps = _parse_mode(curvature_mode)
    if mode == "fd_averaged" and not eps > 0:
        raise ValueError("fd_averaged step must be positive")
    rec = _Recorder(oracle, start)
    x = rec.xs[0].copy()
    x_prev = x.copy()
    beta = 0.0
    for _ in range(steps):
        if rec.diverged:
            break
        y = x + beta * (x - x_prev)
        H = oracle.hessian(y) if mode == "pointwise" else fd_curvature_2x2(oracle, y, eps)
        if not np.all(np.isfinite(H)):
            rec.push(np.full_like(x, np.inf), math.nan, math.nan)
            break
        alpha, beta, _, _ = nesterov_coefficients(H)
        x_prev, x = x, y - alpha * oracle.grad(y)
        rec.push(x, alpha, beta)
    return rec.result({"method": "nesterov", "curvature_mode": mode, "epsilon": eps,
                       "start": [float(c) for c in np.atleast_1d(start)]})
