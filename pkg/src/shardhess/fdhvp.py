"""Finite-difference curvature estimators and their step-size theory.

The central estimator is the gradient difference

    Hv ~ (grad L(theta + eps*v) - grad L(theta - eps*v)) / (2*eps),

evaluated with in-place parameter perturbations and per-batch gradient
accumulation. Its error is ``eps**2/6 * ||grad(D_v^3 L)||`` from truncation
plus ``O(eps_mach * ||grad L|| / eps)`` from roundoff, which fixes the
optimal step ``(eps_mach ||grad L|| / ||grad D_v^3 L||)**(1/3)``.

The scalar estimator ``(f(x+eps v) - 2 f(x) + f(x-eps v)) / eps**2`` equals a
triangular-kernel average of the curvature ``v^T H(x + t v) v`` over
``|t| <= eps``; :func:`kernel_average_reference` evaluates that average by
quadrature and is used as an independent check of the identity.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .objectives import Objective
from .precision import check_precision, machine_eps as _machine_eps, quantize


class NonFiniteGradientError(FloatingPointError):
    """A batch gradient contained NaN or Inf."""

    def __init__(self, batch: int, rank: int | None = None):
        self.batch = batch
        self.rank = rank
        where = f"batch {batch}" + (f" on rank {rank}" if rank is not None else "")
        super().__init__(f"non-finite gradient in {where}")


class StepSizeWarning(RuntimeWarning):
    """Step-size rule fell back to a default."""


@dataclass(frozen=True)
class FdConfig:
    epsilon: float
    precision: str = "fp64"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        check_precision(self.precision)

    @property
    def machine_eps(self) -> float:
        return _machine_eps(self.precision)


@dataclass(frozen=True)
class NoiseModel:
    """Magnitudes entering the error bounds. All fields are nonnegative."""

    sigma_f: float = 0.0
    d4_norm: float = 0.0
    d3_grad_norm: float = 0.0
    grad_norm: float = 0.0
    eta_bar: float = 0.0

    def __post_init__(self):
        for name in ("sigma_f", "d4_norm", "d3_grad_norm", "grad_norm", "eta_bar"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")


def total_weight(weights) -> float:
    """Sum of batch weights in batch order (shared by every HVP path)."""
    s = 0.0
    for w in weights:
        s += float(w)
    return s


def batch_contributions(oracle: Objective, theta, batches, precision: str = "fp64",
                        rank: int | None = None) -> dict[int, np.ndarray]:
    """``{b: w_b * grad l_b(theta)}`` with each gradient rounded to ``precision``."""
    out = {}
    for b in batches:
        _, g = oracle.batch_loss_grad(theta, b)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(b, rank)
        out[b] = oracle.weights[b] * quantize(g, precision)
    return out


def ordered_sum(contributions: dict[int, np.ndarray], dim: int) -> np.ndarray:
    """Sum contributions into an fp64 buffer in increasing batch order."""
    buf = np.zeros(dim)
    for b in sorted(contributions):
        buf += contributions[b]
    return buf


def accumulate_gradients(oracle: Objective, theta, batches, precision: str = "fp64",
                         rank: int | None = None) -> np.ndarray:
    """``sum_b w_b * grad l_b(theta)`` over ``batches`` into an fp64 buffer.

    Each batch gradient is rounded to ``precision`` before accumulation, and
    batches are summed in increasing index order.
    """
    return ordered_sum(batch_contributions(oracle, theta, batches, precision, rank), oracle.dim)


def hvp_central(oracle: Objective, theta, v, epsilon: float, precision: str = "fp64",
                restore: str = "snapshot") -> np.ndarray:
    """Gradient central-difference Hessian-vector product.

    ``theta`` is perturbed in place (``+eps*u``, then ``-2*eps*u``) where
    ``u = v/||v||``; the result is rescaled by ``||v||``. Parameters and
    gradients are stored at ``precision``; accumulation is fp64.

    ``restore="snapshot"`` puts back a saved copy of ``theta`` so it is
    bit-identical on exit. ``restore="axpy"`` applies the third in-place
    update ``+eps*u`` instead, which leaves up to one rounding step of drift
    per entry.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if restore not in ("snapshot", "axpy"):
        raise ValueError("restore must be 'snapshot' or 'axpy'")
    check_precision(precision)
    if not (isinstance(theta, np.ndarray) and theta.dtype == np.float64 and theta.flags.writeable):
        theta = np.array(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if theta.shape != (oracle.dim,) or v.shape != (oracle.dim,):
        raise ValueError(f"theta and v must have shape ({oracle.dim},)")
    norm = math.sqrt(float(v @ v))
    if norm == 0.0:
        return np.zeros_like(v)
    u = v / norm
    batches = range(oracle.n_batches)
    saved = theta.copy() if restore == "snapshot" else None

    shift = 0.0
    try:
        theta[:] = quantize(theta + epsilon * u, precision)
        shift = epsilon
        g_plus = accumulate_gradients(oracle, theta, batches, precision)
        theta[:] = quantize(theta - (2.0 * epsilon) * u, precision)
        shift = -epsilon
        g_minus = accumulate_gradients(oracle, theta, batches, precision)
    finally:
        if saved is not None:
            theta[:] = saved
        elif shift:
            theta[:] = quantize(theta - shift * u, precision)
    scale = norm / (2.0 * epsilon * total_weight(oracle.weights))
    return (g_plus - g_minus) * scale


def optimal_epsilon(nm: NoiseModel, machine_eps: float) -> float:
    """Step balancing truncation and roundoff: ``(eps_mach*||g|| / ||grad D^3||)**(1/3)``.

    With ``d3_grad_norm == 0`` (no truncation term) or a zero gradient the
    balance point is undefined; ``machine_eps**(1/3)`` is returned with a
    :class:`StepSizeWarning`.
    """
    if not machine_eps > 0:
        raise ValueError("machine_eps must be positive")
    if nm.d3_grad_norm == 0 or nm.grad_norm == 0:
        warnings.warn("degenerate noise model; using machine_eps**(1/3)", StepSizeWarning,
                      stacklevel=2)
        return machine_eps ** (1.0 / 3.0)
    return (machine_eps * nm.grad_norm / nm.d3_grad_norm) ** (1.0 / 3.0)


def predicted_hvp_error(epsilon, nm: NoiseModel, machine_eps: float):
    """Leading-order error model ``eps^2/6 ||grad D^3|| + eps_mach ||g|| / eps``."""
    epsilon = np.asarray(epsilon, dtype=np.float64)
    return epsilon**2 / 6.0 * nm.d3_grad_norm + machine_eps * nm.grad_norm / epsilon


def noise_optimal_epsilon(nm: NoiseModel) -> float:
    """Optimal step of the second difference under function-value noise.

    Minimises ``eps^2 |D^4 f| / 12 + sqrt(6) sigma_f / eps^2`` (bias plus RMS
    noise), giving ``(12 sqrt(6) sigma_f / |D^4 f|)**(1/4)``.
    """
    if nm.sigma_f <= 0 or nm.d4_norm <= 0:
        raise ValueError("need positive sigma_f and d4_norm")
    return (12.0 * math.sqrt(6.0) * nm.sigma_f / nm.d4_norm) ** 0.25


def second_difference(oracle: Objective, x, v, epsilon: float, *, sigma_f: float = 0.0,
                      rng: np.random.Generator | None = None) -> float:
    """``(f(x + eps u) - 2 f(x) + f(x - eps u)) / eps^2`` with ``u = v/||v||``.

    With ``sigma_f > 0`` each of the three function values receives
    independent N(0, sigma_f^2) noise drawn from ``rng``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = v / np.linalg.norm(v)
    fp = oracle.loss(x + epsilon * u)
    f0 = oracle.loss(x)
    fm = oracle.loss(x - epsilon * u)
    for i, f in enumerate((fp, f0, fm)):
        if not math.isfinite(f):
            raise NonFiniteGradientError(i)
    if sigma_f > 0:
        if rng is None:
            raise ValueError("noise injection needs an rng")
        fp, f0, fm = np.array([fp, f0, fm]) + sigma_f * rng.standard_normal(3)
    return float((fp - 2.0 * f0 + fm) / epsilon**2)


def _gauss_halves(epsilon: float, quad_points: int):
    # Gauss-Legendre on [-eps, 0] and [0, eps] separately: the kernel has a kink at 0.
    n = quad_points // 2
    x, w = np.polynomial.legendre.leggauss(n)
    t_right = 0.5 * epsilon * (x + 1.0)
    w_half = 0.5 * epsilon * w
    return np.concatenate([-t_right[::-1], t_right]), np.concatenate([w_half[::-1], w_half])


def triangular_kernel(t, epsilon: float):
    return np.clip(1.0 - np.abs(t) / epsilon, 0.0, None)


def kernel_average_reference(field, epsilon: float, quad_points: int = 128) -> float:
    """``(1/eps) * integral_{-eps}^{eps} (1 - |t|/eps) * field(t) dt`` by quadrature.

    ``field`` maps an offset ``t`` to the curvature ``v^T H(x + t v) v``.
    """
    if quad_points < 64:
        raise ValueError("use at least 64 quadrature points")
    t, w = _gauss_halves(epsilon, quad_points)
    vals = np.array([field(ti) for ti in t], dtype=np.float64)
    return float(np.sum(w * triangular_kernel(t, epsilon) * vals) / epsilon)


def kernel_moment(order: int, epsilon: float, quad_points: int = 128) -> float:
    """``(1/eps) * integral t**order * w_eps(t) dt``: 1, 0, eps^2/6 for orders 0, 1, 2."""
    return kernel_average_reference(lambda t: t**order, epsilon, quad_points)


def curvature_field(oracle: Objective, x, v):
    """``t -> u^T H(x + t u) u`` from the oracle's exact Hessian, ``u = v/||v||``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(v, dtype=np.float64)
    u = u / np.linalg.norm(u)
    return lambda t: oracle.curvature(x + t * u, u)


DEFAULT_EPS_GRID = np.logspace(-8, 0, 41)


@dataclass
class SweepResult:
    """Error of a finite-difference estimator across step sizes."""

    epsilon: np.ndarray
    abs_error: np.ndarray
    rel_error: np.ndarray
    mode: str
    sigma_f: float
    estimator: str
    predicted_epsilon: float | None = None
    meta: dict = field(default_factory=dict)

    def minimizer(self) -> float:
        """Empirical optimal step, refined by a parabola through log-log neighbours."""
        le, lr = np.log10(self.epsilon), np.log10(np.maximum(self.abs_error, 1e-300))
        i = int(np.argmin(lr))
        if 0 < i < len(le) - 1:
            a, b, _ = np.polyfit(le[i - 1:i + 2], lr[i - 1:i + 2], 2)
            if a > 0:
                vertex = -b / (2 * a)
                if le[i - 1] <= vertex <= le[i + 1]:
                    return float(10**vertex)
        return float(self.epsilon[i])

    def slope(self, lo: float, hi: float) -> float:
        """Least-squares slope of log error vs log eps over ``lo <= eps <= hi``."""
        mask = (self.epsilon >= lo) & (self.epsilon <= hi) & (self.abs_error > 0)
        if mask.sum() < 3:
            raise ValueError(f"fewer than 3 sweep points in [{lo:g}, {hi:g}]")
        return float(np.polyfit(np.log10(self.epsilon[mask]), np.log10(self.abs_error[mask]), 1)[0])

    def regime_slopes(self, gap: float = 10.0, upper: float | None = None,
                      lower: float | None = None) -> tuple[float, float]:
        """Slopes above (truncation) and below (roundoff/noise) the minimiser.

        Points within a factor ``gap`` of the minimiser are excluded.
        """
        e_hat = self.minimizer()
        hi = upper if upper is not None else self.epsilon.max()
        lo = lower if lower is not None else self.epsilon.min()
        return self.slope(gap * e_hat, hi), self.slope(lo, e_hat / gap)

    def summary(self, gap: float = 10.0, upper: float | None = None,
                lower: float | None = None) -> dict:
        out = {"estimator": self.estimator, "mode": self.mode, "sigma_f": self.sigma_f,
               "empirical_minimizer": self.minimizer(),
               "predicted_epsilon": self.predicted_epsilon, **self.meta}
        try:
            above, below = self.regime_slopes(gap, upper, lower)
            out["slope_above"], out["slope_below"] = above, below
        except ValueError:
            out["slope_above"] = out["slope_below"] = None
        return out

    def rows(self):
        for e, a, r in zip(self.epsilon, self.abs_error, self.rel_error):
            yield {"epsilon": float(e), "abs_error": float(a), "rel_error": float(r),
                   "mode": self.mode, "sigma_f": self.sigma_f}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epsilon", "abs_error", "rel_error",
                                                    "mode", "sigma_f"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def fd_error_sweep(oracle: Objective, theta, v, eps_grid=None, precision: str = "fp64",
                   sigma_f: float = 0.0, *, estimator: str = "hvp", trials: int = 1,
                   seed: int = 0) -> SweepResult:
    """Error of an FD estimator against the oracle's exact curvature for each step.

    ``estimator="hvp"`` measures ``||hvp_central - Hv||`` with gradients stored
    at ``precision`` (``sigma_f`` then adds N(0, sigma_f^2) noise to each
    gradient entry). ``estimator="second_difference"`` measures
    ``|second_difference - v^T H v|`` with function-value noise ``sigma_f``.
    With noise, errors are root-mean-square over ``trials`` draws.
    Results are ordered by step size.
    """
    check_precision(precision)
    eps_grid = np.sort(np.asarray(DEFAULT_EPS_GRID if eps_grid is None else eps_grid, dtype=np.float64))
    theta = np.array(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = v / np.linalg.norm(v)
    rng = np.random.default_rng(seed)
    if sigma_f == 0:
        trials = 1

    if estimator == "hvp":
        exact = oracle.hvp(theta, u)
        ref_norm = float(np.linalg.norm(exact))
        noisy = _NoisyGradients(oracle, sigma_f, rng) if sigma_f > 0 else oracle
        errs = []
        for eps in eps_grid:
            sq = [np.sum((hvp_central(noisy, theta, u, eps, precision) - exact) ** 2)
                  for _ in range(trials)]
            errs.append(math.sqrt(float(np.mean(sq))))
    elif estimator == "second_difference":
        if precision != "fp64":
            raise ValueError("the second-difference sweep models noise via sigma_f; use fp64")
        exact = oracle.curvature(theta, u)
        ref_norm = abs(exact)
        errs = []
        for eps in eps_grid:
            sq = [(second_difference(oracle, theta, u, eps, sigma_f=sigma_f, rng=rng) - exact) ** 2
                  for _ in range(trials)]
            errs.append(math.sqrt(float(np.mean(sq))))
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    abs_err = np.array(errs)
    rel_err = abs_err / ref_norm if ref_norm > 0 else np.full_like(abs_err, np.inf)
    return SweepResult(eps_grid, abs_err, rel_err, precision, float(sigma_f), estimator,
                       predicted_step(oracle, theta, u, precision, sigma_f, estimator))


def predicted_step(oracle: Objective, theta, v, precision: str = "fp64", sigma_f: float = 0.0,
                   estimator: str = "hvp") -> float | None:
    """Model-optimal step for an oracle exposing ``grad_d3`` and ``d4``, else None.

    Noise-free gradient differences use :func:`optimal_epsilon` with the
    storage machine epsilon; noisy second differences use
    :func:`noise_optimal_epsilon`. Other combinations have no closed form here.
    """
    if not (hasattr(oracle, "grad_d3") and hasattr(oracle, "d4")):
        return None
    theta = np.asarray(theta, dtype=np.float64)
    u = np.asarray(v, dtype=np.float64)
    u = u / np.linalg.norm(u)
    if estimator == "hvp" and sigma_f == 0:
        nm = NoiseModel(d3_grad_norm=float(np.linalg.norm(oracle.grad_d3(theta, u))),
                        grad_norm=float(np.linalg.norm(oracle.grad(theta))))
        if nm.d3_grad_norm == 0 or nm.grad_norm == 0:
            return None
        return optimal_epsilon(nm, _machine_eps(precision))
    if estimator == "second_difference" and sigma_f > 0:
        d4 = abs(oracle.d4(theta, u))
        return noise_optimal_epsilon(NoiseModel(sigma_f=sigma_f, d4_norm=d4)) if d4 > 0 else None
    return None


class _NoisyGradients(Objective):
    """Wraps an objective, adding i.i.d. Gaussian noise to each batch gradient."""

    def __init__(self, inner: Objective, sigma: float, rng: np.random.Generator):
        self.inner, self.sigma, self.rng = inner, sigma, rng
        self.dim, self.weights = inner.dim, inner.weights

    def batch_loss_grad(self, theta, batch):
        loss, g = self.inner.batch_loss_grad(theta, batch)
        return loss, g + self.sigma * self.rng.standard_normal(g.shape)
