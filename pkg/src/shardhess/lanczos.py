"""Symmetric Lanczos, Ritz extraction and stochastic Lanczos quadrature.

Works with any matrix-free operator ``matvec(x) -> Hx``. Scalars (alpha,
beta, dot products) are always float64; only the stored basis vectors are
rounded to the requested storage precision. Global reductions go through a
pluggable ``inner`` so that sharded runs can route every dot product through
a scalar all-reduce.

Per iteration the recurrence forms ``alpha`` and ``beta`` with one reduction
each, and a reorthogonalisation window of ``r`` vectors adds one reduction
per vector (classical Gram-Schmidt), i.e. ``2 + r`` in total.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .precision import check_precision, machine_eps, quantize


@dataclass
class Tridiagonal:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.shape != (max(len(self.alpha) - 1, 0),):
            raise ValueError("beta must have one entry fewer than alpha")

    @property
    def m(self) -> int:
        return len(self.alpha)

    def to_dense(self) -> np.ndarray:
        return np.diag(self.alpha) + np.diag(self.beta, 1) + np.diag(self.beta, -1)


@dataclass
class KrylovBasis:
    vectors: np.ndarray | None
    storage: str
    window: int


@dataclass
class LanczosResult:
    T: Tridiagonal
    basis: KrylovBasis
    breakdown: bool
    residual_norm: float

    @property
    def steps(self) -> int:
        return self.T.m


def _window(reorth, m: int) -> int:
    if reorth in (None, "none", 0):
        return 0
    if reorth == "full":
        return m
    if isinstance(reorth, str) and reorth.startswith("window:"):
        reorth = int(reorth.split(":", 1)[1])
    r = int(reorth)
    if r < 0:
        raise ValueError("reorthogonalisation window must be nonnegative")
    return r


def _dot(x, y) -> float:
    return float(x @ y)


def lanczos(matvec, dim: int, m: int, *, reorth="full", storage: str = "fp64", v0=None,
            seed=None, inner=None, two_pass: bool = False, store_basis: bool = True,
            breakdown_tol: float = 1e-12, callback=None) -> LanczosResult:
    """Run ``m`` steps of symmetric Lanczos from ``v0`` (or a seeded Gaussian probe).

    Parameters
    ----------
    reorth : "none", "full", int or "window:r"
        Number of most recent stored vectors to reorthogonalise against.
    storage : "fp64", "fp32" or "bf16"
        Precision in which basis vectors are stored and fed to ``matvec``.
    inner : callable, optional
        Global dot product; defaults to ``x @ y``.
    two_pass : bool
        Repeat the Gram-Schmidt sweep once. Doubles the reorthogonalisation
        reductions.
    store_basis : bool
        Keep only the two most recent vectors. Requires ``reorth="none"``.
    callback : callable, optional
        Called as ``callback(k)`` after iteration ``k`` completes.

    Stops early when ``beta`` drops below ``breakdown_tol`` times the largest
    coefficient seen, flagging ``breakdown`` (an invariant subspace).
    """
    check_precision(storage)
    if not 1 <= m <= dim:
        raise ValueError(f"need 1 <= m <= dim, got m={m}, dim={dim}")
    r = _window(reorth, m)
    if not store_basis and r:
        raise ValueError("reorthogonalisation needs the stored basis")
    inner = inner or _dot
    if v0 is None:
        v0 = np.random.default_rng(seed).standard_normal(dim)
    v0 = np.asarray(v0, dtype=np.float64)
    n0 = math.sqrt(inner(v0, v0))
    if n0 == 0:
        raise ValueError("starting vector is zero")
    q = quantize(v0 / n0, storage)

    basis = [q]
    q_prev = np.zeros(dim)
    beta_prev = 0.0
    alphas, betas = [], []
    scale = 0.0
    breakdown = False
    beta = 0.0
    for k in range(m):
        w = np.asarray(matvec(q), dtype=np.float64)
        a = inner(w, q)
        w = w - a * q - beta_prev * q_prev
        if r:
            window = basis[-r:]
            for _ in range(2 if two_pass else 1):
                coeffs = [inner(w, qj) for qj in window]
                for c, qj in zip(coeffs, window):
                    w -= c * qj
        alphas.append(a)
        beta = math.sqrt(max(inner(w, w), 0.0))
        scale = max(scale, abs(a), beta_prev)
        if callback is not None:
            callback(k)
        if beta <= breakdown_tol * max(scale, np.finfo(float).tiny):
            breakdown = k < m - 1
            break
        if k == m - 1:
            break
        betas.append(beta)
        q_prev, q = q, quantize(w / beta, storage)
        beta_prev = beta
        if store_basis:
            basis.append(q)
        else:
            basis = [q]

    T = Tridiagonal(np.array(alphas), np.array(betas))
    vectors = np.array(basis) if store_basis else None
    return LanczosResult(T, KrylovBasis(vectors, storage, r), breakdown, beta)


def ritz(T: Tridiagonal) -> tuple[np.ndarray, np.ndarray]:
    """Ritz values (ascending) and quadrature weights (squared first eigenvector components)."""
    if T.m == 1:
        return T.alpha.copy(), np.ones(1)
    lam, V = eigh_tridiagonal(T.alpha, T.beta)
    return lam, V[0] ** 2


def delocalization(vectors) -> float:
    """``1 / mean(||q||_inf^2)`` over the basis vectors."""
    vectors = np.asarray(vectors)
    return float(1.0 / np.mean(np.max(np.abs(vectors), axis=1) ** 2))


def probe_vector(dim: int, rng: np.random.Generator, dist: str = "gaussian") -> np.ndarray:
    if dist == "gaussian":
        v = rng.standard_normal(dim)
    elif dist == "rademacher":
        v = rng.choice([-1.0, 1.0], size=dim)
    else:
        raise ValueError(f"unknown probe distribution {dist!r}")
    return v / np.linalg.norm(v)


@dataclass
class SpectralDensity:
    """Per-probe Ritz nodes and weights with Gaussian smoothing."""

    nodes: list
    weights: list
    dim: int
    smoothing_sigma: float
    breakdowns: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def probes(self) -> int:
        return len(self.nodes)

    @property
    def all_nodes(self) -> np.ndarray:
        return np.concatenate(self.nodes)

    @property
    def all_weights(self) -> np.ndarray:
        """Weights of :attr:`all_nodes`, each divided by the probe count."""
        return np.concatenate(self.weights) / self.probes

    def trace_estimate(self) -> float:
        return self.dim * float(np.mean([w @ n for n, w in zip(self.nodes, self.weights)]))

    def moment(self, k: int) -> float:
        """Estimate of ``tr(H^k) / dim``."""
        return float(np.mean([w @ n**k for n, w in zip(self.nodes, self.weights)]))

    def grid(self, n: int = 1001, pad: float = 5.0) -> np.ndarray:
        lam = self.all_nodes
        return np.linspace(lam.min() - pad * self.smoothing_sigma,
                           lam.max() + pad * self.smoothing_sigma, n)

    def density(self, grid, sigma: float | None = None) -> np.ndarray:
        s = self.smoothing_sigma if sigma is None else sigma
        grid = np.asarray(grid, dtype=np.float64)
        z = (grid[:, None] - self.all_nodes[None, :]) / s
        return (np.exp(-0.5 * z**2) @ self.all_weights) / (s * math.sqrt(2 * math.pi))

    def mass(self, lo: float, hi: float) -> float:
        """Unsmoothed quadrature mass on ``[lo, hi]``."""
        lam = self.all_nodes
        return float(self.all_weights[(lam >= lo) & (lam <= hi)].sum())

    def to_dict(self) -> dict:
        return {"nodes": [n.tolist() for n in self.nodes],
                "weights": [w.tolist() for w in self.weights],
                "probes": self.probes, "dim": self.dim,
                "smoothing_sigma": self.smoothing_sigma,
                "trace_estimate": self.trace_estimate(),
                "breakdowns": list(self.breakdowns), **self.meta}

    def write_json(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump({**self.to_dict(), **(extra or {})}, fh, indent=2)

    def write_stem_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe", "lambda", "gamma"])
            for p, (lam, gam) in enumerate(zip(self.nodes, self.weights)):
                for a, b in zip(lam, gam):
                    w.writerow([p, repr(float(a)), repr(float(b))])

    def write_density_csv(self, path, n: int = 1001) -> None:
        g = self.grid(n)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda_grid", "density"])
            for a, b in zip(g, self.density(g)):
                w.writerow([repr(float(a)), repr(float(b))])


def default_sigma(nodes) -> float:
    """``0.01 * spectral width``; a degenerate width falls back to ``max(|lambda|, 1)``."""
    lam = np.concatenate([np.atleast_1d(n) for n in nodes])
    width = float(lam.max() - lam.min())
    if width <= 0:
        width = max(float(np.abs(lam).max()), 1.0)
    return 0.01 * width


def slq_density(matvec, dim: int, m: int, n_probes: int = 1, *, probe: str = "gaussian",
                smoothing_sigma: float | None = None, seed: int = 0, reorth="full",
                storage: str = "fp64", inner=None) -> SpectralDensity:
    """Stochastic Lanczos quadrature with ``n_probes`` independent unit probes.

    Probe ``i`` uses the ``i``-th child of ``SeedSequence(seed)``; results
    are kept in probe order.
    """
    if n_probes < 1:
        raise ValueError("need at least one probe")
    nodes, weights, breakdowns = [], [], []
    for child in np.random.SeedSequence(seed).spawn(n_probes):
        v = probe_vector(dim, np.random.default_rng(child), probe)
        res = lanczos(matvec, dim, m, reorth=reorth, storage=storage, v0=v, inner=inner)
        lam, gam = ritz(res.T)
        nodes.append(lam)
        weights.append(gam)
        breakdowns.append(res.breakdown)
    sigma = default_sigma(nodes) if smoothing_sigma is None else smoothing_sigma
    meta = {"m": m, "r": _window(reorth, m), "precision": storage, "seed": seed, "probe": probe}
    return SpectralDensity(nodes, weights, dim, sigma, breakdowns, meta)


def total_variation(a: SpectralDensity, b: SpectralDensity, sigma: float | None = None,
                    n_grid: int = 4001) -> float:
    """``0.5 * integral |p_a - p_b|`` of the smoothed densities on a shared grid.

    Both densities use the same bandwidth (the larger of the two unless given).
    The grid has at least ``n_grid`` points and at least ten per bandwidth.
    """
    s = max(a.smoothing_sigma, b.smoothing_sigma) if sigma is None else sigma
    lam = np.concatenate([a.all_nodes, b.all_nodes])
    lo, hi = lam.min() - 6 * s, lam.max() + 6 * s
    # at least ten points per bandwidth so every bump is resolved
    n = min(max(n_grid, int(math.ceil(10 * (hi - lo) / s)) + 1), 2_000_001)
    grid = np.linspace(lo, hi, n)
    diff = np.abs(a.density(grid, s) - b.density(grid, s))
    return 0.5 * float(np.trapezoid(diff, grid))


@dataclass
class GhostCluster:
    values: np.ndarray
    weights: np.ndarray

    @property
    def center(self) -> float:
        return float(np.mean(self.values))

    @property
    def splitting(self) -> float:
        return float(self.values.max() - self.values.min())


@dataclass
class GhostReport:
    clusters: list
    tol: float

    @property
    def count(self) -> int:
        return len(self.clusters)

    def rms_splitting(self) -> float:
        if not self.clusters:
            return 0.0
        return float(np.sqrt(np.mean([c.splitting**2 for c in self.clusters])))

    def to_dict(self) -> dict:
        return {"tol": self.tol, "count": self.count, "rms_splitting": self.rms_splitting(),
                "clusters": [{"center": c.center, "splitting": c.splitting,
                              "values": c.values.tolist(), "weights": c.weights.tolist()}
                             for c in self.clusters]}


def ghost_detect(nodes, weights=None, tol: float | None = None, reference=None, *,
                 storage: str = "fp64") -> GhostReport:
    """Find groups of Ritz values closer than ``tol`` (single linkage).

    Exact-arithmetic Lanczos never returns two copies of one eigenvalue, so a
    multi-member group is a ghost candidate. With ``reference`` nodes (e.g.
    from a fully reorthogonalised run) a group is kept only if it has more
    members than reference nodes within its span widened by ``tol``.
    The default ``tol`` is ``max(1e-6, 4 * eps_storage) * max|lambda|``: ghost
    copies from a low-precision basis split by roughly the storage rounding
    level, so fp64 runs get ``1e-6 * max|lambda|``.
    """
    lam = np.asarray(nodes, dtype=np.float64)
    gam = np.ones_like(lam) if weights is None else np.asarray(weights, dtype=np.float64)
    if tol is None:
        tol = max(1e-6, 4 * machine_eps(storage)) * float(np.abs(lam).max())
    order = np.argsort(lam)
    lam, gam = lam[order], gam[order]
    groups, start = [], 0
    for i in range(1, len(lam) + 1):
        if i == len(lam) or not lam[i] - lam[i - 1] < tol:
            if i - start > 1:
                groups.append(GhostCluster(lam[start:i], gam[start:i]))
            start = i
    if reference is not None:
        ref = np.asarray(reference, dtype=np.float64)
        groups = [g for g in groups
                  if len(g.values) > np.sum((ref >= g.values.min() - tol) & (ref <= g.values.max() + tol))]
    return GhostReport(groups, tol)


@dataclass
class NoiseScalingResult:
    m_grid: np.ndarray
    sigma_grid: np.ndarray
    mean_error: np.ndarray
    slope_m: float
    slope_sigma: float
    eta_bar: float

    def to_dict(self) -> dict:
        return {"m_grid": self.m_grid.tolist(), "sigma_grid": self.sigma_grid.tolist(),
                "mean_error": self.mean_error.tolist(), "slope_m": self.slope_m,
                "slope_sigma": self.slope_sigma, "eta_bar": self.eta_bar}


def noisy_matvec(matvec, noise_std: float, rng: np.random.Generator):
    """``x -> Hx + e`` with fresh ``e ~ N(0, noise_std^2 I)`` on every call."""
    def apply(x):
        y = matvec(x)
        return y + noise_std * rng.standard_normal(y.shape) if noise_std > 0 else y
    return apply


def tridiagonal_perturbation(matvec, dim: int, m: int, noise_std: float, rng, *, v0,
                             reorth="full", metric: str = "backward", H=None) -> float:
    """Size of the tridiagonal perturbation caused by noisy matvecs.

    ``metric="backward"``: ``||T_tilde - Q^T H Q||_2`` with ``Q`` the basis of
    the noisy run, i.e. the coefficient error against the exact operator on
    the computed Krylov basis (needs the dense ``H``).
    ``metric="forward"``: ``||T_tilde - T||_2`` against an exact-matvec run
    from the same start; this also picks up the divergence of the two Krylov
    processes once Ritz values converge.
    """
    noisy = lanczos(noisy_matvec(matvec, noise_std, rng), dim, m, reorth=reorth, v0=v0)
    if metric == "backward":
        if H is None:
            raise ValueError("backward metric needs the dense operator H")
        Q = noisy.basis.vectors
        D = noisy.T.to_dense() - Q @ (H @ Q.T)
    elif metric == "forward":
        exact = lanczos(matvec, dim, m, reorth=reorth, v0=v0)
        k = min(exact.T.m, noisy.T.m)
        D = noisy.T.to_dense()[:k, :k] - exact.T.to_dense()[:k, :k]
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return float(np.linalg.norm(D, 2))


def fd_lanczos_noise_scaling(H, m_grid, sigma_grid, trials: int = 20, seed: int = 0, *,
                             d4_norm: float = 1.0, reorth="full",
                             metric: str = "backward") -> NoiseScalingResult:
    """Mean ``||Delta T_m||_2`` over trials on a grid of ``m`` and noise levels.

    The FD error of each matvec is modelled as i.i.d. Gaussian with per-entry
    std ``sqrt(sigma_f * d4_norm / dim)``, fresh on every Lanczos iteration,
    so its norm scales as ``(sigma_f * d4_norm)**(1/2)``. Exponents are
    least-squares log-log slopes: in ``m`` at the largest noise level, and in
    ``sigma_f`` at the largest ``m``. See :func:`tridiagonal_perturbation`
    for ``metric``.
    """
    H = np.asarray(H, dtype=np.float64)
    dim = H.shape[0]
    m_grid = np.asarray(m_grid, dtype=int)
    sigma_grid = np.asarray(sigma_grid, dtype=np.float64)
    rng = np.random.default_rng(seed)
    matvec = H.__matmul__
    err = np.zeros((len(m_grid), len(sigma_grid)))
    eta = []
    for _ in range(trials):
        v0 = probe_vector(dim, rng)
        for i, m in enumerate(m_grid):
            for j, s in enumerate(sigma_grid):
                std = math.sqrt(s * d4_norm / dim)
                err[i, j] += tridiagonal_perturbation(matvec, dim, int(m), std, rng, v0=v0,
                                                      reorth=reorth, metric=metric, H=H)
        basis = lanczos(matvec, dim, int(m_grid.max()), reorth=reorth, v0=v0).basis.vectors
        eta.append(delocalization(basis))
    err /= trials

    def fit(x, y):
        ok = (x > 0) & (y > 0)
        if ok.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])

    return NoiseScalingResult(m_grid, sigma_grid, err, fit(m_grid.astype(float), err[:, -1]),
                              fit(sigma_grid, err[-1]), float(np.mean(eta)))
