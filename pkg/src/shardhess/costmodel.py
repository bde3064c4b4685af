"""Closed-form (alpha, beta, gamma) cost model for distributed HVPs and Lanczos.

All times are in seconds. ``alpha`` is the per-collective latency, ``beta``
the per-byte transfer cost and ``gamma`` the per-flop (or per-element) cost.

    T_grad   = (F_fwd + F_bwd) gamma + alpha G_grad + beta V_grad
    T_hvp    = 2 T_grad + k_vec (P/R) gamma + T_scalar
    T_iter   = T_hvp + (2 + r) T_scalar + (c0 + c1 r) (P/R) gamma
    T_slq    = s m T_iter + T_post

``k_vec = 5`` counts the shard-local vector passes of one HVP: three
parameter updates, one copy into the result buffer and one scaling.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.optimize import nnls

K_VEC = 5


@dataclass(frozen=True)
class CostParams:
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    F_fwd: float = 0.0
    F_bwd: float = 0.0
    G_grad: float = 0.0
    V_grad: float = 0.0
    P: float = 0.0
    R: int = 1
    L: int = 1
    K: int = 1
    T_scalar: float = 0.0
    c0: float = 0.0
    c1: float = 0.0
    C: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost parameter {f.name} must be nonnegative")
        if self.R < 1:
            raise ValueError("R must be at least 1")

    @property
    def P_loc(self) -> float:
        return self.P / self.R

    @classmethod
    def from_dict(cls, d: dict) -> "CostParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cost parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def t_grad(p: CostParams) -> float:
    return (p.F_fwd * p.gamma + p.F_bwd * p.gamma) + p.alpha * p.G_grad + p.beta * p.V_grad


def t_vec(p: CostParams, k_vec: float = K_VEC) -> float:
    return k_vec * p.P_loc * p.gamma + p.T_scalar


def t_hvp(p: CostParams, k_vec: float = K_VEC) -> float:
    return 2.0 * t_grad(p) + t_vec(p, k_vec)


def t_lanczos_iter(p: CostParams, r: int = 0, k_vec: float = K_VEC) -> float:
    if r < 0:
        raise ValueError("window r must be nonnegative")
    return t_hvp(p, k_vec) + (2 + r) * p.T_scalar + (p.c0 + p.c1 * r) * p.P_loc * p.gamma


@dataclass(frozen=True)
class SlqCost:
    total: float
    iteration: float
    post: float

    @property
    def post_fraction(self) -> float:
        return self.post / self.total if self.total > 0 else 0.0


def t_slq(p: CostParams, s: int, m: int, r: int = 0, t_post: float = 0.0,
          k_vec: float = K_VEC) -> SlqCost:
    it = t_lanczos_iter(p, r, k_vec)
    return SlqCost(s * m * it + t_post, it, t_post)


@dataclass(frozen=True)
class DpFsdpComparison:
    """Step times under DP and ZeRO-3.

    ``delta`` is the closed-form excess ``4 alpha (K-1)(L-1) + 6 beta P``;
    ``gap`` is the literal ``t_fsdp - t_dp``, which differs from ``delta`` by
    ``3 alpha (K-1)`` because the DP latency term is ``alpha (K-1)`` rather
    than ``4 alpha (K-1)``. Both are nonnegative. For measured step times the
    two coincide.
    """

    t_dp: float
    t_fsdp: float
    delta: float

    @property
    def gap(self) -> float:
        return self.t_fsdp - self.t_dp

    @property
    def relative_overhead(self) -> float:
        return self.gap / self.t_dp if self.t_dp > 0 else float("inf")

    def to_dict(self) -> dict:
        return {"t_dp": self.t_dp, "t_fsdp": self.t_fsdp, "delta": self.delta,
                "gap": self.gap, "relative_overhead": self.relative_overhead}


def dp_vs_fsdp(C: float, K: int, P: float, L: int, alpha: float, beta: float) -> DpFsdpComparison:
    """Step time of plain data parallelism vs ZeRO-3 when the model fits on one rank.

    ``T_DP = C/K + alpha (K-1) + 2 beta P`` and
    ``T_FSDP = C/K + 4 alpha (K-1) L + 8 beta P``. ``P`` is in bytes.
    """
    for name, val in (("C", C), ("P", P), ("alpha", alpha), ("beta", beta)):
        if val < 0:
            raise ValueError(f"{name} must be nonnegative")
    if K < 1 or L < 1:
        raise ValueError("K and L must be at least 1")
    comp = C / K
    t_dp = comp + alpha * (K - 1) + 2.0 * beta * P
    t_fsdp = comp + 4.0 * alpha * (K - 1) * L + 8.0 * beta * P
    delta = 4.0 * alpha * (K - 1) * (L - 1) + 6.0 * beta * P
    return DpFsdpComparison(t_dp, t_fsdp, delta)


def compare_step_times(t_comp: float, t_dp_comm: float, t_fsdp_comm: float) -> DpFsdpComparison:
    """DP vs FSDP step times from measured compute and communication times."""
    if min(t_comp, t_dp_comm, t_fsdp_comm) < 0:
        raise ValueError("times must be nonnegative")
    t_dp, t_fsdp = t_comp + t_dp_comm, t_comp + t_fsdp_comm
    return DpFsdpComparison(t_dp, t_fsdp, t_fsdp - t_dp)


def scaled_to_ranks(p: CostParams, R: int, bytes_per_param: float = 2.0) -> CostParams:
    """Strong-scaling variant of a single-rank profile.

    FLOPs split evenly over ``R`` ranks. A ZeRO-3 pass all-gathers parameters
    twice (forward, backward) and reduce-scatters gradients once, each moving
    ``(R-1)/R`` of the model per rank in ``L`` unit-sized collectives.
    With ``R = 1`` there is no communication.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    frac = (R - 1) / R
    return replace(p, R=R, F_fwd=p.F_fwd / R, F_bwd=p.F_bwd / R,
                   G_grad=3 * p.L if R > 1 else 0, V_grad=3 * frac * p.P * bytes_per_param)


def strong_scaling_speedup(p: CostParams, R: int, bytes_per_param: float = 2.0) -> float:
    return t_grad(scaled_to_ranks(p, 1, bytes_per_param)) / t_grad(scaled_to_ranks(p, R, bytes_per_param))


def cost_table(p: CostParams, ranks=(1,), windows=(0,), probes=(1,), steps=(1,),
               t_post: float = 0.0, k_vec: float = K_VEC, bytes_per_param: float = 2.0) -> list[dict]:
    """Rows of predicted costs over a grid of (R, r, s, m).

    For ``R`` different from the profile's own, the profile is rescaled with
    :func:`scaled_to_ranks`.
    """
    rows = []
    for R, r, s, m in itertools.product(ranks, windows, probes, steps):
        q = p if R == p.R else scaled_to_ranks(p, R, bytes_per_param)
        slq = t_slq(q, s, m, r, t_post, k_vec)
        rows.append({"R": R, "r": r, "s": s, "m": m, "t_grad": t_grad(q),
                     "t_hvp": t_hvp(q, k_vec), "t_lanczos_iter": slq.iteration,
                     "t_slq": slq.total, "post_fraction": slq.post_fraction})
    return rows


def write_table(rows, json_path=None, csv_path=None, extra: dict | None = None) -> None:
    if json_path:
        with open(json_path, "w") as fh:
            json.dump({**(extra or {}), "rows": rows}, fh, indent=2)
    if csv_path and rows:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def fit_coefficients(features, times) -> np.ndarray:
    """Nonnegative least-squares fit of ``times ~ features @ coef``.

    ``features`` has one row per measurement, e.g. columns
    ``(G_grad, V_grad, F_fwd + F_bwd)`` to recover ``(alpha, beta, gamma)``.
    """
    A = np.asarray(features, dtype=np.float64)
    b = np.asarray(times, dtype=np.float64)
    col = np.linalg.norm(A, axis=0)
    col[col == 0] = 1.0
    coef, _ = nnls(A / col, b)
    return coef / col
