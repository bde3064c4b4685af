"""In-process simulation of the shard-local finite-difference HVP.

Each logical rank owns a contiguous slice of the parameter vector and of the
probe. An HVP perturbs only local shards, runs two gradient passes over the
rank's dataloader slice, and scales the accumulated difference. The FSDP
traffic of a gradient pass (parameter all-gather, gradient reduce-scatter)
is represented by counted stubs; the only collective the HVP adds on top is
an optional scalar all-reduce to normalise the probe.

By default gradient reductions add the per-batch contributions of all ranks
in global batch order and scalar reductions add in rank order, so results do
not depend on the rank count or on how rank work is scheduled; a sharded HVP
is bit-identical to the single-process one. ``reduction="tree"`` sums each
rank's partial locally and then pairwise across ranks, as a ring or tree
all-reduce would, and is only equal up to rounding.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .fdhvp import batch_contributions, ordered_sum, total_weight
from .objectives import Objective
from .precision import check_precision, quantize


class CollectiveError(RuntimeError):
    pass


class CollectiveTimeout(CollectiveError):
    """A collective did not receive one contribution per rank."""


class PartialCollectiveError(CollectiveTimeout):
    """Some ranks dropped out before contributing to a collective."""

    def __init__(self, kind: str, missing):
        self.kind = kind
        self.missing = tuple(missing)
        super().__init__(f"{kind}: no contribution from rank(s) {list(self.missing)}")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ShardLayout:
    """Contiguous partition of ``[0, P)`` into ``R`` shards."""

    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise LayoutError(f"boundaries must start at 0 and increase strictly: {b}")

    @property
    def total_dim(self) -> int:
        return self.boundaries[-1]

    @property
    def rank_count(self) -> int:
        return len(self.boundaries) - 1

    @property
    def sizes(self) -> tuple[int, ...]:
        b = self.boundaries
        return tuple(y - x for x, y in zip(b, b[1:]))

    def slice(self, rank: int) -> slice:
        return slice(self.boundaries[rank], self.boundaries[rank + 1])

    def split(self, x) -> list[np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.total_dim,):
            raise LayoutError(f"vector of length {x.shape} does not match layout of size {self.total_dim}")
        return [x[self.slice(r)].copy() for r in range(self.rank_count)]

    def concat(self, shards) -> np.ndarray:
        self.check(shards)
        return np.concatenate(shards)

    def check(self, shards) -> None:
        if len(shards) != self.rank_count:
            raise LayoutError(f"expected {self.rank_count} shards, got {len(shards)}")
        for r, (s, n) in enumerate(zip(shards, self.sizes)):
            if np.shape(s) != (n,):
                raise LayoutError(f"shard {r} has shape {np.shape(s)}, layout expects ({n},)")


def partition(P: int, R: int) -> ShardLayout:
    """Near-equal contiguous shards; the first ``P % R`` ranks get one extra entry."""
    if not 1 <= R <= P:
        raise LayoutError(f"need 1 <= R <= P, got P={P}, R={R}")
    q, rem = divmod(P, R)
    bounds = [0]
    for r in range(R):
        bounds.append(bounds[-1] + q + (1 if r < rem else 0))
    return ShardLayout(tuple(bounds))


def round_robin_slices(n_batches: int, R: int) -> list[list[int]]:
    return [list(range(r, n_batches, R)) for r in range(R)]


def _fixed_sum(values):
    total = values[0]
    for x in values[1:]:
        total = total + x
    return total


def _tree_sum(values):
    values = list(values)
    while len(values) > 1:
        nxt = [values[i] + values[i + 1] for i in range(0, len(values) - 1, 2)]
        if len(values) % 2:
            nxt.append(values[-1])
        values = nxt
    return values[0]


class CollectiveLayer:
    """Counting collective layer shared by all simulated ranks.

    Every call is logged as ``(kind, context, payload_bytes)``. The
    ``context`` tag marks which calls belong to a gradient pass, so an audit
    can tell FSDP's own traffic from anything added on top of it.
    """

    KINDS = ("allreduce_scalar", "reduce_scatter_stub", "allgather_stub")

    def __init__(self, rank_count: int, reduction: str = "fixed"):
        if reduction not in ("fixed", "tree"):
            raise ValueError("reduction must be 'fixed' or 'tree'")
        self.rank_count = rank_count
        self.reduction = reduction
        self.counts: Counter = Counter()
        self.payload_bytes: Counter = Counter()
        self.log: list[tuple[str, str, int]] = []
        self._context = "user"

    @contextmanager
    def context(self, name: str):
        prev, self._context = self._context, name
        try:
            yield
        finally:
            self._context = prev

    def _record(self, kind: str, nbytes: int, n: int = 1) -> None:
        for _ in range(n):
            self.counts[kind] += 1
            self.payload_bytes[kind] += nbytes
            self.log.append((kind, self._context, nbytes))

    def _reduce(self, values):
        return _fixed_sum(values) if self.reduction == "fixed" else _tree_sum(values)

    def _check_contributions(self, kind: str, values):
        if len(values) != self.rank_count:
            raise CollectiveTimeout(
                f"{kind}: expected {self.rank_count} contributions, got {len(values)}")
        missing = [r for r, x in enumerate(values) if x is None]
        if missing:
            raise PartialCollectiveError(kind, missing)

    def allreduce_scalar(self, values) -> list[float]:
        """Sum one scalar per rank; every rank receives the same total."""
        values = list(values)
        self._check_contributions("allreduce_scalar", values)
        self._record("allreduce_scalar", 8)
        total = float(self._reduce([float(x) for x in values]))
        return [total] * self.rank_count

    def allgather_stub(self, shards, units: int = 1) -> np.ndarray:
        """Parameter all-gather of a gradient pass, issued as ``units`` FSDP-unit calls."""
        shards = list(shards)
        self._check_contributions("allgather_stub", shards)
        full = np.concatenate(shards)
        self._record("allgather_stub", full.nbytes // units, n=units)
        return full

    def reduce_scatter_stub(self, partials, layout: ShardLayout, units: int = 1) -> list[np.ndarray]:
        """Sum per-rank gradient contributions; rank ``r`` receives its shard of the total.

        Each partial maps batch index to that batch's weighted gradient.
        """
        partials = list(partials)
        self._check_contributions("reduce_scatter_stub", partials)
        dim = layout.total_dim
        if self.reduction == "fixed":
            merged = {}
            for p in partials:
                merged.update(p)
            total = ordered_sum(merged, dim)
        else:
            total = _tree_sum([ordered_sum(p, dim) for p in partials])
        self._record("reduce_scatter_stub", total.nbytes // units, n=units)
        return [total[layout.slice(r)].copy() for r in range(layout.rank_count)]

    def snapshot(self) -> dict:
        return {k: self.counts[k] for k in self.KINDS}


class SimulatedCluster:
    """Logical ranks over a :class:`ShardLayout`.

    ``workers > 1`` runs per-rank work on a thread pool; collectives act as
    barriers. ``dropped`` ranks never contribute, which aborts the next
    collective with :class:`PartialCollectiveError`.
    """

    def __init__(self, layout: ShardLayout, *, workers: int = 1, reduction: str = "fixed",
                 dropped=(), fsdp_units: int = 1):
        self.layout = layout
        self.workers = workers
        self.dropped = frozenset(dropped)
        self.fsdp_units = fsdp_units
        self.collectives = CollectiveLayer(layout.rank_count, reduction)

    @property
    def rank_count(self) -> int:
        return self.layout.rank_count

    def map(self, fn):
        """``[fn(rank) for rank]``, in rank order; dropped ranks yield ``None``."""
        def run(r):
            return None if r in self.dropped else fn(r)

        ranks = range(self.rank_count)
        if self.workers <= 1:
            return [run(r) for r in ranks]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(run, ranks))

    def inner(self, x, y) -> float:
        """Global dot product: shard-local partial sums plus one scalar all-reduce."""
        sl = self.layout.slice
        partial = self.map(lambda r: float(x[sl(r)] @ y[sl(r)]))
        return self.collectives.allreduce_scalar(partial)[0]

    def gradient_pass(self, oracle: Objective, theta_shards, loader_slices, precision="fp64"):
        """One FSDP gradient evaluation: gather, local accumulation, reduce-scatter.

        Returns each rank's shard of ``sum_b w_b grad l_b``.
        """
        c = self.collectives
        with c.context("grad_pass"):
            full = c.allgather_stub(
                [None if r in self.dropped else s for r, s in enumerate(theta_shards)],
                units=self.fsdp_units)
            partials = self.map(
                lambda r: batch_contributions(oracle, full, loader_slices[r], precision, rank=r))
            return c.reduce_scatter_stub(partials, self.layout, units=self.fsdp_units)


def sharded_hvp(oracle: Objective, theta_shards, v_shards, epsilon: float, layout: ShardLayout,
                loader_slices=None, *, cluster: SimulatedCluster | None = None,
                precision: str = "fp64", normalize: bool = True,
                restore: str = "snapshot") -> list[np.ndarray]:
    """Shard-local finite-difference HVP; returns each rank's shard of ``Hv``.

    ``theta_shards`` are updated in place and restored on exit. With
    ``normalize=True`` the probe norm is formed by one scalar all-reduce and
    divided back out of the result; Krylov callers that already hold unit
    vectors pass ``normalize=False`` and pay no extra collective.

    The difference of the two passes is scaled by ``1 / (2 eps sum_b w_b)``.
    Objectives normalise ``w_b`` to sum to one, so this matches the plain
    ``1 / (2 eps)`` of the gradient difference.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if restore not in ("snapshot", "axpy"):
        raise ValueError("restore must be 'snapshot' or 'axpy'")
    check_precision(precision)
    layout.check(theta_shards)
    layout.check(v_shards)
    if layout.total_dim != oracle.dim:
        raise LayoutError(f"layout covers {layout.total_dim} parameters, objective has {oracle.dim}")
    if cluster is None:
        cluster = SimulatedCluster(layout)
    elif cluster.layout != layout:
        raise LayoutError("cluster layout differs from the given layout")
    R = layout.rank_count
    if loader_slices is None:
        loader_slices = round_robin_slices(oracle.n_batches, R)
    if len(loader_slices) != R:
        raise LayoutError(f"need one dataloader slice per rank, got {len(loader_slices)}")
    seen = sorted(b for s in loader_slices for b in s)
    if seen != list(range(oracle.n_batches)):
        raise LayoutError("dataloader slices must partition the batch set")

    for r, s in enumerate(theta_shards):
        if not (isinstance(s, np.ndarray) and s.dtype == np.float64 and s.flags.writeable):
            raise LayoutError(f"theta shard {r} must be a writable float64 array")

    v_shards = [np.asarray(v, dtype=np.float64) for v in v_shards]
    if normalize:
        sq = cluster.map(lambda r: float(v_shards[r] @ v_shards[r]))
        norm = math.sqrt(cluster.collectives.allreduce_scalar(sq)[0])
        if norm == 0.0:
            return [np.zeros_like(v) for v in v_shards]
        u = [v / norm for v in v_shards]
    else:
        norm = 1.0
        u = v_shards

    saved = [s.copy() for s in theta_shards] if restore == "snapshot" else None
    shift = 0.0

    def axpy(alpha):
        def step(r):
            theta_shards[r][:] = quantize(theta_shards[r] + alpha * u[r], precision)
        cluster.map(step)

    try:
        axpy(epsilon)
        shift = epsilon
        g_plus = cluster.gradient_pass(oracle, theta_shards, loader_slices, precision)
        axpy(-2.0 * epsilon)
        shift = -epsilon
        g_minus = cluster.gradient_pass(oracle, theta_shards, loader_slices, precision)
    finally:
        if saved is not None:
            for s, orig in zip(theta_shards, saved):
                s[:] = orig
        elif shift:
            axpy(-shift)

    scale = norm / (2.0 * epsilon * total_weight(oracle.weights))
    return cluster.map(lambda r: (g_plus[r] - g_minus[r]) * scale)


class ShardedOperator:
    """``x -> Hx`` through :func:`sharded_hvp`, holding the parameter shards per rank.

    Vectors are passed as full-length arrays but only ever touched shard by
    shard; :meth:`inner` is the matching all-reduce dot product for Krylov
    routines.
    """

    def __init__(self, oracle: Objective, theta, epsilon: float, cluster: SimulatedCluster,
                 precision: str = "fp64", loader_slices=None):
        self.oracle = oracle
        self.cluster = cluster
        self.layout = cluster.layout
        self.theta_shards = self.layout.split(theta)
        self.epsilon = epsilon
        self.precision = precision
        self.loader_slices = loader_slices

    @property
    def dim(self) -> int:
        return self.layout.total_dim

    def __call__(self, x) -> np.ndarray:
        shards = sharded_hvp(self.oracle, self.theta_shards, self.layout.split(x), self.epsilon,
                             self.layout, self.loader_slices, cluster=self.cluster,
                             precision=self.precision, normalize=False)
        return self.layout.concat(shards)

    def inner(self, x, y) -> float:
        return self.cluster.inner(x, y)


@dataclass
class AuditReport:
    counts: dict
    grad_pass_counts: dict
    extra_parameter_sized: int
    scalar_allreduces: int
    per_iteration_scalar: list

    def to_dict(self) -> dict:
        return {"counts": self.counts, "grad_pass_counts": self.grad_pass_counts,
                "extra_parameter_sized": self.extra_parameter_sized,
                "scalar_allreduces": self.scalar_allreduces,
                "per_iteration_scalar": self.per_iteration_scalar}


def collective_audit(collectives: CollectiveLayer, iteration_marks=None) -> AuditReport:
    """Summarise a collective log.

    Parameter-sized collectives (all-gather, reduce-scatter) outside a
    gradient pass count as extra. ``iteration_marks`` are log lengths recorded
    at iteration boundaries (see :func:`audit_lanczos`); scalar all-reduces
    are counted per interval.
    """
    log = collectives.log
    counts = Counter(k for k, _, _ in log)
    grad = Counter(k for k, ctx, _ in log if ctx == "grad_pass")
    extra = sum(1 for k, ctx, _ in log if k != "allreduce_scalar" and ctx != "grad_pass")
    per_iter = []
    if iteration_marks:
        for a, b in zip(iteration_marks, iteration_marks[1:]):
            per_iter.append(sum(1 for k, _, _ in log[a:b] if k == "allreduce_scalar"))
    return AuditReport(
        counts={k: counts[k] for k in CollectiveLayer.KINDS},
        grad_pass_counts={k: grad[k] for k in CollectiveLayer.KINDS},
        extra_parameter_sized=extra,
        scalar_allreduces=counts["allreduce_scalar"],
        per_iteration_scalar=per_iter,
    )


def shard_checksums(shards) -> list[str]:
    return [hashlib.sha256(np.ascontiguousarray(s, dtype=np.float64).tobytes()).hexdigest()
            for s in shards]


def run_manifest(layout: ShardLayout, seed, collectives: CollectiveLayer, shards) -> dict:
    """JSON-ready record of a sharded run: layout, seed, counters, output checksums."""
    return {"layout": {"boundaries": list(layout.boundaries), "ranks": layout.rank_count},
            "seed": seed, "reduction": collectives.reduction,
            "collectives": collectives.snapshot(),
            "payload_bytes": {k: collectives.payload_bytes[k] for k in CollectiveLayer.KINDS},
            "checksums": shard_checksums(shards)}


def audit_lanczos(operator: ShardedOperator, m: int, *, reorth="full", v0=None, seed=None,
                  storage: str = "fp64"):
    """Run Lanczos through a sharded operator and audit its collectives.

    Every dot product goes through the cluster's scalar all-reduce. Returns
    ``(LanczosResult, AuditReport)``; the report's ``per_iteration_scalar``
    counts reductions issued inside each iteration, excluding the one-off
    normalisation of the starting vector.
    """
    from .lanczos import lanczos

    log = operator.cluster.collectives.log
    marks = []

    def inner(x, y):
        out = operator.inner(x, y)
        if not marks:
            marks.append(len(log))
        return out

    def on_iteration(k):
        marks.append(len(log))

    res = lanczos(operator, operator.dim, m, reorth=reorth, storage=storage, v0=v0, seed=seed,
                  inner=inner, callback=on_iteration)
    return res, collective_audit(operator.cluster.collectives, marks)
