"""Block-diagonal Hessian test.

For a unit probe ``v`` and a contiguous block ``b``, compare the block
restriction of the full product, ``(Hv)^(b)``, with that of the masked
product ``(H v^(b))^(b)`` where ``v^(b)`` zeroes ``v`` outside the block.
Their difference is exactly the cross-block contribution
``sum_{c != b} H_bc v^(c)``, so a block-diagonal Hessian gives zero error
and unit cosine.

One full HVP per probe is shared by all blocks; each block then costs one
masked HVP.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .fdhvp import hvp_central
from .objectives import Objective

DEGENERATE_NORM = 1e-14


@dataclass(frozen=True)
class BlockPartition:
    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"blocks must be nonempty, contiguous and start at 0: {b}")

    @classmethod
    def from_objective(cls, oracle: Objective) -> "BlockPartition":
        """Per-layer blocks of an MLP, or a single block otherwise."""
        if hasattr(oracle, "layer_boundaries"):
            return cls(tuple(oracle.layer_boundaries()))
        return cls((0, oracle.dim))

    @classmethod
    def equal(cls, dim: int, n_blocks: int) -> "BlockPartition":
        edges = np.linspace(0, dim, n_blocks + 1).round().astype(int)
        return cls(tuple(int(e) for e in edges))

    @property
    def dim(self) -> int:
        return self.boundaries[-1]

    def __len__(self) -> int:
        return len(self.boundaries) - 1

    def slice(self, b: int) -> slice:
        return slice(self.boundaries[b], self.boundaries[b + 1])


def mask_probe(v, partition: BlockPartition, block: int) -> np.ndarray:
    """Copy of ``v`` with every entry outside ``block`` set to zero (no renormalisation)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    sl = partition.slice(block)
    out[sl] = v[sl]
    return out


def cosine(a, b) -> float:
    """Cosine similarity; 1 for two zero vectors, 0 if exactly one is zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _mean_std(x) -> dict:
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return {"mean": float("nan"), "std": float("nan")}
    return {"mean": float(x.mean()), "std": float(x.std())}


@dataclass
class BlockStats:
    """Per-(probe, block) metrics; arrays have shape ``(n_probes, n_blocks)``.

    Degenerate items (``||(Hv)^(b)|| < 1e-14``) carry NaN relative error and
    are excluded from relative-error aggregates.
    """

    abs_diff: np.ndarray
    rel_error: np.ndarray
    cosine: np.ndarray
    degenerate: np.ndarray
    partition: BlockPartition
    epsilon: float | None = None

    @property
    def n_probes(self) -> int:
        return self.abs_diff.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.abs_diff.shape[1]

    def aggregate(self, metric: str, how: str = "joint") -> dict:
        """Mean and std of ``metric`` pooled over all items (``joint``), or of the
        per-block means (``by_block``), or of the per-probe means (``by_probe``)."""
        x = getattr(self, metric)
        if how == "joint":
            return _mean_std(x)
        with np.errstate(invalid="ignore"):
            if how == "by_block":
                return _mean_std(np.nanmean(x, axis=0))
            if how == "by_probe":
                return _mean_std(np.nanmean(x, axis=1))
        raise ValueError(f"unknown aggregation {how!r}")

    def report(self) -> dict:
        """Summary in the layout of a mean +- std table."""
        out = {}
        for how in ("joint", "by_block", "by_probe"):
            out[how] = {m: self.aggregate(m, how) for m in ("abs_diff", "rel_error", "cosine")}
        return {**out["joint"], "aggregations": out, "blocks": self.n_blocks,
                "probes": self.n_probes, "epsilon": self.epsilon,
                "degenerate": [[int(p), int(b)] for p, b in np.argwhere(self.degenerate)]}

    def write_json(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump({**self.report(), **(extra or {})}, fh, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe", "block", "start", "stop", "abs_diff", "rel_error", "cosine",
                        "degenerate"])
            for p in range(self.n_probes):
                for b in range(self.n_blocks):
                    sl = self.partition.slice(b)
                    w.writerow([p, b, sl.start, sl.stop, repr(float(self.abs_diff[p, b])),
                                repr(float(self.rel_error[p, b])), repr(float(self.cosine[p, b])),
                                int(self.degenerate[p, b])])


def block_diag_stats(matvec, partition: BlockPartition, probes, epsilon: float | None = None
                     ) -> BlockStats:
    """Metrics for explicit probes under any ``matvec``."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    P, B = len(probes), len(partition)
    abs_diff = np.zeros((P, B))
    rel = np.zeros((P, B))
    cos = np.zeros((P, B))
    degenerate = np.zeros((P, B), dtype=bool)
    for i, v in enumerate(probes):
        full = matvec(v)
        for b in range(B):
            sl = partition.slice(b)
            hb = full[sl]
            mb = matvec(mask_probe(v, partition, b))[sl]
            d = float(np.linalg.norm(hb - mb))
            n = float(np.linalg.norm(hb))
            abs_diff[i, b] = d
            cos[i, b] = cosine(hb, mb)
            if n < DEGENERATE_NORM:
                degenerate[i, b] = True
                rel[i, b] = math.nan
            else:
                rel[i, b] = d / n
    return BlockStats(abs_diff, rel, cos, degenerate, partition, epsilon)


def sample_probes(dim: int, n_probes: int, seed: int) -> np.ndarray:
    """``n_probes`` draws of ``v ~ N(0, I)`` normalised to unit length."""
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n_probes, dim))
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def block_diag_test(oracle: Objective, theta, partition: BlockPartition | None = None,
                    n_probes: int = 10, epsilon: float = 1e-4, seed: int = 0, *,
                    method: str = "fd", matvec=None) -> BlockStats:
    """Run the block-diagonal test at ``theta``.

    ``method="fd"`` uses :func:`hvp_central`, ``"exact"`` the objective's
    reference ``hvp``. A custom ``matvec`` (e.g. a sharded operator)
    overrides both.
    """
    partition = partition or BlockPartition.from_objective(oracle)
    if partition.dim != oracle.dim:
        raise ValueError("partition does not cover the parameter vector")
    theta = np.array(theta, dtype=np.float64)
    if matvec is None:
        if method == "fd":
            def matvec(v):
                return hvp_central(oracle, theta, v, epsilon)
        elif method == "exact":
            def matvec(v):
                return oracle.hvp(theta, v)
            epsilon = None
        else:
            raise ValueError(f"unknown method {method!r}")
    return block_diag_stats(matvec, partition, sample_probes(oracle.dim, n_probes, seed), epsilon)
