"""Analytic test objectives with exact gradients.

Every objective is a weighted sum of per-batch losses,
``L(theta) = sum_b w_b * l_b(theta)`` with weights normalised to sum to one,
and exposes ``batch_loss_grad`` so that estimators can reproduce the
per-batch accumulation of a dataloader. Objectives are immutable after
construction and hold no mutable evaluation state.

Parameter layout of :class:`MLPObjective` is layer-major, weights then
biases; each weight matrix has shape ``(fan_out, fan_in)`` and is flattened
row-major. The per-layer slices define the default block partition used by
the block-diagonal test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ObjectiveError(ValueError):
    """Invalid objective construction or configuration."""


def _sin_shift(z, k: int):
    # k-th derivative of sin evaluated at z, without rounding k*pi/2.
    return (np.sin, np.cos, lambda u: -np.sin(u), lambda u: -np.cos(u))[k % 4](z)


class Objective:
    """Base class: weighted multi-batch loss with exact gradient.

    Subclasses implement :meth:`batch_loss_grad` and set ``dim`` and
    ``weights``. Exact second-order information is exposed through
    :meth:`hessian` and :meth:`hvp` for use as ground truth.
    """

    dim: int
    weights: np.ndarray

    @property
    def n_batches(self) -> int:
        return len(self.weights)

    def batch_loss_grad(self, theta: np.ndarray, batch: int) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def loss_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """Dataset loss and gradient, accumulated in batch order."""
        theta = self._check(theta)
        loss = 0.0
        grad = np.zeros(self.dim)
        for b, w in enumerate(self.weights):
            lb, gb = self.batch_loss_grad(theta, b)
            loss += w * lb
            grad += w * gb
        return loss, grad

    def loss(self, theta) -> float:
        return self.loss_grad(theta)[0]

    def grad(self, theta) -> np.ndarray:
        return self.loss_grad(theta)[1]

    def hessian(self, theta) -> np.ndarray:
        theta = self._check(theta)
        eye = np.eye(self.dim)
        H = np.column_stack([self.hvp(theta, e) for e in eye])
        return 0.5 * (H + H.T)

    def hvp(self, theta, v) -> np.ndarray:
        return self.hessian(theta) @ np.asarray(v, dtype=np.float64)

    def curvature(self, theta, v) -> float:
        """Directional curvature ``v^T H(theta) v``."""
        v = np.asarray(v, dtype=np.float64)
        return float(v @ self.hvp(theta, v))

    def to_config(self) -> dict:
        raise NotImplementedError

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta)
        if theta.shape != (self.dim,):
            raise ObjectiveError(f"expected parameter vector of shape ({self.dim},), got {theta.shape}")
        return theta


def _normalise_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ObjectiveError(f"need {n} positive finite batch weights, got {weights!r}")
    return w / w.sum()


class QuadraticObjective(Objective):
    """``L(theta) = 0.5 * theta^T A theta`` for a symmetric matrix ``A``."""

    def __init__(self, A, *, name: str | None = None, config: dict | None = None):
        A = np.array(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ObjectiveError(f"A must be square, got shape {A.shape}")
        if not np.array_equal(A, A.T):
            raise ObjectiveError("A must be exactly symmetric")
        if not np.all(np.isfinite(A)):
            raise ObjectiveError("A has non-finite entries")
        A.setflags(write=False)
        self.A = A
        self.dim = A.shape[0]
        self.weights = np.ones(1)
        self._config = config or {"kind": "quadratic", "matrix": A.tolist()}

    def batch_loss_grad(self, theta, batch):
        g = self.A @ theta
        return 0.5 * float(theta @ g), g

    def hessian(self, theta=None):
        return self.A.copy()

    def hvp(self, theta, v):
        return self.A @ np.asarray(v, dtype=np.float64)

    def to_config(self):
        return dict(self._config)


def make_quadratic(A) -> QuadraticObjective:
    return QuadraticObjective(A)


def random_symmetric(dim: int, seed: int) -> np.ndarray:
    """Symmetric matrix ``(M + M^T) / 2`` with standard normal ``M``."""
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((dim, dim))
    return 0.5 * (M + M.T)


def block_coupled_matrix(block_sizes, coupling: float, seed: int = 0) -> np.ndarray:
    """Symmetric matrix with random diagonal blocks plus ``coupling`` times a
    random symmetric off-block part. ``coupling = 0`` is exactly block diagonal.

    The diagonal blocks and the off-block pattern are drawn independently of
    ``coupling``, so the same seed gives a one-parameter family.
    """
    sizes = [int(b) for b in block_sizes]
    if not sizes or min(sizes) < 1:
        raise ObjectiveError("block sizes must be positive")
    n = sum(sizes)
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((n, n))
    C = rng.standard_normal((n, n))
    diag, off = 0.5 * (D + D.T), 0.5 * (C + C.T)
    mask = np.zeros((n, n), dtype=bool)
    edges = np.cumsum([0, *sizes])
    for a, b in zip(edges, edges[1:]):
        mask[a:b, a:b] = True
    return np.where(mask, diag, coupling * off)


@dataclass(frozen=True)
class RippledSpec:
    """Parameters of the rippled test surfaces.

    1-D: ``f(x) = a*sin(x) + b*sin(omega*x)``.
    2-D: ``f(x, y) = (x^2 + y^2)/2 + b*sin(omega*x)*sin(omega*y)``.
    """

    b: float
    omega: float
    dims: int = 2
    a: float = 1.0


class RippledObjective(Objective):
    def __init__(self, spec: RippledSpec):
        if spec.dims not in (1, 2):
            raise ObjectiveError("rippled surface supports dims 1 or 2")
        if not spec.omega > 0:
            raise ObjectiveError("omega must be positive")
        if not (math.isfinite(spec.b) and math.isfinite(spec.a)):
            raise ObjectiveError("amplitudes must be finite")
        self.spec = spec
        self.dim = spec.dims
        self.weights = np.ones(1)

    def derivative_tensor(self, theta, order: int) -> np.ndarray:
        """Tensor of all partial derivatives of the given order at ``theta``."""
        s = self.spec
        theta = self._check(np.asarray(theta, dtype=np.float64))
        if s.dims == 1:
            x = theta[0]
            val = s.a * _sin_shift(x, order) + s.b * s.omega**order * _sin_shift(s.omega * x, order)
            return np.full((1,) * order, val) if order else np.asarray(val)
        x, y = theta
        T = np.empty((2,) * order)
        for idx in np.ndindex(*T.shape):
            nx = idx.count(0)
            ny = order - nx
            T[idx] = (s.b * s.omega**order
                      * _sin_shift(s.omega * x, nx) * _sin_shift(s.omega * y, ny))
        if order == 0:
            return np.asarray(T[()] + 0.5 * (x * x + y * y))
        if order == 1:
            T = T + theta
        elif order == 2:
            T = T + np.eye(2)
        return T

    def batch_loss_grad(self, theta, batch):
        return float(self.derivative_tensor(theta, 0)), self.derivative_tensor(theta, 1)

    def hessian(self, theta):
        return self.derivative_tensor(theta, 2)

    def grad_d3(self, theta, v) -> np.ndarray:
        """``grad(D_v^3 f)``: the fourth-derivative tensor contracted three times with ``v``."""
        T = self.derivative_tensor(theta, 4)
        return np.einsum("ijkl,j,k,l->i", T, v, v, v)

    def d4(self, theta, v) -> float:
        """``D^4 f(theta)[v, v, v, v]``."""
        return float(self.grad_d3(theta, v) @ np.asarray(v, dtype=np.float64))

    def to_config(self):
        s = self.spec
        kind = "rippled1d" if s.dims == 1 else "rippled2d"
        cfg = {"kind": kind, "b": s.b, "omega": s.omega}
        if s.dims == 1:
            cfg["a"] = s.a
        return cfg


def make_rippled(spec: RippledSpec) -> RippledObjective:
    return RippledObjective(spec)


class MLPObjective(Objective):
    """Squared-error regression loss of a tanh MLP, split into batches.

    ``l_b = mean over the batch of ||net(x) - y||^2``. Hidden layers use
    tanh, the output layer is linear. Gradients come from hand-written
    backpropagation; the same code run on complex inputs gives an exact
    complex-step Hessian-vector product, used as the reference ``hvp``.
    """

    def __init__(self, layer_sizes, inputs, targets, n_batches: int = 1,
                 weights=None, *, config: dict | None = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ObjectiveError(f"need at least input and output sizes, got {layer_sizes!r}")
        X = np.asarray(inputs, dtype=np.float64)
        Y = np.asarray(targets, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or X.shape[1] != sizes[0]:
            raise ObjectiveError(f"inputs must have shape (n, {sizes[0]}), got {X.shape}")
        if Y.shape != (X.shape[0], sizes[-1]):
            raise ObjectiveError(f"targets must have shape ({X.shape[0]}, {sizes[-1]}), got {Y.shape}")
        if not 1 <= n_batches <= X.shape[0]:
            raise ObjectiveError("batch count must be between 1 and the number of points")
        self.layer_sizes = tuple(sizes)
        self.X, self.Y = X, Y
        self.X.setflags(write=False)
        self.Y.setflags(write=False)
        self._batches = np.array_split(np.arange(X.shape[0]), n_batches)
        if weights is None:
            weights = [len(ix) for ix in self._batches]
        self.weights = _normalise_weights(weights, n_batches)

        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b, (fan_out, fan_in)))
        self.dim = offset
        self._config = config

    def layer_boundaries(self) -> list[int]:
        """Offsets ``[0, end_1, ..., P]`` of the per-layer parameter blocks."""
        return [0] + [b.stop for _, b, _ in self._slices]

    def unflatten(self, theta):
        return [(theta[w].reshape(shape), theta[b]) for w, b, shape in self._slices]

    def initial_params(self, seed: int = 0) -> np.ndarray:
        """Scaled-normal initialisation (std ``1/sqrt(fan_in)``), zero biases."""
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.dim)
        for w, _, (fan_out, fan_in) in self._slices:
            theta[w] = rng.standard_normal(fan_out * fan_in) / math.sqrt(fan_in)
        return theta

    def _loss_grad_on(self, theta, X, Y):
        params = self.unflatten(theta)
        acts = [X]
        for i, (W, b) in enumerate(params):
            z = acts[-1] @ W.T + b
            acts.append(np.tanh(z) if i < len(params) - 1 else z)
        n = X.shape[0]
        r = acts[-1] - Y
        loss = np.sum(r * r) / n
        grad = np.zeros(self.dim, dtype=np.result_type(theta, np.float64))
        delta = (2.0 / n) * r
        for i in range(len(params) - 1, -1, -1):
            w, b, _ = self._slices[i]
            grad[w] = (delta.T @ acts[i]).ravel()
            grad[b] = delta.sum(axis=0)
            if i:
                a = acts[i]
                delta = (delta @ params[i][0]) * (1.0 - a * a)
        return loss, grad

    def batch_loss_grad(self, theta, batch):
        idx = self._batches[batch]
        loss, grad = self._loss_grad_on(self._check(theta), self.X[idx], self.Y[idx])
        return float(loss), grad

    def hvp(self, theta, v):
        """Complex-step ``Hv``: ``Im(grad(theta + i*h*v)) / h``, exact to roundoff."""
        theta = self._check(np.asarray(theta, dtype=np.float64))
        v = np.asarray(v, dtype=np.float64)
        scale = np.linalg.norm(v)
        if scale == 0:
            return np.zeros(self.dim)
        h = 1e-30
        z = theta + 1j * h * (v / scale)
        out = np.zeros(self.dim)
        for b, w in enumerate(self.weights):
            idx = self._batches[b]
            _, g = self._loss_grad_on(z, self.X[idx], self.Y[idx])
            out += w * g.imag
        return out * (scale / h)

    def subsample(self, fraction: float) -> "MLPObjective":
        """Objective restricted to the first ``ceil(fraction * n_batches)`` batches."""
        if not 0 < fraction <= 1:
            raise ObjectiveError("subsample fraction must lie in (0, 1]")
        k = max(1, math.ceil(fraction * self.n_batches))
        idx = np.concatenate(self._batches[:k])
        cfg = dict(self._config) if self._config else None
        if cfg is not None:
            cfg["subsample"] = fraction
        return MLPObjective(self.layer_sizes, self.X[idx], self.Y[idx], n_batches=k,
                            weights=self.weights[:k], config=cfg)

    def to_config(self):
        if self._config is None:
            raise ObjectiveError("MLP built from explicit data has no reproducible config")
        return dict(self._config)


def synthetic_regression(n_points: int, d_in: int, d_out: int, seed: int):
    """Seeded regression data set.

    Inputs are standard normal. Targets are ``sin(X @ U)`` plus ``0.1``-scaled
    standard normal noise, where ``U`` has N(0, 1/d_in) entries. All draws
    come from one ``numpy.random.default_rng(seed)`` stream in the order
    X, U, noise.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_points, d_in))
    U = rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)
    Y = np.sin(X @ U) + 0.1 * rng.standard_normal((n_points, d_out))
    return X, Y


def make_mlp(layer_sizes, n_points: int = 32, n_batches: int = 4, seed: int = 0,
             weights=None) -> MLPObjective:
    """Tanh MLP on a seeded synthetic regression set (see :func:`synthetic_regression`)."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ObjectiveError(f"need at least input and output sizes, got {layer_sizes!r}")
    X, Y = synthetic_regression(n_points, sizes[0], sizes[-1], seed)
    config = {"kind": "mlp", "layers": sizes, "points": n_points,
              "batches": n_batches, "seed": seed}
    if weights is not None:
        config["weights"] = [float(w) for w in weights]
    return MLPObjective(sizes, X, Y, n_batches=n_batches, weights=weights, config=config)


def oracle_from_config(cfg: dict) -> Objective:
    """Build an objective from its JSON config.

    Recognised kinds and keys:

    - ``quadratic``: either ``matrix`` (nested list), ``diag`` (list),
      ``blocks`` (list of sizes) with ``coupling`` and ``seed``, or ``random``
      with ``dim`` and ``seed``.
    - ``rippled1d``: ``a``, ``b``, ``omega``; ``rippled2d``: ``b``, ``omega``.
    - ``mlp``: ``layers``, ``points``, ``batches``, ``seed``, optional
      ``weights`` and ``subsample``.
    """
    cfg = dict(cfg)
    kind = cfg.get("kind")
    if kind == "quadratic":
        if "matrix" in cfg:
            A = np.asarray(cfg["matrix"], dtype=np.float64)
        elif "diag" in cfg:
            A = np.diag(np.asarray(cfg["diag"], dtype=np.float64))
        elif "blocks" in cfg:
            A = block_coupled_matrix(cfg["blocks"], float(cfg.get("coupling", 0.0)),
                                     int(cfg.get("seed", 0)))
        elif cfg.get("random"):
            A = random_symmetric(int(cfg["dim"]), int(cfg.get("seed", 0)))
        else:
            raise ObjectiveError("quadratic config needs 'matrix', 'diag' or 'random'")
        return QuadraticObjective(A, config=cfg)
    if kind in ("rippled1d", "rippled2d"):
        dims = 1 if kind == "rippled1d" else 2
        try:
            spec = RippledSpec(b=float(cfg["b"]), omega=float(cfg["omega"]), dims=dims,
                               a=float(cfg.get("a", 1.0)))
        except KeyError as exc:
            raise ObjectiveError(f"{kind} config missing key {exc}") from None
        return RippledObjective(spec)
    if kind == "mlp":
        try:
            obj = make_mlp(cfg["layers"], n_points=int(cfg.get("points", 32)),
                           n_batches=int(cfg.get("batches", 4)), seed=int(cfg.get("seed", 0)),
                           weights=cfg.get("weights"))
        except KeyError as exc:
            raise ObjectiveError(f"mlp config missing key {exc}") from None
        if "subsample" in cfg and cfg["subsample"] != 1:
            obj = obj.subsample(float(cfg["subsample"]))
        return obj
    raise ObjectiveError(f"unknown objective kind {kind!r}")
