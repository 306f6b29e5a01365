"""Multi-scale optimization: per-head descent plus min-norm weighting of the
shared-parameter gradients (multiple-gradient descent, Frank-Wolfe solver).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ValidationError

TOL = 1e-4
MAX_ITERS = 50


def _gamma(uu: float, uv: float, vv: float) -> float:
    # weight on u minimizing |g u + (1-g) v|^2, from the three inner products
    if uv >= uu:
        return 1.0
    if uv >= vv:
        return 0.0
    denom = uu - 2.0 * uv + vv
    if denom <= 0.0:
        return 1.0
    return float(min(1.0, max(0.0, (vv - uv) / denom)))


def gamma_line_search(theta, theta_bar) -> float:
    """Weight on ``theta`` of the min-norm point on the segment [theta, theta_bar].

    Returns 1 when ``theta`` is already optimal, 0 when ``theta_bar`` is, else
    the interior minimizer, clamped to [0, 1].
    """
    u = np.asarray(theta, dtype=np.float64).ravel()
    v = np.asarray(theta_bar, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValidationError(f"line search vectors differ in length: {u.size} vs {v.size}")
    return _gamma(float(u @ u), float(u @ v), float(v @ v))


def _objective(M, a):
    return float(a @ M @ a)


def _exact_simplex_min(M):
    """Min of a^T M a on the simplex by checking every face (small task counts)."""
    k = M.shape[0]
    best, best_a = np.inf, None
    for r in range(1, k + 1):
        for S in itertools.combinations(range(k), r):
            idx = list(S)
            K = np.zeros((r + 1, r + 1))
            K[:r, :r] = 2.0 * M[np.ix_(idx, idx)]
            K[:r, r] = 1.0
            K[r, :r] = 1.0
            rhs = np.zeros(r + 1)
            rhs[r] = 1.0
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0][:r]
            if np.any(sol < -1e-12):
                continue
            a = np.zeros(k)
            a[idx] = np.clip(sol, 0.0, None)
            s = a.sum()
            if s <= 0:
                continue
            a /= s
            obj = _objective(M, a)
            if obj < best:
                best, best_a = obj, a
    return best_a, best


def mgda_weights(grads, max_iters: int = MAX_ITERS, tol: float = TOL,
                 polish: bool = True) -> np.ndarray:
    """Simplex weights of the min-norm point in the convex hull of ``grads``.

    ``grads`` is a sequence of equal-length vectors (or a [k, P] array).
    Frank-Wolfe from the barycenter on the Gram matrix; each iteration moves
    toward the vertex with the smallest inner product with the current point.
    With ``polish`` and at most three tasks the result is refined by an exact
    face enumeration, kept only if it lowers the norm.
    """
    G = np.asarray([np.asarray(g, dtype=np.float64).ravel() for g in grads])
    if G.ndim != 2 or G.shape[0] == 0 or G.shape[1] == 0:
        raise ValidationError("mgda_weights needs at least one nonempty gradient")
    k = G.shape[0]
    with np.errstate(invalid="ignore", over="ignore"):
        M = G @ G.T
    if not np.all(np.isfinite(M)):
        raise NumericError("non-finite entries in the gradient Gram matrix")
    alpha = np.full(k, 1.0 / k)
    if k == 1:
        return alpha
    for _ in range(max_iters):
        Ma = M @ alpha
        t = int(np.argmin(Ma))
        gamma = _gamma(float(alpha @ Ma), float(Ma[t]), float(M[t, t]))
        step = 1.0 - gamma
        alpha = gamma * alpha
        alpha[t] += step
        if step <= tol:
            break
    alpha = np.clip(alpha, 0.0, None)
    alpha /= alpha.sum()
    if polish and k <= 3:
        cand, obj = _exact_simplex_min(M)
        cur = _objective(M, alpha)
        if cand is not None and cur - obj > 1e-12 * max(cur, 1e-300):
            alpha = cand
    return alpha


@dataclass
class TaskGradients:
    """Flattened shared-parameter gradient per task plus per-head gradients.

    ``theta[task]`` is one vector laid out by ``offsets``; ``phi[task]`` maps
    parameter names of that task's head to arrays.
    """

    theta: dict
    phi: dict
    offsets: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = {v.size for v in self.theta.values()}
        if len(sizes) > 1:
            raise ValidationError(f"shared gradient lengths differ: {sorted(sizes)}")
        for task, vec in self.theta.items():
            if not np.all(np.isfinite(vec)):
                raise NumericError(f"non-finite shared gradient for task {task!r}")

    @classmethod
    def from_grads(cls, theta_names, theta_shapes, per_task: dict, head_names: dict):
        """Build from ``per_task[task] = {param name: grad array}``."""
        offsets, pos = {}, 0
        for name, shape in zip(theta_names, theta_shapes):
            size = int(np.prod(shape))
            offsets[name] = (pos, pos + size, tuple(shape))
            pos += size
        theta, phi = {}, {}
        for task, g in per_task.items():
            vec = np.empty(pos)
            for name in theta_names:
                a, b, _ = offsets[name]
                vec[a:b] = np.ravel(g[name])
            theta[task] = vec
            phi[task] = {n: g[n] for n in head_names.get(task, ())}
        return cls(theta, phi, offsets)

    def unflatten(self, vec) -> dict:
        return {n: vec[a:b].reshape(shape) for n, (a, b, shape) in self.offsets.items()}


def combine(grads: TaskGradients, mode: str = "mso") -> tuple[np.ndarray, np.ndarray]:
    """Task weights and the weighted shared-gradient vector.

    ``mso`` uses min-norm weights, ``plain`` the task mean, ``plain_sum`` the sum.
    """
    tasks = list(grads.theta)
    if not tasks:
        raise ContractError("no task gradients")
    V = np.stack([grads.theta[t] for t in tasks])
    if mode == "mso":
        alpha = mgda_weights(V)
    elif mode == "plain":
        alpha = np.full(len(tasks), 1.0 / len(tasks))
    elif mode == "plain_sum":
        alpha = np.ones(len(tasks))
    else:
        raise ContractError(f"unknown optimizer mode {mode!r}")
    return alpha, alpha @ V


def step(model, grads: TaskGradients, lr: float, mode: str = "mso") -> np.ndarray:
    """Apply one update in place and return the task weights (ordered as ``grads.theta``).

    Heads descend on their own loss; shared parameters descend on the weighted
    combination of task gradients.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    alpha, d = combine(grads, mode)
    updates = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for name, g in grads.unflatten(d).items():
            updates[name] = model.get(name) - lr * g
        for task, bundle in grads.phi.items():
            for name, g in bundle.items():
                updates[name] = model.get(name) - lr * g
    for name, val in updates.items():
        if not np.all(np.isfinite(val)):
            raise NumericError(f"non-finite update for parameter {name!r}")
    for name, val in updates.items():
        model.set(name, val)
    return alpha
