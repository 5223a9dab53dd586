"""Federated problems: per-client shards, gradient oracles and the composite objective."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..regularizers import Regularizer, h_value
from .data import Dataset, DatasetShard
from .models import LeastSquares, Model, SmoothnessEstimate


def full_grad(model: Model, params, shard: DatasetShard) -> np.ndarray:
    """Exact average gradient over the shard."""
    return model.grad(params, shard.X, shard.y)


def stochastic_grad(model: Model, params, shard: DatasetShard, B: int, rng: np.random.Generator,
                    replace: bool = True) -> np.ndarray:
    """Minibatch gradient from ``B`` samples.

    With ``replace=False`` and ``B == m`` the whole shard is used in order, so
    the result equals :func:`full_grad` bit for bit.
    """
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    if not replace:
        if B > shard.m:
            raise ValueError(f"batch size {B} exceeds shard size {shard.m} without replacement")
        if B == shard.m:
            return full_grad(model, params, shard)
        idx = rng.permutation(shard.m)[:B]
    else:
        idx = rng.integers(0, shard.m, size=B)
    return model.grad(params, shard.X[idx], shard.y[idx])


def estimate_L(model: Model, data) -> SmoothnessEstimate:
    """Smoothness constant of ``model`` on a dataset, a shard or a list of shards.

    For a list the largest per-shard constant is returned, since every local
    loss must be smooth with the same constant.
    """
    if isinstance(data, (list, tuple)):
        ests = [estimate_L(model, s) for s in data]
        return max(ests, key=lambda e: e.L)
    if isinstance(data, Dataset):
        X, y = data.X, data.labels
    elif isinstance(data, DatasetShard):
        X, y = data.X, data.y
    else:
        X, y = np.asarray(data, dtype=float), None
    if len(X) == 0:
        raise ValueError("cannot estimate smoothness on an empty dataset")
    if y is not None and hasattr(model, "widths"):
        return model.smoothness(X, y)
    return model.smoothness(X)


@dataclass(eq=False)
class FederatedProblem:
    """``f(z) = (1/N) sum_i f_i(z)`` with uniform client weights.

    ``mu``, ``z_star`` and ``phi_star`` are filled in when known in closed form
    (the synthetic quadratics); ``phi_star`` refers to ``f`` alone.
    """

    model: Model
    shards: list[DatasetShard]
    L: float
    L_method: str = "analytic"
    mu: float | None = None
    z_star: np.ndarray | None = None
    phi_star: float | None = None
    eval_X: np.ndarray | None = None
    eval_y: np.ndarray | None = None
    z0: np.ndarray | None = None

    @property
    def N(self) -> int:
        return len(self.shards)

    @property
    def d(self) -> int:
        return self.model.dim

    def local_loss(self, i: int, z) -> float:
        s = self.shards[i]
        return self.model.loss(z, s.X, s.y)

    def local_grad(self, i: int, z) -> np.ndarray:
        return full_grad(self.model, z, self.shards[i])

    def local_grads(self, z) -> np.ndarray:
        return np.stack([self.local_grad(i, z) for i in range(self.N)])

    def f(self, z) -> float:
        return float(np.mean([self.local_loss(i, z) for i in range(self.N)]))

    def grad_f(self, z) -> np.ndarray:
        return self.local_grads(z).mean(axis=0)

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.d) if self.z0 is None else self.z0.copy()

    def accuracy(self, z) -> float | None:
        if self.eval_X is None or isinstance(self.model, LeastSquares):
            return None
        return float(np.mean(self.model.predict(z, self.eval_X) == self.eval_y))

    def shard_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.shards:
            h.update(np.asarray(s.indices, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]


def objective_phi(problem: FederatedProblem, params, reg: Regularizer) -> float:
    """``phi(z) = f(z) + h(z)`` with ``f`` the unweighted client average."""
    return problem.f(params) + h_value(reg, params)


def quadratic_problem(A_list, b_list) -> FederatedProblem:
    """Least-squares clients ``f_i(x) = ||A_i x - b_i||^2 / (2 m_i)`` with closed-form constants."""
    A_list = [np.atleast_2d(np.asarray(A, dtype=float)) for A in A_list]
    b_list = [np.atleast_1d(np.asarray(b, dtype=float)) for b in b_list]
    d = A_list[0].shape[1]
    model = LeastSquares(d)
    shards, hessians, rhs = [], [], []
    for i, (A, b) in enumerate(zip(A_list, b_list)):
        m = A.shape[0]
        shards.append(DatasetShard(i, np.arange(m), A, b))
        hessians.append(A.T @ A / m)
        rhs.append(A.T @ b / m)
    H = np.mean(hessians, axis=0)
    L = max(float(np.linalg.eigvalsh(Hi)[-1]) for Hi in hessians)
    mu = float(np.linalg.eigvalsh(H)[0])
    problem = FederatedProblem(model, shards, L=L, L_method="analytic", mu=mu)
    if mu > 0:
        z_star = np.linalg.solve(H, np.mean(rhs, axis=0))
        problem.z_star = z_star
        problem.phi_star = problem.f(z_star)
    return problem


def synth_quadratic(d: int, N: int, condition_number: float, seed: int,
                    samples_per_client: int | None = None, target_scale: float = 1.0) -> FederatedProblem:
    """Strongly convex least-squares clients with differing local minimizers.

    Each client's Hessian ``A_i^T A_i / m`` is a random rotation of the same
    spectrum, log-spaced on ``[1/condition_number, 1]``; the averaged Hessian
    therefore has its spectrum inside that interval.  Targets ``b_i`` are
    drawn independently per client, so local minimizers disagree.
    """
    if d < 1 or N < 1 or condition_number < 1:
        raise ValueError("synth_quadratic requires d >= 1, N >= 1, condition_number >= 1")
    rng = np.random.default_rng(seed)
    m = samples_per_client or 2 * d
    if m < d:
        raise ValueError("samples_per_client must be >= d")
    spectrum = np.geomspace(1.0 / condition_number, 1.0, d) if d > 1 else np.ones(1)
    A_list, b_list = [], []
    for _ in range(N):
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        U, _ = np.linalg.qr(rng.normal(size=(m, d)))
        A_list.append(U @ np.diag(np.sqrt(m * spectrum)) @ Q.T)
        b_list.append(target_scale * rng.normal(size=m) * np.sqrt(m / d))
    return quadratic_problem(A_list, b_list)


def federated_from_dataset(dataset: Dataset, shards, model: Model, eval_set: Dataset | None = None,
                           seed: int = 0) -> FederatedProblem:
    """Wrap client shards (``DatasetShard`` objects or index arrays) as a federated problem."""
    shards = [s if isinstance(s, DatasetShard) else DatasetShard.from_dataset(dataset, i, s)
              for i, s in enumerate(shards)]
    est = estimate_L(model, shards)
    problem = FederatedProblem(model, shards, L=est.L, L_method=est.method)
    if eval_set is not None:
        problem.eval_X, problem.eval_y = eval_set.X, eval_set.labels
    if not isinstance(model, LeastSquares) and hasattr(model, "widths"):
        problem.z0 = model.init_params(np.random.default_rng(seed))
    return problem
