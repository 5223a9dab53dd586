"""Per-round update rules for FedCanon, FedCanon II and the baselines.

Client states are mutated in place.  Within a round the client computations
are independent and may be fanned out to an executor; aggregation always
stacks the client results in ascending client id and reduces them in that
order, so results are bitwise identical regardless of scheduling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .problems.federated import FederatedProblem, stochastic_grad
from .regularizers import Regularizer, check_prox_step, prox

ALGORITHMS = ("fedcanon", "fedcanon2", "fedpgd", "fedavg", "scaffold", "scaffnew", "pgd")


class DivergenceError(FloatingPointError):
    def __init__(self, round_index: int, where: str = "state"):
        self.round = round_index
        super().__init__(f"non-finite {where} at round {round_index}")


class ConsistencyError(RuntimeError):
    """FedCanon II client copies of the global model drifted apart."""


class UnsupportedConfigError(ValueError):
    pass


@dataclass
class ClientState:
    i: int
    x: np.ndarray  # local model at the start of the next round
    c: np.ndarray  # drift-correction control variable
    v: np.ndarray  # average local gradient of the last completed round
    rng: np.random.Generator
    e: np.ndarray | None = None  # SCAFFOLD / SCAFFNEW local control


@dataclass
class ServerState:
    z: np.ndarray
    alpha: float
    t: int = 0
    e: np.ndarray | None = None  # SCAFFOLD global control


@dataclass
class RoundInfo:
    """What one round moved over the wire and how many prox maps it cost."""

    delta_bar: np.ndarray
    deltas: np.ndarray
    prox_count: int
    floats_per_client: int
    averaged_model: np.ndarray | None = None
    local_models: np.ndarray | None = None
    communicated: bool = True
    extra: dict = field(default_factory=dict)


def prox_count_formula(algorithm: str, N: int, K: int) -> int:
    return {
        "fedcanon": 1,
        "fedcanon2": N,
        "fedpgd": N * K + 1,
        "fedavg": 0,
        "scaffold": 0,
        "scaffnew": 0,
        "pgd": 1,
    }[algorithm]


def floats_formula(algorithm: str, d: int) -> int:
    """Per-client floats exchanged in a communicating round (model-size payloads only)."""
    return {
        "fedcanon": 3 * d,
        "fedcanon2": 2 * d,
        "fedpgd": 2 * d,
        "fedavg": 2 * d,
        "scaffold": 4 * d,
        "scaffnew": 2 * d,
        "pgd": 0,
    }[algorithm]


class GradientOracle:
    """Local gradient ``g_i(x)``: exact (``batch=None``) or a seeded minibatch estimate."""

    def __init__(self, problem: FederatedProblem, batch: int | None = None, replace: bool = True):
        self.problem = problem
        self.batch = batch
        self.replace = replace

    @property
    def exact(self) -> bool:
        return self.batch is None

    def __call__(self, i: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.batch is None:
            return self.problem.local_grad(i, x)
        shard = self.problem.shards[i]
        return stochastic_grad(self.problem.model, x, shard, min(self.batch, shard.m), rng, replace=self.replace)


def _map(fn, clients, executor):
    if executor is None:
        return [fn(cl) for cl in clients]
    return list(executor.map(fn, clients))


def _average(rows) -> np.ndarray:
    stacked = np.stack(rows)
    return np.add.reduce(stacked, axis=0) / len(rows)


def _check_finite(t: int, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(t)


def _local_sgd(oracle, cl, x, beta, K, correction=None, reg=None):
    """``K`` local steps from ``x``; returns the final iterate and the gradient average."""
    gsum = np.zeros_like(x)
    for _ in range(K):
        g = oracle(cl.i, x, cl.rng)
        gsum += g
        if correction is not None:
            x = x - beta * (g + correction)
        else:
            x = x - beta * g
        if reg is not None:
            x = prox(reg, beta, x)
    return x, gsum / K


def fedcanon_round(server: ServerState, clients: list[ClientState], oracle, beta: float, K: int,
                   reg: Regularizer, executor=None) -> RoundInfo:
    """One round of FedCanon: corrected local SGD, normalized uplink, single server prox."""
    z, alpha = server.z, server.alpha

    def local(cl):
        x_K, v = _local_sgd(oracle, cl, z.copy(), beta, K, correction=cl.c)
        return (z - x_K) / (beta * K), v

    out = _map(local, clients, executor)
    deltas = np.stack([d for d, _ in out])
    delta_bar = _average(deltas)
    z_next = prox(reg, alpha, z - alpha * delta_bar)
    for cl, (delta_i, v_i) in zip(clients, out):
        cl.c = cl.c + delta_bar - delta_i
        cl.v = v_i
        cl.x = z_next
    server.z = z_next
    server.t += 1
    _check_finite(server.t, z_next, deltas)
    return RoundInfo(delta_bar, deltas, prox_count=1, floats_per_client=3 * z.size)


def fedcanon2_round(clients: list[ClientState], oracle, beta: float, K: int, alpha: float,
                    reg: Regularizer, t: int = 0, executor=None) -> RoundInfo:
    """FedCanon II: same iterates as FedCanon, but each client applies the prox itself."""
    d = clients[0].x.size
    ref = clients[0].x
    spread = max(float(np.max(np.abs(cl.x - ref))) for cl in clients)
    if spread > 1e-9 * math.sqrt(d):
        raise ConsistencyError(f"client copies differ by {spread:.3e} at round {t}")

    def local(cl):
        x0 = cl.x
        x_K, v = _local_sgd(oracle, cl, x0.copy(), beta, K, correction=cl.c)
        return (x0 - x_K) / (beta * K), v

    out = _map(local, clients, executor)
    deltas = np.stack([d_ for d_, _ in out])
    delta_bar = _average(deltas)
    for cl, (delta_i, v_i) in zip(clients, out):
        cl.x = prox(reg, alpha, cl.x - alpha * delta_bar)
        cl.c = cl.c + delta_bar - delta_i
        cl.v = v_i
    _check_finite(t + 1, clients[0].x, deltas)
    return RoundInfo(delta_bar, deltas, prox_count=len(clients), floats_per_client=2 * d)


def fedpgd_round(server: ServerState, clients: list[ClientState], oracle, beta: float, K: int,
                 reg: Regularizer, executor=None) -> RoundInfo:
    """Federated proximal gradient: a prox after every local step, then a server prox."""
    check_prox_step(reg, beta)
    z, alpha = server.z, server.alpha

    def local(cl):
        return _local_sgd(oracle, cl, z.copy(), beta, K, reg=reg)

    out = _map(local, clients, executor)
    local_models = np.stack([x for x, _ in out])
    deltas = z - local_models
    delta_bar = _average(deltas)
    z_next = prox(reg, alpha, z - alpha * delta_bar)
    for cl, (x_K, v_i) in zip(clients, out):
        cl.v = v_i
        cl.x = z_next
    server.z = z_next
    server.t += 1
    _check_finite(server.t, z_next)
    return RoundInfo(delta_bar, deltas, prox_count=len(clients) * K + 1, floats_per_client=2 * z.size,
                     averaged_model=_average(local_models), local_models=local_models)


def fedavg_round(server: ServerState, clients: list[ClientState], oracle, beta: float, K: int,
                 executor=None) -> RoundInfo:
    """Plain local SGD followed by model averaging; the regularizer is ignored."""
    z = server.z

    def local(cl):
        return _local_sgd(oracle, cl, z.copy(), beta, K)

    out = _map(local, clients, executor)
    local_models = np.stack([x for x, _ in out])
    z_next = _average(local_models)
    for cl, (_, v_i) in zip(clients, out):
        cl.v = v_i
        cl.x = z_next
    server.z = z_next
    server.t += 1
    _check_finite(server.t, z_next)
    return RoundInfo(z - z_next, z - local_models, prox_count=0, floats_per_client=2 * z.size,
                     averaged_model=z_next, local_models=local_models)


def scaffold_round(server: ServerState, clients: list[ClientState], oracle, beta: float, K: int,
                   alpha_s: float, executor=None) -> RoundInfo:
    """SCAFFOLD with option II control updates and full participation."""
    z, e = server.z, server.e
    if e is None:
        raise ValueError("SCAFFOLD server state needs a global control variable")

    def local(cl):
        x_K, v = _local_sgd(oracle, cl, z.copy(), beta, K, correction=e - cl.e)
        delta = z - x_K
        return delta, delta / (beta * K) - e, v

    out = _map(local, clients, executor)
    deltas = np.stack([d_ for d_, _, _ in out])
    de = np.stack([de_ for _, de_, _ in out])
    for cl, (_, de_i, v_i) in zip(clients, out):
        cl.e = cl.e + de_i
        cl.v = v_i
    z_next = z - alpha_s * _average(deltas)
    server.e = e + _average(de)
    server.z = z_next
    server.t += 1
    for cl in clients:
        cl.c = server.e - cl.e
        cl.x = z_next
    _check_finite(server.t, z_next)
    return RoundInfo(_average(deltas), deltas, prox_count=0, floats_per_client=4 * z.size)


def scaffnew_round(clients: list[ClientState], oracle, beta: float, p: float, rng: np.random.Generator,
                   reg: Regularizer | None = None, t: int = 0, executor=None) -> RoundInfo:
    """One SCAFFNEW step: a local step everywhere, synchronization with probability ``p``."""
    if reg is not None and not reg.is_zero:
        raise UnsupportedConfigError("SCAFFNEW handles smooth objectives only; configure a zero regularizer")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"communication probability must lie in (0, 1], got {p}")

    def local(cl):
        g = oracle(cl.i, cl.x, cl.rng)
        return cl.x - beta * (g + cl.e), g

    out = _map(local, clients, executor)
    x_hat = np.stack([x for x, _ in out])
    communicate = bool(rng.random() < p)
    if communicate:
        x_bar = _average(x_hat)
        for cl, xh, (_, g) in zip(clients, x_hat, out):
            cl.x = x_bar
            cl.e = cl.e - (p / beta) * (x_bar - xh)
            cl.v = g
    else:
        for cl, xh, (_, g) in zip(clients, x_hat, out):
            cl.x = xh
            cl.v = g
    x_mean = _average([cl.x for cl in clients])
    _check_finite(t + 1, x_mean)
    d = x_mean.size
    return RoundInfo(np.zeros(d), np.zeros((len(clients), d)), prox_count=0,
                     floats_per_client=2 * d if communicate else 0, communicated=communicate)


def prox_gradient(z, alpha: float, grad, reg: Regularizer) -> np.ndarray:
    return (z - prox(reg, alpha, z - alpha * grad)) / alpha


def prox_gradient_norm(z, alpha: float, grad, reg: Regularizer) -> float:
    """``||(z - prox_{alpha h}(z - alpha grad)) / alpha||^2``; equals ``||grad||^2`` when ``h = 0``."""
    G = prox_gradient(z, alpha, grad, reg)
    return float(G @ G)


def pgd_reference(z0, alpha: float, T: int, grad_oracle, reg: Regularizer) -> np.ndarray:
    """Centralized proximal gradient iterates ``z^0, ..., z^T`` (shape ``(T+1, d)``)."""
    check_prox_step(reg, alpha)
    zs = np.empty((T + 1, np.size(z0)))
    zs[0] = z = np.asarray(z0, dtype=float)
    for t in range(T):
        z = prox(reg, alpha, z - alpha * grad_oracle(z))
        _check_finite(t + 1, z)
        zs[t + 1] = z
    return zs


def client_seeds(seed: int, N: int) -> list[np.random.SeedSequence]:
    """``N`` client streams plus one extra stream for server-side coin flips."""
    return np.random.SeedSequence(seed).spawn(N + 1)


class Federation:
    """Owns the server and client states of one run and advances them a round at a time."""

    def __init__(self, problem: FederatedProblem, reg: Regularizer, algorithm: str, alpha: float,
                 beta: float, K: int = 1, batch: int | None = None, p: float = 1.0, seed: int = 0,
                 executor=None, replace: bool = True):
        if algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
        if K < 1:
            raise ValueError("K must be >= 1")
        if algorithm in ("fedcanon", "fedcanon2", "fedpgd", "pgd"):
            check_prox_step(reg, alpha)
        if algorithm == "scaffnew" and not reg.is_zero:
            raise UnsupportedConfigError("SCAFFNEW handles smooth objectives only; configure a zero regularizer")
        self.problem, self.reg, self.algorithm = problem, reg, algorithm
        self.alpha, self.beta, self.K, self.p = alpha, beta, K, p
        self.oracle = GradientOracle(problem, batch, replace)
        self.executor = executor
        seqs = client_seeds(seed, problem.N)
        z0 = problem.initial_point()
        d = z0.size
        self.clients = [
            ClientState(i, z0.copy(), np.zeros(d), np.zeros(d), np.random.default_rng(seqs[i]), e=np.zeros(d))
            for i in range(problem.N)
        ]
        self.server = ServerState(z0.copy(), alpha, e=np.zeros(d))
        self.coin = np.random.default_rng(seqs[-1])
        self.t = 0

    @property
    def z(self) -> np.ndarray:
        if self.algorithm == "fedcanon2":
            return self.clients[0].x
        if self.algorithm == "scaffnew":
            return _average([cl.x for cl in self.clients])
        return self.server.z

    def step(self) -> RoundInfo:
        # overflow shows up as non-finite state and is reported by the divergence guard
        with np.errstate(over="ignore", invalid="ignore"):
            info = self._step()
        self.t += 1
        return info

    def _step(self) -> RoundInfo:
        a, cl, s = self.algorithm, self.clients, self.server
        if a == "fedcanon":
            info = fedcanon_round(s, cl, self.oracle, self.beta, self.K, self.reg, self.executor)
        elif a == "fedcanon2":
            info = fedcanon2_round(cl, self.oracle, self.beta, self.K, self.alpha, self.reg, self.t, self.executor)
        elif a == "fedpgd":
            info = fedpgd_round(s, cl, self.oracle, self.beta, self.K, self.reg, self.executor)
        elif a == "fedavg":
            info = fedavg_round(s, cl, self.oracle, self.beta, self.K, self.executor)
        elif a == "scaffold":
            info = scaffold_round(s, cl, self.oracle, self.beta, self.K, self.alpha, self.executor)
        elif a == "scaffnew":
            info = scaffnew_round(cl, self.oracle, self.beta, self.p, self.coin, self.reg, self.t, self.executor)
        else:
            grad = self.problem.grad_f(s.z)
            s.z = prox(self.reg, self.alpha, s.z - self.alpha * grad)
            _check_finite(self.t + 1, s.z)
            info = RoundInfo(grad, np.zeros((0, grad.size)), prox_count=1, floats_per_client=0)
        return info
