"""Experiment runner, per-round metrics and numerical checks of the convergence theory.

A run records a :class:`Trajectory` (iterates, gradients, objective values
and the drift term ``E^t``).  Every probe below is a pure function of that
trajectory, so verdicts can be recomputed from a saved ``.npz`` file.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .algorithms import (
    ALGORITHMS,
    DivergenceError,
    Federation,
    floats_formula,
    prox_count_formula,
    prox_gradient_norm,
)
from .partitioning import PartitionSpec, partition
from .problems import (
    FederatedProblem,
    federated_from_dataset,
    load_libsvm,
    make_model,
    quadratic_problem,
    synth_classification,
    synth_quadratic,
)
from .regularizers import ProxConditionError, Regularizer, check_prox_step, h_value, prox, subgrad_bound

log = logging.getLogger(__name__)

PROBES = ("lemma1", "lemma2", "theorem1", "theorem2", "accounting")
THEORY_PROBES = ("lemma1", "lemma2", "theorem1", "theorem2")
CSV_COLUMNS = ("round", "phi", "prox_grad_norm_sq", "test_acc", "epsilon_t", "prox_cum", "floats_cum", "wall_ms")
MARGIN_TOL = 1e-9


class ConfigError(ValueError):
    pass


class AccountingError(AssertionError):
    pass


# --------------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """Everything that determines a run.  ``seed`` fixes data, partition and sampling."""

    problem: dict
    algorithm: str = "fedcanon"
    alpha: float = 0.1
    beta: float = 0.01
    K: int = 1
    T: int = 100
    B: int | None = None
    p: float = 1.0
    seed: int = 0
    grad_mode: str = "exact"  # "exact" | "minibatch"
    regularizer: dict = field(default_factory=lambda: {"variant": "zero"})
    partition: dict = field(default_factory=lambda: {"mode": "iid"})
    probes: list = field(default_factory=list)
    metric_alpha: float | None = None
    workers: int | str = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {list(ALGORITHMS)}")
        if not isinstance(self.problem, dict) or "kind" not in self.problem:
            raise ConfigError("problem must be an object with a 'kind' field")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if self.grad_mode not in ("exact", "minibatch"):
            raise ConfigError(f"grad_mode must be 'exact' or 'minibatch', got {self.grad_mode!r}")
        if self.grad_mode == "minibatch" and (self.B is None or self.B < 1):
            raise ConfigError("minibatch mode requires B >= 1")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError("p must lie in (0, 1]")
        unknown = set(self.probes) - set(PROBES)
        if unknown:
            raise ConfigError(f"unknown probes {sorted(unknown)}; expected a subset of {list(PROBES)}")
        if self.grad_mode != "exact" and set(self.probes) & set(THEORY_PROBES):
            raise ConfigError("theory probes assume exact gradients; set grad_mode to 'exact'")
        if not (self.workers == "max" or (isinstance(self.workers, int) and self.workers >= 1)):
            raise ConfigError("workers must be a positive integer or 'max'")
        try:
            self.reg = Regularizer.from_dict(self.regularizer)
            self.part = PartitionSpec.from_dict(self.partition, default_seed=self.seed)
            if self.algorithm in ("fedcanon", "fedcanon2", "fedpgd", "pgd"):
                check_prox_step(self.reg, self.alpha)
            if self.algorithm == "fedpgd":
                check_prox_step(self.reg, self.beta)
            check_prox_step(self.reg, self.metric_step)
        except ProxConditionError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.algorithm == "scaffnew" and not self.reg.is_zero:
            raise ConfigError("scaffnew supports only the zero regularizer")

    @property
    def metric_step(self) -> float:
        return self.alpha if self.metric_alpha is None else self.metric_alpha

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "problem" not in d:
            raise ConfigError("config needs a 'problem' section")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def apply_override(d: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` to a nested dict copy; ``value`` is parsed as JSON when possible."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = json.loads(json.dumps(d))
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value
    return out


# --------------------------------------------------------------------------- problems


def build_problem(config: ExperimentConfig) -> FederatedProblem:
    spec = dict(config.problem)
    kind = spec.pop("kind")
    z0 = spec.pop("z0", None)
    try:
        if kind == "quadratic":
            problem = synth_quadratic(int(spec.get("d", 10)), int(spec.get("N", 4)),
                                      float(spec.get("condition_number", 10.0)),
                                      int(spec.get("seed", config.seed)),
                                      spec.get("samples_per_client"), float(spec.get("target_scale", 1.0)))
        elif kind == "quadratic_explicit":
            problem = quadratic_problem(spec["A"], spec["b"])
        elif kind in ("classification", "libsvm"):
            problem = _dataset_problem(kind, spec, config)
        else:
            raise ConfigError(f"unknown problem kind {kind!r}")
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"problem spec for {kind!r} is incomplete: {exc}") from None
    if z0 is not None:
        z0 = np.asarray(z0, dtype=float)
        if z0.shape != (problem.d,):
            raise ConfigError(f"z0 has shape {z0.shape}, expected ({problem.d},)")
        problem.z0 = z0
    return problem


def _dataset_problem(kind, spec, config):
    data_seed = int(spec.get("seed", config.seed))
    if kind == "classification":
        full = synth_classification(int(spec["n_samples"]), int(spec["n_features"]), int(spec["n_classes"]),
                                    data_seed, float(spec.get("separation", 1.0)), float(spec.get("noise", 1.0)))
        n_test = int(round(float(spec.get("test_fraction", 0.2)) * len(full)))
        order = np.random.default_rng(data_seed + 1).permutation(len(full))
        train = full.take(np.sort(order[n_test:]))
        test = full.take(np.sort(order[:n_test])) if n_test else None
    else:
        train = load_libsvm(spec["path"], spec.get("dim"))
        test = load_libsvm(spec["test_path"], train.dim) if spec.get("test_path") else None
    model = make_model(spec.get("model", {"model": "logistic"}), train.dim, train.num_classes)
    shards = partition(train, config.part)
    return federated_from_dataset(train, shards, model, eval_set=test, seed=data_seed)


# --------------------------------------------------------------------------- step sizes


@dataclass(frozen=True)
class Condition:
    name: str
    expression: str
    lhs: float
    rhs: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs

    def describe(self) -> str:
        verdict = "ok" if self.passed else "VIOLATED"
        return f"[{verdict}] {self.name}: {self.expression}  (lhs={self.lhs:.6g}, rhs={self.rhs:.6g})"


@dataclass(frozen=True)
class StepSizeReport:
    conditions: tuple
    delta: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def get(self, name: str) -> Condition | None:
        return next((c for c in self.conditions if c.name == name), None)

    def passes(self, *names: str) -> bool:
        return all(self.get(n) is None or self.get(n).passed for n in names)

    def format(self) -> str:
        return "\n".join([f"delta = 1/(1-alpha*rho)^2 = {self.delta:.6g}"] + [c.describe() for c in self.conditions])


def validate_stepsizes(alpha: float, beta: float, K: int, L: float, rho: float = 0.0,
                       mu: float | None = None) -> StepSizeReport:
    """Evaluate the step-size prerequisites of the descent lemma and both theorems.

    The ``alpha * rho < 1`` row appears only for weakly convex ``h`` (``rho > 0``);
    the strong-convexity rows only when ``mu`` is given.
    """
    if not (alpha > 0 and L > 0):
        raise ValueError("validate_stepsizes requires alpha > 0 and L > 0")
    delta = 1.0 / (1.0 - alpha * rho) ** 2 if alpha * rho < 1 else math.inf
    a_term = alpha * (rho + L) + 4 * alpha**2 * L**2
    conds = []
    if rho > 0:
        conds.append(Condition("prox", "0 < alpha < 1/rho", alpha * rho, 1.0 - 1e-15))
    conds += [
        Condition("lemma1_beta", "beta^2 <= 1/(24K(K-1)L^2)", beta**2,
                  math.inf if K == 1 else 1.0 / (24 * K * (K - 1) * L**2)),
        Condition("theorem1_alpha", "0 < alpha(rho+L) + 4 alpha^2 L^2 <= 1/2", a_term, 0.5),
        Condition("theorem1_beta", "192(6+delta) beta^2 K^2 L^2 <= 1", 192 * (6 + delta) * beta**2 * K**2 * L**2, 1.0),
    ]
    if mu is not None:
        conds += [
            Condition("theorem2_alpha", "alpha(rho+L) + 4 alpha^2 L^2 <= min{1/2, (4 mu (rho+L) + 64 L^2)/mu^2}",
                      a_term, min(0.5, (4 * mu * (rho + L) + 64 * L**2) / mu**2)),
            Condition("theorem2_beta", "12(6+delta) beta^2 K^2 L^2 <= min{1/16, 1 - alpha mu/4}",
                      12 * (6 + delta) * beta**2 * K**2 * L**2, min(1 / 16, 1 - alpha * mu / 4)),
        ]
    return StepSizeReport(tuple(conds), delta)


def report_for(config: ExperimentConfig, problem: FederatedProblem) -> StepSizeReport:
    return validate_stepsizes(config.alpha, config.beta, config.K, problem.L, config.reg.rho, problem.mu)


# --------------------------------------------------------------------------- records & trajectory


@dataclass(frozen=True)
class RoundRecord:
    round: int
    phi: float
    prox_grad_norm_sq: float
    test_acc: float | None
    epsilon_t: float
    prox_cum: int
    floats_cum: int
    wall_ms: float | None = None


def epsilon_t(client_grads: np.ndarray, v_prev: np.ndarray, grad_f: np.ndarray | None = None) -> float:
    """Cross-client tracking error ``(1/N) sum_i ||grad f_i - v_i - grad f + mean(v)||^2``.

    ``client_grads[i]`` is client ``i``'s gradient at the start of the round and
    ``v_prev[i]`` its average gradient over the previous round (zero before the
    first round).
    """
    client_grads = np.asarray(client_grads, dtype=float)
    v_prev = np.asarray(v_prev, dtype=float)
    if grad_f is None:
        grad_f = client_grads.mean(axis=0)
    r = (client_grads - grad_f) - (v_prev - v_prev.mean(axis=0))
    return float(np.mean(np.sum(r * r, axis=1)))


@dataclass
class Trajectory:
    """Recorded internals of a run; row ``t`` describes ``z^t`` (before round ``t+1``)."""

    z: np.ndarray
    grad_f: np.ndarray
    phi: np.ndarray
    prox_grad_sq: np.ndarray
    eps: np.ndarray
    prox_counts: np.ndarray
    floats: np.ndarray
    constants: dict

    @property
    def T(self) -> int:
        return len(self.z) - 1

    @property
    def grad_sq(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.grad_f, self.grad_f)

    @property
    def step_grad_sq(self) -> np.ndarray:
        """``||(z^t - z^{t+1}) / alpha||^2`` for ``t < T``."""
        G = (self.z[:-1] - self.z[1:]) / self.constants["alpha"]
        return np.einsum("ij,ij->i", G, G)

    def save(self, path) -> None:
        np.savez(path, z=self.z, grad_f=self.grad_f, phi=self.phi, prox_grad_sq=self.prox_grad_sq, eps=self.eps,
                 prox_counts=self.prox_counts, floats=self.floats, constants=json.dumps(self.constants))

    @classmethod
    def load(cls, path) -> "Trajectory":
        with np.load(path) as f:
            arrays = {k: f[k] for k in f.files if k != "constants"}
            constants = json.loads(str(f["constants"]))
        return cls(constants=constants, **arrays)


# --------------------------------------------------------------------------- probes


@dataclass(frozen=True)
class ProbeResult:
    name: str
    passed: bool
    detail: dict

    def to_dict(self) -> dict:
        return {"passed": self.passed, **self.detail}


def _bh(traj: Trajectory) -> float:
    B_h = traj.constants.get("B_h")
    if B_h is None:
        raise ConfigError("the subgradient bound B_h is not available for this regularizer")
    return B_h


def lemma1_margins(traj: Trajectory) -> np.ndarray:
    """Per-round ``RHS - LHS`` of the one-round descent inequality with ``sigma = 0``."""
    c = traj.constants
    alpha, beta, K, L, rho = c["alpha"], c["beta"], c["K"], c["L"], c["rho"]
    delta = 1.0 / (1.0 - alpha * rho) ** 2
    drift = 12 * (2 + delta) * alpha * beta**2 * K**2 * L**2
    lhs = traj.phi[1:] - traj.phi[:-1]
    rhs = (-(alpha - 2 * (rho + L) * alpha**2) / 4 * traj.step_grad_sq
           - alpha / 8 * traj.prox_grad_sq[:-1]
           - (alpha / 16 - drift) * traj.grad_sq[:-1]
           + alpha * _bh(traj) / 8
           + drift * traj.eps[:-1])
    return rhs - lhs


def lemma1_probe(traj: Trajectory, tol: float = MARGIN_TOL) -> ProbeResult:
    m = lemma1_margins(traj)
    return ProbeResult("lemma1", bool(np.all(m >= -tol)),
                       {"min_margin": float(m.min()), "worst_round": int(m.argmin()), "tol": tol})


def lemma2_margins(traj: Trajectory) -> np.ndarray:
    """Per-round slack of the drift recursion ``E^{t+1} <= 48 b^2K^2L^2 (E^t + ||grad f||^2) + 2 a^2 L^2 ||G||^2``."""
    c = traj.constants
    alpha, beta, K, L = c["alpha"], c["beta"], c["K"], c["L"]
    rhs = 48 * beta**2 * K**2 * L**2 * (traj.eps[:-1] + traj.grad_sq[:-1]) + 2 * alpha**2 * L**2 * traj.step_grad_sq
    return rhs - traj.eps[1:]


def lemma2_probe(traj: Trajectory, tol: float = MARGIN_TOL) -> ProbeResult:
    m = lemma2_margins(traj)
    return ProbeResult("lemma2", bool(np.all(m >= -tol)),
                       {"min_margin": float(m.min()), "worst_round": int(m.argmin()), "tol": tol})


def theorem1_check(traj: Trajectory, T: int | None = None) -> ProbeResult:
    """Average squared proximal gradient over the first ``T`` rounds against the ``sigma = 0`` bound."""
    c = traj.constants
    if c.get("phi_star") is None:
        raise ConfigError("theorem1 needs phi*, which is unavailable for this problem")
    T = traj.T if T is None else T
    alpha = c["alpha"]
    lhs = float(np.mean(traj.prox_grad_sq[:T]))
    bound = 8 * (traj.phi[0] - c["phi_star"] + alpha * traj.eps[0]) / (alpha * T) + _bh(traj)
    return ProbeResult("theorem1", bool(lhs <= bound), {"T": T, "lhs": lhs, "bound": float(bound), "slack": float(bound - lhs)})


def lyapunov(traj: Trajectory) -> np.ndarray:
    """``Psi^t = phi(z^t) - phi* + alpha E^t``."""
    return traj.phi - traj.constants["phi_star"] + traj.constants["alpha"] * traj.eps


def theorem2_check(traj: Trajectory, rounding: float | None = None) -> ProbeResult:
    """Per-round contraction ``Psi^{t+1} <= (1 - alpha mu/4) Psi^t + alpha B_h/8`` above the floor.

    Rounds with ``Psi^t < B_h/mu`` (twice the steady floor ``B_h/(2 mu)``) are
    not checked.  ``rounding`` is an absolute allowance for cancellation in
    ``phi - phi*``; it defaults to ``1e-12 (1 + |phi*|)``.
    """
    c = traj.constants
    mu, alpha = c.get("mu"), c["alpha"]
    if mu is None or c.get("phi_star") is None:
        raise ConfigError("theorem2 needs the PL constant mu and phi*, unavailable for this problem")
    B_h = _bh(traj)
    psi = lyapunov(traj)
    if rounding is None:
        rounding = 1e-12 * (1.0 + abs(c["phi_star"]))
    rate = 1 - alpha * mu / 4
    checked = psi[:-1] >= B_h / mu
    excess = psi[1:] - (rate * psi[:-1] + alpha * B_h / 8)
    bad = checked & (excess > rounding)
    detail = {
        "rate": rate,
        "checked_rounds": int(checked.sum()),
        "violations": int(bad.sum()),
        "max_excess": float(excess[checked].max()) if checked.any() else None,
        "psi0": float(psi[0]),
        "psi_final": float(psi[-1]),
        "floor": B_h / (2 * mu),
    }
    return ProbeResult("theorem2", not bad.any(), detail)


def accounting_check(algorithm: str, N: int, K: int, d: int, prox_counts, floats) -> ProbeResult:
    """Per-round prox and per-client float counts against the closed-form table."""
    want_prox = prox_count_formula(algorithm, N, K)
    want_floats = floats_formula(algorithm, d)
    prox_counts, floats = np.asarray(prox_counts), np.asarray(floats)
    if np.any(prox_counts != want_prox):
        t = int(np.flatnonzero(prox_counts != want_prox)[0])
        raise AccountingError(f"{algorithm}: round {t + 1} used {prox_counts[t]} prox evaluations, expected {want_prox}")
    allowed = {want_floats, 0} if algorithm == "scaffnew" else {want_floats}
    bad = [t for t, f in enumerate(floats.tolist()) if f not in allowed]
    if bad:
        t = bad[0]
        raise AccountingError(f"{algorithm}: round {t + 1} exchanged {floats[t]} floats per client, expected {want_floats}")
    return ProbeResult("accounting", True, {"prox_per_round": want_prox, "floats_per_client": want_floats})


# --------------------------------------------------------------------------- phi*


def solve_phi_star(problem: FederatedProblem, reg: Regularizer, max_iter: int = 100_000,
                   tol: float = 1e-15) -> tuple[float, np.ndarray]:
    """Best objective value along a long centralized proximal gradient run.

    The step is ``0.9 / L`` (and below ``1/rho``); the run stops early once an
    iteration moves ``z`` by less than ``tol * (1 + ||z||)``.
    """
    alpha = 0.9 / problem.L
    if reg.rho > 0:
        alpha = min(alpha, 0.9 / reg.rho)
    z = problem.initial_point() if problem.z_star is None else problem.z_star.copy()
    best_phi, best_z = problem.f(z) + h_value(reg, z), z
    for _ in range(max_iter):
        z_new = prox(reg, alpha, z - alpha * problem.grad_f(z))
        phi = problem.f(z_new) + h_value(reg, z_new)
        if phi < best_phi:
            best_phi, best_z = phi, z_new
        if np.linalg.norm(z_new - z) <= tol * (1 + np.linalg.norm(z)):
            break
        z = z_new
    return float(best_phi), best_z


# --------------------------------------------------------------------------- runner


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list
    trajectory: Trajectory
    probes: dict
    shard_hash: str
    stepsizes: StepSizeReport

    @property
    def failed_probes(self) -> list:
        return [name for name, r in self.probes.items() if not r.passed]

    def csv_text(self) -> str:
        return records_to_csv(self.records)

    def summary(self) -> dict:
        last = self.records[-1]
        return {
            "config": self.config.to_dict(),
            "final": asdict(last),
            "shard_hash": self.shard_hash,
            "constants": self.trajectory.constants,
            "stepsizes": {c.name: {"expression": c.expression, "lhs": c.lhs, "rhs": c.rhs, "passed": c.passed}
                          for c in self.stepsizes.conditions},
            "probes": {name: r.to_dict() for name, r in self.probes.items()},
            "failed_probes": self.failed_probes,
        }


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def _check_probe_preconditions(config: ExperimentConfig, problem: FederatedProblem, report: StepSizeReport):
    probes = set(config.probes)
    theory = probes & set(THEORY_PROBES)
    if not theory:
        return
    if config.algorithm not in ("fedcanon", "fedcanon2"):
        raise ConfigError(f"theory probes apply to fedcanon and fedcanon2, not {config.algorithm}")
    if subgrad_bound(config.reg, problem.d) is None:
        raise ConfigError("theory probes need a finite subgradient bound; the box indicator has none")
    needed = {"lemma1": ("prox", "lemma1_beta"), "lemma2": ("prox",),
              "theorem1": ("prox", "theorem1_alpha", "theorem1_beta"),
              "theorem2": ("prox", "theorem2_alpha", "theorem2_beta")}
    if "theorem2" in probes and problem.mu is None:
        raise ConfigError("theorem2 needs a known PL constant mu (synthetic quadratic problems)")
    for probe in sorted(theory):
        for name in needed[probe]:
            cond = report.get(name)
            if cond is not None and not cond.passed:
                raise ConfigError(f"{probe} precondition violated: {cond.expression} "
                                  f"(lhs={cond.lhs:.6g}, rhs={cond.rhs:.6g})")


def _executor(config: ExperimentConfig, N: int):
    workers = N if config.workers == "max" else config.workers
    return ThreadPoolExecutor(max_workers=workers) if workers > 1 else None


def run_experiment(config: ExperimentConfig, problem: FederatedProblem | None = None) -> RunResult:
    """Execute ``config.T`` rounds, recording round 0 and every round after it."""
    problem = build_problem(config) if problem is None else problem
    reg = config.reg
    report = report_for(config, problem)
    _check_probe_preconditions(config, problem, report)
    if not report.passed:
        log.info("step sizes outside the analysed regime:\n%s", report.format())

    executor = _executor(config, problem.N)
    try:
        fed = Federation(problem, reg, config.algorithm, config.alpha, config.beta, config.K,
                         batch=config.B if config.grad_mode == "minibatch" else None,
                         p=config.p, seed=config.seed, executor=executor)
        T, d = config.T, problem.d
        z_hist = np.empty((T + 1, d))
        g_hist = np.empty((T + 1, d))
        phi, pg, eps = np.empty(T + 1), np.empty(T + 1), np.empty(T + 1)
        prox_counts = np.zeros(T, dtype=np.int64)
        floats = np.zeros(T, dtype=np.int64)
        records = []
        prox_cum = floats_cum = 0

        def record(t, wall):
            with np.errstate(over="ignore", invalid="ignore"):
                _record(t)
            if not (np.isfinite(phi[t]) and np.isfinite(pg[t]) and np.isfinite(eps[t])):
                raise DivergenceError(t, "objective")
            records.append(RoundRecord(t, float(phi[t]), float(pg[t]), problem.accuracy(z_hist[t]), float(eps[t]),
                                       prox_cum, floats_cum, wall))

        def _record(t):
            z = fed.z.copy()
            if config.algorithm == "scaffnew":
                grads = np.stack([problem.local_grad(cl.i, cl.x) for cl in fed.clients])
                grad_f = problem.grad_f(z)
            else:
                grads = problem.local_grads(z)
                grad_f = grads.mean(axis=0)
            z_hist[t], g_hist[t] = z, grad_f
            phi[t] = problem.f(z) + h_value(reg, z)
            pg[t] = prox_gradient_norm(z, config.metric_step, grad_f, reg)
            eps[t] = epsilon_t(grads, np.stack([cl.v for cl in fed.clients]), grad_f)

        record(0, 0.0 if config.record_wall_time else None)
        for t in range(T):
            start = time.perf_counter()
            info = fed.step()
            wall = (time.perf_counter() - start) * 1e3 if config.record_wall_time else None
            prox_counts[t], floats[t] = info.prox_count, info.floats_per_client
            prox_cum += info.prox_count
            floats_cum += info.floats_per_client
            record(t + 1, wall)
    finally:
        if executor is not None:
            executor.shutdown()

    accounting = accounting_check(config.algorithm, problem.N, config.K, d, prox_counts, floats)
    constants = {
        "algorithm": config.algorithm, "alpha": config.alpha, "beta": config.beta, "K": config.K,
        "N": problem.N, "d": d, "L": problem.L, "L_method": problem.L_method, "rho": reg.rho, "mu": problem.mu,
        "B_h": subgrad_bound(reg, d), "phi_star": None, "regularizer": reg.to_dict(),
    }
    traj = Trajectory(z_hist, g_hist, phi, pg, eps, prox_counts, floats, constants)
    if set(config.probes) & {"theorem1", "theorem2"}:
        constants["phi_star"] = _phi_star(problem, reg, traj)

    probes = {}
    for name in config.probes:
        if name == "lemma1":
            probes[name] = lemma1_probe(traj)
        elif name == "lemma2":
            probes[name] = lemma2_probe(traj)
        elif name == "theorem1":
            probes[name] = theorem1_check(traj)
        elif name == "theorem2":
            probes[name] = theorem2_check(traj)
        else:
            probes[name] = accounting
    return RunResult(config, records, traj, probes, problem.shard_hash(), report)


def _phi_star(problem: FederatedProblem, reg: Regularizer, traj: Trajectory) -> float:
    """Closed form for unregularized quadratics, otherwise the long-run PGD oracle.

    Either way the value is capped by the best objective seen on the trajectory.
    """
    if reg.is_zero and problem.phi_star is not None:
        star = problem.phi_star
    else:
        star, _ = solve_phi_star(problem, reg)
    return float(min(star, traj.phi.min()))


def write_outputs(result: RunResult, out_dir, stem: str = "run") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    csv_path.write_text(result.csv_text())
    json_path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# --------------------------------------------------------------------------- primal averaging


@dataclass(frozen=True)
class PrimalAveragingDemo:
    client_nnz: list  # per round, the largest nonzero count among FedPGD local models
    averaged_nnz: list  # per round, nonzeros of the FedPGD primal average
    fedcanon_z: np.ndarray
    fedpgd_averages: np.ndarray

    @property
    def fedcanon_zeros(self) -> int:
        return int(np.sum(self.fedcanon_z == 0))

    @property
    def densest_average_zeros(self) -> int:
        return int(min(self.fedcanon_z.size - n for n in self.averaged_nnz))


def primal_averaging_demo(T: int = 20, K: int = 5, beta: float = 0.5, alpha: float = 1.0,
                          kappa: float = 0.5) -> PrimalAveragingDemo:
    """Two clients whose local l1 proxes zero out complementary coordinates.

    ``f_1 = ||x - (1, -0.2)||^2 / 2`` and ``f_2 = ||x - (-0.2, 1)||^2 / 2``.
    Each FedPGD local model is 1-sparse, yet their average is dense.  The
    global optimum of ``f + kappa ||x||_1`` is the origin, which FedCanon's
    single server-side prox reaches exactly.
    """
    r2 = math.sqrt(2.0)  # m = 2 rows per client, so scale to get unit curvature
    problem = quadratic_problem([r2 * np.eye(2), r2 * np.eye(2)], [[r2, -0.2 * r2], [-0.2 * r2, r2]])
    reg = Regularizer("l1", kappa=kappa)
    pgd = Federation(problem, reg, "fedpgd", alpha, beta, K)
    client_nnz, averaged_nnz, averages = [], [], []
    for _ in range(T):
        info = pgd.step()
        client_nnz.append(int(max(np.count_nonzero(x) for x in info.local_models)))
        averaged_nnz.append(int(np.count_nonzero(info.averaged_model)))
        averages.append(info.averaged_model)
    canon = Federation(problem, reg, "fedcanon", alpha, beta / K, K)
    for _ in range(T):
        canon.step()
    return PrimalAveragingDemo(client_nnz, averaged_nnz, canon.z.copy(), np.stack(averages))
