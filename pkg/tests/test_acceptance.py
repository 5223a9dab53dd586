"""Acceptance suite.

Each test checks one criterion at its stated tolerance and runtime budget and
records a single ``PASS``/``FAIL`` line (see ``conftest.py``).  The lines are
echoed in the pytest terminal summary.  Run alone with::

    python3 -m pytest tests/test_acceptance.py -v
"""

import json
import math
from itertools import product
from time import perf_counter

import numpy as np
import pytest

from fedcanon.algorithms import (
    ALGORITHMS,
    Federation,
    floats_formula,
    pgd_reference,
    prox_count_formula,
)
from fedcanon.cli import cmd_run
from fedcanon.harness import (
    ExperimentConfig,
    accounting_check,
    build_problem,
    lyapunov,
    primal_averaging_demo,
    report_for,
    run_experiment,
)
from fedcanon.problems import synth_quadratic
from fedcanon.regularizers import Regularizer, prox, prox_oracle_scalar

ZERO = Regularizer("zero")
TWO_CLIENT = {"kind": "quadratic_explicit", "A": [[[1.0]], [[1.0]]], "b": [[1.0], [-1.0]], "z0": [1.0]}
QUAD10 = {"kind": "quadratic", "d": 10, "N": 4, "condition_number": 4.0}


def trajectory(problem, algorithm, T, reg=ZERO, **kw):
    fed = Federation(problem, reg, algorithm, **kw)
    zs = [fed.z.copy()]
    for _ in range(T):
        fed.step()
        zs.append(fed.z.copy())
    return np.stack(zs)


def random_regularizer(rng, variant):
    kappa = rng.uniform(0.01, 3.0)
    if variant == "mcp":
        return Regularizer("mcp", kappa=kappa, gamma=rng.uniform(0.5, 4.0))
    if variant == "scad":
        return Regularizer("scad", kappa=kappa, a=rng.uniform(2.1, 6.0))
    return Regularizer("l1", kappa=kappa)


def test_criterion_01_prox_matches_oracle(acceptance):
    rng = np.random.default_rng(20240501)
    t0 = perf_counter()
    worst = {}
    for variant in ("l1", "mcp", "scad"):
        err = 0.0
        for _ in range(1000):
            reg = random_regularizer(rng, variant)
            alpha = rng.uniform(0.01, 0.99) / reg.rho if reg.rho > 0 else rng.uniform(0.01, 5.0)
            assert alpha * reg.rho < 1
            y = rng.uniform(-15.0, 15.0)
            err = max(err, abs(prox(reg, alpha, [y])[0] - prox_oracle_scalar(reg, alpha, y)))
        worst[variant] = err
    elapsed = perf_counter() - t0
    passed = all(e <= 1e-6 for e in worst.values())
    detail = "max |prox - oracle| " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + " (tol 1e-6)"
    assert acceptance(passed, detail, elapsed, 5.0)


REDUCTION_GRID = [
    dict(N=2, d=1, K=1, reg=ZERO),
    dict(N=3, d=4, K=2, reg=Regularizer("l1", kappa=0.05)),
    dict(N=5, d=8, K=5, reg=Regularizer("mcp", kappa=0.05)),
    dict(N=4, d=6, K=3, reg=Regularizer("scad", kappa=0.02)),
    dict(N=6, d=3, K=10, reg=Regularizer("box", lo=-0.3, hi=0.3)),
]


def test_criterion_02_structural_reductions(acceptance):
    t0 = perf_counter()
    # (a) one client, one local step, exact gradients: proximal gradient descent
    err_a = 0.0
    for reg in (Regularizer("l1", kappa=0.05), Regularizer("scad", kappa=0.05)):
        p = synth_quadratic(6, 1, 5.0, seed=1)
        zs = trajectory(p, "fedcanon", 100, reg, alpha=0.4, beta=0.4, K=1)
        ref = pgd_reference(np.zeros(6), 0.4, 100, p.grad_f, reg)
        err_a = max(err_a, np.max(np.abs(zs - ref)))
    # (b) server-side and client-side prox placements
    err_b = 0.0
    for case, batch in product(REDUCTION_GRID, (None, 3)):
        p = synth_quadratic(case["d"], case["N"], 5.0, seed=case["N"])
        kw = dict(alpha=0.3, beta=0.02, K=case["K"], batch=batch, seed=4)
        a = trajectory(p, "fedcanon", 40, case["reg"], **kw)
        b = trajectory(p, "fedcanon2", 40, case["reg"], **kw)
        err_b = max(err_b, np.max(np.abs(a - b)))
    # (c) SCAFFOLD with alpha_fc = alpha_s * beta * K
    err_c = 0.0
    p = synth_quadratic(6, 4, 5.0, seed=9)
    beta, K, alpha_s = 0.03, 5, 1.5
    for batch in (None, 2):
        a = trajectory(p, "fedcanon", 100, alpha=alpha_s * beta * K, beta=beta, K=K, batch=batch, seed=1)
        b = trajectory(p, "scaffold", 100, alpha=alpha_s, beta=beta, K=K, batch=batch, seed=1)
        err_c = max(err_c, np.max(np.abs(a - b)))
    elapsed = perf_counter() - t0
    passed = err_a <= 1e-12 and err_b <= 1e-12 and err_c <= 1e-10
    detail = (f"(a) vs PGD {err_a:.1e} (tol 1e-12); (b) FedCanon II {err_b:.1e} (tol 1e-12); "
              f"(c) SCAFFOLD {err_c:.1e} (tol 1e-10)")
    assert acceptance(passed, detail, elapsed, 10.0)


IDENTITY_GRID = [
    dict(N=2, d=1, K=1, reg=ZERO, batch=None),
    dict(N=3, d=4, K=2, reg=Regularizer("l1", kappa=0.05), batch=None),
    dict(N=5, d=8, K=5, reg=Regularizer("mcp", kappa=0.05), batch=None),
    dict(N=4, d=6, K=3, reg=Regularizer("scad", kappa=0.02), batch=None),
    dict(N=6, d=3, K=10, reg=Regularizer("box", lo=-0.3, hi=0.3), batch=None),
    dict(N=2, d=5, K=4, reg=ZERO, batch=2),
    dict(N=3, d=4, K=2, reg=Regularizer("l1", kappa=0.05), batch=3),
    dict(N=8, d=10, K=3, reg=Regularizer("mcp", kappa=0.02, gamma=3.0), batch=4),
    dict(N=4, d=6, K=6, reg=Regularizer("scad", kappa=0.02), batch=1),
    dict(N=10, d=2, K=2, reg=Regularizer("l1", kappa=0.1), batch=5),
]


def test_criterion_03_control_variable_identities(acceptance):
    t0 = perf_counter()
    sum_ratio = err_c = err_delta = err_scaffold = 0.0
    for case in IDENTITY_GRID:
        p = synth_quadratic(case["d"], case["N"], 5.0, seed=case["N"] + case["d"])
        beta, K, batch = 0.02, case["K"], case["batch"]
        fed = Federation(p, case["reg"], "fedcanon", alpha=0.3, beta=beta, K=K, batch=batch, seed=2)
        # matched unregularized pair for the SCAFFOLD identity (alpha_s = 1)
        fc = Federation(p, ZERO, "fedcanon", alpha=beta * K, beta=beta, K=K, batch=batch, seed=2)
        sc = Federation(p, ZERO, "scaffold", alpha=1.0, beta=beta, K=K, batch=batch, seed=2)
        for _ in range(25):
            c_prev = np.stack([cl.c for cl in fed.clients])
            info = fed.step()
            v = np.stack([cl.v for cl in fed.clients])
            c = np.stack([cl.c for cl in fed.clients])
            sum_ratio = max(sum_ratio, np.linalg.norm(c.sum(axis=0)) / (1e-9 * np.sqrt(p.d)))
            err_c = max(err_c, np.max(np.abs(c - (v.mean(axis=0) - v))))
            err_delta = max(err_delta, np.max(np.abs(info.deltas - (v + c_prev))))
            fc.step()
            sc.step()
            e_i = np.stack([cl.e for cl in sc.clients])
            c_fc = np.stack([cl.c for cl in fc.clients])
            err_scaffold = max(err_scaffold, np.max(np.abs((sc.server.e - e_i) - c_fc)))
    elapsed = perf_counter() - t0
    passed = sum_ratio <= 1.0 and err_c <= 1e-12 and err_delta <= 1e-12 and err_scaffold <= 1e-12
    detail = (f"|sum c|/(1e-9 sqrt d) max {sum_ratio:.2g} (tol 1); c identity {err_c:.1e}, "
              f"delta identity {err_delta:.1e}, SCAFFOLD e - e_i vs c {err_scaffold:.1e} (tol 1e-12) "
              f"over {len(IDENTITY_GRID)} configs")
    assert acceptance(passed, detail, elapsed, 10.0)


def test_criterion_04_lemma1_descent(acceptance):
    t0 = perf_counter()
    configs = {
        "two-client": ExperimentConfig(problem=TWO_CLIENT, alpha=0.2, beta=0.005, K=3, T=200, probes=["lemma1"]),
        "d20-N5": ExperimentConfig(problem={"kind": "quadratic", "d": 20, "N": 5, "condition_number": 5.0},
                                   regularizer={"variant": "l1", "kappa": 1e-3},
                                   alpha=0.1, beta=0.005, K=5, T=200, probes=["lemma1"]),
    }
    margins, validated = {}, True
    for name, cfg in configs.items():
        problem = build_problem(cfg)
        validated &= report_for(cfg, problem).passed
        res = run_experiment(cfg, problem)
        margins[name] = res.probes["lemma1"].detail["min_margin"]
    elapsed = perf_counter() - t0
    passed = validated and all(m >= -1e-9 for m in margins.values())
    detail = ("step sizes validated, " if validated else "step sizes NOT validated, ") + \
        ", ".join(f"{k} min margin {v:.2e}" for k, v in margins.items()) + " (tol -1e-9)"
    assert acceptance(passed, detail, elapsed, 5.0)


def test_criterion_05_theorem1_bound(acceptance):
    t0 = perf_counter()
    rows = []
    for kappa, T in product((0.0, 1e-3), (50, 500)):
        cfg = ExperimentConfig(problem=QUAD10, regularizer={"variant": "l1", "kappa": kappa},
                               alpha=0.2, beta=0.005, K=2, T=T, probes=["theorem1"])
        r = run_experiment(cfg).probes["theorem1"]
        rows.append((kappa, T, r.passed, r.detail["lhs"], r.detail["bound"]))
    elapsed = perf_counter() - t0
    passed = all(row[2] for row in rows)
    detail = "; ".join(f"kappa={k:g} T={T}: {lhs:.3g} <= {bound:.3g}" for k, T, _, lhs, bound in rows)
    assert acceptance(passed, detail, elapsed, 10.0)


def test_criterion_06_theorem2_linear_rate(acceptance):
    t0 = perf_counter()
    alpha = 0.2
    problem = build_problem(ExperimentConfig(problem=QUAD10, alpha=alpha))
    T = math.ceil(8.0 / (alpha * problem.mu) * math.log(1e10))
    out = {}
    for kappa in (1e-3, 0.0):
        cfg = ExperimentConfig(problem=QUAD10, regularizer={"variant": "l1", "kappa": kappa},
                               alpha=alpha, beta=0.01, K=2, T=T, probes=["theorem2"])
        res = run_experiment(cfg, problem)
        psi = lyapunov(res.trajectory)
        out[kappa] = (res.probes["theorem2"], psi[0], psi[-1])
    elapsed = perf_counter() - t0
    floor_probe, _, _ = out[1e-3]
    zero_probe, psi0, psiT = out[0.0]
    passed = (floor_probe.passed and floor_probe.detail["checked_rounds"] > 0 and zero_probe.passed
              and psiT <= 1e-10 * psi0)
    detail = (f"T={T}; kappa=1e-3 contraction over {floor_probe.detail['checked_rounds']} rounds "
              f"{'holds' if floor_probe.passed else 'violated'}; kappa=0 Psi^T/Psi^0 = {psiT / psi0:.1e} (tol 1e-10)")
    assert acceptance(passed, detail, elapsed, 10.0)


HETEROGENEITY = dict(
    problem={"kind": "classification", "n_samples": 20000, "test_fraction": 0.5, "n_features": 20,
             "n_classes": 10, "separation": 0.5},
    partition={"mode": "dirichlet", "n_clients": 10, "eta": 0.05},
    regularizer={"variant": "l1", "kappa": 1e-3},
    beta=0.4, K=20, B=32, T=300, grad_mode="minibatch", metric_alpha=8.0,
)


@pytest.mark.slow
def test_criterion_07_heterogeneity_robustness(acceptance):
    t0 = perf_counter()
    beta, K = HETEROGENEITY["beta"], HETEROGENEITY["K"]
    steps = {"fedcanon": beta * K, "fedavg": beta * K, "fedpgd": 1.0}
    grad, acc = {a: [] for a in steps}, {a: [] for a in steps}
    for seed in range(5):
        base = ExperimentConfig(algorithm="fedcanon", alpha=beta * K, seed=seed, **HETEROGENEITY)
        problem = build_problem(base)
        for algorithm, alpha in steps.items():
            last = run_experiment(base.replace(algorithm=algorithm, alpha=alpha), problem).records[-1]
            grad[algorithm].append(last.prox_grad_norm_sq)
            acc[algorithm].append(last.test_acc)
    elapsed = perf_counter() - t0
    med = {a: float(np.median(v)) for a, v in grad.items()}
    margins = np.array(acc["fedcanon"]) - np.array(acc["fedavg"])
    wins = int(np.sum(margins > 0))
    passed = med["fedcanon"] <= med["fedavg"] and med["fedcanon"] <= med["fedpgd"] and wins >= 4
    detail = (f"median |G|^2 FedCanon {med['fedcanon']:.2e}, FedAvg {med['fedavg']:.2e}, "
              f"FedPGD {med['fedpgd']:.2e}; accuracy margin over FedAvg positive in {wins}/5 seeds "
              f"({', '.join(f'{m:+.4f}' for m in margins)})")
    assert acceptance(passed, detail, elapsed, 300.0)


def test_criterion_08_accounting(acceptance):
    t0 = perf_counter()
    table = {"fedcanon": (lambda N, K: 1, lambda d: 3 * d),
             "fedcanon2": (lambda N, K: N, lambda d: 2 * d),
             "fedpgd": (lambda N, K: N * K + 1, None)}
    mismatches, checked = [], 0
    for N, K, d in ((10, 40, 123), (4, 5, 50)):
        p = synth_quadratic(d, N, 3.0, seed=N)
        for algorithm in ALGORITHMS:
            if algorithm == "pgd":
                continue
            reg = ZERO if algorithm in ("scaffold", "scaffnew") else Regularizer("l1", kappa=0.01)
            fed = Federation(p, reg, algorithm, alpha=0.05, beta=0.005, K=K, p=0.5, seed=1)
            infos = [fed.step() for _ in range(3)]
            prox_counts = [i.prox_count for i in infos]
            floats = [i.floats_per_client for i in infos]
            accounting_check(algorithm, N, K, d, prox_counts, floats)
            if algorithm in table:
                want_prox, want_floats = table[algorithm]
                if any(c != want_prox(N, K) for c in prox_counts) or \
                        (want_floats and any(f != want_floats(d) for f in floats)):
                    mismatches.append((algorithm, N, K, d))
            if any(c != prox_count_formula(algorithm, N, K) for c in prox_counts):
                mismatches.append((algorithm, N, K, d))
            if algorithm != "scaffnew" and any(f != floats_formula(algorithm, d) for f in floats):
                mismatches.append((algorithm, N, K, d))
            checked += 1
    elapsed = perf_counter() - t0
    detail = f"{checked} algorithm/shape pairs, mismatches: {mismatches or 'none'}"
    assert acceptance(not mismatches, detail, elapsed, 5.0)


def test_criterion_09_determinism(acceptance, tmp_path):
    t0 = perf_counter()
    cfg = dict(problem={"kind": "classification", "n_samples": 600, "n_features": 6, "n_classes": 4},
               partition={"mode": "dirichlet", "n_clients": 8, "eta": 0.3},
               regularizer={"variant": "l1", "kappa": 1e-3},
               alpha=0.5, beta=0.05, K=4, T=20, B=8, grad_mode="minibatch", seed=11)
    outputs = []
    for run, workers in enumerate((1, 1, "max", "max")):
        path = tmp_path / f"config{run}.json"
        path.write_text(json.dumps(dict(cfg, workers=workers)))
        code = cmd_run(path, tmp_path / f"out{run}")
        outputs.append((code, (tmp_path / f"out{run}" / "run.csv").read_bytes()))
    elapsed = perf_counter() - t0
    codes = {c for c, _ in outputs}
    same = len({b for _, b in outputs}) == 1
    passed = codes == {0} and same
    detail = f"4 runs (serial x2, workers=max x2): CSV byte-identical = {same}, exit codes {sorted(codes)}"
    assert acceptance(passed, detail, elapsed, 5.0)


def test_criterion_10_primal_averaging(acceptance):
    t0 = perf_counter()
    demo = primal_averaging_demo()
    elapsed = perf_counter() - t0
    denser = all(avg > cl for avg, cl in zip(demo.averaged_nnz, demo.client_nnz))
    sparse_enough = demo.fedcanon_zeros >= demo.densest_average_zeros
    passed = denser and sparse_enough
    detail = (f"FedPGD average nnz {max(demo.averaged_nnz)} vs client nnz {max(demo.client_nnz)} "
              f"(denser every round: {denser}); FedCanon zeros {demo.fedcanon_zeros} >= "
              f"densest-average zeros {demo.densest_average_zeros}")
    assert acceptance(passed, detail, elapsed, 5.0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
