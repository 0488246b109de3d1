"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
Criteria 4 and 5 train many models and take several minutes each.
"""

from __future__ import annotations

import csv
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from test_scheduler import iid_frequencies, random_trace, replay, run_bounded  # noqa: E402
from test_tensor_nn import gradient_check  # noqa: E402

from cascaded_vfl import protocol as proto  # noqa: E402
from cascaded_vfl.attack import AttackScenario, run_attack  # noqa: E402
from cascaded_vfl.cli import main as cli_main  # noqa: E402
from cascaded_vfl.config import RunConfig  # noqa: E402
from cascaded_vfl.errors import NumericError  # noqa: E402
from cascaded_vfl.partition import make_synthetic, split_features  # noqa: E402
from cascaded_vfl.protocol import WireMonitor, datasets_from_config, make_trainer  # noqa: E402
from cascaded_vfl.scheduler import DelayTable, update_delays  # noqa: E402
from cascaded_vfl.verify import DEFAULT_ETAS, report_csv, run_lemma_suite, scaling_experiment, summarize_sweep  # noqa: E402
from cascaded_vfl.zoo import Perturbation  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
RESULTS: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str, seconds: float) -> bool:
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} -- {detail} [{seconds:.1f}s]"
    RESULTS[number] = line
    print(line, flush=True)
    return passed


# ---------------------------------------------------------------- 1


def criterion_1():
    start = time.perf_counter()
    worst = max(gradient_check(seed) for seed in range(50))
    elapsed = time.perf_counter() - start
    ok = worst <= 1.0 and elapsed < 10
    return record(1, "backprop vs central differences on 50 nets", ok,
                  f"worst error / tolerance = {worst:.3g}", elapsed)


# ---------------------------------------------------------------- 2


def criterion_2():
    start = time.perf_counter()
    results = run_lemma_suite(n=1_000_000)
    elapsed = time.perf_counter() - start
    failed = [f"{r.check}/{r.fixture}" for r in results if not r.passed]
    print(report_csv(results), end="")
    ok = not failed and len(results) == 12 and elapsed < 120
    return record(2, "estimator lemma checks at N = 1e6", ok,
                  f"{12 - len(failed)}/12 checks pass" + (f", failed {failed}" if failed else ""), elapsed)


# ---------------------------------------------------------------- 3


def criterion_3():
    start = time.perf_counter()
    x, y = make_synthetic(10_000, 20, 10, 3.0, np.random.default_rng(0))
    data = split_features(x, y, 2, 10)
    rates = {}
    streams = np.random.SeedSequence(2024).spawn(4)
    for (fw, adv), seed in zip(
        [("foo", "curious_client"), ("foo", "eavesdropper"), ("zoo", "curious_client"), ("zoo", "eavesdropper")],
        streams,
    ):
        res = run_attack(AttackScenario(fw, adv, 10), data, np.random.default_rng(seed))
        rates[(fw, adv)] = (res.success_rate, res.trials)
    elapsed = time.perf_counter() - start
    eaves, n = rates[("zoo", "eavesdropper")]
    se = np.sqrt(0.1 * 0.9 / n)
    curious = rates[("zoo", "curious_client")][0]
    ok = (
        rates[("foo", "curious_client")][0] == 1.0
        and rates[("foo", "eavesdropper")][0] == 1.0
        and n >= 10_000
        and abs(eaves - 0.1) <= 3 * se
        and 0.10 <= curious <= 0.15
        and elapsed < 60
    )
    detail = (f"foo {rates[('foo', 'curious_client')][0]:.3f}/{rates[('foo', 'eavesdropper')][0]:.3f}, "
              f"zoo eavesdropper {eaves:.4f} (|dev| {abs(eaves - 0.1) / se:.2f} se), zoo curious {curious:.4f}")
    return record(3, "label-inference attack table", ok, detail, elapsed)


# ---------------------------------------------------------------- 4

PAPER_GRID = (0.020, 0.015, 0.010, 0.005, 0.001)


def mnist_config(framework: str, eta: float) -> RunConfig:
    return RunConfig(
        framework=framework, dataset="csv",
        train_path=str(ROOT / "data" / "mnist_train_8k.csv.gz"),
        test_path=str(ROOT / "data" / "mnist_test_2k.csv.gz"),
        num_clients=4, embed_dim=128, server_arch=(128,),
        eta0=eta, eta_m=eta, T=10_000, eval_every=10_000, seed=0,
    )


def criterion_4():
    """Rates are picked per framework by final training loss; test accuracy is only read at the end."""
    start = time.perf_counter()
    train, test = datasets_from_config(mnist_config("cascaded", 0.01))
    chosen = {}
    for fw in ("cascaded", "zoo", "foo"):
        best = None
        for eta in PAPER_GRID:
            try:
                rec = list(make_trainer(mnist_config(fw, eta), train, test).run())[-1]
            except NumericError:
                continue
            if np.isfinite(rec.train_loss) and (best is None or rec.train_loss < best[1].train_loss):
                best = (eta, rec)
        chosen[fw] = best
        print(f"  {fw}: eta {best[0]} train_loss {best[1].train_loss:.4f} test_acc {best[1].test_acc:.4f}", flush=True)
    elapsed = time.perf_counter() - start
    acc = {fw: rec.test_acc for fw, (_, rec) in chosen.items()}
    gap_zoo = 100 * (acc["cascaded"] - acc["zoo"])
    gap_foo = 100 * abs(acc["foo"] - acc["cascaded"])
    ok = gap_zoo >= 3 and gap_foo <= 3 and elapsed < 1200
    detail = (f"test acc cascaded {acc['cascaded']:.4f}, zoo {acc['zoo']:.4f}, foo {acc['foo']:.4f}; "
              f"cascaded-zoo {gap_zoo:+.1f} pts, |foo-cascaded| {gap_foo:.1f} pts")
    return record(4, "MNIST convergence gap (8k/2k subset, M = 4, T = 1e4)", ok, detail, elapsed)


# ---------------------------------------------------------------- 5


def criterion_5():
    start = time.perf_counter()
    base = RunConfig(framework="cascaded", n=1000, n_test=0, num_features=20, num_classes=4, embed_dim=16)
    widths = [128, 256, 512, 1024]
    rows = scaling_experiment(base, widths, T=4000, threshold=0.2, check_every=25,
                              seeds=(0, 1, 2), etas=DEFAULT_ETAS)
    elapsed = time.perf_counter() - start
    means = summarize_sweep(rows)
    cas = [means[("cascaded", w, -1)] for w in widths]
    zoo = [means[("zoo", w, -1)] for w in widths]
    spread = (max(cas) - min(cas)) / min(cas)
    monotone = all(b > a for a, b in zip(zoo, zoo[1:]))
    ok = spread < 0.25 and monotone and elapsed < 900
    fmt = lambda xs: "/".join("inf" if not np.isfinite(v) else f"{v:.0f}" for v in xs)
    detail = f"cascaded {fmt(cas)} (spread {100 * spread:.1f}%), zoo {fmt(zoo)} (mean of 3 seeds)"
    return record(5, "server-width insensitivity, widths 128..1024", ok, detail, elapsed)


# ---------------------------------------------------------------- 6


def criterion_6():
    start = time.perf_counter()
    handed_out = []
    real = proto.sample_direction

    def recording(d, dist, rng):
        u = real(d, dist, rng)
        handed_out.append(u)
        return u

    proto.sample_direction = recording
    checked = 0
    violations = []
    leaks = 0
    try:
        for framework, seed, clients in [("cascaded", 0, 2), ("cascaded", 1, 3), ("zoo", 2, 2), ("syn_zoo", 3, 3)]:
            handed_out.clear()
            cfg = RunConfig(framework=framework, n=500, n_test=100, num_clients=clients, num_features=12,
                            embed_dim=8, T=1000, eval_every=500, seed=seed)
            train, test = datasets_from_config(cfg)
            probe = make_trainer(cfg, train, test)
            sizes = [c.net.param_count for c in probe.clients] + [probe.server.net.param_count]
            monitor = WireMonitor(sizes, strict=False)
            list(make_trainer(cfg, train, test, tap=monitor).run())
            violations += monitor.violations
            checked += len(monitor.messages)
            values = [v for _, msg in monitor.messages for v in msg.values()]
            leaks += sum(isinstance(v, Perturbation) for v in values)
            wire = np.concatenate([np.asarray(v, dtype=float).ravel() for v in values])
            leaks += int(np.isin(wire, np.concatenate(handed_out)).sum())
    finally:
        proto.sample_direction = real
    elapsed = time.perf_counter() - start
    ok = not violations and leaks == 0 and checked > 0 and elapsed < 60
    return record(6, "wire carries only embeddings up and two scalars down", ok,
                  f"{checked} messages, {len(violations)} contract violations, {leaks} canary leaks", elapsed)


# ---------------------------------------------------------------- 7


def criterion_7():
    start = time.perf_counter()
    mismatches = 0
    for seed in range(5):
        n, m = 30, 4
        trace = random_trace(1000, n, m, seed)
        table = DelayTable(n, m)
        for t, (client, batch) in enumerate(trace):
            update_delays(table, client, batch, t)
        tau, peak = replay(n, m, trace)
        mismatches += int(not np.array_equal(table.tau, tau) or table.max_observed != peak)
    full, _ = run_bounded(4, (0.25,) * 4, 10_000, 3, None, 0)
    _, worst_client = run_bounded(5, (0.85, 0.05, 0.05, 0.05), 10_000, 50, 8, 1)
    _, freq = iid_frequencies()
    elapsed = time.perf_counter() - start
    freq_err = float(np.max(np.abs(freq - 0.25)))
    ok = mismatches == 0 and full.max_observed <= 4 and worst_client <= 5 and freq_err <= 0.01 and elapsed < 30
    detail = (f"replay mismatches {mismatches}/5, bounded max delay {full.max_observed} (tau_max 4, full batch) "
              f"and {worst_client} (tau_max 5, skewed p), iid max freq error {freq_err:.4f}")
    return record(7, "scheduler fidelity", ok, detail, elapsed)


# ---------------------------------------------------------------- 8


def criterion_8():
    start = time.perf_counter()
    differing = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for fw in ("cascaded", "foo", "zoo", "syn_zoo"):
            cfg = tmp / f"{fw}.cfg"
            cfg.write_text(f"framework = {fw}\nn = 1000\nn_test = 500\nT = 1000\neval_every = 100\nseed = 7\n")
            runs = []
            for k in range(2):
                out = tmp / f"{fw}_{k}"
                code = cli_main(["--quiet", "--out", str(out), "run", str(cfg)])
                with open(out / "metrics.csv", newline="") as fh:
                    runs.append((code, [row[:-1] for row in csv.reader(fh)]))
            if runs[0] != runs[1] or runs[0][0] != 0 or len(runs[0][1]) != 11:
                differing.append(fw)
    elapsed = time.perf_counter() - start
    ok = not differing and elapsed < 300
    return record(8, "identical metrics.csv on rerun (wall_ms excluded)", ok,
                  "all four frameworks identical" if ok else f"differs: {differing}", elapsed)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{k}" for k in range(1, 9)])
def test_acceptance(criterion):
    assert criterion()


if __name__ == "__main__":
    outcomes = [c() for c in CRITERIA]
    print()
    for k in sorted(RESULTS):
        print(RESULTS[k])
    sys.exit(0 if all(outcomes) else 1)
