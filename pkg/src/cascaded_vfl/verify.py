"""Numerical checks of the zeroth-order estimator's analytical properties.

Every check returns a :class:`CheckResult` holding both the measured value
and the bound it is compared with, so a failure can be diagnosed rather than
just observed.  Tolerance policy everywhere: 1% multiplicative slack on the
bound plus the Monte-Carlo standard error of the measurement, plus a
floating-point floor of ``16 eps sqrt(n)`` relative to the quantity's scale
so that a bound of exactly zero is not failed by rounding alone.

Smoothing conventions: ``f_mu(x) = E f(x + mu u)`` over the unit sphere is
used for the value gap, while the gradient reference is the average of
``grad f`` over the ball of radius ``mu`` -- the function whose gradient the
sphere-direction two-point estimator is exactly unbiased for.  On the
quadratic and linear fixtures the two coincide up to a constant.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor_nn as nn
from .errors import NumericError
from .zoo import STANDARD_GAUSSIAN, UNIT_SPHERE, DirectionDistribution, sample_directions, two_point_estimates

VectorField = Callable[[np.ndarray], np.ndarray]

CHUNK = 100_000


@dataclass(frozen=True)
class Fixture:
    """A smooth test function with analytic gradient and certified Lipschitz constant.

    ``f`` maps rows ``[k, d]`` to ``[k]``; ``grad`` maps ``[k, d]`` to ``[k, d]``.
    """

    name: str
    f: VectorField
    grad: VectorField
    lipschitz: float
    point: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.point.size

    def value(self, x: np.ndarray) -> float:
        return float(self.f(x[None, :])[0])

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.grad(x[None, :])[0]


def linear_fixture(d: int = 10, seed: int = 0) -> Fixture:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=d)
    return Fixture("linear", lambda x: x @ a + 0.5, lambda x: np.broadcast_to(a, x.shape), 0.0, rng.normal(size=d))


def quadratic_fixture(d: int = 10, seed: int = 0) -> Fixture:
    """``0.5 * x^T diag(1..d) x``; its gradient is ``d``-Lipschitz."""
    rng = np.random.default_rng(seed)
    diag = np.arange(1.0, d + 1)
    return Fixture(
        "quadratic",
        lambda x: 0.5 * (x * x) @ diag,
        lambda x: x * diag,
        float(d),
        rng.normal(size=d),
    )


def _lse(x):
    top = x.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(x - top).sum(axis=1, keepdims=True)))[:, 0]


def _lse_grad(x):
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def logsumexp_fixture(d: int = 10, seed: int = 0) -> Fixture:
    """Log-sum-exp; its Hessian ``diag(p) - p p^T`` has spectral norm <= 1/2."""
    rng = np.random.default_rng(seed)
    return Fixture("logsumexp", _lse, _lse_grad, 0.5, rng.normal(size=d))


def default_fixtures(d: int = 10, seed: int = 0) -> list[Fixture]:
    return [linear_fixture(d, seed), quadratic_fixture(d, seed), logsumexp_fixture(d, seed)]


@dataclass(frozen=True)
class CheckResult:
    check: str
    fixture: str
    measured: float
    bound: float
    tolerance: float
    passed: bool


def _chunks(total: int):
    done = 0
    while done < total:
        k = min(CHUNK, total - done)
        yield k
        done += k


class _Moments:
    """Running mean and centred sum of squares, merged chunk by chunk (Chan et al.)."""

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def add(self, block: np.ndarray) -> None:
        k = block.shape[0]
        mean = block.mean(axis=0)
        m2 = ((block - mean) ** 2).sum(axis=0)
        total = self.count + k
        delta = mean - self.mean
        self.mean = self.mean + delta * (k / total)
        self.m2 = self.m2 + m2 + delta**2 * (self.count * k / total)
        self.count = total

    def stderr(self) -> float:
        """Standard error of the mean (summed over components for vectors)."""
        if self.count < 2:
            return 0.0
        return float(np.sqrt(np.sum(self.m2) / (self.count - 1) / self.count))


def _roundoff(scale: float, n: int) -> float:
    """Floating-point floor for a Monte-Carlo mean of ``n`` terms of size ``scale``.

    Keeps zero bounds (linear fixtures) from failing on summation error alone.
    """
    return 16 * np.finfo(float).eps * np.sqrt(max(n, 1)) * max(scale, 1.0)


def _finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite {what}")
    return values


def mean_estimate(
    fixture: Fixture, w: np.ndarray, mu: float, n: int, rng: np.random.Generator,
    dist: DirectionDistribution = UNIT_SPHERE,
) -> np.ndarray:
    """Average of ``n`` two-point estimates at ``w``."""
    base = fixture.value(w)
    total = np.zeros(fixture.dim)
    for k in _chunks(n):
        u = sample_directions(k, fixture.dim, dist, rng)
        shifted = _finite(fixture.f(w + mu * u), "function value")
        total += two_point_estimates(shifted, np.full(k, base), u, mu, dist).sum(axis=0)
    return total / n


def _ball(k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    v = sample_directions(k, d, UNIT_SPHERE, rng)
    return v * (rng.random(k) ** (1.0 / d))[:, None]


def smoothed_gradient(fixture: Fixture, w: np.ndarray, mu: float, n: int, rng: np.random.Generator):
    """Monte-Carlo ``grad f_mu(w)`` from analytic gradients over the mu-ball.

    Antithetic pairs ``w +/- mu v`` cancel the odd part of the integrand.
    Returns ``(mean, standard error of the mean's norm)``.
    """
    acc = _Moments(fixture.dim)
    for k in _chunks(max(n // 2, 1)):
        v = _ball(k, fixture.dim, rng)
        g = 0.5 * (fixture.grad(w + mu * v) + fixture.grad(w - mu * v))
        acc.add(_finite(g, "gradient"))
    return acc.mean, acc.stderr()


def check_smoothed_unbiasedness(
    fixture: Fixture, mu: float = 1e-3, n: int = 1_000_000, rng: np.random.Generator | None = None,
    w: np.ndarray | None = None,
) -> CheckResult:
    """Mean estimate vs an independent 10x larger reference for ``grad f_mu``.

    ``measured`` is ``||mean - ref|| / ||ref||``; the check passes when it is
    at most ``1% + 3 / sqrt(n)``.  For a linear function the reference is the
    exact gradient regardless of ``mu``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    w = fixture.point if w is None else w
    est_rng, ref_rng = rng.spawn(2)
    est = mean_estimate(fixture, w, mu, n, est_rng)
    ref, _ = smoothed_gradient(fixture, w, mu, 10 * n, ref_rng)
    scale = np.linalg.norm(ref)
    bias_norm = float(np.linalg.norm(est - ref))
    measured = bias_norm / scale if scale > 0 else bias_norm
    tol = 0.01 + 3.0 / np.sqrt(n)
    return CheckResult("unbiasedness", fixture.name, float(measured), float(tol), float(tol), bool(measured <= tol))


def check_value_approximation(
    fixture: Fixture, mu: float = 1e-3, n: int = 1_000_000, rng: np.random.Generator | None = None,
    w: np.ndarray | None = None,
) -> CheckResult:
    """``|f_mu(w) - f(w)| <= L mu^2 / 2`` with sphere smoothing.

    Uses antithetic pairs, which make the quadratic case exact.
    """
    rng = np.random.default_rng(1) if rng is None else rng
    w = fixture.point if w is None else w
    base = fixture.value(w)
    acc = _Moments()
    for k in _chunks(max(n // 2, 1)):
        u = sample_directions(k, fixture.dim, UNIT_SPHERE, rng)
        diff = 0.5 * (fixture.f(w + mu * u) + fixture.f(w - mu * u)) - base
        acc.add(_finite(diff, "function value"))
    stderr = acc.stderr()
    gap = float(abs(acc.mean))
    bound = fixture.lipschitz * mu * mu / 2
    tol = 0.01 * bound + stderr + _roundoff(abs(base), n)
    return CheckResult("value_gap", fixture.name, gap, bound, tol, gap <= bound + tol)


def check_bias_bound(
    fixture: Fixture, mu: float = 1e-3, n: int = 1_000_000, rng: np.random.Generator | None = None,
    w: np.ndarray | None = None,
) -> CheckResult:
    """``||grad f_mu - grad f|| <= mu L d / 2`` (square root of the squared form)."""
    rng = np.random.default_rng(2) if rng is None else rng
    w = fixture.point if w is None else w
    exact = fixture.gradient(w)
    if mu == 0:
        measured, stderr = 0.0, 0.0
    else:
        ref, stderr = smoothed_gradient(fixture, w, mu, n, rng)
        measured = float(np.linalg.norm(ref - exact))
    bound = mu * fixture.lipschitz * fixture.dim / 2
    tol = 0.01 * bound + stderr + _roundoff(float(np.linalg.norm(exact)), n)
    return CheckResult("bias_bound", fixture.name, measured, bound, tol, measured <= bound + tol)


def check_second_moment(
    fixture: Fixture, mu: float = 1e-3, n: int = 1_000_000, rng: np.random.Generator | None = None,
    w: np.ndarray | None = None,
) -> CheckResult:
    """``E||g_hat||^2 <= 2 d ||grad f||^2 + mu^2 L^2 d^2 / 2``.

    At ``mu = 0`` the estimator is replaced by its limit ``d (grad f . u) u``.
    """
    rng = np.random.default_rng(3) if rng is None else rng
    w = fixture.point if w is None else w
    d = fixture.dim
    exact = fixture.gradient(w)
    base = fixture.value(w)
    acc = _Moments()
    for k in _chunks(n):
        u = sample_directions(k, d, UNIT_SPHERE, rng)
        if mu == 0:
            est = d * (u @ exact)[:, None] * u
        else:
            est = two_point_estimates(_finite(fixture.f(w + mu * u), "function value"), np.full(k, base), u, mu)
        acc.add((est * est).sum(axis=1))
    mean = float(acc.mean)
    stderr = acc.stderr()
    bound = 2 * d * float(exact @ exact) + mu**2 * fixture.lipschitz**2 * d**2 / 2
    return CheckResult("second_moment", fixture.name, mean, bound, 0.01 * bound + stderr, mean <= 1.01 * bound + stderr)


LEMMA_CHECKS = (check_smoothed_unbiasedness, check_value_approximation, check_bias_bound, check_second_moment)


def run_lemma_suite(
    fixtures: Sequence[Fixture] | None = None, mu: float = 1e-3, n: int = 1_000_000, seed: int = 0
) -> list[CheckResult]:
    """All four checks on every fixture; each (check, fixture) pair gets its own stream."""
    fixtures = default_fixtures() if fixtures is None else fixtures
    streams = np.random.SeedSequence(seed).spawn(len(fixtures) * len(LEMMA_CHECKS))
    results = []
    k = 0
    for fixture in fixtures:
        for check in LEMMA_CHECKS:
            results.append(check(fixture, mu=mu, n=n, rng=np.random.default_rng(streams[k])))
            k += 1
    return results


REPORT_HEADER = ("check", "fixture", "measured", "bound", "tolerance", "pass")


def report_csv(results: Sequence[CheckResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in results:
        writer.writerow([r.check, r.fixture, f"{r.measured:.6g}", f"{r.bound:.6g}", f"{r.tolerance:.6g}", str(bool(r.passed)).lower()])
    return buf.getvalue()


# ---------------------------------------------------------------- training-time measurements


@dataclass(frozen=True)
class GradientVariance:
    """Per-party spread of per-sample gradients around the full-batch gradient.

    Index 0 is the server, ``m + 1`` is client ``m``.  ``max_embed_grad_norm``
    is indexed by client alone: the largest per-sample norm of the loss
    gradient with respect to that client's embedding.
    """

    sigma2: tuple[float, ...]
    max_grad_norm: tuple[float, ...]
    num_samples: int
    max_embed_grad_norm: tuple[float, ...] = ()


def per_sample_gradients(trainer, sample_ids: np.ndarray, embed_norms: np.ndarray | None = None) -> list[np.ndarray]:
    """Exact gradients of each sample's loss w.r.t. every party's parameters.

    Evaluated on current client parameters (no staleness), one sample at a time.
    Returns one ``[k, d_party]`` array per party, server first.  If
    ``embed_norms`` (shape ``[k, M]``) is given it receives the norm of each
    sample's embedding gradient per client.
    """
    data = trainer.train
    clients = trainer.clients
    server = trainer.server.net
    out = [np.zeros((len(sample_ids), server.param_count))]
    out += [np.zeros((len(sample_ids), cs.net.param_count)) for cs in clients]
    for row, i in enumerate(sample_ids):
        tapes, embeds = [], []
        for cs in clients:
            c, tape = nn.forward(cs.net, data.shard(cs.client_id)[i])
            tapes.append(tape)
            embeds.append(c)
        logits, stape = nn.forward(server, np.concatenate(embeds))
        _, logit_grad = nn.softmax_cross_entropy(logits, int(data.labels[i]))
        bundle = nn.backward(server, stape, logit_grad)
        out[0][row] = bundle.param_grad
        offset = 0
        for m, cs in enumerate(clients):
            width = cs.net.out_size
            g = bundle.input_grad[offset : offset + width]
            offset += width
            if embed_norms is not None:
                embed_norms[row, m] = np.linalg.norm(g)
            out[m + 1][row] = nn.backward(cs.net, tapes[m], g).param_grad
    return out


def measure_gradient_variance(trainer, max_samples: int | None = None, rng: np.random.Generator | None = None) -> GradientVariance:
    n = trainer.train.num_samples
    ids = np.arange(n)
    if max_samples is not None and max_samples < n:
        rng = np.random.default_rng(0) if rng is None else rng
        ids = np.sort(rng.choice(n, size=max_samples, replace=False))
    embed_norms = np.zeros((len(ids), len(trainer.clients)))
    grads = per_sample_gradients(trainer, ids, embed_norms)
    sigma2, norms = [], []
    for g in grads:
        centred = g - g.mean(axis=0)
        sigma2.append(float((centred * centred).sum(axis=1).mean()))
        norms.append(float(np.linalg.norm(g, axis=1).max()))
    return GradientVariance(tuple(sigma2), tuple(norms), len(ids), tuple(float(v) for v in embed_norms.max(axis=0)))


# ---------------------------------------------------------------- scaling with model size


SWEEP_HEADER = (
    "framework", "server_width", "client_width", "server_params", "client_params", "seed", "eta",
    "iterations_to_threshold",
)

# geometric refinement of the usual 0.02 .. 0.001 learning-rate range
DEFAULT_ETAS = tuple(round(0.02 * 0.8**k, 6) for k in range(10))


@dataclass(frozen=True)
class SweepRow:
    framework: str
    server_width: int
    client_width: int
    server_params: int
    client_params: int
    seed: int
    eta: float | None
    iterations_to_threshold: int | None


def iterations_to_threshold(
    trainer, threshold: float, budget: int, check_every: int, blowup: float = 1e3
) -> int | None:
    """Iterations until the full-train loss first drops to ``threshold``.

    ``None`` if the budget runs out or the loss exceeds ``blowup`` first.
    """
    done = 0
    while done < budget:
        step = min(check_every, budget - done)
        for _ in trainer.run(step):
            pass
        done += step
        loss, _ = trainer.evaluate(trainer.train)
        if not np.isfinite(loss) or loss > blowup:
            return None
        if loss <= threshold:
            return done
    return None


def best_iterations(make, etas: Sequence[float], threshold: float, budget: int, check_every: int):
    """Fewest iterations to threshold over a learning-rate grid, and the rate achieving it.

    Each run's budget is capped at the best count so far, so the search only
    pays full price for rates that can still win.
    """
    best, best_eta = None, None
    for eta in etas:
        cap = budget if best is None else best - check_every
        if cap <= 0:
            break
        try:
            its = iterations_to_threshold(make(eta), threshold, cap, check_every)
        except NumericError:
            its = None
        if its is not None and (best is None or its < best):
            best, best_eta = its, eta
    return best, best_eta


def scaling_experiment(
    base_cfg,
    server_widths: Sequence[int],
    client_widths: Sequence[int | None] = (None,),
    T: int = 4000,
    threshold: float = 0.2,
    check_every: int = 25,
    frameworks: Sequence[str] = ("cascaded", "zoo"),
    seeds: Sequence[int] = (0,),
    etas: Sequence[float] | None = None,
) -> list[SweepRow]:
    """Paired runs over server and client widths sharing data and seeds.

    ``server_widths`` sets the server's hidden layer; ``client_widths`` sets
    one hidden client layer (``None`` keeps ``base_cfg.client_arch``).  With
    ``etas`` every cell reports its best rate from that grid (used for both
    parties); without, the config's rates are used as they are.
    """
    from .protocol import datasets_from_config, make_trainer

    rows = []
    for seed in seeds:
        data_cfg = base_cfg.replace(seed=seed)
        train, test = datasets_from_config(data_cfg)
        for cw in client_widths:
            for sw in server_widths:
                for fw in frameworks:
                    cfg = data_cfg.replace(
                        framework=fw,
                        server_arch=(sw,),
                        client_arch=base_cfg.client_arch if cw is None else (cw,),
                        T=T,
                    )

                    def make(eta, cfg=cfg):
                        run_cfg = cfg if eta is None else cfg.replace(eta0=eta, eta_m=eta)
                        return make_trainer(run_cfg, train, test)

                    probe = make(None)
                    grid = (None,) if etas is None else etas
                    its, eta = best_iterations(make, grid, threshold, T, check_every)
                    if etas is None:
                        eta = cfg.eta0
                    rows.append(
                        SweepRow(
                            fw, sw, -1 if cw is None else cw,
                            probe.server.net.param_count, probe.clients[0].net.param_count,
                            seed, eta, its,
                        )
                    )
    return rows


def summarize_sweep(rows: Sequence[SweepRow]) -> dict[tuple[str, int, int], float]:
    """Mean iterations-to-threshold per (framework, server width, client width).

    A cell where any seed missed the threshold counts as infinite.
    """
    cells: dict[tuple[str, int, int], list[float]] = {}
    for r in rows:
        value = float("inf") if r.iterations_to_threshold is None else float(r.iterations_to_threshold)
        cells.setdefault((r.framework, r.server_width, r.client_width), []).append(value)
    return {k: float(np.mean(v)) for k, v in cells.items()}


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([
            r.framework, r.server_width, r.client_width, r.server_params, r.client_params, r.seed,
            "" if r.eta is None else r.eta,
            "" if r.iterations_to_threshold is None else r.iterations_to_threshold,
        ])
    return buf.getvalue()
