"""Parties, wire messages and training loops.

Four frameworks share the same dense models and data layout:

``cascaded``  clients estimate gradients from two returned losses; the server
              trains itself with backprop after replying.
``zoo``       as ``cascaded`` but the server also uses a two-point estimate.
``syn_zoo``   synchronous: every client queries on the same batch each round,
              then the server takes a zeroth-order step.
``foo``       the server returns the loss gradient w.r.t. each embedding and
              clients backpropagate it (privacy-unsafe upper bound).

One activation is simulated as an atomic round: query, reply, server update,
client update.  Staleness comes from the server's embedding table, which
keeps the most recent unperturbed output of every (sample, client) pair.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor_nn as nn
from .config import MetricsRecord, RunConfig
from .errors import NumericError, ProtocolError, UsageError, VFLError
from .partition import VerticalDataset, load_csv_dataset, make_synthetic, split_features
from .scheduler import DelayTable, next_activation, update_delays
from .zoo import DirectionDistribution, Perturbation, sample_direction, two_point_estimate


# ---------------------------------------------------------------- messages


@dataclass(frozen=True, eq=False)
class ClientQuery:
    client_id: int
    sample_ids: np.ndarray
    c: np.ndarray
    # absent in the first-order baseline
    c_hat: np.ndarray | None = None

    def to_wire(self) -> dict:
        msg = {"client_id": self.client_id, "sample_ids": self.sample_ids, "c": self.c}
        if self.c_hat is not None:
            msg["c_hat"] = self.c_hat
        return msg


@dataclass(frozen=True)
class ServerReply:
    h: float
    h_hat: float

    def to_wire(self) -> dict:
        return {"h": self.h, "h_hat": self.h_hat}


@dataclass(frozen=True, eq=False)
class GradientReply:
    """First-order baseline reply: d(batch loss)/d(embedding) for one client."""

    h: float
    embed_grad: np.ndarray

    def to_wire(self) -> dict:
        return {"h": self.h, "embed_grad": self.embed_grad}


Tap = Callable[[str, dict], None]


# ---------------------------------------------------------------- state


@dataclass
class EmbeddingTable:
    """Latest unperturbed client outputs, one row per sample.

    Columns ``offsets[m]:offsets[m+1]`` hold client ``m``'s embedding.
    """

    entries: np.ndarray
    offsets: tuple[int, ...]
    last_refresh: np.ndarray

    @classmethod
    def warm_start(cls, clients: list["ClientState"]) -> "EmbeddingTable":
        blocks = [nn.predict(cs.net, cs.shard) for cs in clients]
        offsets = tuple(np.concatenate([[0], np.cumsum([b.shape[1] for b in blocks])]).tolist())
        entries = np.concatenate(blocks, axis=1)
        stamps = np.zeros((entries.shape[0], len(clients)), dtype=np.int64)
        return cls(entries, offsets, stamps)

    def block(self, client_id: int) -> slice:
        return slice(self.offsets[client_id], self.offsets[client_id + 1])

    def write(self, client_id: int, sample_ids: np.ndarray, c: np.ndarray, t: int) -> None:
        cols = self.block(client_id)
        if c.shape != (len(sample_ids), cols.stop - cols.start):
            raise ProtocolError(
                f"client {client_id} sent embeddings of shape {c.shape}, "
                f"table expects ({len(sample_ids)}, {cols.stop - cols.start})"
            )
        self.entries[sample_ids, cols] = c
        self.last_refresh[sample_ids, client_id] = np.maximum(self.last_refresh[sample_ids, client_id], t)

    def rows(self, sample_ids: np.ndarray) -> np.ndarray:
        return self.entries[sample_ids]


@dataclass
class ServerState:
    net: nn.DenseNet
    labels: np.ndarray = field(repr=False)
    table: EmbeddingTable = field(repr=False)
    eta0: float
    lam: float = 0.0
    # zeroth-order server (zoo / syn_zoo) settings
    mu: float = 1e-3
    dist: DirectionDistribution = DirectionDistribution.UNIT_SPHERE
    rng: np.random.Generator | None = None


@dataclass
class ClientState:
    client_id: int
    net: nn.DenseNet
    shard: np.ndarray = field(repr=False)
    eta: float
    mu: float
    dist: DirectionDistribution = DirectionDistribution.UNIT_SPHERE
    rng: np.random.Generator | None = None
    lam: float = 0.0
    pending: Perturbation | None = field(default=None, repr=False)
    # first-order baseline keeps its forward tape here instead
    pending_tape: nn.Tape | None = field(default=None, repr=False)


# ---------------------------------------------------------------- helpers


def _server_loss(
    ss: ServerState, x: np.ndarray, labels: np.ndarray, net: nn.DenseNet | None = None, t=None, client_id=None
):
    net = ss.net if net is None else net
    try:
        logits, tape = nn.forward(net, x)
    except NumericError as exc:
        raise NumericError(str(exc), iteration=t, client_id=client_id) from None
    loss, logit_grad = nn.softmax_cross_entropy(logits, labels)
    _check_finite(loss, t, client_id)
    return loss, logit_grad, tape


def _l2(w: np.ndarray) -> float:
    return 0.5 * float(w @ w)


def _check_finite(value: float, t, client_id) -> None:
    if not np.isfinite(value):
        raise NumericError("non-finite loss", iteration=t, client_id=client_id)


def _server_zoo_update(ss: ServerState, x: np.ndarray, labels: np.ndarray, base: float) -> None:
    """Zeroth-order self-update of the server at the inputs ``x``."""
    u = sample_direction(ss.net.param_count, ss.dist, ss.rng)
    pert = Perturbation(u, ss.mu)
    shifted, _, _ = _server_loss(ss, x, labels, nn.perturb(ss.net, u, ss.mu))
    if ss.lam:
        base = base + ss.lam * _l2(ss.net.params)
        shifted = shifted + ss.lam * _l2(ss.net.params + ss.mu * u)
    nn.sgd_step(ss.net, two_point_estimate(shifted, base, pert, ss.dist), ss.eta0)


# ---------------------------------------------------------------- operations


def client_step(cs: ClientState, batch, rng: np.random.Generator | None = None) -> ClientQuery:
    """Draw a direction, compute plain and perturbed embeddings for ``batch``."""
    if cs.pending is not None:
        raise ProtocolError(f"client {cs.client_id} already has a query in flight")
    rng = cs.rng if rng is None else rng
    batch = np.atleast_1d(np.asarray(batch, dtype=np.int64))
    x = cs.shard[batch]
    u = sample_direction(cs.net.param_count, cs.dist, rng)
    c = nn.predict(cs.net, x)
    c_hat = nn.predict(nn.perturb(cs.net, u, cs.mu), x)
    cs.pending = Perturbation(u, cs.mu, sample_id=batch, client_id=cs.client_id)
    return ClientQuery(cs.client_id, batch, c, c_hat)


def server_handle_query(ss: ServerState, q: ClientQuery, t: int, *, zoo_server: bool = False) -> ServerReply:
    """Refresh the table, reply with ``(h, h_hat)``, then update the server.

    The reply is computed from the pre-update server weights.  With
    ``zoo_server`` the update is a two-point estimate instead of backprop.
    """
    if q.c_hat is None or q.c_hat.shape != q.c.shape:
        raise ProtocolError(f"query from client {q.client_id} lacks a matching perturbed embedding")
    ss.table.write(q.client_id, q.sample_ids, q.c, t)
    labels = ss.labels[q.sample_ids]
    x = ss.table.rows(q.sample_ids)
    h, logit_grad, tape = _server_loss(ss, x, labels, t=t, client_id=q.client_id)
    x_hat = x.copy()
    x_hat[:, ss.table.block(q.client_id)] = q.c_hat
    h_hat, _, _ = _server_loss(ss, x_hat, labels, t=t, client_id=q.client_id)
    reply = ServerReply(h, h_hat)

    if zoo_server:
        _server_zoo_update(ss, x, labels, h)
    else:
        grad = nn.backward(ss.net, tape, logit_grad).param_grad
        if ss.lam:
            grad = grad + ss.lam * ss.net.params
        nn.sgd_step(ss.net, grad, ss.eta0)
    return reply


def client_apply_reply(cs: ClientState, r: ServerReply) -> ClientState:
    """Turn the two returned losses into a gradient estimate and step."""
    if cs.pending is None:
        raise ProtocolError(f"client {cs.client_id} received a reply with no query in flight")
    pert = cs.pending
    h, h_hat = r.h, r.h_hat
    if cs.lam:
        h = h + cs.lam * _l2(cs.net.params)
        h_hat = h_hat + cs.lam * _l2(cs.net.params + pert.mu * pert.u)
    est = two_point_estimate(h_hat, h, pert, cs.dist)
    nn.sgd_step(cs.net, est, cs.eta)
    cs.pending = None
    return cs


def foo_client_step(cs: ClientState, batch) -> ClientQuery:
    if cs.pending_tape is not None:
        raise ProtocolError(f"client {cs.client_id} already has a query in flight")
    batch = np.atleast_1d(np.asarray(batch, dtype=np.int64))
    c, tape = nn.forward(cs.net, cs.shard[batch])
    cs.pending_tape = tape
    return ClientQuery(cs.client_id, batch, c)


def foo_server_handle_query(ss: ServerState, q: ClientQuery, t: int) -> GradientReply:
    """Backprop through the server and return the querying client's input slice."""
    ss.table.write(q.client_id, q.sample_ids, q.c, t)
    labels = ss.labels[q.sample_ids]
    x = ss.table.rows(q.sample_ids)
    h, logit_grad, tape = _server_loss(ss, x, labels, t=t, client_id=q.client_id)
    bundle = nn.backward(ss.net, tape, logit_grad)
    reply = GradientReply(h, bundle.input_grad[:, ss.table.block(q.client_id)].copy())
    grad = bundle.param_grad
    if ss.lam:
        grad = grad + ss.lam * ss.net.params
    nn.sgd_step(ss.net, grad, ss.eta0)
    return reply


def foo_client_apply_reply(cs: ClientState, r: GradientReply) -> ClientState:
    if cs.pending_tape is None:
        raise ProtocolError(f"client {cs.client_id} received a reply with no query in flight")
    grad = nn.backward(cs.net, cs.pending_tape, r.embed_grad).param_grad
    if cs.lam:
        grad = grad + cs.lam * cs.net.params
    cs.pending_tape = None
    nn.sgd_step(cs.net, grad, cs.eta)
    return cs


# ---------------------------------------------------------------- wire checks


class WireMonitor:
    """Records every message and checks it against the zeroth-order wire contract.

    Upstream messages may carry only ``client_id``, ``sample_ids`` and the
    embedding blocks ``c``/``c_hat``; downstream messages only the scalars
    ``h``/``h_hat``.  No array may be sized like a party's parameter vector.
    Violations are collected, and raised immediately when ``strict``.
    """

    UP_FIELDS = {"client_id", "sample_ids", "c", "c_hat"}
    DOWN_FIELDS = {"h", "h_hat"}

    def __init__(self, param_sizes=(), strict: bool = True):
        self.param_sizes = set(int(s) for s in param_sizes)
        self.strict = strict
        self.messages: list[tuple[str, dict]] = []
        self.violations: list[str] = []

    def __call__(self, direction: str, msg: dict) -> None:
        self.messages.append((direction, msg))
        problems = self.inspect(direction, msg)
        self.violations.extend(problems)
        if problems and self.strict:
            raise ProtocolError("; ".join(problems))

    def inspect(self, direction: str, msg: dict) -> list[str]:
        allowed = self.UP_FIELDS if direction == "up" else self.DOWN_FIELDS
        problems = [f"{direction}: unexpected field {k!r}" for k in msg if k not in allowed]
        for k, v in msg.items():
            if direction == "down" and not np.isscalar(v):
                problems.append(f"down: field {k!r} is not a scalar")
            if isinstance(v, np.ndarray) and v.size in self.param_sizes and k not in ("sample_ids",):
                problems.append(f"{direction}: field {k!r} has {v.size} entries, the size of a parameter vector")
        return problems


# ---------------------------------------------------------------- training loops


def datasets_from_config(cfg: RunConfig) -> tuple[VerticalDataset, VerticalDataset | None]:
    """Build the vertically split train and test sets a config describes."""
    shuffle = np.random.default_rng([cfg.seed, 1]) if cfg.shuffle_features else None
    if cfg.dataset == "synthetic":
        rng = np.random.default_rng([cfg.seed, 0])
        x, y = make_synthetic(cfg.n + cfg.n_test, cfg.num_features, cfg.num_classes, cfg.separation, rng)
        x_train, y_train, x_test, y_test = x[: cfg.n], y[: cfg.n], x[cfg.n :], y[cfg.n :]
        num_classes = cfg.num_classes
    else:
        x_train, y_train = load_csv_dataset(cfg.train_path, cfg.has_header)
        x_test = y_test = None
        if cfg.test_path:
            x_test, y_test = load_csv_dataset(cfg.test_path, cfg.has_header)
        num_classes = int(max(y_train.max(), -1 if y_test is None else y_test.max())) + 1
    order = None if shuffle is None else shuffle.permutation(x_train.shape[1])
    if order is not None:
        x_train = x_train[:, order]
        x_test = None if x_test is None else x_test[:, order]
    train = split_features(x_train, y_train, cfg.num_clients, num_classes)
    test = None
    if x_test is not None and len(y_test):
        test = split_features(x_test, y_test, cfg.num_clients, num_classes)
    return train, test


@dataclass
class RunResult:
    metrics: list[MetricsRecord]
    trainer: "Trainer"


class Trainer:
    """Common machinery for all frameworks: model setup, RNG streams, evaluation."""

    framework = "base"
    synchronous = False

    def __init__(
        self,
        cfg: RunConfig,
        train: VerticalDataset,
        test: VerticalDataset | None = None,
        *,
        tap: Tap | None = None,
    ):
        self.cfg = cfg
        self.train = train
        self.test = test
        self.tap = tap
        seeds = np.random.SeedSequence(cfg.seed).spawn(5 + train.num_clients)
        init_rng = np.random.default_rng(seeds[0])
        self.batch_rng = np.random.default_rng(seeds[1])
        self.sched_rng = np.random.default_rng(seeds[2])
        server_rng = np.random.default_rng(seeds[3])
        dist = DirectionDistribution(cfg.dist)
        mu = cfg.effective_mu

        self.clients: list[ClientState] = []
        for m in range(train.num_clients):
            sizes = [train.feature_sizes[m], *cfg.client_arch, cfg.embed_dim]
            acts = ["relu"] * len(cfg.client_arch) + [cfg.client_activation]
            net = nn.init_dense_net(sizes, acts, init_rng)
            self.clients.append(
                ClientState(
                    m, net, train.shard(m), cfg.eta_m, mu, dist,
                    rng=np.random.default_rng(seeds[5 + m]), lam=cfg.lam,
                )
            )
        server_sizes = [cfg.embed_dim * train.num_clients, *cfg.server_arch, train.num_classes]
        server_net = nn.mlp(server_sizes, init_rng)
        table = EmbeddingTable.warm_start(self.clients)
        self.server = ServerState(server_net, train.labels, table, cfg.eta0, cfg.lam, mu, dist, server_rng)
        self.policy = cfg.activation_policy()
        if self.policy.num_clients != train.num_clients:
            raise UsageError(
                f"config is for {self.policy.num_clients} clients but the data has {train.num_clients}"
            )
        self.delays = DelayTable(train.num_samples, train.num_clients, summary=cfg.delay_mode == "summary")
        self.t = 0

    # -- wire
    def _send(self, direction: str, msg):
        if self.tap is not None:
            self.tap(direction, msg.to_wire())
        return msg

    # -- sampling
    def draw_batch(self) -> np.ndarray:
        n = self.train.num_samples
        size = min(self.cfg.batch_size, n)
        return np.sort(self.batch_rng.choice(n, size=size, replace=False))

    def step(self, t: int) -> None:
        raise NotImplementedError

    # -- evaluation
    def embeddings(self, data: VerticalDataset) -> np.ndarray:
        return np.concatenate([nn.predict(cs.net, data.shard(cs.client_id)) for cs in self.clients], axis=1)

    def evaluate(self, data: VerticalDataset) -> tuple[float, float]:
        logits = nn.predict(self.server.net, self.embeddings(data))
        loss, _ = nn.softmax_cross_entropy(logits, data.labels)
        acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
        return loss, acc

    def epoch(self, iterations: int) -> float:
        visits = iterations * min(self.cfg.batch_size, self.train.num_samples)
        if not self.synchronous:
            visits /= self.train.num_clients
        return visits / self.train.num_samples

    def record(self, iterations: int, started: float) -> MetricsRecord:
        train_loss, train_acc = self.evaluate(self.train)
        if self.test is not None and self.test.num_samples:
            test_loss, test_acc = self.evaluate(self.test)
        else:
            test_loss, test_acc = float("nan"), float("nan")
        return MetricsRecord(
            iteration=iterations,
            epoch=self.epoch(iterations),
            train_loss=train_loss,
            train_acc=train_acc,
            test_loss=test_loss,
            test_acc=test_acc,
            max_delay=int(self.delays.max_observed),
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )

    def run(self, T: int | None = None) -> Iterator[MetricsRecord]:
        T = self.cfg.T if T is None else T
        every = self.cfg.eval_every
        started = time.perf_counter()
        stop = self.t + T
        while self.t < stop:
            t = self.t
            try:
                self.step(t)
            except VFLError as exc:
                if isinstance(exc, NumericError) and exc.iteration is None:
                    raise NumericError(str(exc), iteration=t, client_id=exc.client_id) from exc
                exc.iteration = getattr(exc, "iteration", None) or t
                raise
            self.t += 1
            if self.t % every == 0 or self.t == stop:
                yield self.record(self.t, started)


class CascadedTrainer(Trainer):
    framework = "cascaded"
    zoo_server = False

    def step(self, t: int) -> None:
        m = next_activation(self.policy, self.sched_rng, self.delays, t)
        cs = self.clients[m]
        batch = self.draw_batch()
        q = self._send("up", client_step(cs, batch))
        r = self._send("down", server_handle_query(self.server, q, t, zoo_server=self.zoo_server))
        client_apply_reply(cs, r)
        update_delays(self.delays, m, batch, t)


class ZooTrainer(CascadedTrainer):
    framework = "zoo"
    zoo_server = True


class FooTrainer(Trainer):
    framework = "foo"

    def step(self, t: int) -> None:
        m = next_activation(self.policy, self.sched_rng, self.delays, t)
        cs = self.clients[m]
        batch = self.draw_batch()
        q = self._send("up", foo_client_step(cs, batch))
        r = self._send("down", foo_server_handle_query(self.server, q, t))
        foo_client_apply_reply(cs, r)
        update_delays(self.delays, m, batch, t)


class SynZooTrainer(Trainer):
    """Synchronous rounds: all clients on one batch, then a server ZOO step."""

    framework = "syn_zoo"
    synchronous = True

    def step(self, t: int) -> None:
        ss = self.server
        batch = self.draw_batch()
        labels = ss.labels[batch]
        queries = [self._send("up", client_step(cs, batch)) for cs in self.clients]
        for q in queries:
            ss.table.write(q.client_id, q.sample_ids, q.c, t)
        x = ss.table.rows(batch)
        base, _, _ = _server_loss(ss, x, labels, t=t)
        for cs, q in zip(self.clients, queries):
            x_hat = x.copy()
            x_hat[:, ss.table.block(q.client_id)] = q.c_hat
            shifted, _, _ = _server_loss(ss, x_hat, labels, t=t, client_id=q.client_id)
            # the difference travels as a single scalar; h = 0 keeps the client code path shared
            r = self._send("down", ServerReply(0.0, shifted - base))
            client_apply_reply(cs, r)
            update_delays(self.delays, cs.client_id, batch, t)
        _server_zoo_update(ss, x, labels, base)


TRAINERS = {
    "cascaded": CascadedTrainer,
    "zoo": ZooTrainer,
    "foo": FooTrainer,
    "syn_zoo": SynZooTrainer,
}


def make_trainer(cfg: RunConfig, train: VerticalDataset, test: VerticalDataset | None = None, *, tap: Tap | None = None) -> Trainer:
    return TRAINERS[cfg.framework](cfg, train, test, tap=tap)


def _run(framework: str, cfg: RunConfig, data: VerticalDataset, test=None, tap=None) -> RunResult:
    trainer = TRAINERS[framework](cfg, data, test, tap=tap)
    return RunResult(list(trainer.run()), trainer)


def run_cascaded(cfg: RunConfig, data: VerticalDataset, test: VerticalDataset | None = None, tap: Tap | None = None) -> RunResult:
    return _run("cascaded", cfg, data, test, tap)


def run_zoo_vfl(cfg: RunConfig, data: VerticalDataset, test: VerticalDataset | None = None, tap: Tap | None = None) -> RunResult:
    return _run("zoo", cfg, data, test, tap)


def run_syn_zoo_vfl(cfg: RunConfig, data: VerticalDataset, test: VerticalDataset | None = None, tap: Tap | None = None) -> RunResult:
    return _run("syn_zoo", cfg, data, test, tap)


def run_foo_vfl(cfg: RunConfig, data: VerticalDataset, test: VerticalDataset | None = None, tap: Tap | None = None) -> RunResult:
    return _run("foo", cfg, data, test, tap)


def run(cfg: RunConfig, data: VerticalDataset, test: VerticalDataset | None = None, tap: Tap | None = None) -> RunResult:
    return _run(cfg.framework, cfg, data, test, tap)
