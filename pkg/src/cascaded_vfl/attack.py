"""Direct label inference against a summing server.

The server adds up all client outputs and applies softmax cross-entropy, so
the gradient of the loss w.r.t. any client's output row is
``softmax(y) - onehot(label)``: a single negative coordinate marks the label.
Under the first-order protocol that gradient is on the wire.  Under the
zeroth-order protocol only two loss scalars are, and the adversary has to
build a rank-one estimate from them.

Adversaries:

``curious_client``  client 0 itself; it crafts ``c ~ N(0, 1)`` and knows the
                    direction it used for ``c_hat``.
``eavesdropper``    sees every wire message but no party state, so for the
                    zeroth-order case it can only pair the scalars with a
                    direction of its own.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor_nn as nn
from .errors import ConfigError
from .partition import VerticalDataset
from .zoo import UNIT_SPHERE, Perturbation, phi, sample_direction


class AttackFramework(str, Enum):
    FOO = "foo"
    ZOO = "zoo"


class Adversary(str, Enum):
    CURIOUS_CLIENT = "curious_client"
    EAVESDROPPER = "eavesdropper"


@dataclass(frozen=True)
class AttackScenario:
    framework: AttackFramework
    adversary: Adversary
    num_classes: int
    trials: int | None = None  # None: one pass over the data
    batch_size: int = 64
    mu: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "framework", AttackFramework(self.framework))
        object.__setattr__(self, "adversary", Adversary(self.adversary))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes = {self.num_classes} violates: >= 2")
        if self.trials is not None and self.trials < 1:
            raise ConfigError(f"trials = {self.trials} violates: >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size = {self.batch_size} violates: >= 1")
        if not self.mu > 0:
            raise ConfigError(f"mu = {self.mu} violates: > 0")

    @property
    def name(self) -> str:
        return f"{self.framework.value}/{self.adversary.value}"


@dataclass
class SumServer:
    """Loss is cross-entropy of the element-wise sum of client outputs."""

    labels: np.ndarray = field(repr=False)
    num_classes: int

    def _check(self, outputs):
        for k, out in enumerate(outputs):
            if out.shape[-1] != self.num_classes:
                raise ConfigError(f"client {k} emits {out.shape[-1]} outputs, the server expects {self.num_classes}")

    def loss(self, sample_ids: np.ndarray, outputs) -> float:
        self._check(outputs)
        return nn.softmax_cross_entropy(sum(outputs), self.labels[sample_ids])[0]

    def output_gradient(self, sample_ids: np.ndarray, outputs) -> tuple[float, np.ndarray]:
        """Batch loss and its gradient w.r.t. the summed output (shared by every client)."""
        self._check(outputs)
        return nn.softmax_cross_entropy(sum(outputs), self.labels[sample_ids])


@dataclass(frozen=True)
class TrialRecord:
    sample_id: int
    label: int
    prediction: int

    @property
    def correct(self) -> bool:
        return self.label == self.prediction


@dataclass
class AttackResult:
    scenario: AttackScenario
    per_trial: list[TrialRecord]

    @property
    def trials(self) -> int:
        return len(self.per_trial)

    @property
    def success_rate(self) -> float:
        return sum(r.correct for r in self.per_trial) / max(self.trials, 1)

    @property
    def stderr(self) -> float:
        p = self.success_rate
        return float(np.sqrt(p * (1 - p) / max(self.trials, 1)))


class _CraftingClient:
    """Client 0: emits ``c ~ N(0, 1)`` and, for the zeroth-order protocol, ``c + mu u``.

    The direction is kept in ``pending`` and never written to a message.
    """

    def __init__(self, num_classes: int, mu: float, rng: np.random.Generator):
        self.num_classes = num_classes
        self.mu = mu
        self.rng = rng
        self.pending: Perturbation | None = None

    def query(self, sample_ids: np.ndarray, zeroth_order: bool) -> dict:
        c = self.rng.standard_normal((len(sample_ids), self.num_classes))
        msg = {"client_id": 0, "sample_ids": sample_ids, "c": c}
        if zeroth_order:
            u = sample_direction(c.size, UNIT_SPHERE, self.rng)
            self.pending = Perturbation(u, self.mu, sample_id=sample_ids, client_id=0)
            msg["c_hat"] = c + self.mu * u.reshape(c.shape)
        return msg

    def release(self) -> Perturbation | None:
        pert, self.pending = self.pending, None
        return pert


def _predict_from_gradient(grad_rows: np.ndarray) -> np.ndarray:
    # the most negative coordinate; for an exact gradient it is the only one
    return np.argmin(grad_rows, axis=1)


def _zoo_estimate(up: dict, down: dict, u: np.ndarray, mu: float) -> np.ndarray:
    shape = up["c"].shape
    d = int(np.prod(shape))
    return (phi(d, UNIT_SPHERE) / mu) * (down["h_hat"] - down["h"]) * u.reshape(shape)


def _honest_nets(data: VerticalDataset, num_classes: int, rng: np.random.Generator) -> list[nn.DenseNet]:
    return [nn.mlp([data.feature_sizes[m], num_classes], rng) for m in range(1, data.num_clients)]


def run_attack(
    scenario: AttackScenario,
    data: VerticalDataset,
    rng: np.random.Generator,
    *,
    tap=None,
) -> AttackResult:
    """Attack every sample of ``data`` (or ``scenario.trials`` samples) in batches.

    Clients ``1..M-1`` are honest linear heads on their own feature shards;
    client 0 is the crafting client.  ``tap(direction, msg)`` sees exactly
    what the adversary sees on the wire.
    """
    if scenario.num_classes != data.num_classes:
        raise ConfigError(
            f"scenario has {scenario.num_classes} classes but the data has {data.num_classes}"
        )
    init_rng, order_rng, client_rng, adversary_rng = rng.spawn(4)
    server = SumServer(data.labels, data.num_classes)
    honest = _honest_nets(data, data.num_classes, init_rng)
    crafter = _CraftingClient(data.num_classes, scenario.mu, client_rng)
    zeroth = scenario.framework is AttackFramework.ZOO
    target = scenario.trials if scenario.trials is not None else data.num_samples

    records: list[TrialRecord] = []
    while len(records) < target:
        order = order_rng.permutation(data.num_samples)
        for start in range(0, len(order), scenario.batch_size):
            if len(records) >= target:
                break
            ids = np.sort(order[start : start + scenario.batch_size])[: target - len(records)]
            others = [nn.predict(net, data.rows(m + 1, ids)) for m, net in enumerate(honest)]

            up = crafter.query(ids, zeroth)
            if zeroth:
                h = server.loss(ids, [up["c"], *others])
                h_hat = server.loss(ids, [up["c_hat"], *others])
                down = {"h": h, "h_hat": h_hat}
            else:
                h, grad = server.output_gradient(ids, [up["c"], *others])
                down = {"h": h, "embed_grad": grad}
            if tap is not None:
                tap("up", up)
                tap("down", down)

            own = crafter.release()
            if not zeroth:
                pred = _predict_from_gradient(down["embed_grad"])
            elif scenario.adversary is Adversary.CURIOUS_CLIENT:
                pred = _predict_from_gradient(_zoo_estimate(up, down, own.u, scenario.mu))
            else:
                guess = sample_direction(up["c"].size, UNIT_SPHERE, adversary_rng)
                pred = _predict_from_gradient(_zoo_estimate(up, down, guess, scenario.mu))
            labels = data.labels[ids]
            records.extend(TrialRecord(int(i), int(y), int(p)) for i, y, p in zip(ids, labels, pred))
    return AttackResult(scenario, records)


def all_scenarios(num_classes: int, trials: int | None = None, mu: float = 1e-3) -> list[AttackScenario]:
    return [
        AttackScenario(fw, adv, num_classes, trials, mu=mu)
        for fw in AttackFramework
        for adv in Adversary
    ]


ATTACK_HEADER = ("scenario", "trials", "success_rate", "stderr")


def attack_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ATTACK_HEADER)
    for r in results:
        writer.writerow([r.scenario.name, r.trials, f"{r.success_rate:.6f}", f"{r.stderr:.6f}"])
    return buf.getvalue()
