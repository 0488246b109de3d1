"""Client activation policies and staleness bookkeeping.

Clients are indexed from 0.  Two notions of delay are tracked:

* ``tau[i, m]`` -- iterations since client ``m`` last refreshed sample ``i``'s
  embedding on the server (the per-sample recurrence);
* ``client_delay[m]`` -- iterations since client ``m`` was last activated at
  all.  This is what the bounded-forcing policy keeps under ``tau_max``;
  the per-sample entries cannot be bounded by activation order alone once
  a batch covers only part of the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError


class PolicyKind(str, Enum):
    IID_CATEGORICAL = "iid_categorical"
    ROUND_ROBIN = "round_robin"
    BOUNDED_FORCING = "bounded_forcing"


@dataclass(frozen=True)
class ActivationPolicy:
    kind: PolicyKind
    p: tuple[float, ...] = ()
    tau_max: int | None = None
    num_clients: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        p = tuple(float(x) for x in self.p)
        object.__setattr__(self, "p", p)
        m = self.num_clients or len(p)
        object.__setattr__(self, "num_clients", m)
        if m < 1:
            raise ConfigError("activation policy needs at least one client")
        if self.kind is not PolicyKind.ROUND_ROBIN:
            if len(p) != m:
                raise ConfigError(f"probability vector has {len(p)} entries for {m} clients")
            if any(not x > 0 for x in p):
                raise ConfigError("every activation probability must be positive")
            if abs(sum(p) - 1.0) > 1e-12:
                raise ConfigError(f"activation probabilities sum to {sum(p)!r}, not 1")
        if self.kind is PolicyKind.BOUNDED_FORCING:
            if self.tau_max is None or self.tau_max < m:
                raise ConfigError(f"bounded forcing needs tau_max >= number of clients ({m})")

    @classmethod
    def uniform(cls, num_clients: int) -> "ActivationPolicy":
        return cls(PolicyKind.IID_CATEGORICAL, (1.0 / num_clients,) * num_clients)

    @classmethod
    def round_robin(cls, num_clients: int) -> "ActivationPolicy":
        return cls(PolicyKind.ROUND_ROBIN, num_clients=num_clients)

    @classmethod
    def bounded(cls, tau_max: int, p: Sequence[float]) -> "ActivationPolicy":
        return cls(PolicyKind.BOUNDED_FORCING, tuple(p), tau_max=tau_max)


@dataclass
class DelayTable:
    """Staleness counters.  ``summary=True`` drops the per-sample matrix."""

    num_samples: int
    num_clients: int
    summary: bool = False
    tau: np.ndarray | None = field(default=None, repr=False)
    client_delay: np.ndarray = field(default=None, repr=False)
    max_observed: int = 1
    max_client_delay: int = 1
    steps: int = 0

    def __post_init__(self):
        # the warm-up pass counts as every entry's first refresh
        if not self.summary and self.tau is None:
            self.tau = np.ones((self.num_samples, self.num_clients), dtype=np.int64)
        if self.summary:
            # per client: iteration stamp at which each sample was last refreshed
            self._stamp = np.zeros((self.num_samples, self.num_clients), dtype=np.int64)
        if self.client_delay is None:
            self.client_delay = np.ones(self.num_clients, dtype=np.int64)

    def current_max(self) -> int:
        if self.summary:
            return int((self.steps - self._stamp.min(axis=0) + 1).max())
        return int(self.tau.max())

    def per_client_max(self) -> np.ndarray:
        if self.summary:
            return self.steps - self._stamp.min(axis=0) + 1
        return self.tau.max(axis=0)


def update_delays(table: DelayTable, activated: int, batch, t: int | None = None) -> DelayTable:
    """Apply one step of the delay recurrence in place.

    Entries ``(i, activated)`` for ``i`` in ``batch`` reset to 1, every
    other entry grows by one.
    """
    if not 0 <= activated < table.num_clients:
        raise UsageError(f"client index {activated} out of range [0, {table.num_clients})")
    idx = np.atleast_1d(np.asarray(batch, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= table.num_samples):
        raise UsageError(f"sample index out of range [0, {table.num_samples})")
    table.steps += 1
    if table.summary:
        table._stamp[idx, activated] = table.steps
    else:
        table.tau += 1
        table.tau[idx, activated] = 1
    table.client_delay += 1
    table.client_delay[activated] = 1
    table.max_observed = max(table.max_observed, table.current_max())
    table.max_client_delay = max(table.max_client_delay, int(table.client_delay.max()))
    return table


def _feasible(deadlines: np.ndarray) -> bool:
    # one activation per step: for every horizon k at most k clients may be due by k
    order = np.sort(deadlines)
    return bool(np.all(order >= np.arange(1, order.size + 1)))


def next_activation(
    policy: ActivationPolicy,
    rng: np.random.Generator,
    delay_table: DelayTable | None = None,
    t: int = 0,
) -> int:
    """Pick the client to activate at iteration ``t``."""
    m = policy.num_clients
    if policy.kind is PolicyKind.ROUND_ROBIN:
        return t % m
    if m == 1:
        # keep generator consumption identical across policies
        rng.random()
        return 0
    candidate = int(rng.choice(m, p=policy.p))
    if policy.kind is PolicyKind.IID_CATEGORICAL:
        return candidate
    if delay_table is None:
        raise UsageError("bounded forcing needs the delay table")
    # a client whose delay is d must be activated within tau_max - d + 1 steps
    deadlines = policy.tau_max - delay_table.client_delay + 1
    after = deadlines - 1
    after[candidate] = policy.tau_max
    if _feasible(after):
        return candidate
    # earliest deadline first; argmin breaks ties toward the lowest index
    return int(np.argmin(deadlines))
