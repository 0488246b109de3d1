"""Run configuration, metrics rows, and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .scheduler import ActivationPolicy, PolicyKind
from .zoo import DirectionDistribution

FRAMEWORKS = ("cascaded", "foo", "zoo", "syn_zoo")
ZOO_FRAMEWORKS = ("cascaded", "zoo", "syn_zoo")

METRICS_HEADER = (
    "iteration",
    "epoch",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "max_delay",
    "wall_ms",
)


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    epoch: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    max_delay: int
    wall_ms: float

    def as_row(self) -> list[str]:
        return [
            str(self.iteration),
            repr(float(self.epoch)),
            repr(float(self.train_loss)),
            repr(float(self.train_acc)),
            repr(float(self.test_loss)),
            repr(float(self.test_acc)),
            str(self.max_delay),
            f"{self.wall_ms:.3f}",
        ]


@dataclass(frozen=True)
class RunConfig:
    framework: str
    # dataset
    dataset: str = "synthetic"
    n: int = 1000
    n_test: int = 500
    num_features: int = 20
    num_classes: int = 4
    separation: float = 3.0
    train_path: str = ""
    test_path: str = ""
    has_header: bool = False
    shuffle_features: bool = False
    # parties and models
    num_clients: int = 2
    client_arch: tuple[int, ...] = ()
    embed_dim: int = 128
    client_activation: str = "relu"
    server_arch: tuple[int, ...] = (128,)
    # optimisation
    eta0: float = 0.010
    eta_m: float = 0.010
    mu: float = 0.001
    mu_schedule: str = "constant"
    lam: float = 0.0
    dist: str = "unit_sphere"
    # scheduling
    policy: str = "iid_categorical"
    p: tuple[float, ...] = ()
    tau_max: int = 0
    delay_mode: str = "exact"
    # loop
    T: int = 1000
    batch_size: int = 64
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(name, constraint):
            raise ConfigError(f"{name} = {getattr(self, name)!r} violates: {constraint}")

        if self.framework not in FRAMEWORKS:
            bad("framework", f"one of {', '.join(FRAMEWORKS)}")
        if self.dataset not in ("synthetic", "csv"):
            bad("dataset", "synthetic or csv")
        if self.dataset == "synthetic":
            for name in ("n", "num_features", "num_classes"):
                if getattr(self, name) < 1:
                    bad(name, ">= 1")
            if self.n_test < 0:
                bad("n_test", ">= 0")
            if self.num_features < self.num_clients:
                bad("num_features", f">= num_clients ({self.num_clients})")
        elif not self.train_path:
            bad("train_path", "required when dataset = csv")
        if self.num_clients < 1:
            bad("num_clients", ">= 1")
        if self.embed_dim < 1:
            bad("embed_dim", ">= 1")
        if any(s < 1 for s in self.client_arch):
            bad("client_arch", "positive layer widths")
        if any(s < 1 for s in self.server_arch):
            bad("server_arch", "positive layer widths")
        if self.client_activation not in ("relu", "identity"):
            bad("client_activation", "relu or identity")
        for name in ("eta0", "eta_m", "lam"):
            if not getattr(self, name) >= 0:
                bad(name, ">= 0")
        if self.framework in ZOO_FRAMEWORKS and not self.mu > 0:
            bad("mu", "> 0 for zeroth-order frameworks")
        if self.mu_schedule not in ("constant", "inv_sqrt_T"):
            bad("mu_schedule", "constant or inv_sqrt_T")
        try:
            DirectionDistribution(self.dist)
        except ValueError:
            bad("dist", "unit_sphere or standard_gaussian")
        if self.delay_mode not in ("exact", "summary"):
            bad("delay_mode", "exact or summary")
        if self.T < 0:
            bad("T", ">= 0")
        if self.batch_size < 1:
            bad("batch_size", ">= 1")
        if self.eval_every < 1:
            bad("eval_every", ">= 1")
        if self.seed < 0:
            bad("seed", ">= 0")
        try:
            self.activation_policy()
        except ConfigError as exc:
            raise ConfigError(f"policy: {exc}") from None

    def activation_policy(self) -> ActivationPolicy:
        try:
            kind = PolicyKind(self.policy)
        except ValueError:
            raise ConfigError(
                f"policy = {self.policy!r} violates: iid_categorical, round_robin or bounded_forcing"
            ) from None
        m = self.num_clients
        p = self.p or (1.0 / m,) * m
        if kind is PolicyKind.ROUND_ROBIN:
            return ActivationPolicy.round_robin(m)
        if kind is PolicyKind.IID_CATEGORICAL:
            return ActivationPolicy(kind, p)
        return ActivationPolicy.bounded(self.tau_max or m, p)

    @property
    def effective_mu(self) -> float:
        if self.mu_schedule == "inv_sqrt_T" and self.T > 0:
            return 1.0 / self.T**0.5
        return self.mu

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TUPLE_INT = {"client_arch", "server_arch"}
_TUPLE_FLOAT = {"p"}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
# accepted synonyms for a few keys
_ALIASES = {"lambda": "lam", "M": "num_clients", "D": "num_features", "C": "num_classes"}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if key in _TUPLE_INT:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key in _TUPLE_FLOAT:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str, base_dir: Path | None = None) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    if "framework" not in values:
        raise ConfigError("framework is required")
    if base_dir is not None:
        for key in ("train_path", "test_path"):
            path = values.get(key)
            if path and not Path(path).is_absolute():
                values[key] = str((base_dir / path).resolve())
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base_dir=path.parent)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
