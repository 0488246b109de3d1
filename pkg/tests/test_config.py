import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascaded_vfl.config import RunConfig, parse_config, parse_config_text, serialize_config
from cascaded_vfl.errors import ConfigError
from cascaded_vfl.scheduler import PolicyKind


def test_empty_file_needs_framework():
    with pytest.raises(ConfigError, match="framework"):
        parse_config_text("")


def test_framework_alone_gives_defaults():
    cfg = parse_config_text("framework = cascaded\n")
    assert cfg.eta0 == cfg.eta_m == 0.010
    assert cfg.mu == 0.001 and cfg.lam == 0.0
    assert cfg.dist == "unit_sphere"
    assert cfg.batch_size == 64 and cfg.eval_every == 100
    policy = cfg.activation_policy()
    assert policy.kind is PolicyKind.IID_CATEGORICAL
    assert policy.p == (0.5, 0.5)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config_text("framework = foo\nlearning_rate = 0.1\n")


def test_comments_aliases_and_lists():
    cfg = parse_config_text(
        "# header\nframework = zoo  # trailing\nlambda = 0.5\nM = 3\nD = 9\nserver_arch = 32, 16\np = 0.2,0.3,0.5\n"
    )
    assert cfg.lam == 0.5 and cfg.num_clients == 3 and cfg.num_features == 9
    assert cfg.server_arch == (32, 16)
    assert cfg.p == (0.2, 0.3, 0.5)


@pytest.mark.parametrize(
    "line, field",
    [
        ("mu = 0", "mu"),
        ("eta0 = -1", "eta0"),
        ("dist = cauchy", "dist"),
        ("batch_size = 0", "batch_size"),
        ("p = 0.5,0.6", "policy"),
    ],
)
def test_invalid_values_name_the_field(line, field):
    with pytest.raises(ConfigError, match=field):
        parse_config_text(f"framework = cascaded\n{line}\n")


def test_mu_zero_allowed_for_first_order():
    assert parse_config_text("framework = foo\nmu = 0\n").mu == 0.0


def test_relative_paths_resolve_against_config_dir(tmp_path):
    cfg_path = tmp_path / "sub" / "x.cfg"
    cfg_path.parent.mkdir()
    cfg_path.write_text("framework = foo\ndataset = csv\ntrain_path = ../d.csv\n")
    assert parse_config(cfg_path).train_path == str((tmp_path / "d.csv").resolve())


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.cfg")


configs = st.builds(
    RunConfig,
    framework=st.sampled_from(["cascaded", "foo", "zoo", "syn_zoo"]),
    n=st.integers(1, 5000),
    num_features=st.integers(4, 64),
    num_classes=st.integers(2, 12),
    separation=st.floats(0, 20, allow_nan=False),
    num_clients=st.integers(1, 4),
    client_arch=st.lists(st.integers(1, 64), max_size=2).map(tuple),
    server_arch=st.lists(st.integers(1, 64), max_size=2).map(tuple),
    eta0=st.floats(0, 1, allow_nan=False),
    eta_m=st.floats(0, 1, allow_nan=False),
    mu=st.floats(1e-8, 1, allow_nan=False),
    lam=st.floats(0, 1, allow_nan=False),
    dist=st.sampled_from(["unit_sphere", "standard_gaussian"]),
    policy=st.sampled_from(["iid_categorical", "round_robin"]),
    T=st.integers(0, 10**6),
    seed=st.integers(0, 2**63 - 1),
)


@settings(max_examples=200, deadline=None)
@given(configs)
def test_serialize_parse_round_trip(cfg):
    assert parse_config_text(serialize_config(cfg)) == cfg
