import numpy as np
import pytest

from cascaded_vfl import attack
from cascaded_vfl.attack import AttackScenario, SumServer, all_scenarios, attack_csv, run_attack
from cascaded_vfl.errors import ConfigError
from cascaded_vfl.partition import make_synthetic, split_features
from cascaded_vfl.zoo import Perturbation


@pytest.fixture(scope="module")
def ten_class():
    x, y = make_synthetic(10_000, 20, 10, 3.0, np.random.default_rng(0))
    return split_features(x, y, 2, 10)


@pytest.mark.parametrize("adversary", ["curious_client", "eavesdropper"])
def test_first_order_sign_rule_is_exact(ten_class, adversary):
    res = run_attack(AttackScenario("foo", adversary, 10), ten_class, np.random.default_rng(1))
    assert res.trials == 10_000
    assert all(r.correct for r in res.per_trial)
    assert res.success_rate == 1.0


def test_exact_gradient_has_one_negative_coordinate():
    rng = np.random.default_rng(2)
    server = SumServer(np.array([3, 0, 7]), 10)
    _, grad = server.output_gradient(np.arange(3), [rng.normal(size=(3, 10)), rng.normal(size=(3, 10))])
    assert ((grad < 0).sum(axis=1) == 1).all()
    assert np.argmin(grad, axis=1).tolist() == [3, 0, 7]


def test_eavesdropper_is_at_chance(ten_class):
    res = run_attack(AttackScenario("zoo", "eavesdropper", 10), ten_class, np.random.default_rng(3))
    se = np.sqrt(0.1 * 0.9 / res.trials)
    assert abs(res.success_rate - 0.1) <= 3 * se


def test_curious_client_has_small_edge(ten_class):
    res = run_attack(AttackScenario("zoo", "curious_client", 10), ten_class, np.random.default_rng(4))
    assert 0.10 <= res.success_rate <= 0.15


def test_class_count_mismatch(ten_class):
    with pytest.raises(ConfigError):
        run_attack(AttackScenario("foo", "eavesdropper", 4), ten_class, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        SumServer(np.zeros(2, dtype=int), 3).loss(np.arange(2), [np.zeros((2, 3)), np.zeros((2, 4))])


def test_trial_budget_spans_epochs(ten_class):
    small = split_features(ten_class.reassemble()[:100], ten_class.labels[:100], 2, 10)
    res = run_attack(AttackScenario("foo", "eavesdropper", 10, trials=250), small, np.random.default_rng(5))
    assert res.trials == 250


def test_adversary_never_sees_the_perturbation(ten_class, monkeypatch):
    handed_out = []
    real = attack.sample_direction

    def recording(d, dist, rng):
        u = real(d, dist, rng)
        handed_out.append(u)
        return u

    monkeypatch.setattr(attack, "sample_direction", recording)
    seen = []
    small = split_features(ten_class.reassemble()[:640], ten_class.labels[:640], 2, 10)
    run_attack(AttackScenario("zoo", "eavesdropper", 10), small, np.random.default_rng(6),
               tap=lambda d, m: seen.append(m))
    # half the directions belong to the crafting client, half are the eavesdropper's guesses
    secret = np.concatenate(handed_out[0::2])
    for msg in seen:
        for v in msg.values():
            assert not isinstance(v, Perturbation)
            assert not np.isin(np.asarray(v, dtype=float).ravel(), secret).any()


def test_csv_block(ten_class):
    small = split_features(ten_class.reassemble()[:128], ten_class.labels[:128], 2, 10)
    results = [run_attack(s, small, np.random.default_rng(0)) for s in all_scenarios(10)]
    lines = attack_csv(results).splitlines()
    assert lines[0] == "scenario,trials,success_rate,stderr"
    assert lines[1].startswith("foo/curious_client,128,1.000000,0.000000")
    assert len(lines) == 5
