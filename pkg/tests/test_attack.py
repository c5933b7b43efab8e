import numpy as np
import pytest

from lrattack.attack import (
    AttackConfig,
    _run_start,
    attack_point,
    find_starting_points,
    sample_candidate,
    sample_direction,
    trace_statistics,
)
from lrattack.errors import AttackError, ConfigError
from lrattack.net import Dense, Network, classify, classify_batch

from conftest import tiny_2d

GRID = np.stack(np.meshgrid(np.linspace(0, 1, 41), np.linspace(0, 1, 41)), -1).reshape(-1, 2)


def linear_net(w=(1.0, 2.0), b=-1.0):
    """Two classes split by the line ``w.z + b = 0`` (class 0 on the positive side)."""
    w = np.asarray(w)
    return Network([Dense(np.stack([w, -w]), np.array([b, -b]))], (2,), np.float64)


class ScriptedRng:
    """Real generator except that ``random()`` replays a script."""

    def __init__(self, values, seed=0):
        self._g = np.random.default_rng(seed)
        self._values = list(values)

    def random(self):
        return self._values.pop(0)

    def __getattr__(self, name):
        return getattr(self._g, name)


# ---- configuration


@pytest.mark.parametrize("kw", [dict(q=0.4), dict(q=1.1), dict(gamma=0.5), dict(n_regions=0),
                                dict(n_starts=0), dict(kappa=0), dict(policy="random")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        AttackConfig(**kw)


# ---- starting points


def test_bisection_on_linear_classifier():
    w, b = np.array([1.0, 2.0]), -1.0
    net = linear_net(w, b)
    x = np.array([0.7, 0.4])          # w.x + b = 0.5: class 0
    z = np.array([0.1, 0.1])          # class 1
    starts = find_starting_points(net, x, 0, z[None], np.array([1]), 1)
    delta, cls = starts[0]
    assert cls == 1 and classify(net, x + delta) == 1
    t = -(w @ x + b) / (w @ (z - x))  # segment/hyperplane intersection
    assert np.linalg.norm(delta) == pytest.approx(t * np.linalg.norm(z - x), abs=1e-4)


def test_two_starts_on_three_class_net():
    net = tiny_2d(2)
    labels = classify_batch(net, GRID)
    x = GRID[np.flatnonzero(labels == 1)[len(GRID) // 10]]
    starts = find_starting_points(net, x, 1, GRID, labels, 2)
    assert len(starts) == 2 and {cls for _, cls in starts} == {0, 2}
    for delta, _ in starts:
        assert classify(net, x + delta) != 1
        assert np.all((x + delta >= 0) & (x + delta <= 1))


def test_missing_class_falls_back_then_fails():
    net = linear_net()
    x = np.array([0.7, 0.4])
    # the only other-class training point is labelled 0 but predicted 1
    starts = find_starting_points(net, x, 0, np.array([[0.1, 0.1]]), np.array([0]), 1)
    assert classify(net, x + starts[0][0]) == 1
    with pytest.raises(AttackError):
        find_starting_points(net, x, 0, np.array([[0.9, 0.9]]), np.array([0]), 1)


# ---- sampler


def test_sample_direction_is_unit():
    rng = np.random.default_rng(0)
    delta = rng.normal(size=7)
    for _ in range(1000):
        d, r, theta = sample_direction(rng, delta, 0.8, 6)
        assert abs(np.linalg.norm(d) - 1) <= 1e-12
        assert 0 <= r <= np.linalg.norm(delta) and -np.pi <= theta <= np.pi


def test_direction_unit_when_draw_is_nearly_parallel():
    delta = np.random.default_rng(0).normal(size=10)
    wobble = np.random.default_rng(1).normal(size=10) * 1e-3

    class Parallel(ScriptedRng):
        def standard_normal(self, n):
            return delta * 1e8 + wobble

    d, _, _ = sample_direction(Parallel([0.3, 0.5]), delta, 0.8, 6)
    assert abs(np.linalg.norm(d) - 1) <= 1e-12


def test_radius_endpoints():
    x, delta = np.zeros(3), np.array([0.0, 3.0, 4.0])
    # random() calls: hemisphere sign, then the radius draw
    _, r, _ = sample_direction(ScriptedRng([0.1, 1.0]), delta, 0.8, 6)
    assert r == pytest.approx(5.0)
    y = sample_candidate(ScriptedRng([0.1, 0.0]), x, delta, 0.8, 6)
    np.testing.assert_allclose(y, x + delta)


def test_positive_theta_leans_towards_input():
    rng = np.random.default_rng(1)
    delta = np.array([1.0, 0.0, 0.0])
    for _ in range(200):
        d, _, theta = sample_direction(rng, delta, 0.8, 6)
        assert np.sign(-(d @ delta)) == np.sign(np.sin(theta)) or abs(np.sin(theta)) < 1e-12


def test_zero_delta_rejected():
    with pytest.raises(AttackError):
        sample_direction(np.random.default_rng(0), np.zeros(3), 0.8, 6)


# ---- search


def test_linear_net_solved_in_one_region():
    net = linear_net()
    x = np.array([0.7, 0.4])
    train_x = np.array([[0.1, 0.1], [0.9, 0.9]])
    train_y = classify_batch(net, train_x)
    res = attack_point(net, x, train_x, train_y, AttackConfig(n_regions=20, n_starts=1, seed=0))
    w = np.array([1.0, 2.0])
    exact = (w @ x - 1) / np.linalg.norm(w)
    assert res.regions_solved == 1 and res.cache_hits == 19
    assert exact - 1e-9 <= res.norm <= exact * 1.02 + 1e-9
    assert classify(net, x + res.delta) == 1


def test_cache_hit_solves_no_qp():
    net = linear_net()
    x = np.array([0.7, 0.4])
    delta = np.array([-0.3, -0.1])
    visited = set()
    cfg = AttackConfig(n_regions=5, n_starts=1)
    first = _run_start(net, x, 0, delta, cfg, np.random.default_rng(0), visited)
    again = _run_start(net, x, 0, delta, cfg, np.random.default_rng(1), visited)
    assert first.regions_solved == 1 and first.cache_hits == 4
    assert again.regions_solved == 0 and again.cache_hits == 5


def test_traces_monotone_and_outputs_valid():
    net = tiny_2d(0)
    labels = classify_batch(net, GRID)
    rng = np.random.default_rng(2)
    cfg = AttackConfig(n_regions=60, n_starts=2, seed=3)
    for i, x in enumerate(rng.uniform(size=(8, 2))):
        res = attack_point(net, x, GRID, labels, cfg, point_index=i, train_pred=labels)
        assert len(res.trace) == 61
        assert np.all(np.diff(res.trace) <= 0)
        for run in res.starts:
            assert np.all(np.diff(run.trace) <= 0)
        assert classify(net, x + res.delta) != res.c
        assert np.all((x + res.delta >= 0) & (x + res.delta <= 1))
        assert res.norm == pytest.approx(np.linalg.norm(res.delta))
        assert res.norm == min(r.norm for r in res.starts)


def test_same_seed_same_result():
    net = tiny_2d(3)
    labels = classify_batch(net, GRID)
    x = np.array([0.3, 0.8])
    cfg = AttackConfig(n_regions=40, n_starts=2, seed=11)
    a = attack_point(net, x, GRID, labels, cfg, point_index=4)
    b = attack_point(net, x, GRID, labels, cfg, point_index=4)
    np.testing.assert_array_equal(a.trace, b.trace)
    np.testing.assert_array_equal(a.delta, b.delta)
    c = attack_point(net, x, GRID, labels, AttackConfig(n_regions=40, n_starts=2, seed=12), point_index=4)
    assert c.regions_solved + c.cache_hits == a.regions_solved + a.cache_hits


def test_all_classes_policy_and_targeted():
    net = tiny_2d(2)
    labels = classify_batch(net, GRID)
    x = np.array([0.5, 0.5])
    c = classify(net, x)
    res = attack_point(net, x, GRID, labels, AttackConfig(n_regions=30, n_starts=1, policy="all-classes"))
    assert classify(net, x + res.delta) != c
    target = next(t for t in range(3) if t != c and np.any(labels == t))
    res = attack_point(net, x, GRID, labels, AttackConfig(n_regions=30, n_starts=1, target=target))
    assert classify(net, x + res.delta) == target


def test_starts_capped_at_other_classes():
    net = tiny_2d(2)
    labels = classify_batch(net, GRID)
    res = attack_point(net, np.array([0.5, 0.5]), GRID, labels, AttackConfig(n_regions=5, n_starts=5))
    assert len(res.starts) == 2


def test_trace_statistics():
    t = np.array([3.0, 2.0, 2.0, 1.0])
    stats = trace_statistics([t])
    for k in ("median", "mean", "max"):
        np.testing.assert_array_equal(stats[k], t)
    rng = np.random.default_rng(0)
    traces = [np.minimum.accumulate(rng.uniform(size=20)) for _ in range(7)]
    for v in trace_statistics(traces).values():
        assert np.all(np.diff(v) <= 1e-15)
