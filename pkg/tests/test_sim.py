import math

import numpy as np
import pytest

from crowdnav.fields import RHO, GridSpec, rasterize_sequence
from crowdnav.sim import (
    DOMAIN,
    GOAL_RADIUS,
    SCENARIO_KINDS,
    AgentSpec,
    FlowSpec,
    ScenarioSpec,
    make_corpus,
    simulate,
    spawn_agents,
)


def test_lone_agent_walks_straight_and_arrives_on_time():
    spec = ScenarioSpec(bounds=(-1.0, -1.0, 12.0, 1.0), agents=(AgentSpec((0.0, 0.0), (10.0, 0.0), 1.0),), duration=15.0)
    (tr,) = simulate(spec)
    assert np.all(tr.pos[:, 1] == 0.0)
    assert np.all(np.diff(tr.pos[:, 0]) > 0)
    # the agent is removed within GOAL_RADIUS; extrapolate its last step to the goal
    arrival = tr.t[-1] + (10.0 - tr.pos[-1, 0]) / 1.0
    assert arrival == pytest.approx(10.0, abs=spec.dt_sim)
    assert 10.0 - (tr.pos[-1, 0] + tr.vel[-1, 0] * spec.dt_sim) < GOAL_RADIUS


def test_identical_specs_give_identical_trajectories():
    spec = make_corpus("corridor_bidirectional", 4, 1, duration=30.0)[0]
    a, b = simulate(spec), simulate(spec)
    assert len(a) == len(b) > 0
    for x, y in zip(a, b):
        assert x.pid == y.pid
        assert x.t.tobytes() == y.t.tobytes()
        assert x.pos.tobytes() == y.pos.tobytes()
        assert x.vel.tobytes() == y.vel.tobytes()


def test_head_on_agents_keep_apart():
    agents = (AgentSpec((2.0, 6.0), (20.0, 6.0), 1.3), AgentSpec((20.0, 6.0), (2.0, 6.0), 1.3))
    a, b = simulate(ScenarioSpec(agents=agents, duration=20.0))
    n = min(len(a), len(b))
    gap = np.linalg.norm(a.pos[:n] - b.pos[:n], axis=1)
    assert gap.min() > 0.2


def test_blob_agents_share_one_velocity():
    for seed in range(3):
        spec = make_corpus("blob", seed)[0]
        trajs = simulate(spec)
        v = np.concatenate([tr.vel[:5] for tr in trajs])
        assert np.ptp(v, axis=0) == pytest.approx([0.0, 0.0], abs=1e-12)
        seq = rasterize_sequence(trajs, GridSpec(), 0.0, 5)
        occupied = seq.data[..., RHO] > 0
        mu = seq.data[occupied][:, 1:3]
        np.testing.assert_allclose(mu, np.broadcast_to(v[0], mu.shape), atol=1e-12)


def test_make_corpus_is_deterministic():
    for kind in SCENARIO_KINDS:
        assert make_corpus(kind, 7, 3) == make_corpus(kind, 7, 3)
    assert make_corpus("crossing", 7, 2)[0] != make_corpus("crossing", 7, 2)[1]


def test_zero_rate_corridor_is_empty():
    (spec,) = make_corpus("corridor_bidirectional", 0, rate=0.0)
    assert spawn_agents(spec) == []
    assert simulate(spec) == []


def test_unknown_kind_lists_valid_names():
    with pytest.raises(ValueError, match="corridor_bidirectional"):
        make_corpus("parade", 0)


@pytest.mark.parametrize("kind", SCENARIO_KINDS)
def test_speed_bound_and_domain(kind):
    spec = make_corpus(kind, 11, duration=60.0)[0]
    trajs = simulate(spec)
    assert trajs
    xmin, ymin, xmax, ymax = DOMAIN
    max_pref = max(a.preferred_speed for a in spawn_agents(spec))
    for tr in trajs:
        assert np.all(np.linalg.norm(tr.vel, axis=1) <= 1.5 * max_pref + 1e-12)
        assert np.all((tr.pos[:, 0] >= xmin) & (tr.pos[:, 0] <= xmax))
        assert np.all((tr.pos[:, 1] >= ymin) & (tr.pos[:, 1] <= ymax))


def test_per_agent_speed_never_exceeds_its_own_cap():
    agents = tuple(AgentSpec((5.0 + 0.3 * i, 6.0), (30.0, 6.0), 0.8 + 0.1 * i) for i in range(5))
    spec = ScenarioSpec(agents=agents, duration=10.0)
    for tr, a in zip(simulate(spec), agents):
        assert np.linalg.norm(tr.vel, axis=1).max() <= 1.5 * a.preferred_speed + 1e-12


def test_flow_arrivals_follow_rate():
    flow = FlowSpec(((0.2, 1.0), (0.2, 7.0)), ((35.8, 1.0), (35.8, 7.0)), rate=0.5)
    agents = spawn_agents(ScenarioSpec(flows=(flow,), duration=400.0, seed=3))
    # Poisson count with mean 200 and sd ~14
    assert 150 < len(agents) < 250
    assert all(a.spawn_time < 400.0 for a in agents)


def test_invalid_specs_are_rejected():
    with pytest.raises(ValueError):
        AgentSpec((0, 0), (1, 1), 0.0)
    with pytest.raises(ValueError):
        ScenarioSpec(duration=-1.0)
    with pytest.raises(ValueError):
        FlowSpec(((0, 0), (0, 1)), ((1, 0), (1, 1)), rate=-0.1)


def test_zero_duration_gives_no_trajectories():
    assert simulate(make_corpus("blob", 0, duration=0.0)[0]) == []


def test_record_every_thins_samples():
    agents = (AgentSpec((1.0, 1.0), (30.0, 1.0), 1.0),)
    full = simulate(ScenarioSpec(agents=agents, duration=5.0))[0]
    thin = simulate(ScenarioSpec(agents=agents, duration=5.0, record_every=10))[0]
    np.testing.assert_array_equal(thin.t, full.t[::10])
    assert math.isclose(thin.t[1] - thin.t[0], 1.0)
