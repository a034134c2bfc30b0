import pytest

from probeplane.errors import NoSuchQuery
from probeplane.probe_env import ProbeNetEnv

MS = 1_000_000

LATENCY_QUERY = {"query_id": "lat", "kind": "link_latency",
                 "target": {"from": {"device": "A", "port": 2}, "to": {"device": "B", "port": 1}},
                 "params": {"interval": 10 * MS}}


@pytest.fixture
async def env(topology):
    env = ProbeNetEnv(topology)
    yield env
    await env.close()


async def test_reset_queues_traffic(topology):
    env = ProbeNetEnv(topology, traffic_profile={"device": "A", "n_flows": 8, "packets_per_flow": 8})
    observation, info = await env.reset(seed=5)
    assert info == {"injected": 64}
    assert observation["now"] == 0
    assert set(observation["devices"]) == {"A", "B", "C"}
    assert observation["devices"]["A"]["online"]
    await env.close()


async def test_step_before_reset_is_an_error(env):
    with pytest.raises(RuntimeError):
        await env.step({"advance_ns": 1})


async def test_rows_are_the_reward(env):
    await env.reset()
    observation, reward, terminated, truncated, info = await env.step(
        {"do": "query_run", "query": LATENCY_QUERY, "advance_ns": 50 * MS})
    # probes fire every 10ms and take 5ms to cross the link
    assert reward == 4
    assert not terminated and not truncated
    assert info["last"] == [0, "query_run", "lat/lat"]
    assert observation["now"] == 50 * MS
    assert observation["devices"]["A"]["probes"] == 1

    _, reward, terminated, _, _ = await env.step({"do": "query_revoke", "handle": "lat/lat", "advance_ns": 10 * MS})
    assert terminated
    assert env.total_reward == 4 + reward


async def test_failed_actions_are_reported_not_raised(env):
    await env.reset()
    _, reward, _, _, info = await env.step({"do": "query_revoke", "handle": "nobody/q"})
    assert reward == 0
    assert info["code"] == NoSuchQuery.code
    assert isinstance(env.last_error, NoSuchQuery)
