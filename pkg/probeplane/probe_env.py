import asyncio
import logging
from os.path import dirname, join
from typing import Optional, Union

import gymnasium as gym
from dotenv import load_dotenv

from probeplane.controller.collector import Controller
from probeplane.controller.topology import Topology
from probeplane.errors import ProbePlaneError
from probeplane.harness import traffic
from probeplane.harness.experiments import ScenarioRun, drive, parse_script, perform_action
from probeplane.harness.simnet import SimNetwork
from probeplane.harness.traffic import TrafficProfile
from probeplane.settings import SETTINGS, Settings

load_dotenv(join(dirname(__file__), '.env'))


class ProbeNetEnv(gym.Env):
    """
    A simulated DNP network driven one control command at a time.

    - reset() builds the devices of a topology on a fresh virtual clock,
      connects a controller to every device and queues the episode's traffic.
    - step(action) runs one scenario action (same dicts as scenario scripts,
      without "at"), then advances virtual time by action["advance_ns"]
      while polling continuous queries.

    The reward is the number of result rows the controller collected during
    the step.
    """
    metadata = {"render_modes": ["human"], "render_fps": 30}

    def __init__(self, topology: Union[str, dict, Topology] = "topology_line.json", *,
                 traffic_profile: Optional[dict] = None, settings: Settings = SETTINGS,
                 base_dir: Optional[str] = None):
        super().__init__()
        if isinstance(topology, Topology):
            self.topology = topology
        elif isinstance(topology, dict):
            self.topology = Topology.from_dict(topology, base_dir)
        else:
            self.topology = Topology.from_file(topology)
        self.traffic_profile = traffic_profile
        self.settings = settings
        self.base_dir = base_dir
        self.run: Optional[ScenarioRun] = None
        self.total_reward = 0
        self.steps = 0
        self.last_error = None

    @property
    def net(self) -> SimNetwork:
        return self.run.net

    @property
    def controller(self) -> Controller:
        return self.run.controller

    def _rows(self) -> int:
        return sum(q["rows"] for q in self.controller.list_queries())

    def _get_observation(self) -> dict:
        net = self.net
        return {
            "now": net.now,
            "devices": {d: {"online": dev.online, **dev.counters.as_dict(),
                            "probes": len(self.net.agents[d].runtime.probes)}
                        for d, dev in sorted(net.devices.items())},
            "queries": self.controller.list_queries(),
            "reports": len(net.log.reports),
            "emissions": len(net.log.emissions),
            "drops": sum(net.log.drops.values()),
            "pending_events": net.pending(),
            "total_reward": self.total_reward,
        }

    async def reset(self, seed=None, options=None):
        super().reset(seed=seed)
        options = options or {}
        if self.run is not None:
            await self.controller.close()

        net = SimNetwork(self.topology, settings=self.settings)
        controller = Controller(self.topology, hub=net.hub, clock=net.clock)
        await controller.connect(net.addresses())
        self.run = ScenarioRun(net, controller, base_dir=self.base_dir)
        self.total_reward = 0
        self.steps = 0
        self.last_error = None

        profile_doc = options.get("traffic", self.traffic_profile)
        injected = 0
        if profile_doc is not None:
            profile_doc = dict(profile_doc)
            if seed is not None:
                profile_doc["seed"] = seed
            profile = TrafficProfile.from_dict(profile_doc)
            device = profile.device or sorted(self.topology.devices)[0]
            injected = net.inject_trace(device, traffic.load(profile))
        logging.info(f"ProbeNetEnv reset: {len(net.devices)} devices, {injected} packets queued")
        return self._get_observation(), {"injected": injected}

    async def step(self, action: dict):
        """Returns (observation, reward, terminated, truncated, info)."""
        if self.run is None:
            raise RuntimeError("call reset() before step()")
        self.steps += 1
        action = dict(action)
        advance = int(action.pop("advance_ns", 0))
        before = self._rows()
        info = {}
        try:
            if "do" in action:
                parsed = parse_script([{**action, "at": self.net.now}])[0]
                await perform_action(self.run, parsed, self.settings)
                await self.controller.pump()
            await drive(self.run, [], self.net.now + advance, self.settings)
        except ProbePlaneError as e:
            logging.error(f"Step {self.steps} failed: {e}")
            self.last_error = e
            info = {"error": str(e), "code": e.code}
        reward = self._rows() - before
        self.total_reward += reward
        if self.run.timeline:
            info.setdefault("last", self.run.timeline[-1])
        terminated = self.net.pending() == 0 and not any(
            q["active"] and q["mode"] == "continuous" for q in self.controller.list_queries())
        return self._get_observation(), reward, terminated, False, info

    def render(self, mode="human"):
        if self.run is None:
            return
        obs = self._get_observation()
        logging.info(f"t={obs['now']}ns reports={obs['reports']} emissions={obs['emissions']} drops={obs['drops']}")
        for q in obs["queries"]:
            logging.info(f"  {q['handle']}: {q['kind']} {q['mode']} rows={q['rows']} active={q['active']}")

    async def close(self):
        if self.run is not None:
            await self.controller.close()
            self.run = None
        logging.info("ProbeNetEnv closed.")


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')

    async def main():
        env = ProbeNetEnv(traffic_profile={"device": "A", "n_flows": 8, "duration_ns": 100_000_000})
        await env.reset(seed=1)
        query = {"query_id": "lat-ab", "kind": "link_latency", "mode": "continuous",
                 "target": {"from": {"device": "A", "port": 2}, "to": {"device": "B", "port": 1}},
                 "params": {"interval": 10_000_000}}
        for action in ({"do": "query_run", "query": query, "advance_ns": 50_000_000},
                       {"do": "query_revoke", "handle": "lat-ab/lat-ab", "advance_ns": 10_000_000}):
            _, reward, terminated, _, info = await env.step(action)
            logging.info(f"reward={reward} terminated={terminated} info={info}")
        env.render()
        await env.close()

    asyncio.run(main())
