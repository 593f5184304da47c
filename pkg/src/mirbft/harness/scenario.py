"""Scenario files and the runner that turns one into a trace.

A scenario is a JSON object::

    {
      "name": "crash-leader",
      "params": {"n": 4, "f": 1, "checkpoint_period": 16, ...},
      "clients": 4,
      "requests_per_client": 50,
      "payload_size": 8,
      "network": {"delta": 5, "delta_pre": 100, "gst": 0, "reorder": 0.0},
      "adversary": {
        "nodes": {"1": {"kind": "crash", "at": 300, "recover_at": 3000}},
        "clients": {"*": "duplicate-to-all"}
      },
      "verify_cost": 0,
      "horizon": null,
      "max_events": 3000000,
      "seed": 1,
      "signature_scheme": "test"
    }

Every key is optional.  ``params`` takes any :class:`ProtocolParams` field.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from ..client import Client
from ..crypto import KeyRegistry
from ..netsim import AdversaryScript, NetworkModel, NodeBehavior, Simulator, apply_adversary
from ..params import ProtocolParams, validate
from ..replica import Replica
from ..status import node_identity

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    params: ProtocolParams = ProtocolParams()
    clients: int = 4
    requests_per_client: int = 25
    payload_size: int = 8
    network: NetworkModel = NetworkModel()
    nodes: Mapping[int, NodeBehavior] = field(default_factory=dict)
    client_behaviour: Mapping[str, str] = field(default_factory=dict)
    verify_cost: int = 0
    horizon: Optional[int] = None
    max_events: Optional[int] = 3_000_000
    seed: int = 0
    signature_scheme: str = "test"
    name: str = "scenario"

    @property
    def script(self) -> AdversaryScript:
        return AdversaryScript(dict(self.nodes), self.client_ids_behaviour(), self.network)

    def client_ids(self) -> List[str]:
        return [f"client-{k}" for k in range(self.clients)]

    def client_ids_behaviour(self) -> Dict[str, str]:
        default = self.client_behaviour.get("*", "correct")
        return {c: self.client_behaviour.get(c, default) for c in self.client_ids()}

    def validate(self) -> None:
        validate(self.params)
        self.script.validate(self.params.n, self.params.f)
        if self.clients < 0 or self.requests_per_client < 0:
            raise ScenarioError("client counts must be non-negative")

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, seed=seed)

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)} | {"adversary"}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        kwargs: Dict[str, Any] = {}
        if "params" in d:
            kwargs["params"] = ProtocolParams.from_dict(d.pop("params"))
        if "network" in d:
            kwargs["network"] = NetworkModel.from_dict(d.pop("network"))
        adv = d.pop("adversary", {}) or {}
        kwargs["nodes"] = {int(k): NodeBehavior.from_dict(v) for k, v in adv.get("nodes", {}).items()}
        kwargs["client_behaviour"] = dict(adv.get("clients", {}))
        kwargs.update(d)
        sc = cls(**kwargs)
        sc.validate()
        return sc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "params": self.params.to_dict(),
            "clients": self.clients,
            "requests_per_client": self.requests_per_client,
            "payload_size": self.payload_size,
            "network": dataclasses.asdict(self.network),
            "adversary": {
                "nodes": {str(i): dataclasses.asdict(b) for i, b in sorted(self.nodes.items())},
                "clients": dict(self.client_behaviour),
            },
            "verify_cost": self.verify_cost,
            "horizon": self.horizon,
            "max_events": self.max_events,
            "seed": self.seed,
            "signature_scheme": self.signature_scheme,
        }


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        data = json.load(fh)
    data.setdefault("name", Path(path).stem)
    return Scenario.from_dict(data)


@dataclass
class RunResult:
    scenario: Scenario
    trace: List[dict]
    quiescent: bool
    nodes: List[Replica]
    clients: List[Client]
    sim: Simulator

    @property
    def metrics(self):
        from .metrics import compute_metrics

        return compute_metrics(self.trace)

    def report(self):
        from .checker import check_trace

        return check_trace(self.trace)


def build(scenario: Scenario, trace_messages: bool = False):
    scenario.validate()
    p = scenario.params
    sim = Simulator(scenario.seed, scenario.network, trace_messages)
    registry = KeyRegistry(scenario.signature_scheme, seed=scenario.seed)
    nodes: List[Replica] = []
    for i in range(p.n):
        key = registry.generate(node_identity(i))
        behaviour = scenario.nodes.get(i, NodeBehavior())
        node = apply_adversary(behaviour, i, p, sim, registry, key, scenario.verify_cost)
        nodes.append(node)
        sim.register(i, node)
        if behaviour.kind == "crash":
            sim.crash(i, behaviour.at, behaviour.recover_at)

    correct = [i for i in range(p.n) if scenario.nodes.get(i, NodeBehavior()).kind == "correct"]
    observer = nodes[correct[0]] if correct else nodes[0]

    def holder_hint(t: int, c: str) -> int:
        from ..bucketing import bucket_of

        sn = observer.next_sn if observer.next_sn is not None else observer.last_delivered + 1
        owner = observer.assignment_at(observer.epoch, max(sn, observer.config.first)).owner()
        return owner.get(bucket_of(t, c, p.num_buckets), observer.config.primary)

    clients: List[Client] = []
    behaviours = scenario.client_ids_behaviour()
    for cid in scenario.client_ids():
        key = registry.generate(cid)
        cl = Client(
            cid,
            key,
            p,
            sim,
            scenario.requests_per_client,
            scenario.payload_size,
            holder_hint,
            duplicate_to_all=behaviours[cid] == "duplicate-to-all",
        )
        clients.append(cl)
        sim.register(cid, cl)

    honest = [i for i in range(p.n) if not scenario.nodes.get(i, NodeBehavior()).byzantine]
    sim.trace(
        "meta",
        scenario=scenario.name,
        seed=scenario.seed,
        n=p.n,
        f=p.f,
        correct=correct,
        honest=honest,
        clients=scenario.client_ids(),
        correct_clients=[c for c in scenario.client_ids() if behaviours[c] == "correct"],
        params=p.to_dict(),
    )
    return sim, nodes, clients


def run_scenario(scenario: Scenario, trace_messages: bool = False) -> RunResult:
    """Build nodes and clients, run to quiescence or the horizon, and return the trace."""
    sim, nodes, clients = build(scenario, trace_messages)
    sim.start()
    quiescent = sim.run(scenario.horizon, scenario.max_events)
    sim.trace(
        "end",
        quiescent=quiescent,
        down=sorted(sim.down),
        events=sim.fired,
        messages=sim.messages,
        nodes=[nd.snapshot() for nd in nodes],
        max_instances={nd.id: nd.stats["max_instances"] for nd in nodes},
        verifications={nd.id: nd.stats["verifications"] for nd in nodes},
    )
    log.info("%s seed=%d: %d events, quiescent=%s", scenario.name, scenario.seed, sim.fired, quiescent)
    return RunResult(scenario, sim.events, quiescent, nodes, clients, sim)


def trace_lines(trace: List[dict]) -> List[str]:
    return [json.dumps(ev, sort_keys=True, separators=(",", ":")) for ev in trace]


def trace_digest(trace: List[dict]) -> str:
    import hashlib

    h = hashlib.sha256()
    for line in trace_lines(trace):
        h.update(line.encode())
        h.update(b"\n")
    return h.hexdigest()


def write_trace(trace: List[dict], path) -> None:
    with open(path, "w") as fh:
        for line in trace_lines(trace):
            fh.write(line + "\n")


def read_trace(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
