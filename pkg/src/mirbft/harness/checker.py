"""Trace-level property checker.

Only the JSON events are consulted, never protocol objects, so a trace
written to disk can be checked later by ``mirbft check``.

Properties:

* P1 validity: every delivered request was broadcast (signed) by a client.
* P2 agreement: honest nodes deliver the same batch at each sequence number.
* P3 no duplication: no honest node delivers a request digest twice.
* P4 totality: a request delivered by one honest node is delivered by every
  honest node that is up at the end.
* P5 liveness: every request of a correct client is delivered somewhere.

P4 and P5 are only meaningful once the run went quiet; on a truncated trace
they are reported ``inconclusive``.  Auxiliary checks: gap-free delivery,
consistent epoch configurations and equal checkpoint digests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
SAFETY = ("P1", "P2", "P3")
LIVENESS = ("P4", "P5")
AUXILIARY = ("gap_free", "epoch_config", "checkpoint_digest")
MAX_WITNESSES = 20


@dataclass
class Verdict:
    name: str
    status: str = PASS
    violations: List[dict] = field(default_factory=list)
    count: int = 0

    def fail(self, **witness) -> None:
        self.status = FAIL
        self.count += 1
        if len(self.violations) < MAX_WITNESSES:
            self.violations.append(witness)

    def to_dict(self) -> dict:
        return {"status": self.status, "violations": self.count, "witnesses": self.violations}


@dataclass
class Report:
    verdicts: Dict[str, Verdict]
    quiescent: bool

    def __getitem__(self, name: str) -> Verdict:
        return self.verdicts[name]

    def status(self, name: str) -> str:
        return self.verdicts[name].status

    @property
    def safe(self) -> bool:
        return all(self.verdicts[p].status == PASS for p in SAFETY)

    @property
    def live(self) -> bool:
        return all(self.verdicts[p].status == PASS for p in LIVENESS)

    @property
    def ok(self) -> bool:
        return all(v.status != FAIL for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {"quiescent": self.quiescent, "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()}}

    def summary(self) -> str:
        return " ".join(f"{k}={v.status}" for k, v in self.verdicts.items())


def _meta(trace: Sequence[dict]) -> dict:
    for ev in trace:
        if ev.get("kind") == "meta":
            return ev
    return {}


def _end(trace: Sequence[dict]) -> Optional[dict]:
    for ev in reversed(trace):
        if ev.get("kind") == "end":
            return ev
    return None


def delivered_requests(ev: dict) -> List[str]:
    """Request digests a deliver event handed to the application (ordered minus skipped)."""
    skipped = set(ev.get("skipped", ()))
    return [d for k, d in enumerate(ev["requests"]) if k not in skipped]


def check_trace(trace: Sequence[dict], honest: Optional[Sequence[int]] = None) -> Report:
    meta = _meta(trace)
    end = _end(trace)
    if honest is None:
        honest = meta.get("honest")
    if honest is None:
        honest = sorted({ev["node"] for ev in trace if ev.get("kind") == "deliver"})
    honest_set = set(honest)
    quiescent = bool(end and end.get("quiescent"))
    down = set(end.get("down", ())) if end else set()

    v = {name: Verdict(name) for name in SAFETY + LIVENESS + AUXILIARY}

    created: Dict[str, dict] = {}
    for ev in trace:
        if ev.get("kind") == "bcast":
            created.setdefault(ev["digest"], ev)

    by_sn: Dict[int, Tuple[int, dict]] = {}
    seen: Dict[int, Dict[str, dict]] = {}
    next_sn: Dict[int, int] = {}
    delivered_at: Dict[int, Set[str]] = {i: set() for i in honest_set}
    anywhere: Set[str] = set()
    epochs: Dict[int, dict] = {}
    ckpts: Dict[int, dict] = {}

    for ev in trace:
        kind = ev.get("kind")
        node = ev.get("node")
        if kind == "deliver" and node in honest_set:
            sn = ev["sn"]
            delivered = delivered_requests(ev)
            for d in delivered:
                if d not in created:
                    v["P1"].fail(node=node, sn=sn, request=d, event=ev)
            first = by_sn.get(sn)
            if first is None:
                by_sn[sn] = (node, ev)
            elif first[1]["digest"] != ev["digest"]:
                v["P2"].fail(sn=sn, first=first[1], conflicting=ev)
            mine = seen.setdefault(node, {})
            for d in delivered:
                if d in mine:
                    v["P3"].fail(node=node, request=d, first=mine[d], again=ev)
                else:
                    mine[d] = ev
                delivered_at[node].add(d)
                anywhere.add(d)
            expect = next_sn.get(node, 0)
            if sn != expect:
                v["gap_free"].fail(node=node, expected=expect, got=sn, event=ev)
            next_sn[node] = sn + 1
        elif kind == "epoch" and node in honest_set:
            key = (tuple(ev["leaders"]), ev["first"], ev["last"])
            ref = epochs.get(ev["e"])
            if ref is None:
                epochs[ev["e"]] = ev
            elif (tuple(ref["leaders"]), ref["first"], ref["last"]) != key:
                v["epoch_config"].fail(e=ev["e"], first=ref, conflicting=ev)
        elif kind == "checkpoint" and node in honest_set and not ev.get("stable"):
            ref = ckpts.get(ev["sn"])
            if ref is None:
                ckpts[ev["sn"]] = ev
            elif ref["digest"] != ev["digest"]:
                v["checkpoint_digest"].fail(sn=ev["sn"], first=ref, conflicting=ev)

    if not quiescent:
        v["P4"].status = INCONCLUSIVE
        v["P5"].status = INCONCLUSIVE
    else:
        for node in sorted(honest_set - down):
            missing = anywhere - delivered_at[node]
            for d in sorted(missing):
                v["P4"].fail(node=node, request=d)
        for d, ev in created.items():
            if ev.get("correct", True) and d not in anywhere:
                v["P5"].fail(request=d, client=ev["client"], t=ev["t"], created=ev)
    return Report(v, quiescent)
