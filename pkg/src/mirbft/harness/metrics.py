"""Metrics computed from a trace, and their JSON / CSV output.

Rates are requests per 1000 simulated ticks, measured at the lowest-id
correct node between the first client broadcast and its last delivery.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

PER = 1000


@dataclass
class EpochEvent:
    time: int
    e: int
    kind: str
    leaders: int
    first: int
    last: Optional[int]


@dataclass
class Metrics:
    observer: Optional[int] = None
    delivered_total: int = 0
    delivered_unique: int = 0
    duplicate_commits: int = 0
    batches: int = 0
    span: int = 0
    throughput: float = 0.0
    goodput: float = 0.0
    latency: Dict[str, float] = field(default_factory=dict)
    epochs: List[EpochEvent] = field(default_factory=list)
    checkpoints: int = 0
    timeline: List[dict] = field(default_factory=list)

    @property
    def ungracious_changes(self) -> int:
        return sum(1 for ev in self.epochs if ev.kind == "ungracious")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ungracious_changes"] = self.ungracious_changes
        return d


def _percentile(sorted_vals: Sequence[int], q: float) -> float:
    if not sorted_vals:
        return 0.0
    idx = min(len(sorted_vals) - 1, max(0, round(q * (len(sorted_vals) - 1))))
    return float(sorted_vals[idx])


def compute_metrics(trace: Sequence[dict], window: int = 100, observer: Optional[int] = None) -> Metrics:
    meta = next((ev for ev in trace if ev.get("kind") == "meta"), {})
    honest = set(meta.get("honest", ()))
    if observer is None:
        correct = meta.get("correct") or sorted(honest)
        observer = correct[0] if correct else 0
    m = Metrics(observer=observer)

    created: Dict[str, int] = {}
    first_delivery: Dict[str, int] = {}
    start = None
    end = 0
    unique = set()
    times: List[int] = []
    for ev in trace:
        kind = ev.get("kind")
        if kind == "bcast":
            created.setdefault(ev["digest"], ev["time"])
            start = ev["time"] if start is None else min(start, ev["time"])
        elif kind == "deliver":
            node = ev["node"]
            if not honest or node in honest:
                for d in ev["requests"]:
                    first_delivery.setdefault(d, ev["time"])
            if node != observer:
                continue
            m.batches += 1
            for d in ev["requests"]:
                m.delivered_total += 1
                unique.add(d)
                times.append(ev["time"])
            if ev["requests"]:
                end = max(end, ev["time"])
        elif kind == "epoch" and ev.get("node") == observer:
            m.epochs.append(EpochEvent(ev["time"], ev["e"], ev["change"], len(ev["leaders"]), ev["first"], ev["last"]))
        elif kind == "checkpoint" and ev.get("node") == observer and ev.get("stable"):
            m.checkpoints += 1

    m.delivered_unique = len(unique)
    m.duplicate_commits = m.delivered_total - m.delivered_unique
    start = start or 0
    m.span = max(end - start, 1)
    m.throughput = m.delivered_total * PER / m.span
    m.goodput = m.delivered_unique * PER / m.span

    lat = sorted(first_delivery[d] - created[d] for d in created if d in first_delivery)
    if lat:
        m.latency = {
            "count": len(lat),
            "mean": statistics.fmean(lat),
            "p50": _percentile(lat, 0.5),
            "p90": _percentile(lat, 0.9),
            "max": float(lat[-1]),
        }

    m.timeline = _timeline(trace, observer, window)
    return m


def _timeline(trace: Sequence[dict], observer: int, window: int) -> List[dict]:
    rows: Dict[int, dict] = {}
    seen = set()
    epoch = 0
    for ev in trace:
        if ev.get("node") != observer:
            continue
        if ev.get("kind") == "epoch":
            epoch = ev["e"]
        if ev.get("kind") != "deliver":
            continue
        slot = ev["time"] // window * window
        row = rows.setdefault(slot, {"time": slot, "delivered": 0, "unique": 0, "epoch": epoch})
        row["epoch"] = epoch
        for d in ev["requests"]:
            row["delivered"] += 1
            if d not in seen:
                seen.add(d)
                row["unique"] += 1
    return [rows[k] for k in sorted(rows)]


def emit_metrics(metrics: Metrics, fmt: str = "json", path=None) -> str:
    """Render as ``json`` (summary) or ``csv`` (time series); write to ``path`` if given."""
    if fmt == "json":
        text = json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["time", "delivered", "unique", "epoch"], lineterminator="\n")
        w.writeheader()
        for row in metrics.timeline:
            w.writerow(row)
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
