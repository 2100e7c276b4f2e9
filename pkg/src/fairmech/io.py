"""Scenario files: JSON with agents, goods, declared and (optional) true scores.

    {
      "agents": [{"id": "r1", "capacity": 3}, ...],
      "goods": ["p1", ...],
      "declared": {"r1": {"p1": 10, ...}, ...},
      "true": {...}
    }

Score maps are sparse; a missing entry means -1 and -1 is never written.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import FairMechError, StructuralError
from .model import SENTINEL, Scenario, TypeVector


class InputError(FairMechError, ValueError):
    pass


@dataclass(frozen=True)
class ScenarioFile:
    scenario: Scenario
    declared: TypeVector
    true: TypeVector | None = None


def _num(x, where):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise InputError(f"{where}: expected a number, got {type(x).__name__}")
    if not math.isfinite(x):
        raise InputError(f"{where}: score must be finite")
    return float(x)


def _scores(obj, key, agents, goods):
    if not isinstance(obj, dict):
        raise InputError(f"{key}: expected an object mapping agent id to scores")
    rows = {a: {} for a in agents}
    for a, row in obj.items():
        if a not in rows:
            raise InputError(f"{key}.{a}: unknown agent")
        if not isinstance(row, dict):
            raise InputError(f"{key}.{a}: expected an object mapping good id to score")
        for g, x in row.items():
            if g not in goods:
                raise InputError(f"{key}.{a}.{g}: unknown good")
            rows[a][g] = _num(x, f"{key}.{a}.{g}")
    return TypeVector(rows)


def from_dict(doc) -> ScenarioFile:
    if not isinstance(doc, dict):
        raise InputError("top level: expected an object")
    unknown = set(doc) - {"agents", "goods", "declared", "true"}
    if unknown:
        raise InputError(f"top level: unknown keys {sorted(unknown)}")
    for k in ("agents", "goods", "declared"):
        if k not in doc:
            raise InputError(f"top level: missing key {k!r}")
    if not isinstance(doc["agents"], list):
        raise InputError("agents: expected a list")
    agents, caps = [], {}
    for k, entry in enumerate(doc["agents"]):
        where = f"agents[{k}]"
        if not isinstance(entry, dict) or set(entry) != {"id", "capacity"}:
            raise InputError(f"{where}: expected {{'id': ..., 'capacity': ...}}")
        aid, cap = entry["id"], entry["capacity"]
        if not isinstance(aid, str) or not aid:
            raise InputError(f"{where}.id: expected a non-empty string")
        if aid in caps:
            raise InputError(f"{where}.id: duplicate agent {aid!r}")
        if isinstance(cap, bool) or not isinstance(cap, int) or cap < 1:
            raise InputError(f"{where}.capacity: expected an integer >= 1, got {cap!r}")
        agents.append(aid)
        caps[aid] = cap
    goods = doc["goods"]
    if not isinstance(goods, list) or not all(isinstance(g, str) and g for g in goods):
        raise InputError("goods: expected a list of non-empty strings")
    if len(set(goods)) != len(goods):
        raise InputError("goods: duplicate good id")
    try:
        s = Scenario(agents, goods, caps)
    except StructuralError as e:
        raise InputError(str(e)) from None
    gs = set(goods)
    declared = _scores(doc["declared"], "declared", agents, gs)
    true = _scores(doc["true"], "true", agents, gs) if doc.get("true") is not None else None
    return ScenarioFile(s, declared, true)


def parse(text: str, source: str = "<input>") -> ScenarioFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    return from_dict(doc)


def load(path) -> ScenarioFile:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    return parse(text, str(path))


def _out(x: float):
    return int(x) if x.is_integer() and abs(x) < 2**53 else x


def scores_to_dict(s: Scenario, w: TypeVector) -> dict:
    return {a: {g: _out(w.score(a, g)) for g in s.goods if w.score(a, g) != SENTINEL}
            for a in s.agents}


def to_dict(f: ScenarioFile) -> dict:
    s = f.scenario
    doc = {
        "agents": [{"id": a, "capacity": s.capacity[a]} for a in s.agents],
        "goods": list(s.goods),
        "declared": scores_to_dict(s, f.declared),
    }
    if f.true is not None:
        doc["true"] = scores_to_dict(s, f.true)
    return doc


def dumps(f: ScenarioFile) -> str:
    return json.dumps(to_dict(f), indent=2) + "\n"


def scenario_record(s: Scenario, declared: TypeVector, true: TypeVector | None = None) -> dict:
    """Replayable snapshot for counterexamples."""
    return to_dict(ScenarioFile(s, declared, true))
