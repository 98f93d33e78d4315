"""Structured config files (YAML or JSON).

Schema of the ``space`` section::

    space:
      classes: ["R(2+1)D", "ViT"]
      params:
        - {name: lr, kind: continuous, lo: 1.0e-4, hi: 1.0e-1, log: true}
        - {name: batch_size, kind: categorical, values: [32, 64, 128]}
        - {name: epochs, kind: integer, lo: 10, hi: 100}
        - {name: layer_sizes, kind: int_tuple, length: 5, lo: 1, hi: 4}
      overrides:            # optional, per-class replacements of shared params
        ViT:
          - {name: lr, kind: continuous, lo: 1.0e-5, hi: 1.0e-3, log: true}

``lo``/``hi`` of an ``int_tuple`` may be scalars or per-element lists. The
remaining sections (``benchmark``, ``grm``, ``timfbo``, ``ecco``) are plain
keyword mappings for the corresponding settings objects.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import yaml

from stepsearch.space import (
    Categorical,
    Continuous,
    Integer,
    IntTuple,
    ParameterSpec,
    SearchSpace,
    SpaceError,
)


def param_from_dict(d: dict) -> ParameterSpec:
    d = dict(d)
    try:
        kind = d.pop("kind")
        name = d.pop("name")
    except KeyError as exc:
        raise SpaceError(f"parameter entry missing {exc.args[0]!r}: {d}") from None
    if kind == "continuous":
        return Continuous(name, float(d["lo"]), float(d["hi"]), bool(d.get("log", False)))
    if kind == "integer":
        return Integer(name, int(d["lo"]), int(d["hi"]))
    if kind == "categorical":
        return Categorical(name, tuple(d["values"]))
    if kind == "int_tuple":
        return IntTuple(name, int(d["length"]), d["lo"], d["hi"])
    raise SpaceError(f"{name}: unknown parameter kind {kind!r}")


def param_to_dict(p: ParameterSpec) -> dict:
    if isinstance(p, Continuous):
        return {"name": p.name, "kind": p.kind, "lo": p.lo, "hi": p.hi, "log": p.log}
    if isinstance(p, Integer):
        return {"name": p.name, "kind": p.kind, "lo": p.lo, "hi": p.hi}
    if isinstance(p, Categorical):
        return {"name": p.name, "kind": p.kind, "values": list(p.values)}
    return {"name": p.name, "kind": p.kind, "length": p.length, "lo": list(p.lo), "hi": list(p.hi)}


def space_from_dict(d: dict) -> SearchSpace:
    if "classes" not in d or "params" not in d:
        raise SpaceError("space section needs 'classes' and 'params'")
    overrides = {
        str(cls): tuple(param_from_dict(p) for p in specs)
        for cls, specs in (d.get("overrides") or {}).items()
    }
    return SearchSpace(
        tuple(str(c) for c in d["classes"]),
        tuple(param_from_dict(p) for p in d["params"]),
        overrides,
    )


def space_to_dict(space: SearchSpace) -> dict:
    d: dict[str, Any] = {
        "classes": [c.name for c in space.classes],
        "params": [param_to_dict(p) for p in space.params],
    }
    if space.overrides:
        d["overrides"] = {k: [param_to_dict(p) for p in v] for k, v in space.overrides.items()}
    return d


def load_document(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
    else:
        doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise SpaceError(f"{path}: expected a key/value document")
    return doc


def load_space(path: str | Path) -> SearchSpace:
    doc = load_document(path)
    return space_from_dict(doc.get("space", doc))
