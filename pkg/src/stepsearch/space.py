"""Joint architecture/hyperparameter search domain.

A :class:`SearchSpace` holds the architecture class labels and the parameter
specs. Every operation here is pure given its seed, so spaces and
configurations can be shared freely between trial workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from stepsearch.seeding import as_rng


class SpaceError(ValueError):
    """Raised for a malformed search space or an invalid configuration."""


@dataclass(frozen=True)
class ArchitectureClass:
    name: str

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise SpaceError("architecture class name must be a non-empty string")

    def __str__(self) -> str:
        return self.name


# ---------------------------------------------------------------------------
# Parameter kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Continuous:
    name: str
    lo: float
    hi: float
    log: bool = False

    kind = "continuous"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise SpaceError(f"{self.name}: lo must be < hi")
        if self.log and self.lo <= 0:
            raise SpaceError(f"{self.name}: log scale requires lo > 0")

    @property
    def width(self) -> int:
        return 1

    def _to_unit(self, v: float) -> float:
        if self.log:
            return (math.log(v) - math.log(self.lo)) / (math.log(self.hi) - math.log(self.lo))
        return (v - self.lo) / (self.hi - self.lo)

    def _from_unit(self, u: float) -> float:
        u = min(max(float(u), 0.0), 1.0)
        if self.log:
            v = math.exp(math.log(self.lo) + u * (math.log(self.hi) - math.log(self.lo)))
        else:
            v = self.lo + u * (self.hi - self.lo)
        return min(max(v, self.lo), self.hi)

    def sample(self, rng: np.random.Generator) -> float:
        return self._from_unit(rng.random())

    def violations(self, value: Any) -> list[str]:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return [f"{self.name}: expected a real number, got {value!r}"]
        if not math.isfinite(value) or not self.lo <= value <= self.hi:
            return [f"{self.name}: {value!r} outside [{self.lo}, {self.hi}]"]
        return []

    def grid(self, bins: int) -> list[float]:
        if self.log:
            pts = np.geomspace(self.lo, self.hi, bins)
        else:
            pts = np.linspace(self.lo, self.hi, bins)
        pts[0], pts[-1] = self.lo, self.hi
        return [float(p) for p in pts]

    def encode(self, value) -> list[float]:
        return [self._to_unit(value)]

    def decode(self, vec: Sequence[float]):
        return self._from_unit(vec[0])


@dataclass(frozen=True)
class Integer:
    name: str
    lo: int
    hi: int

    kind = "integer"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise SpaceError(f"{self.name}: lo must be < hi")

    @property
    def width(self) -> int:
        return 1

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi + 1))

    def violations(self, value: Any) -> list[str]:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            return [f"{self.name}: expected an integer, got {value!r}"]
        if not self.lo <= value <= self.hi:
            return [f"{self.name}: {value!r} outside [{self.lo}, {self.hi}]"]
        return []

    def grid(self, bins: int) -> list[int]:
        return _int_grid(self.lo, self.hi, bins)

    def encode(self, value) -> list[float]:
        return [(value - self.lo) / (self.hi - self.lo)]

    def decode(self, vec: Sequence[float]) -> int:
        u = min(max(float(vec[0]), 0.0), 1.0)
        return int(round(self.lo + u * (self.hi - self.lo)))


@dataclass(frozen=True)
class Categorical:
    name: str
    values: tuple

    kind = "categorical"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(tuple(v) if isinstance(v, list) else v for v in self.values))
        if not self.values:
            raise SpaceError(f"{self.name}: categorical list is empty")
        if len(set(map(_cat_key, self.values))) != len(self.values):
            raise SpaceError(f"{self.name}: categorical values must be distinct")

    @property
    def width(self) -> int:
        return len(self.values)

    def index(self, value) -> int:
        key = _cat_key(value)
        for i, v in enumerate(self.values):
            if _cat_key(v) == key:
                return i
        raise SpaceError(f"{self.name}: {value!r} not in {list(self.values)}")

    def sample(self, rng: np.random.Generator):
        return self.values[int(rng.integers(len(self.values)))]

    def violations(self, value: Any) -> list[str]:
        try:
            self.index(value)
        except SpaceError as exc:
            return [str(exc)]
        return []

    def grid(self, bins: int) -> list:
        return list(self.values)

    def encode(self, value) -> list[float]:
        block = [0.0] * len(self.values)
        block[self.index(value)] = 1.0
        return block

    def decode(self, vec: Sequence[float]):
        return self.values[int(np.argmax(np.asarray(vec, dtype=float)))]


@dataclass(frozen=True)
class IntTuple:
    """Fixed-length integer tuple treated as one gene (layer sizes, input shape)."""

    name: str
    length: int
    lo: tuple
    hi: tuple

    kind = "int_tuple"

    def __post_init__(self):
        if self.length < 1:
            raise SpaceError(f"{self.name}: length must be >= 1")
        lo = _broadcast(self.lo, self.length, self.name)
        hi = _broadcast(self.hi, self.length, self.name)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if any(not a < b for a, b in zip(lo, hi)):
            raise SpaceError(f"{self.name}: lo must be < hi element-wise")

    @property
    def width(self) -> int:
        return self.length

    def sample(self, rng: np.random.Generator) -> tuple:
        return tuple(int(rng.integers(a, b + 1)) for a, b in zip(self.lo, self.hi))

    def violations(self, value: Any) -> list[str]:
        if not isinstance(value, (tuple, list)) or len(value) != self.length:
            return [f"{self.name}: expected a tuple of {self.length} integers, got {value!r}"]
        out = []
        for i, (v, a, b) in enumerate(zip(value, self.lo, self.hi)):
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                out.append(f"{self.name}[{i}]: expected an integer, got {v!r}")
            elif not a <= v <= b:
                out.append(f"{self.name}[{i}]: {v!r} outside [{a}, {b}]")
        return out

    def element_grids(self, bins: int) -> list[list[int]]:
        return [_int_grid(a, b, bins) for a, b in zip(self.lo, self.hi)]

    def encode(self, value) -> list[float]:
        return [(v - a) / (b - a) for v, a, b in zip(value, self.lo, self.hi)]

    def decode(self, vec: Sequence[float]) -> tuple:
        return tuple(
            int(round(a + min(max(float(u), 0.0), 1.0) * (b - a)))
            for u, a, b in zip(vec, self.lo, self.hi)
        )


ParameterSpec = Continuous | Integer | Categorical | IntTuple


def _broadcast(v, n: int, name: str) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise SpaceError(f"{name}: bound has {len(v)} entries, expected {n}")
    return v


def _int_grid(lo: int, hi: int, bins: int) -> list[int]:
    if hi - lo + 1 <= bins:
        return list(range(lo, hi + 1))
    return sorted({int(round(p)) for p in np.linspace(lo, hi, bins)})


def _cat_key(v):
    # keeps True distinct from 1 and "1"
    if isinstance(v, list):
        v = tuple(v)
    return (type(v).__name__ if isinstance(v, bool) else "v", v)


# ---------------------------------------------------------------------------
# Configuration / space
# ---------------------------------------------------------------------------


class Configuration(Mapping):
    """Immutable parameter-name -> value assignment."""

    __slots__ = ("_items",)

    def __init__(self, assignments: Mapping[str, Any] | None = None, **kw):
        d = dict(assignments or {})
        d.update(kw)
        self._items = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}

    def __getitem__(self, key):
        return self._items[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __hash__(self):
        return hash(tuple(sorted(self._items.items(), key=lambda kv: kv[0])))

    def __eq__(self, other):
        if isinstance(other, Mapping):
            return dict(self._items) == {
                k: (tuple(v) if isinstance(v, list) else v) for k, v in other.items()
            }
        return NotImplemented

    def __repr__(self) -> str:
        return f"Configuration({self._items!r})"

    def replace(self, **changes) -> "Configuration":
        return Configuration({**self._items, **changes})

    def to_dict(self) -> dict:
        """JSON-friendly copy (tuples become lists)."""
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self._items.items()}


@dataclass(frozen=True)
class SearchSpace:
    classes: tuple[ArchitectureClass, ...]
    params: tuple[ParameterSpec, ...]
    overrides: Mapping[str, tuple[ParameterSpec, ...]] = field(default_factory=dict)

    def __post_init__(self):
        classes = tuple(
            c if isinstance(c, ArchitectureClass) else ArchitectureClass(c) for c in self.classes
        )
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "params", tuple(self.params))
        if not classes:
            raise SpaceError("search space needs at least one architecture class")
        if not self.params:
            raise SpaceError("search space needs at least one parameter")
        names = [c.name for c in classes]
        if len(set(names)) != len(names):
            raise SpaceError("architecture class names must be unique")
        pnames = [p.name for p in self.params]
        if len(set(pnames)) != len(pnames):
            raise SpaceError("parameter names must be unique")
        for cls, specs in self.overrides.items():
            if cls not in names:
                raise SpaceError(f"override for unknown class {cls!r}")
            for s in specs:
                if s.name not in pnames:
                    raise SpaceError(f"override {cls}.{s.name} does not match a shared parameter")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def dim(self) -> int:
        """Length of the unit-cube encoding."""
        return sum(p.width for p in self.params)

    def param(self, name: str) -> ParameterSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def arch(self, name: str | ArchitectureClass) -> ArchitectureClass:
        name = str(name)
        for c in self.classes:
            if c.name == name:
                return c
        raise SpaceError(f"unknown architecture class {name!r}")

    def for_class(self, arch: str | ArchitectureClass | None) -> "SearchSpace":
        """The space with ``arch``'s overrides merged in (self if none)."""
        if arch is None or str(arch) not in self.overrides:
            return self
        repl = {s.name: s for s in self.overrides[str(arch)]}
        return SearchSpace(self.classes, tuple(repl.get(p.name, p) for p in self.params))

    def slices(self) -> dict[str, slice]:
        out, i = {}, 0
        for p in self.params:
            out[p.name] = slice(i, i + p.width)
            i += p.width
        return out


def sample_random(space: SearchSpace, seed=None) -> Configuration:
    rng = as_rng(seed)
    return Configuration({p.name: p.sample(rng) for p in space.params})


def validate_config(space: SearchSpace, config: Mapping) -> list[str]:
    """Every bound, membership and key-set violation; empty iff valid."""
    out = []
    for p in space.params:
        if p.name not in config:
            out.append(f"{p.name}: missing parameter")
        else:
            out.extend(p.violations(config[p.name]))
    for k in config:
        if k not in space.names:
            out.append(f"{k}: unknown parameter")
    return out


def check_config(space: SearchSpace, config: Mapping) -> Configuration:
    problems = validate_config(space, config)
    if problems:
        raise SpaceError("invalid configuration: " + "; ".join(problems))
    return config if isinstance(config, Configuration) else Configuration(config)


@dataclass(frozen=True)
class ActionSet:
    actions: tuple[Configuration, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if not self.actions:
            raise SpaceError("action set is empty")

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Configuration:
        return self.actions[i]

    def __iter__(self):
        return iter(self.actions)

    def index(self, config: Mapping) -> int:
        return self.actions.index(config)


def discretize(space: SearchSpace, bins_per_continuous: int = 4, seed=0, cap: int = 512) -> ActionSet:
    """Cartesian grid over the space, uniformly subsampled down to ``cap``.

    Continuous parameters get ``bins_per_continuous`` points (geometric when
    log-scaled), integers at most that many evenly spaced values, categoricals
    all values, and integer tuples the product of their element grids.
    """
    if bins_per_continuous < 2:
        raise SpaceError("bins_per_continuous must be >= 2")
    if cap < 1:
        raise SpaceError("cap must be >= 1")
    # flatten every parameter into one or more mixed-radix axes
    axes: list[list] = []
    owners: list[tuple[str, int | None]] = []
    for p in space.params:
        if isinstance(p, IntTuple):
            for j, g in enumerate(p.element_grids(bins_per_continuous)):
                axes.append(g)
                owners.append((p.name, j))
        else:
            axes.append(p.grid(bins_per_continuous))
            owners.append((p.name, None))
    sizes = [len(a) for a in axes]
    total = math.prod(sizes)

    if total <= cap:
        indices = range(total)
    else:
        indices = sorted(_sample_distinct(total, cap, as_rng(seed)))

    actions = []
    for flat in indices:
        values: dict[str, Any] = {}
        tuples: dict[str, list] = {}
        for axis, (name, j) in zip(reversed(range(len(axes))), reversed(owners)):
            flat, r = divmod(flat, sizes[axis])
            if j is None:
                values[name] = axes[axis][r]
            else:
                tuples.setdefault(name, [0] * space.param(name).length)[j] = axes[axis][r]
        for name, vals in tuples.items():
            values[name] = tuple(vals)
        actions.append(Configuration({n: values[n] for n in space.names}))
    return ActionSet(tuple(actions))


def _sample_distinct(total: int, k: int, rng: np.random.Generator) -> set[int]:
    if total < 2**62:
        if total <= 4 * k:
            return {int(i) for i in rng.choice(total, size=k, replace=False)}
        out: set[int] = set()
        while len(out) < k:
            out.update(int(i) for i in rng.integers(0, total, size=k - len(out)))
        return out
    # arbitrary-precision fallback for astronomically large grids
    out = set()
    nbits = total.bit_length()
    while len(out) < k:
        word = int.from_bytes(rng.bytes((nbits + 7) // 8), "little") >> (8 * ((nbits + 7) // 8) - nbits)
        if word < total:
            out.add(word)
    return out


def encode_unit_cube(space: SearchSpace, config: Mapping) -> np.ndarray:
    config = check_config(space, config)
    vec: list[float] = []
    for p in space.params:
        vec.extend(p.encode(config[p.name]))
    return np.clip(np.asarray(vec, dtype=float), 0.0, 1.0)


def decode_unit_cube(space: SearchSpace, x) -> Configuration:
    """Nearest valid configuration for a unit-cube vector (inverse of the encoding)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (space.dim,):
        raise SpaceError(f"expected a vector of length {space.dim}, got shape {x.shape}")
    return Configuration({p.name: p.decode(x[s]) for p, s in zip(space.params, space.slices().values())})


def snap_to_action(space: SearchSpace, config: Mapping, actions: ActionSet) -> int:
    """Index of the action nearest to ``config`` in the unit-cube encoding (lowest index on ties)."""
    x = encode_unit_cube(space, config)
    grid = np.stack([encode_unit_cube(space, a) for a in actions])
    return int(np.argmin(((grid - x) ** 2).sum(axis=1)))
