"""Power network description, case-file parsing and DC admittance assembly.

Network data is kept in the units of the case file (MW, $/MW^2h, per-unit
reactance). The admittance objects are per-unit on ``base_mva``.
"""

from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CaseFormatError, NetworkValidationError, SingularNetworkError

SCHEMA_VERSION = 1
BUILTIN_CASES = ("case30", "case118")


class CaseWarning(UserWarning):
    """Non-fatal oddities met while reading a case file."""


@dataclass(frozen=True)
class Bus:
    id: int
    load: float  # MW


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float  # MW
    p_max: float  # MW
    c2: float  # $/MW^2h
    c1: float  # $/MWh
    c0: float  # $/h


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    x: float  # per-unit reactance
    capacity: float  # MW


@dataclass(frozen=True)
class PowerNetwork:
    """Immutable DC grid description.

    Buses are referred to by their external ids; ``bus_pos`` maps an id to its
    row in every bus-indexed array. Generators are indexed in file order.
    """

    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    slack_bus: int
    base_mva: float = 100.0
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "branches", tuple(self.branches))
        self._validate()

    def _validate(self):
        if not self.buses:
            raise NetworkValidationError("network has no buses")
        if not self.base_mva > 0:
            raise NetworkValidationError(f"base_mva must be positive, got {self.base_mva}")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkValidationError("duplicate bus ids")
        known = set(ids)
        if self.slack_bus not in known:
            raise NetworkValidationError(f"slack bus {self.slack_bus} is not a bus of the network")
        for b in self.buses:
            if not np.isfinite(b.load):
                raise NetworkValidationError(f"bus {b.id}: load is not finite")
        gen_buses = [g.bus for g in self.generators]
        if len(set(gen_buses)) != len(gen_buses):
            raise NetworkValidationError("more than one generator on a bus")
        for i, g in enumerate(self.generators):
            if g.bus not in known:
                raise NetworkValidationError(f"generator {i} sits on unknown bus {g.bus}")
            if not g.p_min <= g.p_max:
                raise NetworkValidationError(
                    f"generator {i} at bus {g.bus}: p_min {g.p_min} > p_max {g.p_max}"
                )
            if g.c2 < 0:
                raise NetworkValidationError(f"generator {i} at bus {g.bus}: negative quadratic cost")
        if self.slack_bus not in gen_buses:
            raise NetworkValidationError(f"slack bus {self.slack_bus} hosts no generator")
        for k, br in enumerate(self.branches):
            if br.from_bus not in known or br.to_bus not in known:
                raise NetworkValidationError(f"branch {k} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise NetworkValidationError(f"branch {k} is a self-loop")
            if not br.x > 0:
                raise NetworkValidationError(f"branch {k} ({br.from_bus}-{br.to_bus}): reactance must be positive")
            if not br.capacity > 0:
                raise NetworkValidationError(f"branch {k} ({br.from_bus}-{br.to_bus}): capacity must be positive")
        n = len(self.buses)
        if n > 1:
            adj = coo_matrix(
                (np.ones(len(self.branches)), (self.from_idx, self.to_idx)), shape=(n, n)
            )
            n_comp, _ = connected_components(adj, directed=False)
            if n_comp != 1:
                raise NetworkValidationError(f"network is disconnected ({n_comp} islands)")

    # -- index helpers -----------------------------------------------------

    @cached_property
    def bus_pos(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def slack_pos(self) -> int:
        return self.bus_pos[self.slack_bus]

    @cached_property
    def slack_gen(self) -> int:
        return next(i for i, g in enumerate(self.generators) if g.bus == self.slack_bus)

    @cached_property
    def non_slack_pos(self) -> np.ndarray:
        return _ro(np.array([i for i in range(self.n_bus) if i != self.slack_pos], dtype=int))

    @cached_property
    def load(self) -> np.ndarray:
        return _ro(np.array([b.load for b in self.buses], dtype=float))

    @cached_property
    def load_pos(self) -> np.ndarray:
        """Positions of buses with non-zero default load."""
        return _ro(np.flatnonzero(self.load != 0.0))

    @cached_property
    def gen_pos(self) -> np.ndarray:
        return _ro(np.array([self.bus_pos[g.bus] for g in self.generators], dtype=int))

    @cached_property
    def p_min(self) -> np.ndarray:
        return _ro(np.array([g.p_min for g in self.generators], dtype=float))

    @cached_property
    def p_max(self) -> np.ndarray:
        return _ro(np.array([g.p_max for g in self.generators], dtype=float))

    @cached_property
    def cost_coeffs(self) -> np.ndarray:
        """(n_gen, 3) array of (c2, c1, c0)."""
        return _ro(np.array([[g.c2, g.c1, g.c0] for g in self.generators], dtype=float).reshape(-1, 3))

    @cached_property
    def predicted_gens(self) -> np.ndarray:
        """Generators whose output is a learned scaling factor.

        Excludes the slack generator (set by balance) and generators with a
        zero-width range.
        """
        keep = [
            i for i, g in enumerate(self.generators)
            if i != self.slack_gen and g.p_max > g.p_min
        ]
        return _ro(np.array(keep, dtype=int))

    @cached_property
    def fixed_gens(self) -> np.ndarray:
        keep = [
            i for i, g in enumerate(self.generators)
            if i != self.slack_gen and not g.p_max > g.p_min
        ]
        return _ro(np.array(keep, dtype=int))

    @cached_property
    def from_idx(self) -> np.ndarray:
        return _ro(np.array([self.bus_pos[b.from_bus] for b in self.branches], dtype=int))

    @cached_property
    def to_idx(self) -> np.ndarray:
        return _ro(np.array([self.bus_pos[b.to_bus] for b in self.branches], dtype=int))

    @cached_property
    def reactance(self) -> np.ndarray:
        return _ro(np.array([b.x for b in self.branches], dtype=float))

    @cached_property
    def capacity(self) -> np.ndarray:
        return _ro(np.array([b.capacity for b in self.branches], dtype=float))

    @cached_property
    def gen_incidence(self) -> np.ndarray:
        """(n_bus, n_gen) 0/1 matrix placing generators on buses."""
        cg = np.zeros((self.n_bus, self.n_gen))
        cg[self.gen_pos, np.arange(self.n_gen)] = 1.0
        return _ro(cg)

    # -- identity ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "base_mva": self.base_mva,
            "slack_bus": self.slack_bus,
            "buses": [{"id": b.id, "load_mw": b.load} for b in self.buses],
            "generators": [
                {"bus": g.bus, "p_min_mw": g.p_min, "p_max_mw": g.p_max, "cost": [g.c2, g.c1, g.c0]}
                for g in self.generators
            ],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "x_pu": br.x, "capacity_mw": br.capacity}
                for br in self.branches
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @cached_property
    def digest(self) -> str:
        """Content hash of the network (name excluded)."""
        d = self.to_dict()
        d.pop("name")
        payload = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    @property
    def network_id(self) -> str:
        return f"{self.name}:{self.digest}"

    def total_load(self) -> float:
        return float(self.load.sum())


def _ro(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# -- native json ---------------------------------------------------------------


def network_from_dict(d: dict) -> PowerNetwork:
    try:
        version = d["schema_version"]
        if version != SCHEMA_VERSION:
            raise CaseFormatError(f"unsupported schema_version {version}", field="schema_version")
        buses = [Bus(int(b["id"]), float(b["load_mw"])) for b in d["buses"]]
        gens = []
        for g in d["generators"]:
            c2, c1, c0 = (float(v) for v in g["cost"])
            gens.append(Generator(int(g["bus"]), float(g["p_min_mw"]), float(g["p_max_mw"]), c2, c1, c0))
        branches = [
            Branch(int(b["from"]), int(b["to"]), float(b["x_pu"]), float(b["capacity_mw"]))
            for b in d["branches"]
        ]
        return PowerNetwork(
            buses=tuple(buses),
            generators=tuple(gens),
            branches=tuple(branches),
            slack_bus=int(d["slack_bus"]),
            base_mva=float(d["base_mva"]),
            name=str(d.get("name", "network")),
        )
    except KeyError as exc:
        raise CaseFormatError("missing key", field=exc.args[0]) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (CaseFormatError, NetworkValidationError)):
            raise
        raise CaseFormatError(f"bad value: {exc}") from None


# -- MATPOWER subset -----------------------------------------------------------

_TABLES = {"bus": 3, "gen": 10, "branch": 6, "gencost": 4}
_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # '%' inside the case grammar only starts comments
    return line.split("%", 1)[0]


def _parse_number(tok: str, lineno: int, table: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise CaseFormatError(f"not a number: {tok!r}", line=lineno, field=table) from None


def read_matpower_tables(text: str) -> tuple[float | None, dict[str, list[tuple[int, list[float]]]]]:
    """Extract baseMVA and the numeric tables of a MATPOWER ``.m`` file.

    Returns ``(base_mva, tables)`` where each table is a list of
    ``(line number, row values)``.
    """
    base_mva = None
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None:
            m = _ASSIGN.match(line)
            if not m:
                continue
            key, rhs = m.group(1), m.group(2).strip()
            if key == "baseMVA":
                base_mva = _parse_number(rhs.rstrip(";").strip(), lineno, "baseMVA")
                continue
            if not rhs.startswith("["):
                continue
            if key in tables:
                raise CaseFormatError(f"table {key!r} defined twice", line=lineno, field=key)
            current = key
            tables[key] = []
            line = rhs[1:]
        end = "]" in line
        body = line.split("]", 1)[0]
        for chunk in body.split(";"):
            toks = chunk.replace(",", " ").split()
            if toks:
                tables[current].append((lineno, [_parse_number(t, lineno, current) for t in toks]))
        if end:
            current = None
    if current is not None:
        raise CaseFormatError(f"table {current!r} is not closed", field=current)
    return base_mva, tables


def parse_matpower(text: str, name: str = "network") -> PowerNetwork:
    base_mva, tables = read_matpower_tables(text)
    for key in sorted(set(tables) - set(_TABLES)):
        warnings.warn(f"ignoring MATPOWER table {key!r}", CaseWarning, stacklevel=3)
    for key, width in _TABLES.items():
        if key not in tables:
            raise CaseFormatError(f"missing table {key!r}", field=key)
        for lineno, row in tables[key]:
            if len(row) < width:
                raise CaseFormatError(
                    f"{key} row has {len(row)} columns, need at least {width}", line=lineno, field=key
                )
    if base_mva is None:
        raise CaseFormatError("missing baseMVA", field="baseMVA")

    buses = []
    ref = []
    for lineno, row in tables["bus"]:
        if not float(row[0]).is_integer():
            raise CaseFormatError("bus id must be an integer", line=lineno, field="bus")
        bus_type = int(row[1])
        if bus_type == 4:
            raise CaseFormatError("isolated buses are not supported", line=lineno, field="bus")
        if bus_type == 3:
            ref.append(int(row[0]))
        buses.append(Bus(int(row[0]), row[2]))

    gen_rows = tables["gen"]
    cost_rows = tables["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise CaseFormatError(
            f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators", field="gencost"
        )
    if len(cost_rows) > len(gen_rows):
        warnings.warn("ignoring reactive-power gencost rows", CaseWarning, stacklevel=3)

    per_bus: dict[int, Generator] = {}
    order: list[int] = []
    for (lineno, g), (clineno, c) in zip(gen_rows, cost_rows):
        if g[7] <= 0:
            continue
        c2, c1, c0 = _polynomial_cost(c, clineno)
        gen = Generator(int(g[0]), g[9], g[8], c2, c1, c0)
        prev = per_bus.get(gen.bus)
        if prev is None:
            per_bus[gen.bus] = gen
            order.append(gen.bus)
        elif (prev.c2, prev.c1, prev.c0) == (c2, c1, c0):
            per_bus[gen.bus] = Generator(gen.bus, prev.p_min + gen.p_min, prev.p_max + gen.p_max, c2, c1, c0)
        else:
            raise NetworkValidationError(
                f"bus {gen.bus} hosts several generators with different costs (line {lineno})"
            )
    gens = [per_bus[b] for b in order]

    branches = []
    for lineno, row in tables["branch"]:
        status = row[10] if len(row) > 10 else 1.0
        if status <= 0:
            continue
        branches.append(Branch(int(row[0]), int(row[1]), row[3], row[5]))

    if len(ref) > 1:
        raise NetworkValidationError(f"several reference buses: {ref}")
    if ref:
        slack = ref[0]
    else:
        if not gens:
            raise NetworkValidationError("no generators, cannot choose a slack bus")
        slack = min(g.bus for g in gens)
        warnings.warn(f"no reference bus declared, using bus {slack}", CaseWarning, stacklevel=3)
    return PowerNetwork(tuple(buses), tuple(gens), tuple(branches), slack, base_mva, name)


def _polynomial_cost(row: list[float], lineno: int) -> tuple[float, float, float]:
    if int(row[0]) != 2:
        raise CaseFormatError("only polynomial (model 2) costs are supported", line=lineno, field="gencost")
    n = int(row[3])
    coeffs = row[4:4 + n]
    if len(coeffs) != n:
        raise CaseFormatError(f"expected {n} cost coefficients", line=lineno, field="gencost")
    if n > 3 and any(coeffs[: n - 3]):
        raise CaseFormatError("cost polynomials above degree 2 are not supported", line=lineno, field="gencost")
    coeffs = [0.0] * (3 - n) + list(coeffs[-3:]) if n < 3 else list(coeffs[-3:])
    return coeffs[0], coeffs[1], coeffs[2]


def case_path(case: str | Path) -> Path:
    """Resolve a bundled case name (``case30``) or a filesystem path."""
    if str(case) in BUILTIN_CASES:
        return Path(str(resources.files("prevopf") / "cases" / f"{case}.m"))
    return Path(case)


def parse_case(path, format: str | None = None) -> PowerNetwork:
    """Read a network from a MATPOWER-subset ``.m`` file or native JSON.

    ``format`` is ``"matpower"`` or ``"json"``; inferred from the suffix when
    omitted. Bundled case names are accepted in place of a path.
    """
    path = case_path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "matpower"
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseFormatError(f"cannot read {path}: {exc.strerror}") from None
    if format == "json":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseFormatError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        return network_from_dict(d)
    if format == "matpower":
        return parse_matpower(text, name=path.stem)
    raise ValueError(f"unknown case format {format!r}")


def write_json(net: PowerNetwork, path) -> None:
    Path(path).write_text(net.to_json())


# -- admittance ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdmittanceSystem:
    """Per-unit DC network matrices with the slack bus removed where noted.

    ``x_incidence @ theta`` gives per-unit branch flows ``(θi-θj)/x``.
    ``lu`` factorizes ``b_reduced`` once for reuse.
    """

    b_full: np.ndarray
    b_reduced: np.ndarray
    x_incidence: np.ndarray
    x_incidence_reduced: np.ndarray
    slack_pos: int
    non_slack_pos: np.ndarray
    gen_pos: np.ndarray
    base_mva: float
    lu: tuple = field(repr=False)

    @property
    def n_bus(self) -> int:
        return self.b_full.shape[0]

    def solve_reduced(self, rhs: np.ndarray, trans: int = 0) -> np.ndarray:
        if rhs.shape[0] == 0:
            return np.array(rhs, dtype=float)
        return scipy.linalg.lu_solve(self.lu, rhs, trans=trans, check_finite=False)


def build_admittance(net: PowerNetwork) -> AdmittanceSystem:
    n, e = net.n_bus, net.n_branch
    inv_x = 1.0 / net.reactance
    x_inc = np.zeros((e, n))
    rows = np.arange(e)
    x_inc[rows, net.from_idx] = inv_x
    x_inc[rows, net.to_idx] = -inv_x
    # B = Aᵀ diag(1/x) A with A the signed incidence
    inc = np.zeros((e, n))
    inc[rows, net.from_idx] = 1.0
    inc[rows, net.to_idx] = -1.0
    b_full = inc.T @ x_inc
    keep = net.non_slack_pos
    b_red = b_full[np.ix_(keep, keep)]
    x_red = x_inc[:, keep]
    if len(keep):
        lu, piv = scipy.linalg.lu_factor(b_red, check_finite=True)
        diag = np.abs(np.diag(lu))
        if diag.min() <= 1e-12 * max(diag.max(), 1.0):
            raise SingularNetworkError("reduced susceptance matrix is singular")
    else:
        lu, piv = np.zeros((0, 0)), np.zeros(0, dtype=np.int32)
    return AdmittanceSystem(
        b_full=_ro(b_full),
        b_reduced=_ro(b_red),
        x_incidence=_ro(x_inc),
        x_incidence_reduced=_ro(x_red),
        slack_pos=net.slack_pos,
        non_slack_pos=net.non_slack_pos,
        gen_pos=net.gen_pos,
        base_mva=net.base_mva,
        lu=(lu, piv),
    )
