"""Network data: MATPOWER-style case parsing, bus admittance matrix and demand scaling."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DomainError, ParseError, SingularBranchError, ValidationError

PQ, PV, SLACK = "pq", "pv", "slack"
_BUS_TYPES = {1: PQ, 2: PV, 3: SLACK}


@dataclass(frozen=True)
class Bus:
    id: int
    demand_p: float = 0.0
    demand_q: float = 0.0
    gen_p: float = 0.0
    gen_q: float = 0.0
    is_zero_injection: bool = False
    v_setpoint: float = 1.0
    bus_kind: str = PQ

    def __post_init__(self):
        if self.bus_kind not in (PQ, PV, SLACK):
            raise ValidationError(f"bus {self.id}: unknown bus kind {self.bus_kind!r}")
        if self.is_zero_injection and any(
            (self.demand_p, self.demand_q, self.gen_p, self.gen_q)
        ):
            raise ValidationError(f"bus {self.id}: zero-injection bus has load or generation")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    tap: float = 1.0
    status: bool = True

    def __post_init__(self):
        if self.tap <= 0:
            raise ValidationError(f"branch {self.from_bus}-{self.to_bus}: tap must be positive")

    def end_admittances(self):
        """Return ``(y_ff, y_ft, y_tf, y_tt)`` of the pi model, tap on the from side."""
        if self.r == 0 and self.x == 0:
            raise SingularBranchError(
                f"branch {self.from_bus}-{self.to_bus} has zero series impedance"
            )
        y = 1.0 / complex(self.r, self.x)
        half_sh = 0.5j * self.b_sh
        tau = self.tap
        return (y + half_sh) / tau**2, -y / tau, -y / tau, y + half_sh


@dataclass(frozen=True)
class AdmittanceMatrix:
    g: np.ndarray
    b: np.ndarray

    @property
    def complex(self):
        return self.g + 1j * self.b

    @property
    def shape(self):
        return self.g.shape


@dataclass(frozen=True)
class Network:
    """Validated network. Bus ``id`` equals its position; ``external_ids`` maps back to case numbering."""

    buses: tuple
    branches: tuple
    base_mva: float = 100.0
    external_ids: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.external_ids is None:
            object.__setattr__(self, "external_ids", tuple(range(1, len(self.buses) + 1)))
        else:
            object.__setattr__(self, "external_ids", tuple(int(i) for i in self.external_ids))
        validate_network(self)

    @property
    def n_bus(self):
        return len(self.buses)

    @cached_property
    def admittance(self):
        return build_admittance(self)

    @cached_property
    def slack(self):
        return next(bus.id for bus in self.buses if bus.bus_kind == SLACK)

    @cached_property
    def _index_of_external(self):
        return {ext: k for k, ext in enumerate(self.external_ids)}

    def index_of(self, external_id):
        """Internal index of an external bus number."""
        try:
            return self._index_of_external[int(external_id)]
        except KeyError:
            raise ValidationError(f"bus {external_id} does not exist") from None

    def label(self, index):
        return self.external_ids[index]

    def in_service(self):
        return [br for br in self.branches if br.status]

    def find_branch(self, i, j):
        """Locate the in-service branch joining internal buses i and j.

        Returns ``(branch, at_from_end)``.
        """
        hits = []
        for br in self.in_service():
            if (br.from_bus, br.to_bus) == (i, j):
                hits.append((br, True))
            elif (br.from_bus, br.to_bus) == (j, i):
                hits.append((br, False))
        if not hits:
            raise ValidationError(
                f"no in-service branch between buses {self.label(i)} and {self.label(j)}"
            )
        if len(hits) > 1:
            raise ValidationError(
                f"parallel branches between buses {self.label(i)} and {self.label(j)}; "
                "flow location is ambiguous"
            )
        return hits[0]

    def zero_injection_buses(self):
        return [bus.id for bus in self.buses if bus.is_zero_injection]


def validate_network(net):
    n = len(net.buses)
    if n == 0:
        raise ValidationError("network has no buses")
    if len(net.external_ids) != n:
        raise ValidationError("external id map does not match the bus list")
    if len(set(net.external_ids)) != n:
        seen = set()
        for ext in net.external_ids:
            if ext in seen:
                raise ValidationError(f"duplicate bus id {ext}")
            seen.add(ext)
    for k, bus in enumerate(net.buses):
        if bus.id != k:
            raise ValidationError("bus ids must be contiguous 0..N-1 in list order")
    slacks = [bus.id for bus in net.buses if bus.bus_kind == SLACK]
    if len(slacks) != 1:
        raise ValidationError(f"expected exactly one slack bus, found {len(slacks)}")
    for br in net.branches:
        for end in (br.from_bus, br.to_bus):
            if not 0 <= end < n:
                raise ValidationError(f"branch references nonexistent bus {end}")
        if br.from_bus == br.to_bus:
            raise ValidationError(f"branch loops on bus {net.external_ids[br.from_bus]}")
    live = [br for br in net.branches if br.status]
    if n > 1:
        rows = [br.from_bus for br in live]
        cols = [br.to_bus for br in live]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, _ = connected_components(graph, directed=False)
        if n_comp != 1:
            raise ValidationError(f"network is not connected ({n_comp} islands)")


def build_admittance(net):
    """Assemble G and B from the in-service branches (pi model, from-side taps)."""
    n = net.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in net.in_service():
        y_ff, y_ft, y_tf, y_tt = br.end_admittances()
        f, t = br.from_bus, br.to_bus
        y[f, f] += y_ff
        y[f, t] += y_ft
        y[t, f] += y_tf
        y[t, t] += y_tt
    return AdmittanceMatrix(g=y.real.copy(), b=y.imag.copy())


def scale_demands(net, factor):
    """Multiply every demand by ``factor``; PV generation follows, the slack absorbs the rest."""
    factor = float(factor)
    if not np.isfinite(factor) or factor <= 0:
        raise DomainError(f"scale factor must be positive, got {factor}")
    buses = []
    for bus in net.buses:
        gen_p = bus.gen_p * factor if bus.bus_kind == PV else bus.gen_p
        buses.append(
            dataclasses.replace(
                bus,
                demand_p=bus.demand_p * factor,
                demand_q=bus.demand_q * factor,
                gen_p=gen_p,
            )
        )
    return Network(buses, net.branches, net.base_mva, net.external_ids)


# --- case file parsing -------------------------------------------------------

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")


def _strip_comment(line):
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_tables(text):
    """Yield ``(name, value)`` where value is a float or a list of ``(line_no, row)``."""
    lines = text.splitlines()
    k = 0
    out = {}
    while k < len(lines):
        line = _strip_comment(lines[k])
        m = _ASSIGN.search(line)
        if not m:
            k += 1
            continue
        name = m.group(1)
        rest = line[m.end():]
        if "[" not in rest:
            token = rest.strip().rstrip(";").strip()
            if token.startswith("'") or token.startswith('"'):
                out[name] = token.strip("'\"")
                k += 1
                continue
            try:
                out[name] = float(token)
            except ValueError:
                raise ParseError(f"cannot read value of mpc.{name}: {token!r}", k + 1) from None
            k += 1
            continue
        start_line = k + 1
        body = rest[rest.index("[") + 1:]
        rows = []
        closed = False
        line_no = start_line
        while True:
            if "]" in body:
                body = body[: body.index("]")]
                closed = True
            for chunk in body.split(";"):
                tokens = chunk.replace(",", " ").split()
                if not tokens:
                    continue
                try:
                    rows.append((line_no, [float(tok) for tok in tokens]))
                except ValueError:
                    raise ParseError(f"malformed record in mpc.{name}: {chunk.strip()!r}", line_no) from None
            if closed:
                break
            k += 1
            if k >= len(lines):
                raise ParseError(f"unterminated table mpc.{name}", start_line)
            line_no = k + 1
            body = _strip_comment(lines[k])
        out[name] = rows
        k += 1
    return out


def _require(rows, name, min_cols):
    for line_no, row in rows:
        if len(row) < min_cols:
            raise ParseError(
                f"mpc.{name} record has {len(row)} columns, needs at least {min_cols}", line_no
            )


def parse_case(text):
    """Parse MATPOWER case text into a per-unit :class:`Network`.

    Buses are renumbered 0..N-1 in file order; the original numbers live in
    ``Network.external_ids``.
    """
    tables = _parse_tables(text)
    for name in ("bus", "branch", "gen"):
        if name not in tables:
            raise ParseError(f"missing table mpc.{name}")
    base = tables.get("baseMVA", 100.0)
    if not isinstance(base, float) or base <= 0:
        raise ParseError("mpc.baseMVA must be a positive number")
    bus_rows, gen_rows, br_rows = tables["bus"], tables["gen"], tables["branch"]
    _require(bus_rows, "bus", 4)
    _require(gen_rows, "gen", 6)
    _require(br_rows, "branch", 5)

    ext_ids = []
    index = {}
    for line_no, row in bus_rows:
        ext = int(row[0])
        if ext in index:
            raise ValidationError(f"duplicate bus id {ext} (line {line_no})")
        index[ext] = len(ext_ids)
        ext_ids.append(ext)
        if len(row) >= 6 and (row[4] != 0 or row[5] != 0):
            raise ValidationError(f"bus {ext}: bus shunts (Gs/Bs) are not supported (line {line_no})")

    def lookup(ext, line_no):
        if ext not in index:
            raise ValidationError(f"line {line_no}: reference to nonexistent bus {ext}")
        return index[ext]

    gen_p = np.zeros(len(ext_ids))
    gen_q = np.zeros(len(ext_ids))
    v_set = {}
    has_gen = np.zeros(len(ext_ids), dtype=bool)
    for line_no, row in gen_rows:
        if len(row) >= 8 and row[7] <= 0:
            continue
        k = lookup(int(row[0]), line_no)
        gen_p[k] += row[1] / base
        gen_q[k] += row[2] / base
        v_set[k] = row[5]
        has_gen[k] = True

    buses = []
    for k, (line_no, row) in enumerate(bus_rows):
        code = int(row[1])
        if code not in _BUS_TYPES:
            raise ValidationError(f"bus {ext_ids[k]}: unsupported bus type {code} (line {line_no})")
        kind = _BUS_TYPES[code]
        if kind != PQ and not has_gen[k]:
            raise ValidationError(f"bus {ext_ids[k]}: type {code} without an in-service generator")
        pd, qd = row[2] / base, row[3] / base
        vm = row[7] if len(row) >= 8 else 1.0
        zero = (not has_gen[k]) and pd == 0 and qd == 0
        buses.append(
            Bus(
                id=k,
                demand_p=pd,
                demand_q=qd,
                gen_p=float(gen_p[k]),
                gen_q=float(gen_q[k]),
                is_zero_injection=zero,
                v_setpoint=float(v_set.get(k, vm if vm > 0 else 1.0)),
                bus_kind=kind,
            )
        )

    branches = []
    for line_no, row in br_rows:
        f = lookup(int(row[0]), line_no)
        t = lookup(int(row[1]), line_no)
        tap = row[8] if len(row) >= 9 and row[8] != 0 else 1.0
        if len(row) >= 10 and row[9] != 0:
            raise ValidationError(f"line {line_no}: phase-shifting transformers are not supported")
        status = bool(row[10]) if len(row) >= 11 else True
        if row[2] == 0 and row[3] == 0:
            raise SingularBranchError(f"line {line_no}: branch {int(row[0])}-{int(row[1])} has zero impedance")
        branches.append(Branch(f, t, row[2], row[3], row[4], tap, status))

    return Network(buses, branches, base, ext_ids)


def load_case(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read case file {path}: {exc.strerror}") from None
    return parse_case(text)
