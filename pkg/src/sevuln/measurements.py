"""Measurement configurations, the measurement function and synthetic measurement sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import LookupFailure, ParseError, ValidationError
from .expressions import P_FLOW, P_INJ, Q_FLOW, Q_INJ, compile_expressions
from .powerflow import StateVector, solve_power_flow

V_MAG = "V"
KINDS = (V_MAG, P_INJ, Q_INJ, P_FLOW, Q_FLOW)
_KIND_RANK = {k: r for r, k in enumerate(KINDS)}
_PREFIX = {V_MAG: "v", P_INJ: "P", Q_INJ: "Q", P_FLOW: "P", Q_FLOW: "Q"}

DEFAULT_W_V = 1e4
DEFAULT_W_OTHER = 2.5e3


def _sort_key(kind, loc):
    loc_key = (loc,) if np.isscalar(loc) else tuple(loc)
    return (_KIND_RANK[kind], loc_key)


@dataclass(frozen=True)
class MeasurementConfig:
    """Meter placement on internal bus indices; flow pairs ``(i, j)`` are metered at ``i``."""

    v_buses: tuple = ()
    p_inj_buses: tuple = ()
    q_inj_buses: tuple = ()
    zero_inj_buses: tuple = ()
    p_flow_branches: tuple = ()
    q_flow_branches: tuple = ()
    weights: dict = field(default_factory=dict)
    default_w_v: float = DEFAULT_W_V
    default_w_other: float = DEFAULT_W_OTHER

    def __post_init__(self):
        norm = lambda xs: tuple(sorted({int(x) for x in xs}))
        pairs = lambda xs: tuple(sorted({(int(a), int(b)) for a, b in xs}))
        object.__setattr__(self, "v_buses", norm(self.v_buses))
        object.__setattr__(self, "p_inj_buses", norm(self.p_inj_buses))
        object.__setattr__(self, "q_inj_buses", norm(self.q_inj_buses))
        object.__setattr__(self, "zero_inj_buses", norm(self.zero_inj_buses))
        object.__setattr__(self, "p_flow_branches", pairs(self.p_flow_branches))
        object.__setattr__(self, "q_flow_branches", pairs(self.q_flow_branches))
        z = set(self.zero_inj_buses)
        if z & set(self.p_inj_buses) or z & set(self.q_inj_buses):
            raise ValidationError("zero-injection buses cannot also carry injection measurements")
        if self.default_w_v <= 0 or self.default_w_other <= 0:
            raise ValidationError("weights must be positive")
        for key, w in self.weights.items():
            if not w > 0:
                raise ValidationError(f"weight for {key} must be positive")

    def entries(self):
        """Canonical ``(kind, location)`` list: V, Pinj, Qinj, Pflow, Qflow, each sorted."""
        return (
            [(V_MAG, i) for i in self.v_buses]
            + [(P_INJ, i) for i in self.p_inj_buses]
            + [(Q_INJ, i) for i in self.q_inj_buses]
            + [(P_FLOW, ij) for ij in self.p_flow_branches]
            + [(Q_FLOW, ij) for ij in self.q_flow_branches]
        )

    @property
    def n_measurements(self):
        return len(self.entries())

    def weight(self, kind, loc):
        key = (kind, loc if np.isscalar(loc) else tuple(loc))
        if key in self.weights:
            return float(self.weights[key])
        return self.default_w_v if kind == V_MAG else self.default_w_other

    def validate_against(self, net):
        n = net.n_bus
        for kind, loc in self.entries():
            locs = (loc,) if np.isscalar(loc) else loc
            for b in locs:
                if not 0 <= b < n:
                    raise LookupFailure(f"{kind} location {loc} not in network")
            if kind in (P_FLOW, Q_FLOW):
                net.find_branch(*loc)
        for i in self.zero_inj_buses:
            if not 0 <= i < n:
                raise LookupFailure(f"zero-injection bus {i} not in network")
            if not net.buses[i].is_zero_injection:
                raise ValidationError(
                    f"bus {net.label(i)} is declared zero-injection but has load or generation"
                )


@dataclass(frozen=True)
class Measurement:
    kind: str
    location: object
    value: float
    weight: float

    def __post_init__(self):
        if self.kind not in _KIND_RANK:
            raise ValidationError(f"unknown measurement kind {self.kind!r}")
        if not self.weight > 0:
            raise ValidationError("measurement weight must be positive")
        if not np.isscalar(self.location):
            object.__setattr__(self, "location", tuple(int(e) for e in self.location))
        else:
            object.__setattr__(self, "location", int(self.location))

    @property
    def key(self):
        return (self.kind, self.location)


def measurement_label(kind, loc, net=None):
    lab = (lambda i: net.label(i)) if net is not None else (lambda i: i)
    if kind in (P_FLOW, Q_FLOW):
        i, j = loc
        return f"{_PREFIX[kind]}_{lab(i)}-{lab(j)}"
    return f"{_PREFIX[kind]}_{lab(loc)}"


@dataclass(frozen=True)
class MeasurementSet:
    measurements: tuple
    config: MeasurementConfig
    truth: StateVector = None

    def __post_init__(self):
        ms = tuple(self.measurements)
        order = sorted(range(len(ms)), key=lambda k: (_sort_key(ms[k].kind, ms[k].location), k))
        object.__setattr__(self, "measurements", tuple(ms[k] for k in order))

    def __len__(self):
        return len(self.measurements)

    @property
    def z(self):
        return np.array([m.value for m in self.measurements])

    @property
    def w(self):
        return np.array([m.weight for m in self.measurements])

    @property
    def keys(self):
        return [m.key for m in self.measurements]

    @cached_property
    def _positions(self):
        pos = {}
        for k, m in enumerate(self.measurements):
            pos.setdefault(m.key, k)
        return pos

    def index_of(self, kind, location):
        loc = location if np.isscalar(location) else tuple(int(e) for e in location)
        try:
            return self._positions[(kind, loc)]
        except KeyError:
            raise LookupFailure(f"no {kind} measurement at {location}") from None

    def measurement_at(self, index):
        return self.measurements[index]

    def labels(self, net=None):
        return [measurement_label(m.kind, m.location, net) for m in self.measurements]

    def with_values(self, z=None, w=None):
        """Copy with replaced values and/or weights (canonical order preserved)."""
        z = self.z if z is None else np.asarray(z, dtype=float)
        w = self.w if w is None else np.asarray(w, dtype=float)
        if z.shape != (len(self),) or w.shape != (len(self),):
            raise ValidationError("value/weight vectors must match the measurement count")
        ms = tuple(
            Measurement(m.kind, m.location, float(zi), float(wi))
            for m, zi, wi in zip(self.measurements, z, w)
        )
        return MeasurementSet(ms, self.config, self.truth)


def _check_state(state, net):
    if len(state.v) != net.n_bus:
        raise ValidationError("state dimension does not match the network")


def measurement_function(state, net, cfg):
    """Evaluate h(v, theta) for every configured measurement in canonical order."""
    _check_state(state, net)
    return evaluate_entries(state, net, cfg.entries())


def evaluate_entries(state, net, entries):
    out = np.zeros(len(entries))
    power_pos = [k for k, (kind, _) in enumerate(entries) if kind != V_MAG]
    for k, (kind, loc) in enumerate(entries):
        if kind == V_MAG:
            if not 0 <= loc < net.n_bus:
                raise LookupFailure(f"V location {loc} not in network")
            out[k] = state.v[loc]
    if power_pos:
        expr = compile_expressions(net, [entries[k] for k in power_pos])
        out[power_pos] = expr.values(np.asarray(state.v), np.asarray(state.theta))
    return out


def measurement_jacobian(state, net, cfg):
    """Analytic dh/d[v, theta] over the full polar vector (canonical row order)."""
    entries = cfg.entries()
    n = net.n_bus
    jac = np.zeros((len(entries), 2 * n))
    power_pos = [k for k, (kind, _) in enumerate(entries) if kind != V_MAG]
    for k, (kind, loc) in enumerate(entries):
        if kind == V_MAG:
            jac[k, loc] = 1.0
    if power_pos:
        expr = compile_expressions(net, [entries[k] for k in power_pos])
        jac[power_pos] = expr.jacobian(np.asarray(state.v), np.asarray(state.theta))
    return jac


def synthesize_measurements(net, cfg, noise_sigma_scale=0.0, seed=0, truth=None):
    """Measurements ``z = h(truth) + e`` with ``e ~ N(0, noise_sigma_scale / sqrt(w))``.

    The truth comes from an AC power flow unless supplied.
    """
    if noise_sigma_scale < 0:
        raise ValidationError("noise scale must be non-negative")
    cfg.validate_against(net)
    if truth is None:
        truth = solve_power_flow(net)
    entries = cfg.entries()
    h = evaluate_entries(truth, net, entries)
    w = np.array([cfg.weight(kind, loc) for kind, loc in entries])
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(len(entries)) * (noise_sigma_scale / np.sqrt(w))
    z = h + eps if noise_sigma_scale > 0 else h
    ms = tuple(Measurement(kind, loc, float(zi), float(wi)) for (kind, loc), zi, wi in zip(entries, z, w))
    return MeasurementSet(ms, cfg, truth)


# --- JSON configuration ------------------------------------------------------

def _bus_list(spec, net, name, default_all=None):
    if isinstance(spec, str):
        if spec == "all":
            return list(range(net.n_bus))
        if spec == "generators":
            return [b.id for b in net.buses if b.bus_kind != "pq"]
        if spec == "auto" and name == "zero_inj":
            return net.zero_injection_buses()
        raise ParseError(f"unknown shorthand {spec!r} for {name}")
    return [net.index_of(b) for b in spec]


def _pair_list(spec, net, name):
    if isinstance(spec, str):
        if spec == "from_ends":
            return [(br.from_bus, br.to_bus) for br in net.in_service()]
        if spec == "to_ends":
            return [(br.to_bus, br.from_bus) for br in net.in_service()]
        raise ParseError(f"unknown shorthand {spec!r} for {name}")
    out = []
    for item in spec:
        if len(item) != 2:
            raise ParseError(f"{name} entries must be [from, to] pairs")
        out.append((net.index_of(item[0]), net.index_of(item[1])))
    return out


_JSON_KIND = {
    "V": V_MAG, "v": V_MAG,
    "Pinj": P_INJ, "p_inj": P_INJ,
    "Qinj": Q_INJ, "q_inj": Q_INJ,
    "Pflow": P_FLOW, "p_flow": P_FLOW,
    "Qflow": Q_FLOW, "q_flow": Q_FLOW,
}


def config_from_dict(data, net):
    """Build a :class:`MeasurementConfig` from the JSON structure (external bus numbers).

    Bus lists accept the shorthands ``"all"`` and ``"generators"``; ``zero_inj``
    also accepts ``"auto"``; flow lists accept ``"from_ends"`` and ``"to_ends"``.
    """
    if not isinstance(data, dict):
        raise ParseError("measurement config must be a JSON object")
    wspec = data.get("weights", {})
    overrides = {}
    for item in wspec.get("overrides", []):
        try:
            kind = _JSON_KIND[item["kind"]]
            loc = item["location"]
            w = float(item["weight"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"malformed weight override {item!r}") from None
        if kind in (P_FLOW, Q_FLOW):
            loc = (net.index_of(loc[0]), net.index_of(loc[1]))
        else:
            loc = net.index_of(loc)
        overrides[(kind, loc)] = w
    cfg = MeasurementConfig(
        v_buses=_bus_list(data.get("v", []), net, "v"),
        p_inj_buses=_bus_list(data.get("p_inj", []), net, "p_inj"),
        q_inj_buses=_bus_list(data.get("q_inj", []), net, "q_inj"),
        zero_inj_buses=_bus_list(data.get("zero_inj", []), net, "zero_inj"),
        p_flow_branches=_pair_list(data.get("p_flow", []), net, "p_flow"),
        q_flow_branches=_pair_list(data.get("q_flow", []), net, "q_flow"),
        weights=overrides,
        default_w_v=float(wspec.get("default_v", DEFAULT_W_V)),
        default_w_other=float(wspec.get("default_other", DEFAULT_W_OTHER)),
    )
    cfg.validate_against(net)
    return cfg


def load_config(path, net):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ParseError(f"cannot read measurement config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {path}: {exc.msg}", exc.lineno) from None
    return config_from_dict(data, net)
