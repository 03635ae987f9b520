"""Case files: a YAML schema binding a network, one resource per node,
base quantities and run defaults.

Keys carry explicit unit suffixes (``l_h``, ``p_star_w``); unknown keys
are rejected, and physical validation errors name the offending element.
All internal math is SI; the optional display bases are only used for
scaling outputs and solver tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import yaml

from .network import NetworkSpec, NetworkTopologyError
from .resources import GflParams, GfmParams, RMS_SCALE, SgParams
from .sim import SimConfig
from .steady import BusModel, NoFrequencyFormingError, PowerFlowCase

__all__ = [
    "CaseError",
    "CaseParseError",
    "CaseValidationError",
    "ResourceDecl",
    "Case",
    "load_case",
    "case_from_dict",
]

ResourceParams = Union[SgParams, GflParams, GfmParams]


class CaseError(ValueError):
    pass


class CaseParseError(CaseError):
    """Unreadable document; carries line/column when the parser knows them."""

    def __init__(self, msg, line=None, column=None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{msg}{where}")
        self.line = line
        self.column = column


class CaseValidationError(CaseError):
    """Schema or physics violation, naming the offending field."""


@dataclass(frozen=True)
class ResourceDecl:
    name: str
    kind: str
    params: ResourceParams


@dataclass(frozen=True)
class Case:
    name: str
    node_names: Tuple[str, ...]
    spec: NetworkSpec
    omega_s: float
    s_base: float
    v_base: float
    resources: Tuple[ResourceDecl, ...]
    sim: SimConfig
    pf_reference: Optional[str]
    pf_tol: float
    pf_max_iter: int

    def node_index(self, name: str) -> int:
        return self.node_names.index(name)

    def resource(self, name: str) -> ResourceDecl:
        return self.resources[self.node_index(name)]

    def powerflow_case(self) -> PowerFlowCase:
        buses = []
        for decl in self.resources:
            p = decl.params
            if isinstance(p, SgParams):
                buses.append(BusModel("sg", p_star=p.p_star,
                                      e_bar_star=RMS_SCALE * p.e_star,
                                      droop_p=p.droop))
            elif isinstance(p, GflParams):
                buses.append(BusModel("gfl", p_star=p.s_star.real,
                                      q_star=p.s_star.imag))
            else:
                buses.append(BusModel("gfm", p_star=p.p_star, q_star=p.q_star,
                                      e_bar_star=RMS_SCALE * p.e_star,
                                      droop_p=p.slope_p(),
                                      m_q_bar=p.slope_q_bar()))
        if self.pf_reference is not None:
            ref = self.node_index(self.pf_reference)
        else:
            ref = _default_reference(buses)
        return PowerFlowCase(spec=self.spec, buses=tuple(buses), reference=ref,
                             omega_s=self.omega_s, s_base=self.s_base,
                             v_base=self.v_base, node_names=self.node_names)


def _default_reference(buses) -> int:
    for kind in ("sg", "gfm"):
        for k, b in enumerate(buses):
            if b.kind == kind:
                return k
    raise NoFrequencyFormingError(
        "no frequency-forming resource: a reference bus needs a machine or "
        "a grid-forming inverter")


# ---------------------------------------------------------------------------
# schema helpers
# ---------------------------------------------------------------------------

def _expect_map(obj, path):
    if not isinstance(obj, dict):
        raise CaseValidationError(f"{path}: expected a mapping")
    return obj


def _take(d, key, path, kind=None, required=True, default=None):
    if key not in d:
        if required:
            raise CaseValidationError(f"{path}: missing required key {key!r}")
        return default
    val = d.pop(key)
    if kind == "number":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise CaseValidationError(f"{path}.{key}: expected a number")
        return float(val)
    if kind == "int":
        if isinstance(val, bool) or not isinstance(val, int):
            raise CaseValidationError(f"{path}.{key}: expected an integer")
        return val
    if kind == "str":
        if not isinstance(val, str):
            raise CaseValidationError(f"{path}.{key}: expected a string")
        return val
    return val


def _reject_unknown(d, path):
    if d:
        raise CaseValidationError(
            f"{path}: unknown key(s) {sorted(d.keys())!r}")


_SG_KEYS = {
    "r_ohm": "r", "r_f_ohm": "r_f", "r_1_ohm": "r_1", "r_2_ohm": "r_2",
    "l_ls_h": "l_ls", "l_sf_h": "l_sf", "l_s1_h": "l_s1", "l_s2_h": "l_s2",
    "l_f1_h": "l_f1", "l_ff_h": "l_ff", "l_11_h": "l_11", "l_22_h": "l_22",
    "l_a_h": "l_a", "l_b_h": "l_b",
    "inertia_kg_m2": "inertia", "damping_n_m_s": "damping",
    "tau_e_s": "tau_e", "tau_u_s": "tau_u", "tau_r_s": "tau_r",
    "kappa_e": "kappa_e", "kappa_a": "kappa_a", "kappa_s": "kappa_s",
    "kappa_c": "kappa_c",
    "tau_m_s": "tau_m", "tau_s_s": "tau_s", "kappa_p": "kappa_p",
    "droop_rad_s_per_w": "droop",
}


def _parse_sg(name, params, setpoints):
    path = f"resources.{name}"
    kw = {}
    for key, field_name in _SG_KEYS.items():
        kw[field_name] = _take(params, key, f"{path}.params", "number")
    kw["poles"] = _take(params, "poles", f"{path}.params", "int")
    _reject_unknown(params, f"{path}.params")
    kw["p_star"] = _take(setpoints, "p_star_w", f"{path}.setpoints", "number")
    kw["e_star"] = _take(setpoints, "e_star_v", f"{path}.setpoints", "number")
    _reject_unknown(setpoints, f"{path}.setpoints")
    try:
        return SgParams(**kw)
    except (ValueError, ArithmeticError) as exc:
        raise CaseValidationError(f"{path}: {exc}") from exc


def _parse_gfl(name, params, setpoints):
    path = f"resources.{name}"
    kw = {key: _take(params, key, f"{path}.params", "number")
          for key in ("k_p_i", "k_i_i", "k_p_pll", "k_i_pll", "k_p_s", "k_i_s")}
    _reject_unknown(params, f"{path}.params")
    p = _take(setpoints, "p_star_w", f"{path}.setpoints", "number")
    q = _take(setpoints, "q_star_var", f"{path}.setpoints", "number")
    _reject_unknown(setpoints, f"{path}.setpoints")
    try:
        return GflParams(s_star=complex(p, q), **kw)
    except ValueError as exc:
        raise CaseValidationError(f"{path}: {exc}") from exc


def _parse_gfm(name, flavor, params, setpoints):
    path = f"resources.{name}"
    kw = {"flavor": flavor,
          "tau_p": _take(params, "tau_p_s", f"{path}.params", "number")}
    if flavor in ("droop", "vsm"):
        kw["m_p"] = _take(params, "m_p_rad_s_per_w", f"{path}.params", "number")
        kw["m_q"] = _take(params, "m_q_v_per_var", f"{path}.params", "number")
    if flavor == "vsm":
        kw["inertia"] = _take(params, "vsm_inertia", f"{path}.params", "number")
        kw["d_d"] = _take(params, "vsm_damping", f"{path}.params", "number",
                          required=False, default=0.0)
        kw["k_p_pll"] = _take(params, "pll_k_p", f"{path}.params", "number",
                              required=False, default=0.0)
        kw["k_i_pll"] = _take(params, "pll_k_i", f"{path}.params", "number",
                              required=False, default=0.0)
    if flavor == "dvoc":
        kw["k_1"] = _take(params, "k_1", f"{path}.params", "number")
        kw["k_2"] = _take(params, "k_2", f"{path}.params", "number")
    # optional explicit generic coefficients, cross-checked against the
    # flavor's required bindings
    explicit = {
        "tau_f": _take(params, "tau_f_s", f"{path}.params", "number",
                       required=False),
        "tau_e": _take(params, "tau_e_s", f"{path}.params", "number",
                       required=False),
        "kappa_f": _take(params, "kappa_f", f"{path}.params", "number",
                         required=False),
        "kappa_e": _take(params, "kappa_e", f"{path}.params", "number",
                         required=False),
        "kappa_d": _take(params, "kappa_d", f"{path}.params", "number",
                         required=False),
    }
    _reject_unknown(params, f"{path}.params")
    kw["p_star"] = _take(setpoints, "p_star_w", f"{path}.setpoints", "number")
    kw["q_star"] = _take(setpoints, "q_star_var", f"{path}.setpoints", "number")
    kw["e_star"] = _take(setpoints, "e_star_v", f"{path}.setpoints", "number")
    _reject_unknown(setpoints, f"{path}.setpoints")
    try:
        gfm = GfmParams(**kw)
        gfm.check_bindings(**explicit)
    except ValueError as exc:
        raise CaseValidationError(f"{path}: {exc}") from exc
    return gfm


def case_from_dict(doc: dict, name: str = "case") -> Case:
    """Validate a parsed document and build the immutable case record."""
    doc = dict(_expect_map(doc, "case"))
    case_name = _take(doc, "name", "case", "str", required=False, default=name)

    base = _expect_map(_take(doc, "base", "case"), "base")
    base = dict(base)
    omega_s = _take(base, "omega_s_rad_s", "base", "number")
    s_base = _take(base, "s_base_va", "base", "number", required=False,
                   default=0.0)
    v_base = _take(base, "v_base_v", "base", "number", required=False,
                   default=0.0)
    _reject_unknown(base, "base")
    if omega_s <= 0.0:
        raise CaseValidationError("base.omega_s_rad_s must be positive")

    net = dict(_expect_map(_take(doc, "network", "case"), "network"))
    nodes = _take(net, "nodes", "network")
    if (not isinstance(nodes, list) or not nodes
            or any(not isinstance(n, str) for n in nodes)):
        raise CaseValidationError("network.nodes: expected a list of names")
    if len(set(nodes)) != len(nodes):
        raise CaseValidationError("network.nodes: duplicate node names")
    index = {n: k for k, n in enumerate(nodes)}

    edges_doc = _take(net, "edges", "network", required=False, default=[])
    edges, r_line, l_line = [], [], []
    for k, ed in enumerate(list(edges_doc or [])):
        path = f"network.edges[{k}]"
        ed = dict(_expect_map(ed, path))
        frm = _take(ed, "from", path, "str")
        to = _take(ed, "to", path, "str")
        for nm in (frm, to):
            if nm not in index:
                raise CaseValidationError(f"{path}: unknown node {nm!r}")
        r = _take(ed, "r_ohm", path, "number")
        l = _take(ed, "l_h", path, "number")
        _reject_unknown(ed, path)
        if l <= 0.0:
            raise CaseValidationError(f"{path}: l_h must be positive "
                                      f"(edge {frm}-{to})")
        if r < 0.0:
            raise CaseValidationError(f"{path}: r_ohm must be non-negative")
        edges.append((index[frm], index[to]))
        r_line.append(r)
        l_line.append(l)

    ifaces = dict(_expect_map(_take(net, "interfaces", "network"),
                              "network.interfaces"))
    _reject_unknown(net, "network")
    r_iface = [0.0] * len(nodes)
    l_iface = [0.0] * len(nodes)
    for nm in nodes:
        path = f"network.interfaces.{nm}"
        if nm not in ifaces:
            raise CaseValidationError(f"{path}: missing interface parameters")
        entry = dict(_expect_map(ifaces.pop(nm), path))
        r_iface[index[nm]] = _take(entry, "r_ohm", path, "number")
        l_iface[index[nm]] = _take(entry, "l_h", path, "number")
        _reject_unknown(entry, path)
        if l_iface[index[nm]] <= 0.0:
            raise CaseValidationError(f"{path}: l_h must be positive")
    _reject_unknown(ifaces, "network.interfaces")

    try:
        spec = NetworkSpec(n_nodes=len(nodes), edges=tuple(edges),
                           r_line=tuple(r_line), l_line=tuple(l_line),
                           r_iface=tuple(r_iface), l_iface=tuple(l_iface))
    except NetworkTopologyError as exc:
        raise CaseValidationError(f"network: {exc}") from exc

    res_doc = dict(_expect_map(_take(doc, "resources", "case"), "resources"))
    missing = [n for n in nodes if n not in res_doc]
    if missing:
        raise CaseValidationError(
            f"resources: node(s) {missing!r} lack a resource; every node "
            "hosts exactly one resource")
    extra = [n for n in res_doc if n not in index]
    if extra:
        raise CaseValidationError(
            f"resources: {extra!r} do not match any network node")

    decls: list = [None] * len(nodes)
    for nm in nodes:
        path = f"resources.{nm}"
        entry = dict(_expect_map(res_doc[nm], path))
        kind = _take(entry, "kind", path, "str")
        params = dict(_expect_map(
            _take(entry, "params", path, required=False, default={}), f"{path}.params"))
        setpoints = dict(_expect_map(
            _take(entry, "setpoints", path, required=False, default={}),
            f"{path}.setpoints"))
        if kind == "sg":
            _reject_unknown(entry, path)
            p = _parse_sg(nm, params, setpoints)
        elif kind == "gfl":
            _reject_unknown(entry, path)
            p = _parse_gfl(nm, params, setpoints)
        elif kind == "gfm":
            flavor = _take(entry, "flavor", path, "str")
            _reject_unknown(entry, path)
            p = _parse_gfm(nm, flavor, params, setpoints)
        else:
            raise CaseValidationError(
                f"{path}.kind: expected sg, gfl or gfm, got {kind!r}")
        decls[index[nm]] = ResourceDecl(nm, kind, p)

    sim_doc = dict(_expect_map(_take(doc, "sim", "case", required=False,
                                     default={}), "sim"))
    sim_kw = dict(
        t_end=_take(sim_doc, "t_end_s", "sim", "number", required=False,
                    default=1.0),
        dt=_take(sim_doc, "dt_s", "sim", "number", required=False,
                 default=1e-5),
        integrator=_take(sim_doc, "integrator", "sim", "str", required=False,
                         default="rk4"),
        record_stride=_take(sim_doc, "record_stride", "sim", "int",
                            required=False, default=1),
        steady_window=_take(sim_doc, "steady_window_s", "sim", "number",
                            required=False, default=0.5),
        steady_tol=_take(sim_doc, "steady_tol", "sim", "number",
                         required=False, default=1e-6),
        init=_take(sim_doc, "init", "sim", "str", required=False,
                   default="flat"),
    )
    _reject_unknown(sim_doc, "sim")
    try:
        sim_cfg = SimConfig(**sim_kw)
    except ValueError as exc:
        raise CaseValidationError(f"sim: {exc}") from exc

    pf_doc = dict(_expect_map(_take(doc, "powerflow", "case", required=False,
                                    default={}), "powerflow"))
    pf_reference = _take(pf_doc, "reference_bus", "powerflow", "str",
                         required=False)
    pf_tol = _take(pf_doc, "tol", "powerflow", "number", required=False,
                   default=1e-8)
    pf_max_iter = _take(pf_doc, "max_iter", "powerflow", "int",
                        required=False, default=50)
    _reject_unknown(pf_doc, "powerflow")
    if pf_reference is not None and pf_reference not in index:
        raise CaseValidationError(
            f"powerflow.reference_bus: unknown node {pf_reference!r}")

    _reject_unknown(doc, "case")
    return Case(
        name=case_name,
        node_names=tuple(nodes),
        spec=spec,
        omega_s=omega_s,
        s_base=s_base,
        v_base=v_base,
        resources=tuple(decls),
        sim=sim_cfg,
        pf_reference=pf_reference,
        pf_tol=pf_tol,
        pf_max_iter=pf_max_iter,
    )


def load_case(path) -> Case:
    """Parse and validate a case file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseParseError(f"cannot read {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise CaseParseError(
            f"{path}: {exc.problem or 'parse error'}",
            line=None if mark is None else mark.line + 1,
            column=None if mark is None else mark.column + 1) from exc
    except yaml.YAMLError as exc:
        raise CaseParseError(f"{path}: {exc}") from exc
    if doc is None:
        raise CaseParseError(f"{path}: empty document")
    return case_from_dict(doc, name=path.stem)
