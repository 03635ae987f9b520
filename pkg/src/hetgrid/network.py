"""RL network topology, dynamics and steady-state admittance algebra.

The network is a directed graph whose edges are series RL lines and whose
nodes each carry a series RL interface branch feeding them from a source
voltage.  Three views of the same circuit live here:

* per-phase ``abc`` dynamics (stationary frame),
* complex dynamics in the shared synchronous-speed DQ frame,
* algebraic phasor relations for sinusoidal steady state, including the
  frequency-dependent reduced admittance between the source terminals.

Node voltages are algebraic: they are resolved each evaluation by the
linear system obtained from differentiating the current-balance constraint
``i = B f`` (index reduction).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Tuple

import numpy as np

__all__ = [
    "NetworkTopologyError",
    "NetworkSpec",
    "NetworkStateAbc",
    "NetworkStateDq",
    "AdmittanceMatrix",
    "M3Residual",
    "incidence",
    "solve_node_voltages_m1",
    "rhs_m1",
    "solve_node_voltages_m2",
    "rhs_m2",
    "admittance_network",
    "admittance_reduced",
    "steady_residual_m3",
]


class NetworkTopologyError(ValueError):
    """Invalid graph: self loops, bad indices or a disconnected network."""


@dataclass(frozen=True)
class NetworkSpec:
    """Immutable description of an RL network.

    ``edges`` are ordered pairs of 0-based node indices; per-edge series
    parameters sit in ``r_line``/``l_line`` (ohm, henry) and per-node
    interface parameters in ``r_iface``/``l_iface``.  All inductances must
    be strictly positive so the dynamic models have well-defined states.
    """

    n_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    r_line: Tuple[float, ...]
    l_line: Tuple[float, ...]
    r_iface: Tuple[float, ...]
    l_iface: Tuple[float, ...]

    def __post_init__(self):
        n, e = self.n_nodes, len(self.edges)
        if n < 1:
            raise NetworkTopologyError("network needs at least one node")
        if not (len(self.r_line) == len(self.l_line) == e):
            raise NetworkTopologyError("per-edge parameter counts must match edges")
        if not (len(self.r_iface) == len(self.l_iface) == n):
            raise NetworkTopologyError("per-node parameter counts must match nodes")
        for k, (m, nn) in enumerate(self.edges):
            if m == nn:
                raise NetworkTopologyError(f"edge {k} is a self loop ({m},{nn})")
            if not (0 <= m < n and 0 <= nn < n):
                raise NetworkTopologyError(f"edge {k} references unknown node")
        for name, vals in (("l_line", self.l_line), ("l_iface", self.l_iface)):
            if any(v <= 0.0 for v in vals):
                raise NetworkTopologyError(f"{name} entries must be strictly positive")
        for name, vals in (("r_line", self.r_line), ("r_iface", self.r_iface)):
            if any(v < 0.0 for v in vals):
                raise NetworkTopologyError(f"{name} entries must be non-negative")
        if not self._connected():
            raise NetworkTopologyError("network graph is not connected")

    def _connected(self) -> bool:
        if self.n_nodes == 1:
            return True
        adj = [[] for _ in range(self.n_nodes)]
        for m, nn in self.edges:
            adj[m].append(nn)
            adj[nn].append(m)
        seen = {0}
        stack = [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == self.n_nodes

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def b(self) -> np.ndarray:
        """Incidence matrix, +1 at the tail and -1 at the head of each edge."""
        mat = np.zeros((self.n_nodes, self.n_edges), dtype=int)
        for k, (m, nn) in enumerate(self.edges):
            mat[m, k] = 1
            mat[nn, k] = -1
        return mat

    @cached_property
    def _rl_arrays(self) -> tuple:
        return (np.asarray(self.r_line, dtype=float),
                np.asarray(self.l_line, dtype=float),
                np.asarray(self.r_iface, dtype=float),
                np.asarray(self.l_iface, dtype=float))

    @cached_property
    def vsolve_matrix(self) -> np.ndarray:
        """``diag(1/L_iface) + B diag(1/L_line) B^T`` used to resolve node
        voltages; symmetric positive definite for any valid spec."""
        _, l_n, _, l_i = self._rl_arrays
        bmat = self.b.astype(float)
        return np.diag(1.0 / l_i) + bmat @ np.diag(1.0 / l_n) @ bmat.T

    @cached_property
    def vsolve_matrix_inv(self) -> np.ndarray:
        return np.linalg.inv(self.vsolve_matrix)


def incidence(spec: NetworkSpec) -> np.ndarray:
    """Node-by-edge incidence matrix of the spec (copy)."""
    return spec.b.copy()


@dataclass
class NetworkStateAbc:
    """Stationary-frame state: interface currents (3,N), line currents (3,E)
    and the algebraic node voltages (3,N)."""

    i_abc: np.ndarray
    f_abc: np.ndarray
    v_abc: np.ndarray


@dataclass
class NetworkStateDq:
    """Synchronous-frame state: complex interface currents (N,), line
    currents (E,) and algebraic node voltages (N,)."""

    i_dq: np.ndarray
    f_dq: np.ndarray
    v_dq: np.ndarray


def solve_node_voltages_m1(spec: NetworkSpec, state: NetworkStateAbc,
                           e_abc: np.ndarray) -> np.ndarray:
    """Resolve abc node voltages given source voltages and currents.

    Per phase, v satisfies
    ``(1/L_if)(e - v - R_if i) = B (1/L_ln)(B^T v - R_ln f)``,
    the unique voltage keeping d/dt(i - B f) = 0.
    """
    r_n, l_n, r_i, l_i = spec._rl_arrays
    bmat = spec.b.astype(float)
    rhs = (e_abc - state.i_abc * r_i) / l_i + state.f_abc * (r_n / l_n) @ bmat.T
    v = np.linalg.solve(spec.vsolve_matrix, rhs.T).T
    return v


def rhs_m1(spec: NetworkSpec, state: NetworkStateAbc,
           e_abc: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Time derivatives of (i_abc, f_abc); ``state.v_abc`` must already be
    resolved."""
    r_n, l_n, r_i, l_i = spec._rl_arrays
    bmat = spec.b.astype(float)
    di = (e_abc - state.v_abc - r_i * state.i_abc) / l_i
    df = (state.v_abc @ bmat - r_n * state.f_abc) / l_n
    return di, df


def solve_node_voltages_m2(spec: NetworkSpec, state: NetworkStateDq,
                           e_dq: np.ndarray, omega_s: float) -> np.ndarray:
    """Complex analogue of :func:`solve_node_voltages_m1` in the shared
    synchronous-speed frame."""
    r_n, l_n, r_i, l_i = spec._rl_arrays
    bmat = spec.b.astype(float)
    z_i = r_i + 1j * omega_s * l_i
    z_n = r_n + 1j * omega_s * l_n
    rhs = (e_dq - z_i * state.i_dq) / l_i + bmat @ (z_n * state.f_dq / l_n)
    return np.linalg.solve(spec.vsolve_matrix, rhs)


def rhs_m2(spec: NetworkSpec, state: NetworkStateDq, e_dq: np.ndarray,
           omega_s: float) -> Tuple[np.ndarray, np.ndarray]:
    """Synchronous-frame derivatives of (i_dq, f_dq).

    ``L_if dI/dt = E - V - R_if I - j w_s L_if I`` and
    ``L_ln dF/dt = B^T V - R_ln F - j w_s L_ln F``; the rotation term in
    the line equation acts on the line current.
    """
    r_n, l_n, r_i, l_i = spec._rl_arrays
    bmat = spec.b.astype(float)
    di = (e_dq - state.v_dq - (r_i + 1j * omega_s * l_i) * state.i_dq) / l_i
    df = (bmat.T @ state.v_dq - (r_n + 1j * omega_s * l_n) * state.f_dq) / l_n
    return di, df


def admittance_network(spec: NetworkSpec, omega: float) -> np.ndarray:
    """Line-graph admittance ``B (R_ln + j w L_ln)^-1 B^T`` (N x N complex);
    complex-Laplacian structure with zero row sums."""
    r_n, l_n, _, _ = spec._rl_arrays
    bmat = spec.b.astype(float)
    y_edge = 1.0 / (r_n + 1j * omega * l_n)
    return (bmat * y_edge) @ bmat.T


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Reduced node admittance among source terminals, tagged with the
    frequency it was built at."""

    y: np.ndarray
    frequency: float


def admittance_reduced(spec: NetworkSpec, omega: float) -> AdmittanceMatrix:
    """Equivalent admittance seen from the source terminals.

    ``Y(w) = [I + Ysub(w) (R_if + j w L_if)]^-1 Ysub(w)``, formed with a
    linear solve rather than an explicit inverse.  Equals the Kron
    reduction of the interface-augmented graph.
    """
    if omega <= 0.0:
        raise ValueError(f"omega must be positive, got {omega}")
    _, _, r_i, l_i = spec._rl_arrays
    y_sub = admittance_network(spec, omega)
    a = np.eye(spec.n_nodes) + y_sub * (r_i + 1j * omega * l_i)[None, :]
    try:
        y = np.linalg.solve(a, y_sub)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"reduced admittance is singular at omega={omega}: {exc}") from exc
    return AdmittanceMatrix(y=y, frequency=omega)


@dataclass(frozen=True)
class M3Residual:
    """Norms of the three steady-state network relations."""

    interface: float
    line: float
    kcl: float

    def max(self) -> float:
        return max(self.interface, self.line, self.kcl)


def steady_residual_m3(spec: NetworkSpec, e_bar: np.ndarray, v_bar: np.ndarray,
                       i_bar: np.ndarray, f_bar: np.ndarray,
                       omega_ss: float) -> M3Residual:
    """Residual norms of the phasor-domain network relations at
    ``omega_ss``: interface drop, line drop and current balance."""
    r_n, l_n, r_i, l_i = spec._rl_arrays
    bmat = spec.b.astype(float)
    z_i = r_i + 1j * omega_ss * l_i
    z_n = r_n + 1j * omega_ss * l_n
    res_iface = e_bar - v_bar - z_i * i_bar
    res_line = bmat.T @ v_bar - z_n * f_bar
    res_kcl = i_bar - bmat @ f_bar
    norm = lambda x: float(np.max(np.abs(x))) if len(x) else 0.0
    return M3Residual(norm(res_iface), norm(res_line), norm(res_kcl))
