"""Steady-state phasor solving.

Solves for the sinusoidal steady state of a network of droop-governed
machines (PV-like with frequency droop), power-regulating inverters (PQ)
and voltage/frequency-droop grid-forming inverters.  The common steady
frequency is an unknown alongside the per-node voltage magnitudes and
angles: the network admittance is rebuilt at every frequency iterate in
the full solver (``m3``) and held at the synchronous frequency in the
approximate one (``m3p``).  A closed-form lossless estimate of the steady
frequency is also provided and doubles as the Newton warm start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .network import NetworkSpec, admittance_reduced

__all__ = [
    "NonConvergenceError",
    "NoFrequencyFormingError",
    "BusModel",
    "PowerFlowCase",
    "PhasorSolution",
    "injections",
    "omega_ss_lossless",
    "solve_m3",
    "solve_m3prime",
    "compare_solutions",
]


class NonConvergenceError(RuntimeError):
    """Newton failed; carries the final scaled residual and iterate count."""

    def __init__(self, msg, residual=None, iterations=None):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


class NoFrequencyFormingError(ValueError):
    """The case has no droop-bearing resource to set the frequency."""


@dataclass(frozen=True)
class BusModel:
    """Per-node steady-state resource abstraction.

    ``kind`` is one of ``sg``/``gfl``/``gfm``.  ``droop_p`` is the
    frequency-droop slope in rad/s per W (machines and grid-forming
    units), ``m_q_bar`` the RMS voltage-droop slope in V per var
    (grid-forming only), ``e_bar_star`` the RMS voltage setpoint.
    """

    kind: str
    p_star: float
    q_star: Optional[float] = None
    e_bar_star: Optional[float] = None
    droop_p: Optional[float] = None
    m_q_bar: Optional[float] = None

    def __post_init__(self):
        need = {
            "sg": ("e_bar_star", "droop_p"),
            "gfl": ("q_star",),
            "gfm": ("q_star", "e_bar_star", "droop_p", "m_q_bar"),
        }
        if self.kind not in need:
            raise ValueError(f"unknown bus kind {self.kind!r}")
        for name in need[self.kind]:
            if getattr(self, name) is None:
                raise ValueError(f"{self.kind} bus requires {name}")


@dataclass(frozen=True)
class PowerFlowCase:
    """Network plus per-node bus models, a reference bus and scaling bases."""

    spec: NetworkSpec
    buses: Tuple[BusModel, ...]
    reference: int
    omega_s: float
    s_base: float = 0.0
    v_base: float = 0.0
    node_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.buses) != self.spec.n_nodes:
            raise ValueError("one bus model per network node is required")
        if not 0 <= self.reference < self.spec.n_nodes:
            raise ValueError("reference bus out of range")
        if self.buses[self.reference].kind == "gfl":
            raise ValueError("reference bus must be a frequency-forming resource")
        if not self.node_names:
            object.__setattr__(self, "node_names",
                               tuple(f"bus{k}" for k in range(self.spec.n_nodes)))
        if self.s_base <= 0.0:
            scale = max((abs(b.p_star) + abs(b.q_star or 0.0)) for b in self.buses)
            object.__setattr__(self, "s_base", max(scale, 1.0))
        if self.v_base <= 0.0:
            mags = [b.e_bar_star for b in self.buses if b.e_bar_star]
            object.__setattr__(self, "v_base",
                               float(np.mean(mags)) if mags else 1.0)


@dataclass
class PhasorSolution:
    """Per-node steady-state phasors, injections and the common frequency.

    Node and line quantities are RMS phasors; ``v_bar``/``f_bar`` are
    back-substituted from the terminal solution through the two network
    drop relations.
    """

    node_names: Tuple[str, ...]
    e_bar: np.ndarray
    delta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    omega_ss: float
    i_bar: np.ndarray
    v_bar: np.ndarray
    f_bar: np.ndarray
    iterations: int
    residual: float
    converged: bool
    source: str = "powerflow"
    residual_detail: dict = field(default_factory=dict)

    @property
    def e_mag(self) -> np.ndarray:
        return np.abs(self.e_bar)


def injections(e_mag: np.ndarray, delta: np.ndarray, omega: float,
               spec: NetworkSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Per-node injections from magnitudes/angles at frequency ``omega``.

    Evaluates the conductance/susceptance double sum; the complex product
    form ``3 E (Y E)^*`` is the cross-check used by the tests.
    """
    y = admittance_reduced(spec, omega).y
    g, b = y.real, y.imag
    e_mag = np.asarray(e_mag, float)
    delta = np.asarray(delta, float)
    n = spec.n_nodes
    p = np.zeros(n)
    q = np.zeros(n)
    for i in range(n):
        dd = delta[i] - delta
        cos_d, sin_d = np.cos(dd), np.sin(dd)
        p[i] = 3.0 * e_mag[i] * np.sum(e_mag * (g[i] * cos_d + b[i] * sin_d))
        q[i] = 3.0 * e_mag[i] * np.sum(e_mag * (g[i] * sin_d - b[i] * cos_d))
    return p, q


def omega_ss_lossless(case: PowerFlowCase) -> float:
    """Closed-form steady frequency under the lossless assumption:
    synchronous frequency plus total setpoint imbalance over the summed
    droop stiffness.  Power-regulating inverters add to the numerator
    only."""
    num = sum(b.p_star for b in case.buses)
    den = sum(1.0 / b.droop_p for b in case.buses if b.droop_p)
    if den == 0.0:
        raise NoFrequencyFormingError(
            "no frequency-forming resource: every droop slope is absent")
    return case.omega_s + num / den


def _dy_domega(spec: NetworkSpec, omega: float, y: np.ndarray) -> np.ndarray:
    """Analytic frequency derivative of the reduced admittance."""
    r_n = np.asarray(spec.r_line, float)
    l_n = np.asarray(spec.l_line, float)
    r_i = np.asarray(spec.r_iface, float)
    l_i = np.asarray(spec.l_iface, float)
    bmat = spec.b.astype(float)
    z_n = r_n + 1j * omega * l_n
    y_sub = (bmat * (1.0 / z_n)) @ bmat.T
    dy_sub = (bmat * (-1j * l_n / z_n ** 2)) @ bmat.T
    z_i = r_i + 1j * omega * l_i
    a = np.eye(spec.n_nodes) + y_sub * z_i[None, :]
    da_y = (dy_sub * z_i[None, :]) @ y + (y_sub * (1j * l_i)[None, :]) @ y
    return np.linalg.solve(a, dy_sub - da_y)


def _assemble(case: PowerFlowCase, x: np.ndarray, frequency_aware: bool):
    """Residual and Jacobian of the reduced unknowns (delta, |E|, omega)."""
    spec = case.spec
    n = spec.n_nodes
    delta = x[:n]
    e_mag = x[n:2 * n]
    omega = x[2 * n]
    y_freq = omega if frequency_aware else case.omega_s
    y = admittance_reduced(spec, y_freq).y
    v = e_mag * np.exp(1j * delta)
    yv = y @ v
    s = 3.0 * v * np.conj(yv)

    res = np.zeros(2 * n + 1)
    jac = np.zeros((2 * n + 1, 2 * n + 1))

    # complex sensitivities
    ds_ddelta = np.zeros((n, n), dtype=complex)
    ds_de = np.zeros((n, n), dtype=complex)
    for m in range(n):
        ds_ddelta[:, m] = 3.0 * v * np.conj(1j * y[:, m] * v[m])
        ds_ddelta[m, m] += 3.0 * 1j * v[m] * np.conj(yv[m])
        unit = v[m] / e_mag[m] if e_mag[m] != 0.0 else np.exp(1j * delta[m])
        ds_de[:, m] = 3.0 * v * np.conj(y[:, m] * unit)
        ds_de[m, m] += 3.0 * unit * np.conj(yv[m])
    if frequency_aware:
        dy = _dy_domega(spec, omega, y)
        ds_domega = 3.0 * v * np.conj(dy @ v)
    else:
        ds_domega = np.zeros(n, dtype=complex)

    for k, bus in enumerate(case.buses):
        drp = (1.0 / bus.droop_p) if bus.droop_p else 0.0
        res[k] = s[k].real - bus.p_star + drp * (omega - case.omega_s)
        jac[k, :n] = ds_ddelta[k].real
        jac[k, n:2 * n] = ds_de[k].real
        jac[k, 2 * n] = ds_domega[k].real + drp
        row = n + k
        if bus.kind == "sg":
            res[row] = e_mag[k] - bus.e_bar_star
            jac[row, n + k] = 1.0
        else:
            res[row] = s[k].imag - bus.q_star
            jac[row, :n] = ds_ddelta[k].imag
            jac[row, n:2 * n] = ds_de[k].imag
            jac[row, 2 * n] = ds_domega[k].imag
            if bus.kind == "gfm":
                res[row] += (e_mag[k] - bus.e_bar_star) / bus.m_q_bar
                jac[row, n + k] += 1.0 / bus.m_q_bar
    res[2 * n] = delta[case.reference]
    jac[2 * n, case.reference] = 1.0
    return res, jac, s, y


def _row_scales(case: PowerFlowCase) -> np.ndarray:
    n = case.spec.n_nodes
    scales = np.empty(2 * n + 1)
    scales[:n] = case.s_base
    for k, bus in enumerate(case.buses):
        scales[n + k] = case.v_base if bus.kind == "sg" else case.s_base
    scales[2 * n] = 1.0
    return scales


def _solve(case: PowerFlowCase, frequency_aware: bool, tol: float,
           max_iter: int) -> PhasorSolution:
    spec = case.spec
    n = spec.n_nodes
    mags = [b.e_bar_star for b in case.buses if b.e_bar_star]
    e_init = float(np.mean(mags)) if mags else case.v_base
    x = np.zeros(2 * n + 1)
    x[n:2 * n] = [b.e_bar_star or e_init for b in case.buses]
    try:
        x[2 * n] = omega_ss_lossless(case)
    except NoFrequencyFormingError:
        raise
    scales = _row_scales(case)

    res, jac, s, y = _assemble(case, x, frequency_aware)
    err = float(np.max(np.abs(res / scales)))
    iterations = 0
    while err > tol:
        if iterations >= max_iter:
            raise NonConvergenceError(
                f"no convergence after {max_iter} iterations; scaled "
                f"residual {err:.3e}", residual=err, iterations=iterations)
        try:
            dx = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError as exc:
            raise NonConvergenceError(
                f"singular Jacobian at iteration {iterations}: {exc}",
                residual=err, iterations=iterations) from exc
        step = 1.0
        for _ in range(7):
            x_try = x + step * dx
            res_try, jac_try, s, y = _assemble(case, x_try, frequency_aware)
            err_try = float(np.max(np.abs(res_try / scales)))
            if err_try < err or step < 1e-2:
                break
            step *= 0.5
        x, res, jac, err = x_try, res_try, jac_try, err_try
        iterations += 1

    delta = x[:n] - x[case.reference]   # exact angle reference
    e_mag = x[n:2 * n]
    omega_ss = float(x[2 * n])
    e_bar = e_mag * np.exp(1j * delta)
    y = admittance_reduced(spec, omega_ss if frequency_aware
                           else case.omega_s).y
    i_bar = y @ e_bar
    z_i = (np.asarray(spec.r_iface, float)
           + 1j * omega_ss * np.asarray(spec.l_iface, float))
    z_n = (np.asarray(spec.r_line, float)
           + 1j * omega_ss * np.asarray(spec.l_line, float))
    v_bar = e_bar - z_i * i_bar
    if spec.n_edges:
        f_bar = (spec.b.astype(float).T @ v_bar) / z_n
    else:
        f_bar = np.zeros(0, dtype=complex)
    s_out = 3.0 * e_bar * np.conj(i_bar)

    detail = {
        "power_w": float(np.max(np.abs(res[:n]))),
        "constraint": float(np.max(np.abs(res[n:2 * n]))),
        "reference_rad": float(abs(res[2 * n])),
        "scaled_max": err,
    }
    return PhasorSolution(
        node_names=case.node_names,
        e_bar=e_bar,
        delta=delta,
        p=s_out.real,
        q=s_out.imag,
        omega_ss=omega_ss,
        i_bar=i_bar,
        v_bar=v_bar,
        f_bar=f_bar,
        iterations=iterations,
        residual=err,
        converged=True,
        source="m3" if frequency_aware else "m3p",
        residual_detail=detail,
    )


def solve_m3(case: PowerFlowCase, tol: float = 1e-8,
             max_iter: int = 50) -> PhasorSolution:
    """Frequency-aware steady state: the admittance is rebuilt at every
    frequency iterate."""
    return _solve(case, frequency_aware=True, tol=tol, max_iter=max_iter)


def solve_m3prime(case: PowerFlowCase, tol: float = 1e-8,
                  max_iter: int = 50) -> PhasorSolution:
    """Synchronous-frequency approximation: the admittance is evaluated at
    the synchronous frequency while the resource droop laws keep the
    steady frequency as an unknown."""
    return _solve(case, frequency_aware=False, tol=tol, max_iter=max_iter)


def compare_solutions(a: PhasorSolution, b: PhasorSolution) -> dict:
    """Per-node discrepancy report between two solutions (used to quantify
    the cost of freezing the network frequency)."""
    de = np.abs(a.e_bar - b.e_bar)
    return {
        "omega_ss_delta_rad_s": abs(a.omega_ss - b.omega_ss),
        "e_bar_delta_v": de.tolist(),
        "e_bar_delta_max_v": float(np.max(de)) if len(de) else 0.0,
        "delta_delta_rad": np.abs(a.delta - b.delta).tolist(),
        "p_delta_w": np.abs(a.p - b.p).tolist(),
        "q_delta_var": np.abs(a.q - b.q).tolist(),
    }
