"""Dynamic and steady-state models of the three resource classes.

Every resource runs its controls (or its physics) in a local rotating
frame and exposes the same network-facing tuple: a source-voltage
magnitude, its phase in the local frame, the frame frequency and the
accumulated frame angle (:class:`InterfaceOut`).

Conventions that matter here:

* Local-frame complex quantities use the magnitude-invariant space-phasor
  scaling, i.e. a sinusoid of per-phase amplitude ``x`` appears with
  magnitude ``1.5 x``.  Power is ``(2/3) v conj(i)`` in that scaling.
* The synchronous-machine stator current ``I'`` recovered from the fluxes
  is in motor orientation (positive into the machine); a generating
  machine injects ``-I'`` into its interface branch.
* The grid-forming voltage phase is identically zero in its own frame;
  only the magnitude is actuated.

All ``*_rhs`` functions are pure: they map (params, state, inputs) to
state derivatives plus outputs and never mutate their arguments.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

__all__ = [
    "InterfaceOut",
    "SgParams",
    "SgState",
    "SgBus",
    "sg_flux_matrix",
    "sg_currents",
    "sg_torque",
    "sg_rhs",
    "sg_steady",
    "sg_flat_state",
    "GflParams",
    "GflState",
    "GflBus",
    "gfl_rhs",
    "gfl_terminal_voltage",
    "gfl_steady",
    "gfl_ebar",
    "GfmParams",
    "GfmState",
    "GfmBus",
    "gfm_outputs",
    "gfm_rhs",
    "gfm_steady",
    "RMS_SCALE",
]

#: Factor between a local-frame magnitude and the corresponding RMS phasor.
RMS_SCALE = math.sqrt(2.0) / 3.0


@dataclass(frozen=True)
class InterfaceOut:
    """Network-facing tuple of one resource: source magnitude (V), phase in
    the local frame (rad), frame frequency (rad/s), frame angle (rad)."""

    e_mag: float
    delta: float
    omega: float
    theta: float


# ---------------------------------------------------------------------------
# Synchronous generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgParams:
    """Two-damper synchronous machine with exciter and governor.

    Winding resistances/inductances are SI (ohm, henry); ``l_a > l_b >= 0``
    with ``l_b = 0`` for a round rotor.  ``poles`` is the (even) magnetic
    pole count; the local frame angle is ``poles/2 * theta_r``.
    """

    r: float
    r_f: float
    r_1: float
    r_2: float
    l_ls: float
    l_sf: float
    l_s1: float
    l_s2: float
    l_f1: float
    l_ff: float
    l_11: float
    l_22: float
    l_a: float
    l_b: float
    poles: int
    inertia: float          # kg m^2
    damping: float          # N m s (windage/friction)
    tau_e: float            # exciter field time constant, s
    tau_u: float            # regulator time constant, s
    tau_r: float            # rate-feedback time constant, s
    kappa_e: float
    kappa_a: float
    kappa_s: float
    kappa_c: float
    tau_m: float            # prime-mover time constant, s
    tau_s: float            # governor time constant, s
    kappa_p: float
    droop: float            # rad/s per W
    p_star: float           # W
    e_star: float           # V, local-frame magnitude

    def __post_init__(self):
        if self.poles < 2 or self.poles % 2:
            raise ValueError(f"poles must be an even integer >= 2, got {self.poles}")
        if not self.l_a > self.l_b >= 0.0:
            raise ValueError(f"need l_a > l_b >= 0, got l_a={self.l_a}, l_b={self.l_b}")
        for name in ("tau_e", "tau_u", "tau_r", "tau_m", "tau_s"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.droop <= 0.0:
            raise ValueError("droop must be positive")
        if self.inertia <= 0.0:
            raise ValueError("inertia must be positive")
        np.linalg.inv(sg_flux_matrix(self))  # fail fast on a singular flux map

    @cached_property
    def flux_matrix(self) -> np.ndarray:
        return sg_flux_matrix(self)

    @cached_property
    def flux_matrix_inv(self) -> np.ndarray:
        return np.linalg.inv(self.flux_matrix)


@dataclass(frozen=True)
class SgState:
    """Machine state: stator flux (local frame, complex), rotor fluxes,
    rotor angle/frequency, exciter triple and governor pair."""

    stator_flux: complex    # Wb, local dq
    flux_f: float
    flux_1: float
    flux_2: float
    theta_r: float          # mechanical rotor angle, rad
    omega: float            # electrical frequency, rad/s
    e_f: float
    u_f: float
    u_r: float
    torque_m: float
    valve: float

    def theta(self, p: SgParams) -> float:
        """Local electrical frame angle."""
        return 0.5 * p.poles * self.theta_r


def sg_flux_matrix(p: SgParams, l_iface_extra: float = 0.0) -> np.ndarray:
    """Constant flux map M with ``flux = M @ (i_d, i_q, i_f, i_1, i_2)``.

    Motor-oriented stator current.  The d axis carries the cosine-coupled
    damper, the q axis the field and the sine-coupled damper; stator rows
    carry the 3/2 of the magnitude-invariant projection, rotor rows do
    not.  ``l_iface_extra`` augments the stator leakage (used to absorb a
    series interface inductance exactly).
    """
    l_d0 = p.l_ls + l_iface_extra + 1.5 * (p.l_a - p.l_b)
    l_q0 = p.l_ls + l_iface_extra + 1.5 * (p.l_a + p.l_b)
    return np.array([
        [l_d0, 0.0, 0.0, 0.0, 1.5 * p.l_s2],
        [0.0, l_q0, -1.5 * p.l_sf, -1.5 * p.l_s1, 0.0],
        [0.0, -p.l_sf, p.l_ff, p.l_f1, 0.0],
        [0.0, -p.l_s1, p.l_f1, p.l_11, 0.0],
        [p.l_s2, 0.0, 0.0, 0.0, p.l_22],
    ])


def sg_currents(p: SgParams, s: SgState) -> Tuple[complex, float, float, float]:
    """Recover (stator I', field, damper1, damper2) currents from fluxes."""
    flux = np.array([s.stator_flux.real, s.stator_flux.imag,
                     s.flux_f, s.flux_1, s.flux_2])
    i = p.flux_matrix_inv @ flux
    return complex(i[0], i[1]), float(i[2]), float(i[3]), float(i[4])


def sg_torque(p: SgParams, stator_flux: complex, i_stator: complex) -> float:
    """Electrical (braking) torque from stator flux and motor-oriented
    stator current; scaled for the magnitude-invariant dq variables so the
    airgap power is exactly ``T_e * (2/poles) * omega``."""
    return (2.0 / 3.0) * (0.5 * p.poles) * (
        stator_flux * i_stator.conjugate()).imag


def sg_rhs(p: SgParams, s: SgState, e_term: complex, q_fb: float,
           e_mag_fb: float, omega_s: float) -> SgState:
    """State derivatives of the machine given its terminal voltage.

    ``e_term`` is the stator terminal voltage in the machine's own frame;
    ``q_fb``/``e_mag_fb`` are the reactive power and voltage magnitude fed
    to the regulator (the caller measures them at the machine terminal).
    Returns an :class:`SgState`-shaped record of time derivatives.
    """
    i_s, i_f, i_1, i_2 = sg_currents(p, s)

    d_stator = -i_s * p.r + e_term - 1j * s.omega * s.stator_flux
    d_flux_f = -i_f * p.r_f + s.e_f
    d_flux_1 = -i_1 * p.r_1
    d_flux_2 = -i_2 * p.r_2

    two_over_poles = 2.0 / p.poles
    t_e = sg_torque(p, s.stator_flux, i_s)
    d_theta_r = two_over_poles * s.omega
    d_omega = (s.torque_m - t_e - p.damping * two_over_poles * s.omega) / (
        p.inertia * two_over_poles)

    avr_err = p.e_star - e_mag_fb
    if p.kappa_c != 0.0:
        if e_mag_fb == 0.0:
            raise ZeroDivisionError(
                "load-compensation term requires a nonzero terminal voltage")
        avr_err -= 1.5 * p.kappa_c * q_fb / e_mag_fb
    d_e_f = (-p.kappa_e * s.e_f + s.u_f) / p.tau_e
    d_u_f = (-s.u_f + p.kappa_a * s.u_r
             - (p.kappa_a * p.kappa_s / p.tau_r) * s.e_f
             + p.kappa_a * avr_err) / p.tau_u
    d_u_r = (-s.u_r + (p.kappa_s / p.tau_r) * s.e_f) / p.tau_r

    d_torque_m = (-s.torque_m + p.kappa_p * s.valve) / p.tau_m
    d_valve = (-s.valve + p.p_star / (p.kappa_p * omega_s)
               - (s.omega - omega_s) / (p.droop * omega_s)) / p.tau_s

    return SgState(d_stator, d_flux_f, d_flux_1, d_flux_2, d_theta_r, d_omega,
                   d_e_f, d_u_f, d_u_r, d_torque_m, d_valve)


@dataclass(frozen=True)
class SgBus:
    """Steady-state bus abstraction of the machine: droop-governed active
    power at fixed RMS voltage magnitude (a PV bus with frequency droop)."""

    p: float
    e_bar_mag: float


def sg_steady(p: SgParams, omega_ss: float, omega_s: float) -> SgBus:
    """Reduced steady-state model, valid in the small-loss high-gain
    regulator regime: ``P = P* - (omega_ss - omega_s)/droop`` and an RMS
    magnitude pinned to the setpoint."""
    return SgBus(p=p.p_star - (omega_ss - omega_s) / p.droop,
                 e_bar_mag=RMS_SCALE * p.e_star)


def sg_flat_state(p: SgParams, omega_s: float) -> SgState:
    """No-load rated operating point used as the default initial state."""
    i_f = p.e_star / (1.5 * omega_s * p.l_sf)
    stator_flux = -1.5j * p.l_sf * i_f
    e_f = p.r_f * i_f
    valve = p.p_star / (p.kappa_p * omega_s)
    return SgState(
        stator_flux=stator_flux,
        flux_f=p.l_ff * i_f,
        flux_1=p.l_f1 * i_f,
        flux_2=0.0,
        theta_r=0.0,
        omega=omega_s,
        e_f=e_f,
        u_f=p.kappa_e * e_f,
        u_r=(p.kappa_s / p.tau_r) * e_f,
        torque_m=p.kappa_p * valve,
        valve=valve,
    )


# ---------------------------------------------------------------------------
# Grid-following inverter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GflParams:
    """PI gains of the current, synchronisation and power loops plus the
    complex power setpoint (VA)."""

    k_p_i: float
    k_i_i: float
    k_p_pll: float
    k_i_pll: float
    k_p_s: float
    k_i_s: float
    s_star: complex

    def __post_init__(self):
        for name in ("k_i_i", "k_i_pll", "k_i_s"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive (integral action "
                                 "closes the steady-state model)")


@dataclass(frozen=True)
class GflState:
    """Synchroniser integrator (V s), current-loop integrator (A s),
    power-loop integrator (VA s) and the local frame angle (rad)."""

    pll_int: float
    current_int: complex
    power_int: complex
    theta: float


def gfl_current_ref(p: GflParams, d_power: complex,
                    power_int: complex) -> complex:
    """Current reference from the power-loop PI.

    With the grid voltage locked onto the +q axis the measured power is
    ``(2/3) E' conj(I')``, so the active-power error must command q-axis
    current and the reactive error d-axis current; the PI output is mapped
    through ``z -> j conj(z)`` to give both channels negative feedback.
    """
    pi = p.k_p_s * d_power + p.k_i_s * power_int
    return 1j * pi.conjugate()


def gfl_rhs(p: GflParams, s: GflState, v_loc: complex, i_loc: complex,
            s_meas: complex, omega_s: float) -> Tuple[GflState, InterfaceOut]:
    """Derivatives plus the interface tuple for one evaluation.

    ``v_loc`` is the grid (node) voltage and ``i_loc`` the injected current,
    both in the inverter's own frame; ``s_meas`` is the measured complex
    power the outer loop regulates.  The synchroniser drives the real part
    of the grid voltage to zero, locking the voltage onto the +q axis.
    """
    d_pll = -v_loc.real
    d_power = p.s_star - s_meas
    i_ref = gfl_current_ref(p, d_power, s.power_int)
    d_current = i_ref - i_loc
    e_out = p.k_p_i * d_current + p.k_i_i * s.current_int
    omega = omega_s + p.k_p_pll * d_pll + p.k_i_pll * s.pll_int
    derivs = GflState(pll_int=d_pll, current_int=d_current,
                      power_int=d_power, theta=omega)
    out = InterfaceOut(abs(e_out), cmath.phase(e_out) if e_out else 0.0,
                       omega, s.theta)
    return derivs, out


def gfl_terminal_voltage(p: GflParams, s: GflState, i_loc: complex) -> complex:
    """Terminal voltage consistent with power measured at the terminal.

    The proportional paths make the controller output depend on the power
    it measures at its own terminal, an algebraic loop that is real-linear
    in the voltage and solved in closed form here.
    """
    a = p.k_p_i * p.k_p_s
    b = (a * 1j * p.s_star.conjugate()
         + p.k_p_i * p.k_i_s * 1j * s.power_int.conjugate()
         - p.k_p_i * i_loc + p.k_i_i * s.current_int)
    # E' + c * j * I' * conj(E') = b with c = 2a/3
    c = (2.0 / 3.0) * a
    i_d, i_q = i_loc.real, i_loc.imag
    det = 1.0 - c * c * (i_d * i_d + i_q * i_q)
    if abs(det) < 1e-12:
        raise ZeroDivisionError("terminal-power loop is singular at this current")
    a11 = 1.0 - c * i_q
    a12 = c * i_d
    a21 = c * i_d
    a22 = 1.0 + c * i_q
    e_re = (a22 * b.real - a12 * b.imag) / det
    e_im = (-a21 * b.real + a11 * b.imag) / det
    return complex(e_re, e_im)


@dataclass(frozen=True)
class GflBus:
    """Steady-state abstraction: a PQ source whose voltage follows from the
    current it must carry."""

    p: float
    q: float

    def e_bar(self, i_bar: complex) -> complex:
        return gfl_ebar(complex(self.p, self.q), i_bar)


def gfl_steady(p: GflParams) -> GflBus:
    """Integral action pins both powers to their setpoints."""
    return GflBus(p=p.s_star.real, q=p.s_star.imag)


def gfl_ebar(s_star: complex, i_bar: complex) -> complex:
    """Current-dependent source phasor ``S* / (3 conj(I))``."""
    if i_bar == 0:
        raise ZeroDivisionError("source voltage is undefined at zero current")
    return s_star / (3.0 * i_bar.conjugate())


# ---------------------------------------------------------------------------
# Grid-forming inverter (generic law covering droop, VSM and dVOC)
# ---------------------------------------------------------------------------

_GFM_FLAVORS = ("droop", "vsm", "dvoc")


@dataclass(frozen=True)
class GfmParams:
    """Generic grid-forming controller with flavor-specific bindings.

    The generic law is a first-order (possibly degenerate) voltage loop, a
    first-order (possibly degenerate) frequency loop driven by filtered
    power error, and a power measurement filter.  Bindings:

    ========  =======  =======  ==============  ==============  ========
    flavor    tau_f    tau_e    gain_f          gain_e          kappa_d
    ========  =======  =======  ==============  ==============  ========
    droop     0        0        m_p             m_q             0
    vsm       m_p*m    0        m_p             m_q             m_p*d_d
    dvoc      0        1        k_1/|E|^2       k_1/|E|         0
    ========  =======  =======  ==============  ==============  ========

    with voltage error ``e_star - |E|`` for droop/vsm and the cubic
    ``k_2 |E| (e_star^2 - |E|^2)`` for dvoc.  When a time constant is zero
    the corresponding quantity is an algebraic output, not a state.
    """

    flavor: str
    tau_p: float
    p_star: float
    q_star: float
    e_star: float
    m_p: float = 0.0
    m_q: float = 0.0
    k_1: float = 0.0
    k_2: float = 0.0
    inertia: float = 0.0        # vsm only
    d_d: float = 0.0            # vsm only
    k_p_pll: float = 0.0        # vsm only
    k_i_pll: float = 0.0        # vsm only

    def __post_init__(self):
        if self.flavor not in _GFM_FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}; "
                             f"expected one of {_GFM_FLAVORS}")
        if self.tau_p <= 0.0:
            raise ValueError("tau_p must be positive")
        if self.e_star <= 0.0:
            raise ValueError("e_star must be positive")
        if self.flavor in ("droop", "vsm"):
            if self.m_p <= 0.0 or self.m_q <= 0.0:
                raise ValueError(f"{self.flavor} needs positive m_p and m_q")
        if self.flavor == "vsm" and self.inertia <= 0.0:
            raise ValueError("vsm needs positive inertia")
        if self.flavor == "dvoc" and (self.k_1 <= 0.0 or self.k_2 <= 0.0):
            raise ValueError("dvoc needs positive k_1 and k_2")

    @property
    def tau_f(self) -> float:
        return self.m_p * self.inertia if self.flavor == "vsm" else 0.0

    @property
    def tau_e(self) -> float:
        return 1.0 if self.flavor == "dvoc" else 0.0

    @property
    def kappa_d(self) -> float:
        return self.m_p * self.d_d if self.flavor == "vsm" else 0.0

    def gain_f(self, e_mag: float) -> float:
        """Frequency-loop gain; state dependent for dvoc."""
        if self.flavor == "dvoc":
            if e_mag == 0.0:
                raise ZeroDivisionError("dvoc frequency gain is singular at |E| = 0")
            return self.k_1 / (e_mag * e_mag)
        return self.m_p

    def gain_e(self, e_mag: float) -> float:
        """Voltage-loop gain on the reactive-power error."""
        if self.flavor == "dvoc":
            if e_mag == 0.0:
                raise ZeroDivisionError("dvoc voltage gain is singular at |E| = 0")
            return self.k_1 / e_mag
        return self.m_q

    def voltage_error(self, e_mag: float) -> float:
        if self.flavor == "dvoc":
            return self.k_2 * e_mag * (self.e_star ** 2 - e_mag ** 2)
        return self.e_star - e_mag

    def check_bindings(self, tau_f: Optional[float] = None,
                       tau_e: Optional[float] = None,
                       kappa_f: Optional[float] = None,
                       kappa_e: Optional[float] = None,
                       kappa_d: Optional[float] = None) -> None:
        """Validate explicitly supplied generic coefficients against the
        flavor's required bindings; raises ``ValueError`` naming the first
        mismatch."""
        checks = [("tau_f", tau_f, self.tau_f), ("tau_e", tau_e, self.tau_e),
                  ("kappa_d", kappa_d, self.kappa_d)]
        if self.flavor != "dvoc":
            checks += [("kappa_f", kappa_f, self.m_p),
                       ("kappa_e", kappa_e, self.m_q)]
        for name, given, required in checks:
            if given is not None and not math.isclose(
                    given, required, rel_tol=1e-12, abs_tol=1e-15):
                raise ValueError(
                    f"{self.flavor} binding violated: {name} must be "
                    f"{required!r}, got {given!r}")

    def slope_p(self) -> float:
        """Equivalent frequency-droop slope (rad/s per W) at the setpoint."""
        return self.gain_f(self.e_star)

    def slope_q_bar(self) -> float:
        """Equivalent RMS voltage-droop slope (V per var) at the setpoint;
        the dvoc cubic is linearised around ``e_star``."""
        if self.flavor == "dvoc":
            return RMS_SCALE * self.k_1 / (2.0 * self.k_2 * self.e_star ** 3)
        return RMS_SCALE * self.m_q


@dataclass(frozen=True)
class GfmState:
    """Voltage magnitude (a state only for dvoc), frequency (a state only
    for vsm), sensor integrator, filtered power and frame angle."""

    e_mag: float
    omega: float
    pll_int: float
    s_filt: complex
    theta: float


def gfm_outputs(p: GfmParams, s: GfmState, omega_s: float) -> Tuple[float, float]:
    """Resolve the (possibly algebraic) voltage magnitude and frequency.

    With a zero time constant the corresponding loop equation is solved in
    closed form; otherwise the state value is passed through.
    """
    if p.tau_e == 0.0:
        e_mag = p.e_star - p.gain_e(0.0) * (s.s_filt.imag - p.q_star)
    else:
        e_mag = s.e_mag
    if p.tau_f == 0.0:
        d_pll = -e_mag
        pll = p.kappa_d * (p.k_p_pll * d_pll + p.k_i_pll * s.pll_int)
        omega = omega_s + p.gain_f(e_mag) * (p.p_star - s.s_filt.real) + pll
    else:
        omega = s.omega
    return e_mag, omega


def gfm_rhs(p: GfmParams, s: GfmState, s_meas: complex,
            omega_s: float) -> Tuple[GfmState, InterfaceOut]:
    """Derivatives plus the interface tuple; the source phase is zero in
    the inverter's own frame by construction.

    ``s_meas`` is the complex power measured at the inverter terminal.
    Derivative entries for algebraically resolved quantities are zero.
    """
    e_mag, omega = gfm_outputs(p, s, omega_s)
    d_s_filt = (s_meas - s.s_filt) / p.tau_p
    d_pll = -e_mag
    if p.tau_e > 0.0:
        d_e_mag = (p.voltage_error(s.e_mag)
                   - p.gain_e(s.e_mag) * (s.s_filt.imag - p.q_star)) / p.tau_e
    else:
        d_e_mag = 0.0
    if p.tau_f > 0.0:
        pll = p.kappa_d * (p.k_p_pll * d_pll + p.k_i_pll * s.pll_int)
        d_omega = (omega_s - s.omega
                   + p.gain_f(e_mag) * (p.p_star - s.s_filt.real) + pll) / p.tau_f
    else:
        d_omega = 0.0
    derivs = GfmState(e_mag=d_e_mag, omega=d_omega, pll_int=d_pll,
                      s_filt=d_s_filt, theta=omega)
    return derivs, InterfaceOut(e_mag, 0.0, omega, s.theta)


@dataclass(frozen=True)
class GfmBus:
    """Steady-state abstraction: droop lines in frequency and RMS voltage."""

    p: float
    q: float


def gfm_steady(p: GfmParams, omega_ss: float, e_bar_mag: float,
               omega_s: float) -> GfmBus:
    """Droop relations ``P = P* - (omega_ss - omega_s)/slope_p`` and
    ``Q = Q* - (|E| - |E*|)/slope_q`` in RMS-phasor volts."""
    e_bar_star = RMS_SCALE * p.e_star
    return GfmBus(
        p=p.p_star - (omega_ss - omega_s) / p.slope_p(),
        q=p.q_star - (e_bar_mag - e_bar_star) / p.slope_q_bar(),
    )
