"""Representations of balanced three-phase signals and power.

A balanced (zero-sum) three-phase signal has two degrees of freedom and is
carried here in four interchangeable forms:

* stationary ``abc`` samples,
* a complex *space phasor* (the 120-degree weighted sum of the phases),
* a rotating-frame sample, either in the shared synchronous-speed frame
  ("global DQ") or in a per-resource frame with its own angle ("local dq"),
* a constant RMS phasor, valid in sinusoidal steady state.

Active/reactive/apparent power is defined in every representation and the
definitions agree exactly; the test suite pins that down.  All quantities
are SI.  Everything in this module is a pure function of its arguments.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "BalanceError",
    "FrameMismatchError",
    "GAMMA",
    "UPSILON",
    "ThreePhaseSignal",
    "SpacePhasor",
    "GlobalDq",
    "LocalDq",
    "FrameSample",
    "RmsPhasor",
    "PowerTriple",
    "abc_to_space",
    "space_to_abc",
    "space_to_frame",
    "frame_to_space",
    "frame_to_rms_phasor",
    "dq_to_abc_source",
    "power_abc",
    "power_frame",
    "power_rms",
]

#: Real 2x3 map taking stacked abc samples to (Re, Im) of the space phasor.
GAMMA = np.array([[1.0, -0.5, -0.5],
                  [0.0, math.sqrt(3.0) / 2.0, -math.sqrt(3.0) / 2.0]])

#: Skew map used by the abc-domain reactive-power form q = v^T G^T UPSILON G i.
UPSILON = (2.0 / 3.0) * np.array([[0.0, -1.0], [1.0, 0.0]])

_ALPHA = cmath.exp(2j * math.pi / 3.0)
_ALPHA2 = cmath.exp(4j * math.pi / 3.0)

BALANCE_RTOL = 1e-9


class BalanceError(ValueError):
    """Raised when a three-phase input does not sum to zero."""


class FrameMismatchError(ValueError):
    """Raised when two frame samples do not share a reference frame."""


@dataclass(frozen=True)
class ThreePhaseSignal:
    """Instantaneous a/b/c values of a balanced quantity (V or A)."""

    a: float
    b: float
    c: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


@dataclass(frozen=True)
class SpacePhasor:
    """Complex scalar encoding a balanced three-phase signal."""

    value: complex


@dataclass(frozen=True)
class GlobalDq:
    """Shared rotating frame at the fixed synchronous frequency (rad/s)."""

    omega_s: float


@dataclass(frozen=True)
class LocalDq:
    """Per-resource rotating frame; ``theta`` is the accumulated angle (rad).

    The angle is a simulation state integrated by the caller and is kept
    unwrapped; wrapping is a display concern only.
    """

    theta: float


Frame = Union[GlobalDq, LocalDq]


@dataclass(frozen=True)
class FrameSample:
    """A space phasor projected onto a rotating reference frame."""

    value: complex
    frame: Frame


@dataclass(frozen=True)
class RmsPhasor:
    """Constant complex phasor; magnitude equals the per-phase RMS value."""

    value: complex


@dataclass(frozen=True)
class PowerTriple:
    """Active, reactive and complex-apparent power (W, var, VA)."""

    p: float
    q: float
    s: complex


def _check_balanced(a: float, b: float, c: float) -> None:
    scale = max(1.0, abs(a), abs(b), abs(c))
    if abs(a + b + c) > BALANCE_RTOL * scale:
        raise BalanceError(
            f"three-phase signal is not balanced: a+b+c = {a + b + c!r} "
            f"exceeds {BALANCE_RTOL} * {scale}"
        )


def abc_to_space(x: ThreePhaseSignal) -> SpacePhasor:
    """Project balanced abc samples onto the complex space phasor.

    ``value = x_a + exp(j*2*pi/3)*x_b + exp(j*4*pi/3)*x_c``; rejects
    unbalanced input.
    """
    _check_balanced(x.a, x.b, x.c)
    return SpacePhasor(x.a + _ALPHA * x.b + _ALPHA2 * x.c)


def space_to_abc(xs: SpacePhasor) -> ThreePhaseSignal:
    """Recover the (balanced) abc samples from a space phasor."""
    re = xs.value.real
    im = xs.value.imag
    third = 2.0 / 3.0
    a = third * re
    b = third * (-0.5 * re + (math.sqrt(3.0) / 2.0) * im)
    c = third * (-0.5 * re - (math.sqrt(3.0) / 2.0) * im)
    return ThreePhaseSignal(a, b, c)


def space_to_frame(xs: SpacePhasor, frame: Frame, t: float) -> FrameSample:
    """Project a space phasor onto a rotating frame at time ``t``.

    For the global frame the rotation angle is ``omega_s * t``; for a local
    frame the caller supplies the accumulated angle in the frame descriptor.
    """
    if isinstance(frame, GlobalDq):
        value = xs.value * cmath.exp(-1j * frame.omega_s * t)
    elif isinstance(frame, LocalDq):
        value = xs.value * cmath.exp(-1j * frame.theta)
    else:  # pragma: no cover - defensive
        raise TypeError(f"unknown frame {frame!r}")
    return FrameSample(value, frame)


def frame_to_space(x: FrameSample, t: float) -> SpacePhasor:
    """Invert :func:`space_to_frame`."""
    if isinstance(x.frame, GlobalDq):
        return SpacePhasor(x.value * cmath.exp(1j * x.frame.omega_s * t))
    return SpacePhasor(x.value * cmath.exp(1j * x.frame.theta))


def frame_to_rms_phasor(x: FrameSample, t: float, omega_ss: float,
                        t_ss: float = 0.0) -> RmsPhasor:
    """Map a rotating-frame sample to the fixed RMS phasor.

    Valid once the system is in sinusoidal steady state at ``omega_ss``
    (``t >= t_ss``).  Global frame: ``sqrt(2)/3 * X * exp(j*(omega_s -
    omega_ss)*t)``.  Local frame: the constant frame-offset is recovered
    from the unwrapped angle as ``theta(t) - omega_ss*t``, which no longer
    depends on ``t`` in steady state.
    """
    if t < t_ss:
        raise ValueError(f"t={t} precedes steady state at t_ss={t_ss}")
    k = math.sqrt(2.0) / 3.0
    if isinstance(x.frame, GlobalDq):
        rot = cmath.exp(1j * (x.frame.omega_s - omega_ss) * t)
    else:
        rot = cmath.exp(1j * (x.frame.theta - omega_ss * t))
    return RmsPhasor(k * x.value * rot)


def dq_to_abc_source(e_mag: float, delta: float, theta: float) -> ThreePhaseSignal:
    """Instantaneous abc source voltages from a local-frame voltage.

    ``e_mag``/``delta`` are the magnitude and phase of the source in its own
    rotating frame and ``theta`` is that frame's accumulated angle.  The
    a-phase is ``(2/3) e_mag cos(theta + delta)`` and b/c follow with the
    usual 120-degree structure; the output is balanced by construction.
    """
    if e_mag < 0.0:
        raise ValueError(f"e_mag must be non-negative, got {e_mag}")
    ang = theta + delta
    cos_t = math.cos(ang)
    sin_t = math.sin(ang)
    a = (2.0 / 3.0) * e_mag * cos_t
    b = -(1.0 / 3.0) * e_mag * cos_t + (1.0 / math.sqrt(3.0)) * e_mag * sin_t
    c = -(1.0 / 3.0) * e_mag * cos_t - (1.0 / math.sqrt(3.0)) * e_mag * sin_t
    return ThreePhaseSignal(a, b, c)


def power_abc(v: ThreePhaseSignal, i: ThreePhaseSignal) -> PowerTriple:
    """Instantaneous power from abc samples: ``p = v.i``, ``q`` via the
    skew form, ``s = p + jq``."""
    _check_balanced(v.a, v.b, v.c)
    _check_balanced(i.a, i.b, i.c)
    va = v.as_array()
    ia = i.as_array()
    p = float(va @ ia)
    q = float(va @ (GAMMA.T @ UPSILON @ GAMMA) @ ia)
    return PowerTriple(p, q, complex(p, q))


def _frames_match(f1: Frame, f2: Frame) -> bool:
    if type(f1) is not type(f2):
        return False
    if isinstance(f1, GlobalDq):
        return math.isclose(f1.omega_s, f2.omega_s, rel_tol=1e-12, abs_tol=1e-12)
    return math.isclose(f1.theta, f2.theta, rel_tol=1e-12, abs_tol=1e-12)


def power_frame(v: FrameSample, i: FrameSample) -> PowerTriple:
    """Instantaneous power from two samples in one rotating frame:
    ``s = (2/3) v conj(i)``."""
    if not _frames_match(v.frame, i.frame):
        raise FrameMismatchError(
            f"voltage frame {v.frame!r} and current frame {i.frame!r} differ"
        )
    s = (2.0 / 3.0) * v.value * i.value.conjugate()
    return PowerTriple(s.real, s.imag, s)


def power_rms(v: RmsPhasor, i: RmsPhasor) -> PowerTriple:
    """Steady-state power from RMS phasors: ``s = 3 v conj(i)``."""
    s = 3.0 * v.value * i.value.conjugate()
    return PowerTriple(s.real, s.imag, s)
