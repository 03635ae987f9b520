"""Multi-fidelity models of grids hosting synchronous generators and
grid-following / grid-forming inverters.

Dynamic models: stationary-frame ``m1``, synchronous-frame ``m2`` and the
algebraic-network ``m2p``.  Steady state: the frequency-aware phasor
solver ``m3``, its synchronous-frequency variant ``m3p`` and a closed-form
lossless frequency estimate.
"""

__version__ = "0.1.0"

from . import frames, network, resources, sim, steady  # noqa: F401
