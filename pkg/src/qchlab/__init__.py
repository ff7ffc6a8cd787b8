"""qchlab: stochastically quantized lattice fields, quantum-classical hybrid
dynamics with backreaction, and the geometric phase induced by slow charge
loops, all at desk scale with built-in oracle checks."""

__version__ = "0.1.0"

from . import geomphase, hybrid, lattice, quantum, sde  # noqa: F401
