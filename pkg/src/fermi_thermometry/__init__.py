"""Decoherence thermometry of an impurity qubit in an ideal Fermi gas.

All quantities are in Fermi units: E_F = hbar = k_B = k_F = 1, so times are
in tau_F and temperatures in T_F.
"""
from .basis import BasisSet, CouplingSpec, Geometry, GeometryKind, ThermalState, prepare
from .levitov import DecoherenceTrace, Spectrum, absorption_spectrum, decoherence_function

__version__ = "0.1.0"

__all__ = [
    "BasisSet",
    "CouplingSpec",
    "DecoherenceTrace",
    "Geometry",
    "GeometryKind",
    "Spectrum",
    "ThermalState",
    "absorption_spectrum",
    "decoherence_function",
    "prepare",
]
