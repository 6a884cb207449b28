"""Streamline-derivative stabilized POD reduced-order models for incompressible Navier-Stokes.

Modules
-------
mesh_fe   Taylor-Hood P2/P1 mesh, quadrature and assembly
fom       backward-Euler full-order solver, manufactured cases, snapshot I/O
pod       POD bases by the method of snapshots
stab      convective POD space, fluctuation projector and tau fields
rom       reduced operators and time stepping
deim      empirical interpolation of tau
harness   error norms, studies and CSV reports
"""
from . import deim, fom, harness, mesh_fe, pod, rom, stab
from .errors import (ConvergenceError, DegenerateBasisError, FormatError, InvalidArgumentError,
                     InvalidMetricError, NumericFailure, SdromError, SolverFailure,
                     TruncatedFileError)

__version__ = "0.1.0"
