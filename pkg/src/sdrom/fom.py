"""Full-order backward-Euler Navier-Stokes solver on the Taylor-Hood space,
manufactured solutions, and snapshot storage."""
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import sympy

from . import mesh_fe
from .errors import (ConvergenceError, FormatError, InvalidArgumentError,
                     SolverFailure, TruncatedFileError)

log = logging.getLogger(__name__)

SNAP_MAGIC = b"SDROMSN1"
SNAP_VERSION = 1
_SNAP_HEADER = struct.Struct("<IIIIdd")


class ManufacturedCase:
    """Stream-function manufactured solution on the unit square.

    ``psi = amplitude * sin^2(pi x) sin^2(pi y) g(t)``, ``u = (d_y psi, -d_x psi)``,
    ``p = sin(2 pi x) cos(2 pi y) g(t)`` and the forcing is whatever makes
    ``(u, p)`` solve the Navier-Stokes equations with viscosity ``nu``.

    Parameters
    ----------
    nu : float
    stream_amplitude : float
    profile : {'exp_decay', 'cosine'}
    rate : float
        Decay rate for ``exp_decay`` (g = exp(-rate t)) or angular frequency
        for ``cosine`` (g = cos(rate t)).
    forcing : bool
        If False the forcing is identically zero (useful for decay runs that
        start from an arbitrary state).
    """

    def __init__(self, nu, stream_amplitude=1.0, profile="exp_decay", rate=1.0, forcing=True):
        if nu <= 0:
            raise InvalidArgumentError(f"nu must be positive, got {nu}")
        if profile not in ("exp_decay", "cosine"):
            raise InvalidArgumentError(f"unknown time profile {profile!r}")
        self.nu = float(nu)
        self.stream_amplitude = float(stream_amplitude)
        self.profile = profile
        self.rate = float(rate)
        self.has_forcing = bool(forcing)

        x, y, t = sympy.symbols("x y t", real=True)
        g = sympy.exp(-self.rate * t) if profile == "exp_decay" else sympy.cos(self.rate * t)
        psi = self.stream_amplitude * sympy.sin(sympy.pi * x) ** 2 * sympy.sin(sympy.pi * y) ** 2 * g
        u = sympy.diff(psi, y)
        v = -sympy.diff(psi, x)
        p = sympy.sin(2 * sympy.pi * x) * sympy.cos(2 * sympy.pi * y) * g

        def rhs(c):
            return (sympy.diff(c, t) + u * sympy.diff(c, x) + v * sympy.diff(c, y)
                    - self.nu * (sympy.diff(c, x, 2) + sympy.diff(c, y, 2)))

        fx = rhs(u) + sympy.diff(p, x)
        fy = rhs(v) + sympy.diff(p, y)
        args = (x, y, t)
        self._u = sympy.lambdify(args, [u, v], "numpy")
        self._grad = sympy.lambdify(args, [[sympy.diff(u, x), sympy.diff(u, y)],
                                           [sympy.diff(v, x), sympy.diff(v, y)]], "numpy")
        self._p = sympy.lambdify(args, p, "numpy")
        self._f = sympy.lambdify(args, [fx, fy], "numpy")
        self.key = f"{profile}:{self.rate!r}:A={self.stream_amplitude!r}:nu={self.nu!r}:f={int(self.has_forcing)}"

    @staticmethod
    def _stack(vals, shape):
        return np.stack([np.broadcast_to(np.asarray(v, dtype=float), shape) for v in vals], axis=-1)

    def velocity(self, x, y, t):
        x, y = np.asarray(x, float), np.asarray(y, float)
        return self._stack(self._u(x, y, t), np.broadcast(x, y).shape)

    def velocity_gradient(self, x, y, t):
        """Array (..., 2, 2) with [..., i, j] = d_j u_i."""
        x, y = np.asarray(x, float), np.asarray(y, float)
        shape = np.broadcast(x, y).shape
        rows = [self._stack(row, shape) for row in self._grad(x, y, t)]
        return np.stack(rows, axis=-2)

    def pressure(self, x, y, t):
        x, y = np.asarray(x, float), np.asarray(y, float)
        return np.broadcast_to(np.asarray(self._p(x, y, t), float), np.broadcast(x, y).shape)

    def forcing(self, x, y, t):
        x, y = np.asarray(x, float), np.asarray(y, float)
        shape = np.broadcast(x, y).shape
        if not self.has_forcing:
            return np.zeros(shape + (2,))
        return self._stack(self._f(x, y, t), shape)

    def forcing_at_quad(self, space, t):
        q = space.quad_points
        return self.forcing(q[..., 0], q[..., 1], t)

    def interpolant(self, space, t):
        return mesh_fe.interpolate(space, lambda x, y: tuple(np.moveaxis(self.velocity(x, y, t), -1, 0)))


@dataclass(eq=False)
class SnapshotSet:
    n_per_side: int
    dt: float
    nu: float
    velocity_snapshots: np.ndarray    # (N+1, n_vel)
    element: str = "P2P1"
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        self.velocity_snapshots = np.ascontiguousarray(self.velocity_snapshots, dtype=np.float64)
        if self.velocity_snapshots.ndim != 2:
            raise InvalidArgumentError("velocity_snapshots must be a 2-D array (N+1, n_vel)")
        if self.dt <= 0:
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")
        if self.times is None:
            self.times = self.dt * np.arange(self.n_snapshots)

    @property
    def n_snapshots(self):
        return self.velocity_snapshots.shape[0]

    @property
    def N(self):
        return self.n_snapshots - 1

    @property
    def n_vel(self):
        return self.velocity_snapshots.shape[1]

    @property
    def difference_quotients(self):
        u = self.velocity_snapshots
        return (u[1:] - u[:-1]) / self.dt


def _solve(K, b):
    # symmetric-structure ordering (the saddle block has a zero diagonal),
    # relaxed pivoting, one step of iterative refinement
    lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01)
    x = lu.solve(b)
    return x + lu.solve(b - K @ x)


def solve_fom(case, space, dt, n_steps, nonlinear="picard", tol=1e-10, max_iter=50,
              ops=None, u0=None, t0=0.0):
    """Backward-Euler Taylor-Hood solve, returning velocity snapshots at every step.

    Parameters
    ----------
    case : ManufacturedCase
        Supplies the forcing and, unless ``u0`` is given, the initial condition
        (nodal interpolant of the exact velocity at ``t0``).
    space : TaylorHoodSpace
    dt : float
    n_steps : int
    nonlinear : {'picard', 'newton'}
    tol : float
        Absolute tolerance on the Euclidean norm of the algebraic residual.
    """
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgumentError(f"n_steps must be a positive integer, got {n_steps}")
    if tol <= 0:
        raise InvalidArgumentError(f"tol must be positive, got {tol}")
    if nonlinear not in ("picard", "newton"):
        raise InvalidArgumentError(f"unknown nonlinear solver {nonlinear!r}")
    ops = ops if ops is not None else mesh_fe.assemble(space)
    nu = case.nu
    I = space.interior_dofs
    ni, npre = len(I), space.n_pre

    B = ops.divergence[:, I]
    mean_row = sp.csr_matrix(np.asarray(ops.pressure_mass.sum(axis=0)))   # (1, npre): integrals of P1 hats
    linear = (ops.mass / dt + nu * ops.stiffness).tocsr()[I][:, I]
    M_I = ops.mass.tocsr()[I][:, I]

    u = (case.interpolant(space, t0) if u0 is None else np.array(u0, dtype=float))
    u[~space.interior_mask] = 0.0
    snaps = [u.copy()]
    p = np.zeros(npre)

    def saddle(A):
        return sp.bmat([[A, -B.T, None],
                        [-B, None, mean_row.T],
                        [None, mean_row, None]], format="csc")

    def residual(ui, pi, lam, rhs):
        full = np.zeros(space.n_vel)
        full[I] = ui
        N = mesh_fe.convection_matrix(space, full)[I][:, I]
        r_mom = linear @ ui + N @ ui - B.T @ pi - rhs
        r_div = -B @ ui + mean_row.T.toarray().ravel() * lam
        r_mean = mean_row @ pi
        return np.concatenate([r_mom, r_div, np.atleast_1d(r_mean)]), N

    for n in range(int(n_steps)):
        t_new = t0 + (n + 1) * dt
        F = mesh_fe.load_vector(space, case.forcing_at_quad(space, t_new))[I]
        rhs = M_I @ u[I] / dt + F
        ui, pi, lam = u[I].copy(), p.copy(), 0.0
        res, N = residual(ui, pi, lam, rhs)
        history = [float(np.linalg.norm(res))]
        it = 0
        while history[-1] >= tol:
            if it >= max_iter:
                raise ConvergenceError(
                    f"FOM {nonlinear} iteration did not converge at step {n + 1}: residual {history[-1]:.3e}",
                    step=n + 1, residual=history[-1], history=history)
            if nonlinear == "picard":
                K = saddle((linear + N).tocsc())
                b = np.concatenate([rhs, np.zeros(npre + 1)])
                try:
                    z = _solve(K, b)
                except RuntimeError as exc:
                    raise SolverFailure(f"singular saddle-point system at step {n + 1}") from exc
                ui, pi, lam = z[:ni], z[ni:ni + npre], z[-1]
            else:
                full = np.zeros(space.n_vel)
                full[I] = ui
                R = mesh_fe.convection_jacobian_extra(space, full)[I][:, I]
                K = saddle((linear + N + R).tocsc())
                try:
                    dz = _solve(K, -res)
                except RuntimeError as exc:
                    raise SolverFailure(f"singular saddle-point system at step {n + 1}") from exc
                ui, pi, lam = ui + dz[:ni], pi + dz[ni:ni + npre], lam + dz[-1]
            if not np.all(np.isfinite(ui)):
                raise SolverFailure(f"non-finite FOM iterate at step {n + 1}")
            res, N = residual(ui, pi, lam, rhs)
            history.append(float(np.linalg.norm(res)))
            it += 1
        log.debug("FOM step %d: %d %s iterations, residual %.2e", n + 1, it, nonlinear, history[-1])
        u = np.zeros(space.n_vel)
        u[I] = ui
        p = pi
        snaps.append(u.copy())

    return SnapshotSet(n_per_side=space.mesh.n_per_side, dt=float(dt), nu=float(nu),
                       velocity_snapshots=np.array(snaps),
                       times=t0 + dt * np.arange(int(n_steps) + 1))


def velocity_errors(case, space, snaps, ops=None):
    """Per-snapshot L2 and H1-seminorm errors of ``snaps`` against the exact velocity.

    Integrals use the cell quadrature with the exact fields evaluated at the
    quadrature points.
    """
    q = space.quad_points
    l2, h1 = [], []
    for t, u in zip(snaps.times, snaps.velocity_snapshots):
        eu = case.velocity(q[..., 0], q[..., 1], t) - mesh_fe.eval_velocity(space, u)
        eg = case.velocity_gradient(q[..., 0], q[..., 1], t) - mesh_fe.eval_gradient(space, u)
        l2.append(np.sqrt(mesh_fe.l2_inner(space, eu, eu)))
        h1.append(np.sqrt(mesh_fe.l2_inner(space, eg, eg)))
    return np.array(l2), np.array(h1)


def write_snapshots(snapset, path):
    header = _SNAP_HEADER.pack(SNAP_VERSION, snapset.n_per_side, snapset.n_vel,
                               snapset.n_snapshots, snapset.dt, snapset.nu)
    with open(path, "wb") as fh:
        fh.write(SNAP_MAGIC)
        fh.write(header)
        fh.write(snapset.velocity_snapshots.astype("<f8", copy=False).tobytes(order="C"))


def read_exact(fh, n, offset):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"file truncated at byte {offset + len(data)}: expected {n} bytes at offset {offset}")
    return data


def read_snapshots(path):
    with open(path, "rb") as fh:
        magic = read_exact(fh, 8, 0)
        if magic != SNAP_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {SNAP_MAGIC!r}", 0)
        version, n_per_side, n_vel, n_snap, dt, nu = _SNAP_HEADER.unpack(read_exact(fh, _SNAP_HEADER.size, 8))
        if version != SNAP_VERSION:
            raise FormatError(f"unsupported version {version}", 8)
        if n_per_side < 2 or n_vel == 0 or n_snap == 0:
            raise FormatError(f"invalid shape fields n_per_side={n_per_side} n_vel={n_vel} n_snapshots={n_snap}", 12)
        expected_nodes = (2 * n_per_side + 1) ** 2
        if n_vel != 2 * expected_nodes:
            raise FormatError(f"n_vel={n_vel} inconsistent with n_per_side={n_per_side}", 16)
        if not dt > 0:
            raise FormatError(f"dt must be positive, got {dt}", 24)
        offset = 8 + _SNAP_HEADER.size
        payload = read_exact(fh, 8 * n_vel * n_snap, offset)
        if fh.read(1):
            raise FormatError("trailing bytes after snapshot payload", offset + len(payload))
    data = np.frombuffer(payload, dtype="<f8").reshape(n_snap, n_vel).astype(np.float64)
    return SnapshotSet(n_per_side=n_per_side, dt=dt, nu=nu, velocity_snapshots=data)
