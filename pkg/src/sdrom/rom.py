"""Reduced operators and time integration of the Galerkin, streamline-derivative
stabilized (implicit and semi-implicit) and penalty POD-ROMs."""
import csv
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import mesh_fe, stab
from .deim import deim_online
from .errors import (ConvergenceError, FormatError, InvalidArgumentError,
                     SolverFailure)
from .fom import read_exact

log = logging.getLogger(__name__)

SCHEMES = ("implicit", "semi_implicit", "galerkin", "penalty")
TRAJ_MAGIC = b"SDROMTR1"
TRAJ_VERSION = 1
_TRAJ_HEADER = struct.Struct("<IIIIdd")

# Poincare constant of the unit square: ||v|| <= C_P ||grad v|| on H1_0
POINCARE_UNIT_SQUARE = 1.0 / (np.sqrt(2.0) * np.pi)


@dataclass(eq=False)
class ReducedModel:
    """Everything the online phase needs.

    ``tau_source`` is one of ``None`` (tau = 0), a :class:`stab.TauField`
    (frozen), the string ``'online'`` (full per-cell formula evaluated from
    the previous ROM state) or a :class:`deim.DeimModel`.
    """
    space: object
    ops: object
    nu: float
    modes: np.ndarray            # (n_vel, r)
    mass_r: np.ndarray
    stiff_r: np.ndarray
    trilinear_r: np.ndarray      # T[i, j, k] = b(phi_j, phi_k, phi_i)
    mode_quad_values: np.ndarray     # (r, C, Q, 2)
    mode_quad_gradients: np.ndarray  # (r, C, Q, 2, 2)
    conv_basis: stab.ConvectiveBasis
    case: object = None
    tau_source: object = None
    c1: float = stab.DEFAULT_C1
    c2: float = stab.DEFAULT_C2
    offline_seconds: float = 0.0

    @property
    def r(self):
        return self.modes.shape[1]

    def force_r(self, t):
        """Reduced load vector <f(t), phi_i> and the quadrature L2 norm of f(t)."""
        if self.case is None:
            return np.zeros(self.r), 0.0
        fq = self.case.forcing_at_quad(self.space, t)
        F = self.modes.T @ mesh_fe.load_vector(self.space, fq)
        return F, np.sqrt(mesh_fe.l2_inner(self.space, fq, fq))

    def velocity_at_quad(self, a):
        return np.einsum("i,icqd->cqd", a, self.mode_quad_values)

    def full_vector(self, a):
        return self.modes @ a


@dataclass
class ROMConfig:
    scheme: str = "implicit"
    dt: float = 0.01
    n_steps: int = 10
    picard_tol: float = 1e-10
    picard_max: int = 100
    r: int = 0
    R: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidArgumentError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.dt > 0:
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 0:
            raise InvalidArgumentError("n_steps must be >= 0")
        if self.scheme == "penalty" and self.R != 0:
            raise InvalidArgumentError("penalty scheme requires R = 0")


@dataclass(eq=False)
class ROMTrajectory:
    coefficients: np.ndarray     # (N+1, r)
    times: np.ndarray
    picard_iters: np.ndarray
    energy: np.ndarray           # ||u_r^n||^2
    grad_norm: np.ndarray        # ||grad u_r^n||^2
    stab_norm: np.ndarray        # ||P_R'(conv)||_tau at step n (0 for n = 0)
    forcing_l2: np.ndarray       # ||f^n||_{L2} (0 for n = 0)
    clamp_count: np.ndarray = field(default=None)
    tau_cond: np.ndarray = field(default=None)
    scheme: str = ""
    dt: float = 0.0
    nu: float = 0.0


def build_reduced(basis, conv_basis, space, ops, nu, r=None, case=None, tau_source=None,
                  c1=stab.DEFAULT_C1, c2=stab.DEFAULT_C2):
    """Assemble all reduced operators for the leading ``r`` POD modes."""
    start = time.perf_counter()
    r = basis.M if r is None else int(r)
    if r < 1:
        raise InvalidArgumentError("r must be >= 1")
    Phi = basis.truncate(r)
    mass_r = Phi.T @ (ops.mass @ Phi)
    stiff_r = Phi.T @ (ops.stiffness @ Phi)
    vals = np.array([mesh_fe.eval_velocity(space, Phi[:, i]) for i in range(r)])
    grads = np.array([mesh_fe.eval_gradient(space, Phi[:, i]) for i in range(r)])
    w = space.quad_weights
    T = np.empty((r, r, r))
    for j in range(r):
        adv = np.einsum("cqe,kcqde->kcqd", vals[j], grads)      # phi_j . grad phi_k
        Cj = np.einsum("kcqd,icqd,cq->ki", adv, vals, w)         # (phi_j . grad phi_k, phi_i)
        T[:, j, :] = 0.5 * (Cj.T - Cj)
    model = ReducedModel(space=space, ops=ops, nu=float(nu), modes=Phi,
                         mass_r=0.5 * (mass_r + mass_r.T), stiff_r=0.5 * (stiff_r + stiff_r.T),
                         trilinear_r=T, mode_quad_values=vals, mode_quad_gradients=grads,
                         conv_basis=conv_basis, case=case, tau_source=tau_source, c1=c1, c2=c2)
    model.offline_seconds = time.perf_counter() - start
    log.info("reduced model r=%d: offline assembly %.3fs, O(r^2 n_vel + r^3 n_quad) with n_vel=%d, n_quad=%d",
             r, model.offline_seconds, space.n_vel, w.size)
    return model


def reduced_ic(u0, basis, ops, r=None):
    """Elliptic projection of ``u0`` onto the span of the leading ``r`` modes."""
    Phi = basis.modes if r is None else basis.truncate(r)
    if Phi.shape[1] == 0:
        raise InvalidArgumentError("basis is empty")
    if basis.inner_product == "H10":
        return Phi.T @ (ops.stiffness @ u0)
    return mesh_fe.elliptic_project(u0, Phi, ops.stiffness)


def convection_operator(model, w):
    """Matrix N with (N a)_i = b(w_r, a_r, phi_i)."""
    return np.einsum("ijk,j->ik", model.trilinear_r, w)


def _stream_fields(model, w):
    """w_r . grad phi_k at the quadrature points, stacked over k."""
    wq = model.velocity_at_quad(w)
    return np.einsum("cqe,kcqde->kcqd", wq, model.mode_quad_gradients)


def stabilization_operator(model, w, tau, project=True):
    """Matrix S with S[i, k] = (P_R'(w.grad phi_k), P_R'(w.grad phi_i))_tau.

    With ``project=False`` the fluctuation operator is dropped (penalty form).
    """
    g = _stream_fields(model, w)
    if project:
        g = stab.fluct_many(g, model.conv_basis)
    wt = tau.values[:, None] * model.space.quad_weights
    flat = g.reshape(len(g), -1)
    return (flat * np.repeat(wt.ravel(), 2)) @ flat.T


def tau_for_state(model, a):
    """Per-cell tau for the step that starts from coefficients ``a``.

    Returns the TauField and the number of clamped cells (DEIM only).
    """
    src = model.tau_source
    ncell = model.space.mesh.n_cells
    if src is None:
        return stab.TauField(values=np.zeros(ncell), provenance="constant", nu=model.nu), 0, np.nan
    if isinstance(src, stab.TauField):
        return src, 0, np.nan
    if isinstance(src, str) and src == "online":
        U = stab.local_speeds(model.velocity_at_quad(a), model.space)
        vals = stab.tau_formula(model.space.mesh.cell_diameters, U, model.c1, model.c2, model.nu)
        return stab.TauField(values=vals, provenance="offline-formula", c1=model.c1, c2=model.c2,
                             nu=model.nu, speeds=U), 0, np.nan
    tau, diag = deim_online(src, a, model)
    return tau, diag["clamp_count"], diag["cond"]


def _solve_small(A, b, step):
    try:
        x = sla.solve(A, b)
    except (sla.LinAlgError, ValueError) as exc:
        raise SolverFailure(f"singular reduced system at step {step}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverFailure(f"non-finite reduced solution at step {step}")
    return x


def _uses_stab(config):
    return config.scheme in ("implicit", "semi_implicit", "penalty")


def step_implicit(a_n, model, config, t_new, tau, step=None):
    """Backward-Euler step solved by Picard iteration on both nonlinearities.

    Returns the new coefficients, the iteration count and the converged
    stabilization matrix (``None`` for the Galerkin scheme).
    """
    L = model.mass_r / config.dt + model.nu * model.stiff_r
    F, _ = model.force_r(t_new)
    rhs = model.mass_r @ a_n / config.dt + F
    project = config.scheme != "penalty"
    use_stab = _uses_stab(config)
    a = a_n.copy()
    history = []
    for it in range(config.picard_max + 1):
        A = L + convection_operator(model, a)
        S = stabilization_operator(model, a, tau, project) if use_stab else None
        if S is not None:
            A = A + S
        res = float(np.linalg.norm(A @ a - rhs))
        history.append(res)
        if res < config.picard_tol:
            return a, it, S
        if it == config.picard_max:
            break
        a = _solve_small(A, rhs, step)
    raise ConvergenceError(
        f"Picard iteration did not converge at step {step}: residual {history[-1]:.3e}",
        step=step, residual=history[-1], history=history)


def step_semi_implicit(a_n, model, config, t_new, tau, step=None):
    """Linearly implicit step: convecting and stabilizing velocity frozen at ``a_n``."""
    L = model.mass_r / config.dt + model.nu * model.stiff_r
    F, _ = model.force_r(t_new)
    rhs = model.mass_r @ a_n / config.dt + F
    S = stabilization_operator(model, a_n, tau)
    A = L + convection_operator(model, a_n) + S
    return _solve_small(A, rhs, step), 1, S


def run(model, config, a0, t0=0.0):
    """Time-step the ROM for ``config.n_steps`` steps from coefficients ``a0``."""
    a0 = np.asarray(a0, dtype=float)
    if a0.shape != (model.r,):
        raise InvalidArgumentError(f"a0 has shape {a0.shape}, expected ({model.r},)")
    if config.scheme in ("implicit", "semi_implicit") and config.R != model.conv_basis.R:
        raise InvalidArgumentError(f"config R={config.R} differs from the model's convective basis "
                                   f"R={model.conv_basis.R}")
    if config.scheme == "galerkin":
        saved, model.tau_source = model.tau_source, None
    N = int(config.n_steps)
    coeffs = np.zeros((N + 1, model.r))
    coeffs[0] = a0
    iters = np.zeros(N + 1, dtype=int)
    stab_norm = np.zeros(N + 1)
    forcing = np.zeros(N + 1)
    clamps = np.zeros(N + 1, dtype=int)
    conds = np.full(N + 1, np.nan)
    stepper = step_semi_implicit if config.scheme == "semi_implicit" else step_implicit
    try:
        a = a0.copy()
        for n in range(N):
            t_new = t0 + (n + 1) * config.dt
            tau, nclamp, cond = tau_for_state(model, a)
            try:
                a_new, it, S = stepper(a, model, config, t_new, tau, step=n + 1)
            except ConvergenceError as exc:
                exc.step = n + 1
                raise
            if S is not None:
                stab_norm[n + 1] = np.sqrt(max(a_new @ S @ a_new, 0.0))
            forcing[n + 1] = model.force_r(t_new)[1]
            iters[n + 1], clamps[n + 1], conds[n + 1] = it, nclamp, cond
            coeffs[n + 1] = a_new
            a = a_new
    finally:
        if config.scheme == "galerkin":
            model.tau_source = saved
    energy = np.einsum("ni,ij,nj->n", coeffs, model.mass_r, coeffs)
    grad = np.einsum("ni,ij,nj->n", coeffs, model.stiff_r, coeffs)
    return ROMTrajectory(coefficients=coeffs, times=t0 + config.dt * np.arange(N + 1),
                         picard_iters=iters, energy=energy, grad_norm=grad, stab_norm=stab_norm,
                         forcing_l2=forcing, clamp_count=clamps, tau_cond=conds,
                         scheme=config.scheme, dt=config.dt, nu=model.nu)


def stability_margins(traj, poincare=POINCARE_UNIT_SQUARE):
    """Both sides of the summed energy bound for every k.

    The H^{-1} norm of the forcing is replaced by ``poincare * ||f||_{L2}``,
    which can only enlarge the right-hand side.

    Returns
    -------
    lhs, rhs : arrays of length N+1
    """
    dt, nu = traj.dt, traj.nu
    dissip = dt * (nu * traj.grad_norm[1:] + traj.stab_norm[1:] ** 2)
    src = dt / nu * (poincare * traj.forcing_l2[1:]) ** 2
    lhs = traj.energy + np.concatenate([[0.0], np.cumsum(dissip)])
    rhs = traj.energy[0] + np.concatenate([[0.0], np.cumsum(src)])
    return lhs, rhs


def stability_violations(traj, rel_slack=1e-9):
    lhs, rhs = stability_margins(traj)
    return np.flatnonzero(lhs > rhs * (1 + rel_slack) + 1e-300)


def write_trajectory_csv(traj, path):
    r = traj.coefficients.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + [f"a_{i + 1}" for i in range(r)]
                   + ["energy", "grad_norm", "stab_norm", "picard_iters"])
        for n in range(len(traj.times)):
            w.writerow([repr(float(traj.times[n]))] + [repr(float(x)) for x in traj.coefficients[n]]
                       + [repr(float(traj.energy[n])), repr(float(traj.grad_norm[n])),
                          repr(float(traj.stab_norm[n])), int(traj.picard_iters[n])])


def write_trajectory(traj, path, n_per_side):
    n_times, r = traj.coefficients.shape
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(_TRAJ_HEADER.pack(TRAJ_VERSION, n_per_side, r, n_times, traj.dt, traj.nu))
        fh.write(traj.coefficients.astype("<f8").tobytes(order="C"))


def read_trajectory(path):
    """Coefficients, dt, nu and n_per_side from an SDROMTR1 file."""
    with open(path, "rb") as fh:
        magic = read_exact(fh, 8, 0)
        if magic != TRAJ_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {TRAJ_MAGIC!r}", 0)
        version, n_per_side, r, n_times, dt, nu = _TRAJ_HEADER.unpack(read_exact(fh, _TRAJ_HEADER.size, 8))
        if version != TRAJ_VERSION:
            raise FormatError(f"unsupported version {version}", 8)
        off = 8 + _TRAJ_HEADER.size
        data = np.frombuffer(read_exact(fh, 8 * r * n_times, off), dtype="<f8").astype(float)
    return data.reshape(n_times, r), dt, nu, n_per_side
