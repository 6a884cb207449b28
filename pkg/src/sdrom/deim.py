"""Discrete empirical interpolation of the per-cell stabilization parameter."""
import csv
import logging
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import stab
from .errors import FormatError, InvalidArgumentError, NumericFailure
from .fom import read_exact

log = logging.getLogger(__name__)

DEIM_MAGIC = b"SDROMDM1"
DEIM_VERSION = 1
_DEIM_HEADER = struct.Struct("<III")
SVD_RANK_TOL = 1e-12
COND_LIMIT = 1e12
CEILING_SLACK = 1e-6


@dataclass(eq=False)
class DeimModel:
    Q: np.ndarray          # (N_K, r_tilde), orthonormal columns
    indices: np.ndarray    # 0-based cell indices, selection order
    c1: float
    c2: float
    nu: float
    singular_values: np.ndarray = None

    @property
    def r_tilde(self):
        return self.Q.shape[1]

    @property
    def Q_I(self):
        return self.Q[self.indices]

    @property
    def cond(self):
        return float(np.linalg.cond(self.Q_I))


def greedy_indices(Q):
    """Interpolation indices chosen one basis column at a time.

    The first index maximizes ``|rho_1|``; each later index maximizes the
    residual of ``rho_m`` after interpolating it with the previous columns
    at the previous indices.  Ties go to the lowest index.
    """
    Q = np.asarray(Q, dtype=float)
    idx = [int(np.argmax(np.abs(Q[:, 0])))]
    for m in range(1, Q.shape[1]):
        Qm = Q[:, :m]
        QI = Qm[idx]
        if np.linalg.cond(QI) > COND_LIMIT:
            raise NumericFailure(f"interpolation matrix singular at greedy step {m + 1}")
        c = np.linalg.solve(QI, Q[idx, m])
        res = Q[:, m] - Qm @ c
        idx.append(int(np.argmax(np.abs(res))))
    if len(set(idx)) != len(idx):
        raise NumericFailure("greedy selection repeated an index")
    return np.array(idx, dtype=np.int64)


def deim_offline(tau_snapshots, r_tilde, c1=stab.DEFAULT_C1, c2=stab.DEFAULT_C2, nu=1.0):
    """SVD basis of tau snapshots and greedy interpolation indices.

    Parameters
    ----------
    tau_snapshots : array (N_K, N) or sequence of TauField
        One column per offline time.
    r_tilde : int
    """
    if not isinstance(tau_snapshots, np.ndarray):
        fields = list(tau_snapshots)
        if fields and isinstance(fields[0], stab.TauField):
            c1, c2, nu = fields[0].c1, fields[0].c2, fields[0].nu
            fields = [f.values for f in fields]
        tau_snapshots = np.column_stack(fields)
    S = np.asarray(tau_snapshots, dtype=float)
    if S.ndim != 2:
        raise InvalidArgumentError("tau snapshots must form a 2-D array (N_K, N)")
    nk, n = S.shape
    if int(r_tilde) != r_tilde or not 1 <= r_tilde <= min(n, nk):
        raise InvalidArgumentError(f"r_tilde={r_tilde} must lie in 1..{min(n, nk)}")
    U, sv, _ = np.linalg.svd(S, full_matrices=False)
    rank = int(np.sum(sv > SVD_RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0
    if r_tilde > rank:
        raise InvalidArgumentError(f"r_tilde={r_tilde} exceeds the numerical rank {rank} of the tau snapshots")
    Q = U[:, :int(r_tilde)].copy()
    idx = greedy_indices(Q)
    model = DeimModel(Q=Q, indices=idx, c1=float(c1), c2=float(c2), nu=float(nu), singular_values=sv)
    if model.cond > COND_LIMIT:
        raise NumericFailure(f"interpolation matrix condition number {model.cond:.3e}")
    return model


def numerical_rank(tau_snapshots):
    sv = np.linalg.svd(np.asarray(tau_snapshots, dtype=float), compute_uv=False)
    return int(np.sum(sv > SVD_RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0


def reconstruct(model, tau_at_indices):
    """Coefficients of the interpolant and the full per-cell field."""
    try:
        alpha = sla.solve(model.Q_I, tau_at_indices)
    except sla.LinAlgError as exc:
        raise NumericFailure("interpolation matrix is singular") from exc
    return alpha, model.Q @ alpha


def deim_online(model, a, rom_model):
    """Online tau from ROM coefficients ``a``, evaluating the formula only on
    the interpolation cells.

    Returns the clamped TauField and a diagnostics dict with keys
    ``clamp_count``, ``cond``, ``alpha`` and ``raw`` (unclamped field).
    """
    space = rom_model.space
    idx = model.indices
    if model.Q.shape[0] != space.mesh.n_cells:
        raise InvalidArgumentError("DEIM model was built on a different mesh")
    uq = np.einsum("i,icqd->cqd", a, rom_model.mode_quad_values[:, idx])
    U = stab.local_speeds(uq, space, cells=idx)
    h = space.mesh.cell_diameters
    tau_I = stab.tau_formula(h[idx], U, model.c1, model.c2, model.nu)
    alpha, raw = reconstruct(model, tau_I)
    ceiling = h ** 2 / (model.c1 * model.nu)
    clamped = np.clip(raw, 0.0, ceiling)
    # round-off at the ceiling is clipped silently; only real violations count
    n_clamped = int(np.count_nonzero((raw < 0) | (raw > ceiling * (1 + CEILING_SLACK))))
    if n_clamped:
        log.debug("DEIM tau: clamped %d cells", n_clamped)
    tau = stab.TauField(values=clamped, provenance="deim-online", c1=model.c1, c2=model.c2, nu=model.nu)
    return tau, {"clamp_count": n_clamped, "cond": model.cond, "alpha": alpha, "raw": raw, "tau_I": tau_I}


def offline_tau_snapshots(snapset, space, c1=stab.DEFAULT_C1, c2=stab.DEFAULT_C2, nu=None, times=None):
    """Per-cell tau columns evaluated from FOM snapshots u^1..u^N (or the given indices)."""
    nu = snapset.nu if nu is None else nu
    which = range(1, snapset.n_snapshots) if times is None else times
    return np.column_stack([stab.tau_offline(space, snapset.velocity_snapshots[n], c1, c2, nu).values
                            for n in which])


def write_deim(model, path):
    nk, rt = model.Q.shape
    with open(path, "wb") as fh:
        fh.write(DEIM_MAGIC)
        fh.write(_DEIM_HEADER.pack(DEIM_VERSION, nk, rt))
        fh.write(model.Q.astype("<f8").tobytes(order="F"))
        fh.write((model.indices + 1).astype("<u4").tobytes())
        fh.write(struct.pack("<ddd", model.c1, model.c2, model.nu))


def read_deim(path):
    with open(path, "rb") as fh:
        magic = read_exact(fh, 8, 0)
        if magic != DEIM_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {DEIM_MAGIC!r}", 0)
        version, nk, rt = _DEIM_HEADER.unpack(read_exact(fh, _DEIM_HEADER.size, 8))
        if version != DEIM_VERSION:
            raise FormatError(f"unsupported version {version}", 8)
        if rt == 0 or rt > nk:
            raise FormatError(f"invalid r_tilde={rt} for N_K={nk}", 16)
        off = 8 + _DEIM_HEADER.size
        Q = np.frombuffer(read_exact(fh, 8 * nk * rt, off), dtype="<f8").reshape(rt, nk).T.copy()
        off += 8 * nk * rt
        idx = np.frombuffer(read_exact(fh, 4 * rt, off), dtype="<u4").astype(np.int64)
        if np.any(idx < 1) or np.any(idx > nk):
            raise FormatError("interpolation index out of range", off)
        off += 4 * rt
        c1, c2, nu = struct.unpack("<ddd", read_exact(fh, 24, off))
    return DeimModel(Q=Q, indices=idx - 1, c1=c1, c2=c2, nu=nu)


def write_diagnostics_csv(traj, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "clamp_count", "cond_Q_I"])
        for n in range(1, len(traj.times)):
            w.writerow([n, int(traj.clamp_count[n]), repr(float(traj.tau_cond[n]))])
