"""Streamline-derivative stabilization pieces: the convective snapshot POD space,
its L2 projector, tau-weighted products and the per-cell tau field."""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import mesh_fe
from .errors import InvalidArgumentError
from .pod import DEFAULT_RANK_TOL, eigendecompose

DEFAULT_C1 = 4.0
DEFAULT_C2 = np.sqrt(2.0)


@dataclass(eq=False)
class ConvectiveBasis:
    modes: np.ndarray          # (M_hat, C, Q, 2), L2-orthonormal quadrature fields
    eigenvalues: np.ndarray    # (M_hat,)
    R: int
    weights: np.ndarray        # (C, Q) quadrature weights of the layout
    source: tuple = ()         # snapshot indices that fed the correlation matrix

    @property
    def M(self):
        return self.modes.shape[0]

    def with_R(self, R):
        if not 0 <= R <= self.M:
            raise InvalidArgumentError(f"R={R} exceeds the convective rank {self.M}")
        return ConvectiveBasis(self.modes, self.eigenvalues, int(R), self.weights, self.source)


def _ip_many(weights, A, B):
    """Matrix of L2 products between two stacks of quadrature fields."""
    a = A.reshape(len(A), -1)
    b = B.reshape(len(B), -1)
    w = np.repeat(weights.ravel(), A.shape[-1]) if A.ndim == 4 else weights.ravel()
    return (a * w) @ b.T


def build_convective_space(snapset, space, R, rank_tol=DEFAULT_RANK_TOL):
    """POD of the convective fields u^n . grad u^n, n = 1..N, in L2."""
    N = snapset.N
    if N < 1:
        raise InvalidArgumentError("need at least one time step")
    fields = np.array([mesh_fe.convective_field(u, u, space) for u in snapset.velocity_snapshots[1:]])
    w = space.quad_weights
    K = _ip_many(w, fields, fields) / N
    K = np.triu(K) + np.triu(K, 1).T
    if not np.any(K):
        lam, Z = np.zeros(0), np.zeros((N, 0))
    else:
        lam, Z = eigendecompose(K, rank_tol)
    if not 0 <= R <= len(lam):
        raise InvalidArgumentError(f"R={R} exceeds the convective rank {len(lam)}")
    modes = np.einsum("nm,ncqd->mcqd", Z, fields) / np.sqrt(N * lam)[:, None, None, None]
    if len(lam):
        G = _ip_many(w, modes, modes)
        L = np.linalg.cholesky(0.5 * (G + G.T))
        modes = np.linalg.solve(L, modes.reshape(len(lam), -1)).reshape(modes.shape)
    return ConvectiveBasis(modes=modes, eigenvalues=lam, R=int(R), weights=w,
                           source=tuple(range(1, N + 1)))


def _check_layout(g, basis):
    if np.shape(g)[:2] != basis.weights.shape or np.shape(g)[-1] != 2:
        raise InvalidArgumentError("quadrature field layout mismatch")


def projection_coefficients(g, basis):
    """(g, phi_hat_i) for i < R; ``g`` may carry extra leading axes."""
    modes = basis.modes[:basis.R]
    w = basis.weights
    return np.einsum("...cqd,icqd,cq->...i", g, modes, w)


def project_PR(g, basis):
    _check_layout(g, basis)
    if basis.R == 0:
        return np.zeros_like(g)
    c = projection_coefficients(g, basis)
    return np.einsum("i,icqd->cqd", c, basis.modes[:basis.R])


def fluct_PRprime(g, basis):
    return g - project_PR(g, basis)


def fluct_many(G, basis):
    """P_R' applied to a stack of fields (k, C, Q, 2)."""
    if basis.R == 0:
        return G.copy()
    c = projection_coefficients(G, basis)
    return G - np.einsum("ki,icqd->kcqd", c, basis.modes[:basis.R])


@dataclass(eq=False)
class TauField:
    values: np.ndarray                 # tau_K per cell
    provenance: str = "offline-formula"   # offline-formula | deim-online | constant
    c1: float = DEFAULT_C1
    c2: float = DEFAULT_C2
    nu: float = 1.0
    speeds: np.ndarray = field(default=None)   # U_K when known

    def ceiling(self, mesh):
        return mesh.cell_diameters ** 2 / (self.c1 * self.nu)


def tau_inner(g, h, tau, space):
    """Sum over cells of tau_K (g, h)_K."""
    if np.shape(g) != np.shape(h) or np.shape(g)[:2] != space.quad_weights.shape:
        raise InvalidArgumentError("quadrature field layout mismatch")
    values = tau.values if isinstance(tau, TauField) else np.asarray(tau)
    if values.shape != (space.mesh.n_cells,):
        raise InvalidArgumentError("tau must have one value per cell")
    prod = (g * h).sum(axis=-1) if np.ndim(g) == 3 else g * h
    return float((values[:, None] * space.quad_weights * prod).sum())


def tau_norm(g, tau, space):
    return np.sqrt(max(tau_inner(g, g, tau, space), 0.0))


def local_speeds(uq, space, cells=None):
    """U_K = ||u||_{L2(K)} / |K|^{1/2} from quadrature values ``uq``."""
    w = space.quad_weights if cells is None else space.quad_weights[cells]
    area = space.mesh.cell_areas if cells is None else space.mesh.cell_areas[cells]
    return np.sqrt((w * (uq ** 2).sum(axis=-1)).sum(axis=1) / area)


def tau_formula(h_K, U_K, c1, c2, nu):
    return 1.0 / (c1 * nu / h_K ** 2 + c2 * U_K / h_K)


def tau_offline(space, u, c1=DEFAULT_C1, c2=DEFAULT_C2, nu=1.0):
    if c1 <= 0 or c2 <= 0 or nu <= 0:
        raise InvalidArgumentError("c1, c2 and nu must be positive")
    U = local_speeds(mesh_fe.eval_velocity(space, u), space)
    vals = tau_formula(space.mesh.cell_diameters, U, c1, c2, nu)
    return TauField(values=vals, provenance="offline-formula", c1=c1, c2=c2, nu=nu, speeds=U)


def write_tau_csv(tau, mesh, path):
    speeds = tau.speeds if tau.speeds is not None else np.full(len(tau.values), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_index", "h_K", "U_K", "tau_K"])
        for k, (h, U, t) in enumerate(zip(mesh.cell_diameters, speeds, tau.values)):
            w.writerow([k, repr(float(h)), repr(float(U)), repr(float(t))])
