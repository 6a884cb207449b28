"""POD bases by the method of snapshots under the H1_0 or L2 inner product."""
import csv
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (FormatError, InvalidArgumentError, InvalidMetricError,
                     NumericFailure)
from .fom import read_exact

POD_MAGIC = b"SDROMPD1"
POD_VERSION = 1
_IP_TAGS = {"H10": 0, "L2": 1}
_POD_HEADER = struct.Struct("<IBII")

DEFAULT_RANK_TOL = 1e-12


def gram_operator(ip, ops):
    """Gram matrix of the inner product ``ip`` ('H10' -> stiffness, 'L2' -> mass)."""
    ip = normalize_ip(ip)
    return ops.stiffness if ip == "H10" else ops.mass


def normalize_ip(ip):
    tag = str(ip).upper().replace("_", "")
    if tag in ("H10", "H1", "H01"):
        return "H10"
    if tag == "L2":
        return "L2"
    raise InvalidArgumentError(f"unknown inner product {ip!r}; expected H10 or L2")


def check_spd(gram, interior):
    """Raise InvalidMetricError unless ``gram`` restricted to ``interior`` is SPD.

    Uses an LU factorization with symmetric ordering and no off-diagonal
    pivoting: for a symmetric matrix all pivots are positive iff it is
    positive definite.
    """
    G = sp.csr_matrix(gram)[interior][:, interior]
    asym = abs(G - G.T).max() if G.nnz else 0.0
    if asym > 1e-12 * max(abs(G).max(), 1e-300):
        raise InvalidMetricError("Gram operator is not symmetric")
    if G.shape[0] == 0:
        return
    try:
        lu = spla.splu(G.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise InvalidMetricError("Gram operator is singular on interior dofs") from exc
    if not np.all(lu.U.diagonal() > 0):
        raise InvalidMetricError("Gram operator is not positive definite on interior dofs")


@dataclass(eq=False)
class CorrelationMatrix:
    entries: np.ndarray
    normalization: float
    with_quotients: bool
    n_snapshots: int     # N+1 plain snapshots; quotient vectors follow them


def snapshot_vectors(snapset, with_quotients):
    """Snapshot ensemble as columns: u^0..u^N then (optionally) the N difference quotients."""
    Y = snapset.velocity_snapshots
    if with_quotients:
        Y = np.vstack([Y, snapset.difference_quotients])
    return Y.T


def build_correlation(snapset, ip, with_quotients, ops, interior=None):
    if snapset.n_snapshots < 2:
        raise InvalidArgumentError("at least two snapshots are required")
    G = gram_operator(ip, ops)
    if interior is not None:
        check_spd(G, interior)
    Y = snapshot_vectors(snapset, with_quotients)
    m = Y.shape[1]
    norm = 1.0 / m
    GY = G @ Y
    K = norm * (Y.T @ GY)
    upper = np.triu(K)
    K = upper + np.triu(K, 1).T
    return CorrelationMatrix(entries=K, normalization=norm, with_quotients=bool(with_quotients),
                             n_snapshots=snapset.n_snapshots)


def eigendecompose(K, rank_tol=DEFAULT_RANK_TOL, return_discarded=False):
    """Descending eigenpairs of a symmetric PSD correlation matrix.

    Eigenvalues at or below ``rank_tol * lambda_1`` are discarded.

    Returns
    -------
    lam : array (M,)
    Z : array (m, M)
        Orthonormal eigenvectors as columns.
    discarded : float
        Sum of the dropped (non-negative part of the) eigenvalues; only
        returned when ``return_discarded`` is set.
    """
    A = K.entries if isinstance(K, CorrelationMatrix) else np.asarray(K, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgumentError("correlation matrix must be square")
    scale = max(abs(A).max(), 1e-300)
    if abs(A - A.T).max() > 1e-12 * scale:
        raise InvalidArgumentError("correlation matrix is not symmetric")
    try:
        lam, Z = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("eigensolver did not converge") from exc
    lam, Z = lam[::-1], Z[:, ::-1]
    lam1 = lam[0] if len(lam) else 0.0
    if lam1 <= 0:
        out = np.zeros(0), np.zeros((A.shape[0], 0))
        return out + (0.0,) if return_discarded else out
    if lam[-1] < -1e-10 * lam1:
        raise InvalidArgumentError(f"correlation matrix is not PSD (min eigenvalue {lam[-1]:.3e})")
    keep = lam > rank_tol * lam1
    discarded = float(np.clip(lam[~keep], 0.0, None).sum())
    lam, Z = lam[keep], Z[:, keep]
    resid = np.linalg.norm(A @ Z - Z * lam, axis=0)
    if resid.size and resid.max() > 1e-10 * lam1:
        raise NumericFailure(f"eigenpair residual {resid.max():.3e} exceeds tolerance")
    return (lam, Z, discarded) if return_discarded else (lam, Z)


@dataclass(eq=False)
class PODBasis:
    modes: np.ndarray          # (n_vel, M)
    eigenvalues: np.ndarray    # (M,)
    inner_product: str
    rank_tol: float
    with_quotients: bool
    n_snapshots: int = 0       # N+1 of the source set (0 if unknown)
    discarded_energy: float = 0.0   # eigenvalues dropped by rank_tol

    @property
    def M(self):
        return self.modes.shape[1]

    def truncate(self, r):
        if not 0 <= r <= self.M:
            raise InvalidArgumentError(f"r={r} outside 0..{self.M}")
        return self.modes[:, :r]


def build_basis(snapset, Z, lam, ip, ops, with_quotients=False, rank_tol=DEFAULT_RANK_TOL,
                discarded=0.0):
    """POD modes ``phi_i = Y z_i / sqrt(m lambda_i)`` for the ``m`` ensemble vectors.

    The ``1/sqrt(m)`` factor accounts for the ``1/m`` normalization of the
    correlation matrix and makes the modes orthonormal.  One Cholesky
    re-orthonormalization sweep in the Gram metric removes the round-off
    that the ``1/sqrt(lambda_i)`` scaling amplifies for the smallest
    retained eigenvalues; it leaves the nested spans unchanged.
    """
    ip = normalize_ip(ip)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise NumericFailure("non-positive eigenvalue reached basis construction")
    Y = snapshot_vectors(snapset, with_quotients)
    if Z.shape[0] != Y.shape[1]:
        raise InvalidArgumentError("eigenvectors do not match the snapshot ensemble size")
    m = Y.shape[1]
    Phi = (Y @ Z) / np.sqrt(m * lam)
    G = gram_operator(ip, ops)
    if Phi.shape[1]:
        Phi = _reorthonormalize(Phi, G)
    return PODBasis(modes=Phi, eigenvalues=lam.copy(), inner_product=ip, rank_tol=rank_tol,
                    with_quotients=bool(with_quotients), n_snapshots=snapset.n_snapshots,
                    discarded_energy=float(discarded))


def _reorthonormalize(Phi, G):
    W = Phi.T @ (G @ Phi)
    W = 0.5 * (W + W.T)
    try:
        L = np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("POD modes are numerically dependent") from exc
    return np.linalg.solve(L, Phi.T).T


def compute_pod(snapset, ops, ip="H10", with_quotients=True, rank_tol=DEFAULT_RANK_TOL, interior=None):
    """Correlation, eigendecomposition and basis in one call."""
    K = build_correlation(snapset, ip, with_quotients, ops, interior=interior)
    lam, Z, dropped = eigendecompose(K, rank_tol, return_discarded=True)
    return build_basis(snapset, Z, lam, ip, ops, with_quotients, rank_tol, dropped)


def tail_energy(basis, r):
    if int(r) != r or not 0 <= r <= basis.M:
        raise InvalidArgumentError(f"r={r} outside 0..{basis.M}")
    return float(basis.eigenvalues[int(r):].sum())


def pod_error_check(snapset, basis, r, ops):
    """Mean squared projection error of the ensemble and the matching eigenvalue tail.

    The tail includes the energy of eigenvalues dropped by ``rank_tol``,
    which the identity needs but the basis no longer carries.

    Returns
    -------
    (lhs, rhs) : tuple of float
    """
    if basis.n_snapshots and basis.n_snapshots != snapset.n_snapshots:
        raise InvalidArgumentError("basis was not built from this snapshot set")
    if snapset.n_vel != basis.modes.shape[0]:
        raise InvalidArgumentError("basis and snapshot dimensions differ")
    G = gram_operator(basis.inner_product, ops)
    Y = snapshot_vectors(snapset, basis.with_quotients)
    Phi = basis.truncate(r)
    E = Y - Phi @ (Phi.T @ (G @ Y))
    lhs = float(np.einsum("im,im->", E, G @ E)) / Y.shape[1]
    return lhs, tail_energy(basis, r) + basis.discarded_energy


def pod_inverse_norm(basis, stiffness, r=None):
    """Spectral norm of the reduced stiffness matrix (grad phi_j, grad phi_i), i, j <= r."""
    Phi = basis.modes if r is None else basis.truncate(r)
    if Phi.shape[1] == 0:
        return 0.0
    S = Phi.T @ (stiffness @ Phi)
    S = 0.5 * (S + S.T)
    return float(np.linalg.eigvalsh(S)[-1])


def spectrum_rows(basis):
    lam = basis.eigenvalues
    tails = [float(lam[i + 1:].sum()) for i in range(len(lam))]
    return [(i + 1, float(l), t) for i, (l, t) in enumerate(zip(lam, tails))]


def write_spectrum_csv(basis, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "lambda", "cumulative_tail"])
        for i, l, t in spectrum_rows(basis):
            w.writerow([i, repr(l), repr(t)])


def write_basis(basis, path):
    n_vel, M = basis.modes.shape
    with open(path, "wb") as fh:
        fh.write(POD_MAGIC)
        fh.write(_POD_HEADER.pack(POD_VERSION, _IP_TAGS[basis.inner_product], M, n_vel))
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(np.asfortranarray(basis.modes).astype("<f8").tobytes(order="F"))


def read_basis(path):
    """Read an SDROMPD1 file.  Modes are stored column by column."""
    with open(path, "rb") as fh:
        magic = read_exact(fh, 8, 0)
        if magic != POD_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {POD_MAGIC!r}", 0)
        version, tag, M, n_vel = _POD_HEADER.unpack(read_exact(fh, _POD_HEADER.size, 8))
        if version != POD_VERSION:
            raise FormatError(f"unsupported version {version}", 8)
        names = {v: k for k, v in _IP_TAGS.items()}
        if tag not in names:
            raise FormatError(f"unknown inner-product tag {tag}", 12)
        off = 8 + _POD_HEADER.size
        lam = np.frombuffer(read_exact(fh, 8 * M, off), dtype="<f8").astype(float)
        off += 8 * M
        modes = np.frombuffer(read_exact(fh, 8 * M * n_vel, off), dtype="<f8").astype(float)
        if fh.read(1):
            raise FormatError("trailing bytes after mode matrix", off + 8 * M * n_vel)
    modes = modes.reshape(M, n_vel).T.copy()
    return PODBasis(modes=modes, eigenvalues=lam, inner_product=names[tag],
                    rank_tol=DEFAULT_RANK_TOL, with_quotients=False)
