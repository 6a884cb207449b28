"""Structured triangulation of the unit square and Taylor-Hood (P2/P1) assembly.

Velocity dofs are blocked by component: the x-component of scalar P2 node
``s`` is dof ``s`` and the y-component is dof ``n_nodes + s``.  Pressure dofs
are the mesh vertices.

Fields sampled at quadrature points ("quadrature fields") are plain arrays of
shape ``(n_cells, n_quad, ...)``; their L2 inner products are the weighted
sums over ``space.quad_weights``.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DegenerateBasisError, InvalidArgumentError

_BOUNDARY_TOL = 1e-14


@dataclass(eq=False)
class TriMesh:
    n_per_side: int
    vertices: np.ndarray          # (n_vertices, 2)
    cells: np.ndarray             # (n_cells, 3), counterclockwise
    boundary_vertex_flags: np.ndarray
    cell_diameters: np.ndarray    # h_K, longest edge
    cell_areas: np.ndarray

    @property
    def h(self):
        return float(self.cell_diameters.max())

    @property
    def n_cells(self):
        return len(self.cells)


def _on_boundary(xy):
    x, y = xy[..., 0], xy[..., 1]
    return ((np.abs(x) < _BOUNDARY_TOL) | (np.abs(x - 1) < _BOUNDARY_TOL)
            | (np.abs(y) < _BOUNDARY_TOL) | (np.abs(y - 1) < _BOUNDARY_TOL))


def build_mesh(n_per_side):
    """Union-jack triangulation of [0, 1]^2 with ``n_per_side`` squares per side.

    Each grid square is cut along one diagonal, alternating the direction in
    a checkerboard pattern, which gives ``2 * n_per_side**2`` cells.  For even
    ``n_per_side`` no cell has all three vertices on the boundary.
    """
    n = int(n_per_side)
    if n != n_per_side or n < 2:
        raise InvalidArgumentError(f"n_per_side must be an integer >= 2, got {n_per_side!r}")
    t = np.arange(n + 1) / n
    X, Y = np.meshgrid(t, t, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            if (i + j) % 2 == 0:
                cells += [(v00, v10, v11), (v00, v11, v01)]
            else:
                cells += [(v00, v10, v01), (v10, v11, v01)]
    cells = np.array(cells, dtype=np.int64)

    p = vertices[cells]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    lengths = np.sqrt((e ** 2).sum(axis=2))
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    return TriMesh(
        n_per_side=n,
        vertices=vertices,
        cells=cells,
        boundary_vertex_flags=_on_boundary(vertices),
        cell_diameters=lengths.max(axis=1),
        cell_areas=areas,
    )


def mesh_edges(mesh):
    """Unique edges and the per-cell edge indices (local edges 01, 12, 20)."""
    c = mesh.cells
    local = np.stack([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]], axis=1)
    keys = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def triangle_quadrature():
    """Symmetric 7-point rule, exact for degree 5.

    Returns barycentric points (7, 3) and weights (7,) summing to one.
    """
    s = np.sqrt(15.0)
    a, b = (6 - s) / 21, (9 + 2 * s) / 21
    c, d = (6 + s) / 21, (9 - 2 * s) / 21
    wa, wc = (155 - s) / 1200, (155 + s) / 1200
    bary = np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [a, a, b], [a, b, a], [b, a, a],
        [c, c, d], [c, d, c], [d, c, c],
    ])
    weights = np.array([9 / 40, wa, wa, wa, wc, wc, wc])
    return bary, weights


def p2_values(bary):
    """P2 shape functions at barycentric points, local order v0 v1 v2 e01 e12 e20."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ])


def p2_bary_derivatives(bary):
    """d(shape)/d(lambda_m), shape (n_points, 6, 3)."""
    n = len(bary)
    D = np.zeros((n, 6, 3))
    for m in range(3):
        D[:, m, m] = 4 * bary[:, m] - 1
    for k, (i, j) in enumerate([(0, 1), (1, 2), (2, 0)]):
        D[:, 3 + k, i] = 4 * bary[:, j]
        D[:, 3 + k, j] = 4 * bary[:, i]
    return D


@dataclass(eq=False)
class TaylorHoodSpace:
    mesh: TriMesh
    node_coords: np.ndarray       # scalar P2 nodes: vertices then edge midpoints
    cell_nodes: np.ndarray        # (n_cells, 6) scalar P2 node indices
    edges: np.ndarray
    n_nodes: int
    n_vel: int
    n_pre: int
    interior_mask: np.ndarray     # per velocity dof
    quad_points: np.ndarray       # (n_cells, n_quad, 2)
    quad_weights: np.ndarray      # (n_cells, n_quad), sum to |K| per cell
    p2_vals: np.ndarray           # (n_quad, 6)
    p2_grads: np.ndarray          # (n_cells, n_quad, 6, 2)
    p1_vals: np.ndarray           # (n_quad, 3)
    bary_grads: np.ndarray = field(repr=False)  # (n_cells, 3, 2)

    def velocity_dof(self, node, comp):
        return comp * self.n_nodes + node

    def pressure_dof(self, vertex):
        return vertex

    @property
    def n_quad(self):
        return self.quad_weights.shape[1]

    @property
    def interior_dofs(self):
        return np.flatnonzero(self.interior_mask)

    @property
    def velocity_dof_coords(self):
        return np.vstack([self.node_coords, self.node_coords])


def build_space(mesh):
    edges, cell_edges = mesh_edges(mesh)
    nv = len(mesh.vertices)
    node_coords = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
    cell_nodes = np.hstack([mesh.cells, nv + cell_edges])
    n_nodes = len(node_coords)

    bary, w_ref = triangle_quadrature()
    p = mesh.vertices[mesh.cells]                                  # (C, 3, 2)
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)   # columns are edge vectors
    Jinv = np.linalg.inv(J)
    # grad(lambda_1), grad(lambda_2) are the rows of J^{-1}
    g12 = Jinv
    g0 = -(g12[:, 0] + g12[:, 1])
    bary_grads = np.stack([g0, g12[:, 0], g12[:, 1]], axis=1)      # (C, 3, 2)

    dshape = p2_bary_derivatives(bary)                             # (Q, 6, 3)
    p2_grads = np.einsum("qkm,cmd->cqkd", dshape, bary_grads)
    quad_points = np.einsum("qm,cmd->cqd", bary, p)
    quad_weights = mesh.cell_areas[:, None] * w_ref[None, :]

    scalar_boundary = _on_boundary(node_coords)
    interior = np.concatenate([~scalar_boundary, ~scalar_boundary])
    return TaylorHoodSpace(
        mesh=mesh,
        node_coords=node_coords,
        cell_nodes=cell_nodes,
        edges=edges,
        n_nodes=n_nodes,
        n_vel=2 * n_nodes,
        n_pre=nv,
        interior_mask=interior,
        quad_points=quad_points,
        quad_weights=quad_weights,
        p2_vals=p2_values(bary),
        p2_grads=p2_grads,
        p1_vals=bary.copy(),
        bary_grads=bary_grads,
    )


@dataclass(eq=False)
class AssembledOperators:
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    divergence: sp.csr_matrix
    pressure_mass: sp.csr_matrix
    scalar_mass: sp.csr_matrix
    scalar_stiffness: sp.csr_matrix


def _scatter(rows, cols, vals, shape):
    A = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _scatter_local(space, local, row_nodes, col_nodes, shape):
    nr, nc = row_nodes.shape[1], col_nodes.shape[1]
    rows = np.broadcast_to(row_nodes[:, :, None], (len(local), nr, nc))
    cols = np.broadcast_to(col_nodes[:, None, :], (len(local), nr, nc))
    return _scatter(rows, cols, local, shape)


def assemble(space):
    w = space.quad_weights
    V = space.p2_vals
    G = space.p2_grads
    cn = space.cell_nodes
    vn = space.mesh.cells
    nn, npre = space.n_nodes, space.n_pre

    m_loc = np.einsum("cq,qi,qk->cik", w, V, V)
    a_loc = np.einsum("cq,cqid,cqkd->cik", w, G, G)
    Ms = _scatter_local(space, m_loc, cn, cn, (nn, nn))
    As = _scatter_local(space, a_loc, cn, cn, (nn, nn))

    bx = np.einsum("cq,qa,cqk->cak", w, space.p1_vals, G[..., 0])
    by = np.einsum("cq,qa,cqk->cak", w, space.p1_vals, G[..., 1])
    Bx = _scatter_local(space, bx, vn, cn, (npre, nn))
    By = _scatter_local(space, by, vn, cn, (npre, nn))
    mp_loc = np.einsum("cq,qa,qb->cab", w, space.p1_vals, space.p1_vals)
    Mp = _scatter_local(space, mp_loc, vn, vn, (npre, npre))

    return AssembledOperators(
        mass=sp.block_diag((Ms, Ms), format="csr"),
        stiffness=sp.block_diag((As, As), format="csr"),
        divergence=sp.hstack([Bx, By], format="csr"),
        pressure_mass=Mp,
        scalar_mass=Ms,
        scalar_stiffness=As,
    )


def _check_size(space, *vectors):
    for v in vectors:
        if np.shape(v) != (space.n_vel,):
            raise InvalidArgumentError(
                f"velocity vector has shape {np.shape(v)}, expected ({space.n_vel},)")


def eval_velocity(space, u):
    """Values of a velocity dof vector at all quadrature points, (C, Q, 2)."""
    _check_size(space, u)
    nn = space.n_nodes
    ux = u[:nn][space.cell_nodes] @ space.p2_vals.T
    uy = u[nn:][space.cell_nodes] @ space.p2_vals.T
    return np.stack([ux, uy], axis=-1)


def eval_gradient(space, u):
    """Velocity gradient at quadrature points, (C, Q, 2, 2) with [..., i, j] = d_j u_i."""
    _check_size(space, u)
    nn = space.n_nodes
    gx = np.einsum("ck,cqkd->cqd", u[:nn][space.cell_nodes], space.p2_grads)
    gy = np.einsum("ck,cqkd->cqd", u[nn:][space.cell_nodes], space.p2_grads)
    return np.stack([gx, gy], axis=2)


def l2_inner(space, g, h):
    """L2 inner product of two quadrature fields of matching shape."""
    if np.shape(g) != np.shape(h) or np.shape(g)[:2] != space.quad_weights.shape:
        raise InvalidArgumentError("quadrature field layout mismatch")
    prod = g * h
    while prod.ndim > 2:
        prod = prod.sum(axis=-1)
    return float((space.quad_weights * prod).sum())


def interpolate(space, func):
    """Nodal P2 interpolant of ``func(x, y) -> (ux, uy)``."""
    x, y = space.node_coords[:, 0], space.node_coords[:, 1]
    ux, uy = func(x, y)
    return np.concatenate([np.broadcast_to(ux, x.shape), np.broadcast_to(uy, x.shape)]).astype(float)


def trilinear_b(u, v, w, space):
    """Skew-symmetric convection form 1/2 [(u.grad v, w) - (u.grad w, v)]."""
    _check_size(space, u, v, w)
    uq = eval_velocity(space, u)
    vq, wq = eval_velocity(space, v), eval_velocity(space, w)
    gv, gw = eval_gradient(space, v), eval_gradient(space, w)
    ugv = np.einsum("cqj,cqij->cqi", uq, gv)
    ugw = np.einsum("cqj,cqij->cqi", uq, gw)
    return 0.5 * (l2_inner(space, ugv, wq) - l2_inner(space, ugw, vq))


def convective_field(u, w, space):
    """(u . grad) w sampled at every quadrature point, shape (C, Q, 2)."""
    _check_size(space, u, w)
    return np.einsum("cqj,cqij->cqi", eval_velocity(space, u), eval_gradient(space, w))


def convection_matrix(space, w):
    """Sparse n_vel x n_vel matrix N with N[i, k] = b(w, phi_k, phi_i).

    Applied to ``u`` it gives the vector ``b(w, u, phi_i)``.
    """
    wq = eval_velocity(space, w)
    adv = np.einsum("cqd,cqkd->cqk", wq, space.p2_grads)            # w . grad(psi_k)
    c_loc = np.einsum("cq,qi,cqk->cik", space.quad_weights, space.p2_vals, adv)
    skew = 0.5 * (c_loc - c_loc.transpose(0, 2, 1))
    nn = space.n_nodes
    Cs = _scatter_local(space, skew, space.cell_nodes, space.cell_nodes, (nn, nn))
    return sp.block_diag((Cs, Cs), format="csr")


def convection_jacobian_extra(space, u):
    """Sparse matrix R with (R d)_i = b(d, u, phi_i), the Newton companion of
    :func:`convection_matrix`."""
    nn = space.n_nodes
    w = space.quad_weights
    V = space.p2_vals
    uq = eval_velocity(space, u)
    gu = eval_gradient(space, u)
    G = space.p2_grads
    blocks = [[None, None], [None, None]]
    for d in range(2):
        for c in range(2):
            # (psi_a e_c . grad u)_d psi_i
            t1 = np.einsum("cq,qa,cq,qi->cia", w, V, gu[:, :, d, c], V)
            # (psi_a e_c . grad psi_i) u_d
            t2 = np.einsum("cq,qa,cqi,cq->cia", w, V, G[..., c], uq[:, :, d])
            blocks[d][c] = _scatter_local(space, 0.5 * (t1 - t2), space.cell_nodes, space.cell_nodes, (nn, nn))
    return sp.bmat(blocks, format="csr")


def load_vector(space, fq):
    """Vector (f, phi_i) for a quadrature-sampled vector field ``fq`` (C, Q, 2)."""
    nn = space.n_nodes
    w = space.quad_weights
    out = np.zeros(2 * nn)
    for comp in range(2):
        loc = np.einsum("cq,qi,cq->ci", w, space.p2_vals, fq[:, :, comp])
        out[comp * nn:(comp + 1) * nn] = np.bincount(space.cell_nodes.ravel(), loc.ravel(), minlength=nn)
    return out


def elliptic_project(u, basis_vectors, gram):
    """Coefficients of the ``gram``-orthogonal projection of ``u`` onto a basis.

    Parameters
    ----------
    u : array (n,)
    basis_vectors : array (n, k)
        Basis vectors as columns.
    gram : sparse or dense (n, n)
        Metric matrix, e.g. the stiffness (elliptic projection) or the mass.

    Returns
    -------
    array (k,)
    """
    Phi = np.asarray(basis_vectors, dtype=float)
    if Phi.ndim == 1:
        Phi = Phi[:, None]
    if Phi.shape[1] == 0:
        return np.zeros(0)
    GPhi = gram @ Phi
    gram_small = Phi.T @ GPhi
    gram_small = 0.5 * (gram_small + gram_small.T)
    rhs = GPhi.T @ u
    try:
        cho = sla.cho_factor(gram_small)
    except sla.LinAlgError as exc:
        raise DegenerateBasisError("basis Gram matrix is singular") from exc
    if np.linalg.cond(gram_small) > 1e14:
        raise DegenerateBasisError("basis Gram matrix is numerically singular")
    return sla.cho_solve(cho, rhs)
