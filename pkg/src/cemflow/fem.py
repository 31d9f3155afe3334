"""Q1 finite element assembly on structured grids.

Quadrature is the full 2-point Gauss tensor rule per axis on the reference
cell [0,1]^d.  Coefficients may be given per cell (constant on the cell) or
per cell and quadrature point.
"""

import numpy as np
import scipy.sparse as sparse

from . import fields
from .errors import ConfigurationError, ValidationError
from .grid import DIRICHLET

_REF_CACHE = {}


def reference_element(ndim):
    """Quadrature weights and shape data on the reference cell [0,1]^d.

    Returns (w, N, dN) with shapes (nq,), (nq, nloc), (nq, nloc, d); local
    node and quadrature orderings are tensor-style, x fastest.
    """
    if ndim not in _REF_CACHE:
        g1 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
        pts1, w1 = g1, np.array([0.5, 0.5])
        nloc = 2 ** ndim
        nq = 2 ** ndim
        qp = np.empty((nq, ndim))
        w = np.ones(nq)
        for q in range(nq):
            for a in range(ndim):
                idx = (q >> a) & 1
                qp[q, a] = pts1[idx]
                w[q] *= w1[idx]
        N = np.empty((nq, nloc))
        dN = np.empty((nq, nloc, ndim))
        for q in range(nq):
            for k in range(nloc):
                val = 1.0
                for a in range(ndim):
                    xi = qp[q, a]
                    val *= xi if (k >> a) & 1 else 1.0 - xi
                N[q, k] = val
                for a in range(ndim):
                    der = 1.0 if (k >> a) & 1 else -1.0
                    for b in range(ndim):
                        if b == a:
                            continue
                        xi = qp[q, b]
                        der *= xi if (k >> b) & 1 else 1.0 - xi
                    dN[q, k, a] = der
        _REF_CACHE[ndim] = (w, N, dN)
    return _REF_CACHE[ndim]


def physical_shape_data(grid):
    """(w, N, dN_phys, detJ) with gradients scaled to the grid spacing."""
    w, N, dN = reference_element(grid.ndim)
    dNp = dN / grid.spacing[None, None, :]
    detJ = float(np.prod(grid.spacing))
    return w, N, dNp, detJ


def _coeff_at_quadrature(coeff, ncells, nq):
    coeff = np.asarray(coeff, dtype=float)
    if coeff.ndim == 0:
        return np.full((ncells, nq), float(coeff))
    if coeff.shape == (ncells,):
        return np.repeat(coeff[:, None], nq, axis=1)
    if coeff.shape == (ncells, nq):
        return coeff
    raise ValidationError("coefficient shape %r incompatible with grid" % (coeff.shape,))


def qpoint_values(grid, p, cells=None):
    """Nodal field interpolated at the quadrature points, (ncells_sel, nq)."""
    _, N, _, _ = physical_shape_data(grid)
    cn = grid.cell_nodes()
    if cells is not None:
        cn = cn[cells]
    return np.asarray(p)[cn] @ N.T


def _scatter(grid, ke, cells=None):
    """Sum per-cell element matrices (ncells, nloc, nloc) into a CSR matrix."""
    cn = grid.cell_nodes()
    if cells is not None:
        cn = cn[cells]
    nloc = cn.shape[1]
    rows = np.repeat(cn, nloc, axis=1).ravel()
    cols = np.tile(cn, (1, nloc)).ravel()
    mat = sparse.coo_matrix(
        (ke.ravel(), (rows, cols)), shape=(grid.node_count, grid.node_count)
    )
    return mat.tocsr()


def _stiffness_elements(grid, coeff_q):
    w, _, dNp, detJ = physical_shape_data(grid)
    G = np.einsum("qia,qja->qij", dNp, dNp)  # (nq, nloc, nloc)
    return np.einsum("cq,qij->cij", coeff_q * w[None, :] * detJ, G)


def _mass_elements(grid, weight_q):
    w, N, _, detJ = physical_shape_data(grid)
    M = np.einsum("qi,qj->qij", N, N)
    return np.einsum("cq,qij->cij", weight_q * w[None, :] * detJ, M)


def assemble_stiffness(grid, coeff, cells=None):
    """Stiffness matrix int coeff grad u . grad v; coeff must be positive."""
    ncells = grid.cell_count if cells is None else len(cells)
    coeff_q = _coeff_at_quadrature(coeff, ncells, 2 ** grid.ndim)
    if np.any(coeff_q <= 0.0):
        raise ValidationError("stiffness coefficient must be positive everywhere")
    return _scatter(grid, _stiffness_elements(grid, coeff_q), cells)


def assemble_weighted_mass(grid, weight, cells=None):
    """Weighted mass matrix int weight u v; weight must be nonnegative."""
    ncells = grid.cell_count if cells is None else len(cells)
    weight_q = _coeff_at_quadrature(weight, ncells, 2 ** grid.ndim)
    if np.any(weight_q < 0.0):
        raise ValidationError("mass weight must be nonnegative")
    return _scatter(grid, _mass_elements(grid, weight_q), cells)


def assemble_convection(grid, coeff, p):
    """Matrix C with C[j,i] = int coeff * eta_i * (grad p . grad eta_j).

    This is the density-linearization block of the Newton matrix; it is not
    symmetric in general.
    """
    w, N, dNp, detJ = physical_shape_data(grid)
    coeff_q = _coeff_at_quadrature(coeff, grid.cell_count, 2 ** grid.ndim)
    pc = np.asarray(p)[grid.cell_nodes()]
    gradp = np.einsum("cl,qla->cqa", pc, dNp)  # (ncells, nq, d)
    gdot = np.einsum("cqa,qja->cqj", gradp, dNp)  # grad p . grad eta_j
    ke = np.einsum("cq,cqj,qi->cji", coeff_q * w[None, :] * detJ, gdot, N)
    return _scatter(grid, ke)


def assemble_nonlinear_forms(grid, kappa_cells, props, p):
    """Newton building blocks at state ``p``.

    Returns (A, M, C): stiffness with coefficient kappa rho(p)/mu, mass with
    coefficient phi rho'(p), and the convective linearization with
    coefficient c kappa rho(p)/mu.  The Newton matrix of a backward Euler
    step of size dt is M + dt (A + C).
    """
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValidationError("non-finite pressure state")
    kq = _coeff_at_quadrature(kappa_cells, grid.cell_count, 2 ** grid.ndim)
    pq = qpoint_values(grid, p)
    rho_q = fields.density(pq, props)
    A = assemble_stiffness(grid, kq * rho_q / props.mu)
    M = assemble_weighted_mass(grid, props.phi * props.c * rho_q)
    C = assemble_convection(grid, props.c * kq * rho_q / props.mu, p)
    return A, M, C


def load_vector(grid, qcells):
    """Nodal load vector of a per-cell source density, int q eta_j."""
    w, N, _, detJ = physical_shape_data(grid)
    qc = np.asarray(qcells, dtype=float)
    if qc.shape != (grid.cell_count,):
        raise ValidationError("source must be one rate per fine cell")
    fe = np.einsum("c,ql->cl", qc * detJ, w[:, None] * N)
    out = np.zeros(grid.node_count)
    np.add.at(out, grid.cell_nodes().ravel(), fe.ravel())
    return out


def dirichlet_values(grid, face_values):
    """Expand a per-face value map into (nodes, values).

    Faces must be tagged Dirichlet on the grid; shared edge/corner nodes take
    the value of the last face listed.
    """
    value_map = {}
    for face, value in face_values.items():
        if grid.boundary_tags.get(face) != DIRICHLET:
            raise ConfigurationError("face %r is not tagged Dirichlet" % (face,))
        for n in np.flatnonzero(grid.face_node_mask(face)):
            value_map[int(n)] = float(value)
    nodes = np.array(sorted(value_map), dtype=np.int64)
    values = np.array([value_map[n] for n in nodes])
    return nodes, values


def apply_dirichlet(op, rhs, grid, nodes, values):
    """Symmetric row/column elimination with right-hand-side lift.

    Returns (A, b) of full size: constrained rows/columns are replaced by the
    identity and b carries the boundary values, so a direct solve reproduces
    them exactly.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    if grid is not None:
        dir_mask = grid.boundary_node_mask(DIRICHLET)
        if not np.all(dir_mask[nodes]):
            raise ConfigurationError("Dirichlet value supplied for a non-Dirichlet node")
    n = op.shape[0]
    g = np.zeros(n)
    g[nodes] = values
    b = np.asarray(rhs, dtype=float) - op @ g
    keep = np.ones(n)
    keep[nodes] = 0.0
    D = sparse.diags(keep)
    A = D @ op @ D + sparse.diags(1.0 - keep)
    b = b * keep
    b[nodes] = values
    return A.tocsr(), b


def restrict(op, region):
    """Principal submatrix of ``op`` on the region's interior nodes."""
    idx = region.interior_nodes
    return op[idx][:, idx].tocsr()


def assemble_subdomain(grid, cells, stiff_coeff=None, mass_weight=None):
    """Assemble stiffness and/or mass over a cell subset on its local nodes.

    Coefficients are indexed by position within ``cells``.  Returns
    (A or None, S or None, local_nodes) where local_nodes maps local to
    global fine node indices.
    """
    cells = np.asarray(cells, dtype=np.int64)
    cn = grid.cell_nodes()[cells]
    local_nodes = np.unique(cn)
    remap = np.full(grid.node_count, -1, dtype=np.int64)
    remap[local_nodes] = np.arange(len(local_nodes))
    cn_local = remap[cn]
    nloc = cn_local.shape[1]
    rows = np.repeat(cn_local, nloc, axis=1).ravel()
    cols = np.tile(cn_local, (1, nloc)).ravel()
    nq = 2 ** grid.ndim

    def build(ke):
        return sparse.coo_matrix(
            (ke.ravel(), (rows, cols)), shape=(len(local_nodes), len(local_nodes))
        ).tocsr()

    A = S = None
    if stiff_coeff is not None:
        cq = _coeff_at_quadrature(stiff_coeff, len(cells), nq)
        A = build(_stiffness_elements(grid, cq))
    if mass_weight is not None:
        wq = _coeff_at_quadrature(mass_weight, len(cells), nq)
        S = build(_mass_elements(grid, wq))
    return A, S, local_nodes


def cellwise_energy(grid, coeff, v):
    """Per-cell values of int coeff |grad v|^2."""
    w, _, dNp, detJ = physical_shape_data(grid)
    coeff_q = _coeff_at_quadrature(coeff, grid.cell_count, 2 ** grid.ndim)
    vc = np.asarray(v)[grid.cell_nodes()]
    gradv = np.einsum("cl,qla->cqa", vc, dNp)
    return np.einsum("cq,cqa->c", coeff_q * w[None, :] * detJ, gradv ** 2)
