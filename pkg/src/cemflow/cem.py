"""Constraint-energy-minimizing basis functions and the coarse transient solver.

Each basis function minimizes the kappa rho(p0)-weighted energy over its
oversampling window subject to unit s-pairing with its auxiliary function
and s-orthogonality to every other auxiliary function whose element lies in
the window; the saddle (KKT) system is factorized once per element and
reused for all of that element's right-hand sides.
"""

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from dataclasses import dataclass, field

from . import fem, fields, spectral
from .errors import ConfigurationError, SolverError
from .fine_solver import TransientSolution, residual
from .grid import DIRICHLET, build_partition_of_unity, oversample_region


class MultiscaleBasis:
    """Sparse basis matrix R (fine dofs x coarse dofs).

    Columns are ordered element-major, eigenindex-minor; ``columns[k]`` is
    the (element, j) pair of column k.
    """

    def __init__(self, R, columns, m, aux, grid):
        self.R = R.tocsr()
        self.columns = columns
        self.m = m
        self.aux = aux
        self.grid = grid

    @property
    def n_columns(self):
        return self.R.shape[1]


@dataclass
class CoarseState:
    """Coarse coefficients plus the fine lift carrying Dirichlet data."""

    coefficients: np.ndarray
    lift: np.ndarray
    basis: MultiscaleBasis

    def reconstructed(self):
        return self.lift + self.basis.R @ self.coefficients


@dataclass
class CoarseTransientSolution:
    """Coefficient snapshots of the coarse march plus Newton diagnostics."""

    coefficients: np.ndarray  # (n_steps+1, n_columns)
    lift: np.ndarray
    basis: MultiscaleBasis
    newton_iters: list = field(default_factory=list)
    residual_histories: list = field(default_factory=list)

    def reconstructed_snapshots(self):
        return self.lift[None, :] + self.coefficients @ self.basis.R.T

    def as_transient_solution(self):
        return TransientSolution(self.reconstructed_snapshots(),
                                 self.newton_iters, self.residual_histories)


def build_cem_basis(aux, m, grid, kappa_cells, props, p0, lin_tol=1e-10):
    """Solve the per-element constrained energy minimizations on K_{i,m}."""
    if m < 1:
        raise ConfigurationError("oversampling layers m must be >= 1")
    partition = aux.partition
    p0 = np.asarray(p0, dtype=float)
    rho_q = fields.density(fem.qpoint_values(grid, p0), props)
    kq = np.asarray(kappa_cells, dtype=float)[:, None] * rho_q
    A_glob = fem.assemble_stiffness(grid, kq)

    cols_data, cols_rows, cols_ptr, columns = [], [], [0], []
    for i in range(partition.n_elements):
        region = oversample_region(partition, i, m)
        free = region.interior_nodes
        nfree = len(free)
        pos = np.full(grid.node_count, -1, dtype=np.int64)
        pos[free] = np.arange(nfree)
        A_rr = A_glob[free][:, free].tocsr()

        rows, cols, vals = [], [], []
        rhs_index = None
        ncon = 0
        for k in region.contained_coarse:
            e = aux.element(int(k))
            Lk = int(aux.counts[k])
            svec = e.s_matrix @ e.vectors[:, :Lk]  # (nloc, Lk)
            local_pos = pos[e.nodes]
            keep = local_pos >= 0
            for j in range(Lk):
                rows.append(np.full(keep.sum(), ncon))
                cols.append(local_pos[keep])
                vals.append(svec[keep, j])
                if k == i and j == 0:
                    rhs_index = ncon
                ncon += 1
        if rhs_index is None:
            raise SolverError("element %d not contained in its own window" % i)
        B = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ncon, nfree),
        ).tocsr()

        K = sparse.bmat([[A_rr, B.T], [B, None]], format="csc")
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise SolverError("singular saddle system for element %d: %s" % (i, exc)) from exc

        Li = int(aux.counts[i])
        for j in range(Li):
            rhs = np.zeros(nfree + ncon)
            rhs[nfree + rhs_index + j] = 1.0
            sol = lu.solve(rhs)
            resid = K @ sol - rhs
            if np.linalg.norm(resid) > lin_tol * max(1.0, np.linalg.norm(rhs)) * 1e4:
                raise SolverError(
                    "saddle solve for basis (%d, %d) inaccurate" % (i, j)
                )
            psi = sol[:nfree]
            cols_rows.append(free)
            cols_data.append(psi)
            cols_ptr.append(cols_ptr[-1] + nfree)
            columns.append((i, j))

    R = sparse.csc_matrix(
        (np.concatenate(cols_data), np.concatenate(cols_rows), np.array(cols_ptr)),
        shape=(grid.node_count, len(columns)),
    )
    return MultiscaleBasis(R, columns, m, aux, grid)


def boundary_lift(grid, partition, pou, face_values, kappa_cells=None):
    """Fine lift field interpolating the Dirichlet face data.

    The per-face values are propagated by a coarse-grid solve and prolonged
    multilinearly, which reproduces linear-in-x profiles exactly for uniform
    permeability. When ``kappa_cells`` is given the coarse coefficient is the
    blockwise mean permeability, so the lift stays nearly flat across
    high-permeability blocks; a gradient imposed there could not be removed
    by the basis functions, which avoid steep-coefficient gradients by
    construction.
    """
    if not face_values:
        return np.zeros(grid.node_count)
    cg = partition.coarse_grid()
    if kappa_cells is None:
        coeff = 1.0
    else:
        kap = np.asarray(kappa_cells, dtype=float)
        coeff = np.array([kap[partition.element_cells(i)].mean()
                          for i in range(partition.n_elements)])
    nodes, values = fem.dirichlet_values(cg, face_values)
    A = fem.assemble_stiffness(cg, coeff)
    A_bc, b = fem.apply_dirichlet(A, np.zeros(cg.node_count), cg, nodes, values)
    g = spla.spsolve(A_bc.tocsc(), b)
    return pou.chi.T @ g


def solve_transient_coarse(basis, grid, kappa_cells, props, q, bcs, p0, time,
                           cfg, lift=None, pou=None):
    """Newton/backward-Euler march on the multiscale coefficients.

    The coarse residual and Jacobian are the fine-grid forms evaluated at the
    reconstructed pressure, contracted with the basis matrix R.
    """
    partition = basis.aux.partition
    if pou is None:
        pou = build_partition_of_unity(grid, partition)
    if lift is None:
        lift = boundary_lift(grid, partition, pou, bcs or {}, kappa_cells)
    lift = np.asarray(lift, dtype=float)
    R = basis.R
    RT = R.T.tocsr()

    # initial coefficients: s-projection of p0 onto the multiscale space
    ktil = spectral.kappa_tilde(grid, kappa_cells, props, p0, pou)
    S = fem.assemble_weighted_mass(grid, ktil)
    G = (RT @ S @ R).tocsc()
    u = spla.spsolve(G, RT @ (S @ (np.asarray(p0, dtype=float) - lift)))

    coeffs = np.empty((time.n_steps + 1, basis.n_columns))
    coeffs[0] = u
    iters, histories = [], []
    t = 0.0
    for n, dt in enumerate(time.dt, start=1):
        t += dt
        load = None
        if q is not None:
            qc = q(t) if callable(q) else q
            load = fem.load_vector(grid, qc)
        u_old = coeffs[n - 1]
        p_old = lift + R @ u_old
        u = u_old.copy()

        def coarse_residual(uv):
            p_rec = lift + R @ uv
            F = residual(p_rec, p_old, dt, grid, kappa_cells, props, load)
            return RT @ F

        Fc = coarse_residual(u)
        norm0 = float(np.linalg.norm(Fc))
        history = [norm0]
        k = 0
        norm = norm0
        while norm > cfg.tol * norm0 and norm0 > 0.0:
            if k >= cfg.max_iters:
                raise SolverError(
                    "coarse Newton failed at step %d (|F|/|F0| = %.3e)"
                    % (n, norm / norm0),
                    last_iterate=u,
                )
            p_rec = lift + R @ u
            A, M, C = fem.assemble_nonlinear_forms(grid, kappa_cells, props, p_rec)
            Jc = (RT @ (M + dt * (A + C)) @ R).tocsc()
            delta = spla.spsolve(Jc, -Fc)
            if not np.all(np.isfinite(delta)):
                raise SolverError("singular coarse Newton system", last_iterate=u)
            # Steady step: the residual is pure roundoff and the relative
            # test cannot fire, so accept the iterate unchanged.
            if np.abs(delta).max() <= 1e-12 * max(1.0, np.abs(u).max()):
                break
            step = cfg.damping
            u_try = u + step * delta
            Fc_try = coarse_residual(u_try)
            norm_try = float(np.linalg.norm(Fc_try))
            halvings = 0
            while norm_try > norm and halvings < cfg.max_halvings:
                step *= 0.5
                halvings += 1
                u_try = u + step * delta
                Fc_try = coarse_residual(u_try)
                norm_try = float(np.linalg.norm(Fc_try))
            u, Fc, norm = u_try, Fc_try, norm_try
            history.append(norm)
            k += 1
        coeffs[n] = u
        iters.append(k)
        histories.append(history)
    return CoarseTransientSolution(coeffs, lift, basis, iters, histories)


def elliptic_projection(p, basis, grid, kappa_cells, props, p0):
    """Energy projection of a fine field onto the multiscale space.

    Solves R^T A (p - R u) = 0 with A the kappa rho(p0)/mu stiffness.
    """
    p = np.asarray(p, dtype=float)
    rho_q = fields.density(fem.qpoint_values(grid, np.asarray(p0, dtype=float)), props)
    kq = np.asarray(kappa_cells, dtype=float)[:, None] * rho_q / props.mu
    A = fem.assemble_stiffness(grid, kq)
    R = basis.R
    G = (R.T @ A @ R).tocsc()
    try:
        u = spla.spsolve(G, R.T @ (A @ p))
    except RuntimeError as exc:
        raise SolverError("singular projected stiffness: %s" % exc) from exc
    if not np.all(np.isfinite(u)):
        raise SolverError("singular projected stiffness")
    return CoarseState(u, np.zeros(grid.node_count), basis)
