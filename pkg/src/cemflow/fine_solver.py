"""Fine-scale reference solver: backward Euler in time, Newton per step."""

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from dataclasses import dataclass, field

from . import fem, fields
from .errors import ConfigurationError, SolverError, ValidationError


@dataclass
class TimeGrid:
    """Backward Euler step sizes in seconds."""

    dt: np.ndarray

    def __post_init__(self):
        self.dt = np.asarray(self.dt, dtype=float)
        if self.dt.ndim != 1 or len(self.dt) == 0 or np.any(self.dt <= 0):
            raise ConfigurationError("time steps must be positive")

    @classmethod
    def uniform(cls, dt, steps):
        return cls(np.full(int(steps), float(dt)))

    @property
    def n_steps(self):
        return len(self.dt)

    @property
    def total(self):
        return float(self.dt.sum())

    def times(self):
        return np.concatenate(([0.0], np.cumsum(self.dt)))


@dataclass
class NewtonConfig:
    """Newton iteration controls.

    ``tol`` is relative to the initial residual norm of each time step; full
    steps with a halving line search (at most ``max_halvings``) when the
    residual norm increases.
    """

    tol: float = 1e-6
    max_iters: int = 12
    damping: float = 1.0
    max_halvings: int = 5

    def __post_init__(self):
        if self.tol <= 0 or self.max_iters < 1 or not (0 < self.damping <= 1):
            raise ConfigurationError("invalid Newton configuration: %r" % (self,))


@dataclass
class TransientSolution:
    """Pressure snapshots (n_steps+1, node_count) plus Newton diagnostics."""

    snapshots: np.ndarray
    newton_iters: list = field(default_factory=list)
    residual_histories: list = field(default_factory=list)


def residual(p_new, p_old, dt, grid, kappa_cells, props, load=None,
             dirichlet_nodes=None):
    """Backward Euler residual vector of one time step.

    F_j = (phi rho(p_new) - phi rho(p_old), eta_j)
        + dt (kappa/mu rho(p_new) grad p_new, grad eta_j) - dt (q, eta_j),
    with Dirichlet rows zeroed when ``dirichlet_nodes`` is given.
    """
    p_new = np.asarray(p_new, dtype=float)
    p_old = np.asarray(p_old, dtype=float)
    if not (np.all(np.isfinite(p_new)) and np.all(np.isfinite(p_old))):
        raise ValidationError("non-finite pressure state in residual")
    w, N, dNp, detJ = fem.physical_shape_data(grid)
    cn = grid.cell_nodes()
    kq = fem._coeff_at_quadrature(kappa_cells, grid.cell_count, 2 ** grid.ndim)

    rho_new = fields.density(p_new[cn] @ N.T, props)
    rho_old = fields.density(p_old[cn] @ N.T, props)
    fe = np.einsum("cq,ql->cl", props.phi * (rho_new - rho_old) * w[None, :] * detJ, N)

    gradp = np.einsum("cl,qla->cqa", p_new[cn], dNp)
    coeff = dt * kq * rho_new / props.mu * w[None, :] * detJ
    fe += np.einsum("cq,cqa,qla->cl", coeff, gradp, dNp)

    out = np.zeros(grid.node_count)
    np.add.at(out, cn.ravel(), fe.ravel())
    if load is not None:
        out -= dt * np.asarray(load, dtype=float)
    if dirichlet_nodes is not None and len(dirichlet_nodes):
        out[dirichlet_nodes] = 0.0
    return out


def newton_step(p, p_old, dt, grid, kappa_cells, props, load,
                dirichlet_nodes):
    """Solve the linearized step J delta = -F; returns (delta, |F| on free dofs)."""
    F = residual(p, p_old, dt, grid, kappa_cells, props, load, dirichlet_nodes)
    A, M, C = fem.assemble_nonlinear_forms(grid, kappa_cells, props, p)
    J = (M + dt * (A + C)).tolil()
    if len(dirichlet_nodes):
        J[dirichlet_nodes, :] = 0.0
        J[:, dirichlet_nodes] = 0.0
        J[dirichlet_nodes, dirichlet_nodes] = 1.0
    J = J.tocsc()
    try:
        delta = spla.spsolve(J, -F)
    except RuntimeError as exc:
        raise SolverError("linear solve failed: %s" % exc, last_iterate=p) from exc
    if not np.all(np.isfinite(delta)):
        raise SolverError("singular Newton system", last_iterate=p)
    return delta, float(np.linalg.norm(F))


def _free_norm(F, dirichlet_nodes):
    if len(dirichlet_nodes):
        F = F.copy()
        F[dirichlet_nodes] = 0.0
    return float(np.linalg.norm(F))


def solve_transient(grid, kappa_cells, props, q, bcs, p0, time, cfg):
    """Backward Euler / Newton march of the nonlinear fine-scale problem.

    ``q`` is None, a per-cell source array, or a callable t -> per-cell array;
    ``bcs`` maps Dirichlet face names to pressure values; ``p0`` is the
    initial nodal pressure.
    """
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (grid.node_count,):
        raise ConfigurationError("initial pressure has wrong length")
    if bcs:
        dir_nodes, dir_values = fem.dirichlet_values(grid, bcs)
    else:
        dir_nodes, dir_values = np.empty(0, dtype=np.int64), np.empty(0)

    snapshots = np.empty((time.n_steps + 1, grid.node_count))
    snapshots[0] = p0
    if len(dir_nodes):
        snapshots[0, dir_nodes] = dir_values

    iters, histories = [], []
    t = 0.0
    for n, dt in enumerate(time.dt, start=1):
        t += dt
        load = _load_at(grid, q, t)
        p_old = snapshots[n - 1]
        p = p_old.copy()
        if len(dir_nodes):
            p[dir_nodes] = dir_values

        F = residual(p, p_old, dt, grid, kappa_cells, props, load, dir_nodes)
        norm0 = _free_norm(F, dir_nodes)
        history = [norm0]
        k = 0
        norm = norm0
        while norm > cfg.tol * norm0 and norm0 > 0.0:
            if k >= cfg.max_iters:
                raise SolverError(
                    "Newton failed to converge at step %d (|F|/|F0| = %.3e)"
                    % (n, norm / norm0),
                    last_iterate=p,
                )
            delta, _ = newton_step(p, p_old, dt, grid, kappa_cells, props,
                                   load, dir_nodes)
            # Already at machine precision in the state (e.g. a steady step):
            # the relative residual test can never fire, so stop here.
            if np.abs(delta).max() <= 1e-12 * max(1.0, np.abs(p).max()):
                break
            step = cfg.damping
            p_try = p + step * delta
            F = residual(p_try, p_old, dt, grid, kappa_cells, props, load, dir_nodes)
            norm_try = _free_norm(F, dir_nodes)
            halvings = 0
            while norm_try > norm and halvings < cfg.max_halvings:
                step *= 0.5
                halvings += 1
                p_try = p + step * delta
                F = residual(p_try, p_old, dt, grid, kappa_cells, props, load, dir_nodes)
                norm_try = _free_norm(F, dir_nodes)
            p, norm = p_try, norm_try
            history.append(norm)
            k += 1
        snapshots[n] = p
        iters.append(k)
        histories.append(history)
    return TransientSolution(snapshots, iters, histories)


def _load_at(grid, q, t):
    if q is None:
        return None
    qc = q(t) if callable(q) else q
    return fem.load_vector(grid, qc)
