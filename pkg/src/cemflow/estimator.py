"""A posteriori residual functionals, local dual-norm indicators, enrichment.

The local indicator over a coarse neighborhood is the exact discrete dual
norm of the hat-weighted residual, computed by a Riesz solve with the
inner product (z, v) + dt (kappa/mu grad z, grad v) on the neighborhood.
"""

import warnings

import numpy as np
import scipy.sparse.linalg as spla
from dataclasses import dataclass

from . import fem
from .fine_solver import residual
from .grid import neighborhood


class ResidualFunctional:
    """Discrete residual of one coarse time step, applicable to any fine field."""

    def __init__(self, vector):
        self.vector = np.asarray(vector, dtype=float)

    def __call__(self, v):
        return float(self.vector @ np.asarray(v, dtype=float))


def residual_functional(p_ms_n, p_ms_prev, dt, q, grid, kappa_cells, props):
    """R_n(v) of the fully discrete scheme at the coarse states (no BC rows
    dropped; test functions carry their own boundary behavior)."""
    load = None
    if q is not None:
        load = fem.load_vector(grid, np.asarray(q, dtype=float))
    vec = residual(p_ms_n, p_ms_prev, dt, grid, kappa_cells, props, load)
    return ResidualFunctional(vec)


def hat_weighted_functional(functional, pou, i):
    """The component functional v -> R(chi_i v), as a nodal vector."""
    chi_i = np.asarray(pou.chi[i].todense()).ravel()
    return functional.vector * chi_i


def local_indicator(functional, i, dt, grid, partition, pou, kappa_cells, props):
    """Dual norm of the hat-weighted residual over neighborhood omega_i.

    Returns (indicator, riesz_identity_residual); the second entry is the
    relative defect of indicator^2 = r(z) and should be at roundoff.
    """
    region = neighborhood(partition, i)
    interior = region.interior_nodes
    if len(interior) == 0:
        warnings.warn("neighborhood %d has empty interior; indicator is 0" % i)
        return 0.0, 0.0
    g_full = hat_weighted_functional(functional, pou, i)
    g = g_full[interior]

    cells = region.fine_cells
    kap = np.asarray(kappa_cells, dtype=float)[cells] / props.mu
    A, M, nodes = fem.assemble_subdomain(grid, cells, stiff_coeff=kap,
                                         mass_weight=np.ones(len(cells)))
    pos = np.full(grid.node_count, -1, dtype=np.int64)
    pos[nodes] = np.arange(len(nodes))
    li = pos[interior]
    V = (M + dt * A)[li][:, li].tocsc()
    z = spla.spsolve(V, g)
    sq = float(z @ g)
    indicator = float(np.sqrt(max(sq, 0.0)))
    defect = abs(sq - z @ (V @ z)) / max(abs(sq), 1e-300)
    return indicator, defect


@dataclass
class IndicatorReport:
    """Per-(time step, neighborhood) indicator values and their aggregates."""

    values: np.ndarray  # (n_steps, coarse_node_count)

    @property
    def per_neighborhood_totals(self):
        return np.sum(self.values ** 2, axis=0)

    @property
    def per_step_totals(self):
        return np.sum(self.values ** 2, axis=1)

    @property
    def global_total(self):
        return float(np.sum(self.values ** 2))


def compute_indicators(snapshots, time, q, grid, partition, pou, kappa_cells,
                       props):
    """Indicators for every time step of a reconstructed coarse solution.

    ``snapshots`` is the (n_steps+1, node_count) fine-grid reconstruction.
    """
    n_steps = time.n_steps
    values = np.zeros((n_steps, partition.coarse_node_count))
    t = 0.0
    for n in range(1, n_steps + 1):
        dt = float(time.dt[n - 1])
        t += dt
        qc = q(t) if callable(q) else q
        func = residual_functional(snapshots[n], snapshots[n - 1], dt, qc,
                                   grid, kappa_cells, props)
        for i in range(partition.coarse_node_count):
            values[n - 1, i], _ = local_indicator(
                func, i, dt, grid, partition, pou, kappa_cells, props
            )
    return IndicatorReport(values)


def neighborhood_elements(partition, i):
    """Coarse elements making up neighborhood omega_i."""
    return neighborhood(partition, i).contained_coarse


def enrich(aux, report, theta):
    """Doerfler marking: the smallest neighborhood set holding a theta
    fraction of the total squared indicator; every coarse element touched by
    a marked neighborhood gains one auxiliary function.

    Returns the new per-element counts; elements already at their retained
    eigenpair limit are skipped with a warning (partial enrichment).
    """
    if not (0.0 < theta <= 1.0):
        raise ValueError("theta must be in (0, 1]")
    totals = report.per_neighborhood_totals
    grand = float(totals.sum())
    new_counts = aux.counts.copy()
    if grand == 0.0:
        return new_counts
    order = np.lexsort((np.arange(len(totals)), -totals))
    cum = np.cumsum(totals[order])
    n_marked = int(np.searchsorted(cum, theta * grand - 1e-12 * grand) + 1)
    marked = order[:n_marked]

    partition = aux.partition
    touched = set()
    for i in marked:
        if totals[i] == 0.0:
            continue
        touched.update(int(e) for e in neighborhood_elements(partition, i))
    capped = []
    for e in sorted(touched):
        retained = len(aux.elements[e].values)
        if new_counts[e] + 1 > retained:
            capped.append(e)
            continue
        new_counts[e] += 1
    if capped:
        warnings.warn(
            "enrichment capped at retained eigenpair count for elements %r" % capped
        )
    return new_counts
