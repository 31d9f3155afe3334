"""Per-coarse-element generalized eigenproblems and the auxiliary space."""

import os
import numpy as np
import scipy.linalg
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import fem, fields
from .errors import ConfigurationError, SolverError

THREADS_ENV = "CEMFLOW_THREADS"


def worker_count():
    """Parallel map width for per-element tasks (element results are
    independent, so the count never affects values)."""
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    n = worker_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass
class ElementEigendata:
    """Retained eigenpairs of one coarse element, S-orthonormal."""

    element: int
    nodes: np.ndarray      # fine node indices of the element closure
    values: np.ndarray     # ascending eigenvalues, length count
    vectors: np.ndarray    # (len(nodes), count)
    s_matrix: object       # local s-product (sparse, on element nodes)


def kappa_tilde(grid, kappa_cells, props, p0, pou, cells=None):
    """Spectral weight rho(p0) kappa sum_i |grad chi_i|^2 at quadrature points."""
    if cells is None:
        cells = np.arange(grid.cell_count)
    rho_q = fields.density(fem.qpoint_values(grid, p0, cells), props)
    kap = np.asarray(kappa_cells, dtype=float)[cells]
    return rho_q * (kap * pou.grad_sq_sum[cells])[:, None]


def local_eigenproblem(i, grid, partition, kappa_cells, props, p0, pou, count):
    """Smallest ``count`` eigenpairs of a_i(v,w) = lambda s_i(v,w) on K_i.

    a_i has coefficient kappa rho(p0); s_i weight is the kappa-tilde field.
    Solved dense with natural boundary conditions on the element.
    """
    cells = partition.element_cells(i)
    rho_q = fields.density(fem.qpoint_values(grid, p0, cells), props)
    kap = np.asarray(kappa_cells, dtype=float)[cells]
    a_coeff = kap[:, None] * rho_q
    s_weight = rho_q * (kap * pou.grad_sq_sum[cells])[:, None]
    A, S, nodes = fem.assemble_subdomain(grid, cells, stiff_coeff=a_coeff,
                                         mass_weight=s_weight)
    ndof = len(nodes)
    if count > ndof:
        raise ConfigurationError(
            "element %d: requested %d eigenpairs but only %d dofs" % (i, count, ndof)
        )
    Ad, Sd = A.toarray(), S.toarray()
    try:
        vals, vecs = scipy.linalg.eigh(Ad, Sd, subset_by_index=[0, count - 1])
    except scipy.linalg.LinAlgError:
        shift = 1e-12 * np.trace(Sd) / ndof
        import warnings

        warnings.warn("element %d: regularizing singular s-matrix" % i)
        try:
            vals, vecs = scipy.linalg.eigh(Ad, Sd + shift * np.eye(ndof),
                                           subset_by_index=[0, count - 1])
        except scipy.linalg.LinAlgError as exc:
            raise SolverError("element %d eigenproblem failed: %s" % (i, exc)) from exc
    vals = np.maximum(vals, 0.0)  # clip -eps roundoff at the constant mode
    return ElementEigendata(i, nodes, vals, vecs, S)


class AuxiliarySpace:
    """Per-element eigenpairs, the counts in use, and the spectral gap Lambda.

    One extra eigenpair beyond L_i is retained per element so that Lambda and
    single-step enrichment are available without re-solving.
    """

    def __init__(self, partition, elements, counts):
        self.partition = partition
        self.elements = elements
        self.counts = np.asarray(counts, dtype=np.int64)
        self.Lambda = min(
            float(e.values[self.counts[e.element]]) for e in elements
        )

    @property
    def n_functions(self):
        return int(self.counts.sum())

    def element(self, i):
        return self.elements[i]

    def used_vectors(self, i):
        return self.elements[i].vectors[:, : self.counts[i]]


def build_auxiliary_space(grid, partition, kappa_cells, props, p0, pou, L):
    """Solve every element eigenproblem, retaining L_i + 1 pairs each."""
    counts = np.broadcast_to(np.asarray(L, dtype=np.int64),
                             (partition.n_elements,)).copy()
    if np.any(counts < 1):
        raise ConfigurationError("at least one auxiliary function per element")

    def solve(i):
        return local_eigenproblem(i, grid, partition, kappa_cells, props, p0,
                                  pou, int(counts[i]) + 1)

    elements = parallel_map(solve, range(partition.n_elements))
    return AuxiliarySpace(partition, elements, counts)


def pi_project(v, aux):
    """s-orthogonal projection onto the auxiliary space."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    for e in aux.elements:
        phi = e.vectors[:, : aux.counts[e.element]]
        coeffs = phi.T @ (e.s_matrix @ v[e.nodes])
        out[e.nodes] += phi @ coeffs
    return out


def s_product(aux, v, w):
    """Global s-inner product sum_i s_i(v, w) of two fine nodal fields."""
    total = 0.0
    for e in aux.elements:
        total += float(v[e.nodes] @ (e.s_matrix @ w[e.nodes]))
    return total
