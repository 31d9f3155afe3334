"""Structured fine grids, coarse partitions, oversampling windows and the
coarse partition of unity.

All index arithmetic is lexicographic with x running fastest, for both
nodes and cells, so that rasters and golden files are reproducible.
"""

import numpy as np
import scipy.sparse as sparse

from .errors import ConfigurationError

DIRICHLET = "dirichlet"
NEUMANN = "neumann"

_ALL_FACES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


def face_names(ndim):
    """Boundary face names for a ``ndim``-dimensional grid."""
    return _ALL_FACES[: 2 * ndim]


class StructuredGrid:
    """Axis-aligned tensor-product grid of Q1 cells.

    Parameters
    ----------
    dims : sequence of int
        Number of cells per axis (2 or 3 axes).
    spacing : float or sequence of float
        Cell edge length per axis (meters).
    boundary_tags : dict, optional
        Map face name ('xmin', 'xmax', ...) -> 'dirichlet' | 'neumann'.
        Defaults to no-flow (all Neumann).
    """

    def __init__(self, dims, spacing, boundary_tags=None):
        dims = np.atleast_1d(np.asarray(dims, dtype=np.int64))
        if dims.ndim != 1 or len(dims) not in (2, 3):
            raise ConfigurationError("dims must have 2 or 3 axes, got %r" % (dims,))
        if np.any(dims < 1):
            raise ConfigurationError("cell counts must be >= 1, got %r" % (dims,))
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), dims.shape).copy()
        if np.any(spacing <= 0.0):
            raise ConfigurationError("spacing must be positive, got %r" % (spacing,))

        self.dims = dims
        self.spacing = spacing
        self.ndim = len(dims)
        self.node_dims = dims + 1
        self.node_count = int(np.prod(self.node_dims))
        self.cell_count = int(np.prod(dims))
        self.cell_volume = float(np.prod(spacing))

        tags = dict.fromkeys(face_names(self.ndim), NEUMANN)
        if boundary_tags:
            for face, tag in boundary_tags.items():
                if face not in tags:
                    raise ConfigurationError("unknown boundary face %r" % (face,))
                if tag not in (DIRICHLET, NEUMANN):
                    raise ConfigurationError("unknown boundary tag %r" % (tag,))
                tags[face] = tag
        self.boundary_tags = tags

        self._cell_nodes = None

    # -- numbering helpers -------------------------------------------------

    def node_lin_index(self, multi):
        """Lexicographic node index from per-axis indices, x fastest."""
        multi = np.asarray(multi, dtype=np.int64)
        strides = np.concatenate(([1], np.cumprod(self.node_dims[:-1])))
        return multi @ strides

    def node_multi_indices(self):
        """(node_count, ndim) array of per-axis node indices."""
        grids = np.meshgrid(*[np.arange(n) for n in self.node_dims], indexing="ij")
        # meshgrid 'ij' makes axis 0 slowest; we want x fastest
        return np.stack([g.ravel(order="F") for g in grids], axis=1)

    def node_coords(self):
        """(node_count, ndim) physical node coordinates."""
        return self.node_multi_indices() * self.spacing

    def cell_multi_indices(self):
        grids = np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=1)

    def cell_centers(self):
        return (self.cell_multi_indices() + 0.5) * self.spacing

    def cell_nodes(self):
        """(cell_count, 2**ndim) global node indices of each cell's corners.

        Corner k is ordered tensor-style with the x offset fastest, matching
        the reference element used for assembly.
        """
        if self._cell_nodes is None:
            cm = self.cell_multi_indices()
            strides = np.concatenate(([1], np.cumprod(self.node_dims[:-1])))
            base = cm @ strides
            offsets = []
            for k in range(2 ** self.ndim):
                off = 0
                for a in range(self.ndim):
                    if (k >> a) & 1:
                        off += strides[a]
                offsets.append(off)
            self._cell_nodes = base[:, None] + np.asarray(offsets, dtype=np.int64)
        return self._cell_nodes

    # -- boundary ----------------------------------------------------------

    def face_node_mask(self, face):
        """Boolean mask over nodes lying on the given domain face."""
        axis = {"x": 0, "y": 1, "z": 2}[face[0]]
        if axis >= self.ndim:
            raise ConfigurationError("face %r not present in %dD" % (face, self.ndim))
        side = 0 if face.endswith("min") else self.dims[axis]
        return self.node_multi_indices()[:, axis] == side

    def boundary_node_mask(self, tag):
        """Mask of nodes on any domain face carrying ``tag``."""
        mask = np.zeros(self.node_count, dtype=bool)
        for face, t in self.boundary_tags.items():
            if t == tag:
                mask |= self.face_node_mask(face)
        return mask

    def dirichlet_nodes(self):
        return np.flatnonzero(self.boundary_node_mask(DIRICHLET))


def build_fine_grid(dims, spacing, tags=None):
    """Construct a :class:`StructuredGrid`; see the class for argument docs."""
    return StructuredGrid(dims, spacing, tags)


class CoarsePartition:
    """Agglomeration of fine cells into coarse blocks of ``factor`` cells per axis."""

    def __init__(self, grid, factor):
        factor = int(factor)
        if factor < 2:
            raise ConfigurationError("coarsening factor must be >= 2, got %d" % factor)
        if np.any(grid.dims % factor != 0):
            raise ConfigurationError(
                "factor %d does not divide fine dims %r" % (factor, grid.dims)
            )
        self.grid = grid
        self.factor = factor
        self.coarse_dims = grid.dims // factor
        self.n_elements = int(np.prod(self.coarse_dims))
        self.coarse_node_dims = self.coarse_dims + 1
        self.coarse_node_count = int(np.prod(self.coarse_node_dims))
        self.H = grid.spacing * factor

    def element_multi(self, e):
        multi = np.empty(self.grid.ndim, dtype=np.int64)
        for a in range(self.grid.ndim):
            multi[a] = e % self.coarse_dims[a]
            e //= self.coarse_dims[a]
        return multi

    def element_index(self, multi):
        strides = np.concatenate(([1], np.cumprod(self.coarse_dims[:-1])))
        return int(np.asarray(multi) @ strides)

    def _cell_box(self, lo, hi):
        """Fine cell indices of the coarse-element box [lo, hi) (coarse indices)."""
        g = self.grid
        ranges = [np.arange(lo[a] * self.factor, hi[a] * self.factor) for a in range(g.ndim)]
        grids = np.meshgrid(*ranges, indexing="ij")
        multi = np.stack([x.ravel(order="F") for x in grids], axis=1)
        strides = np.concatenate(([1], np.cumprod(g.dims[:-1])))
        return np.sort(multi @ strides)

    def _node_box(self, node_lo, node_hi):
        """Fine node indices with per-axis index in [node_lo, node_hi] inclusive."""
        g = self.grid
        ranges = [np.arange(node_lo[a], node_hi[a] + 1) for a in range(g.ndim)]
        grids = np.meshgrid(*ranges, indexing="ij")
        multi = np.stack([x.ravel(order="F") for x in grids], axis=1)
        return np.sort(g.node_lin_index(multi))

    def element_cells(self, e):
        multi = self.element_multi(e)
        return self._cell_box(multi, multi + 1)

    def element_nodes(self, e):
        """Fine node indices in the closure of coarse element ``e``."""
        multi = self.element_multi(e)
        return self._node_box(multi * self.factor, (multi + 1) * self.factor)

    def coarse_node_multi_indices(self):
        grids = np.meshgrid(*[np.arange(n) for n in self.coarse_node_dims], indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=1)

    def coarse_node_fine_indices(self):
        """Fine node index of every coarse node."""
        return self.grid.node_lin_index(self.coarse_node_multi_indices() * self.factor)

    def coarse_grid(self):
        """The coarse partition viewed as a StructuredGrid (same boundary tags)."""
        return StructuredGrid(self.coarse_dims, self.H, self.grid.boundary_tags)


def build_coarse_partition(grid, factor):
    return CoarsePartition(grid, factor)


class OversampleRegion:
    """A box of coarse elements with its fine node bookkeeping.

    ``interior_nodes`` spans the zero-trace space: nodes on the region
    boundary are dropped except where that boundary coincides with a
    Neumann face of the domain (unless ``zero_trace_everywhere``), and
    domain Dirichlet nodes are always dropped.
    """

    def __init__(self, partition, lo, hi, center_element=None, layers=None,
                 zero_trace_everywhere=False):
        g = partition.grid
        self.partition = partition
        self.center_element = center_element
        self.layers = layers
        self.lo = np.asarray(lo, dtype=np.int64)
        self.hi = np.asarray(hi, dtype=np.int64)

        ranges = [np.arange(self.lo[a], self.hi[a]) for a in range(g.ndim)]
        grids = np.meshgrid(*ranges, indexing="ij")
        multi = np.stack([x.ravel(order="F") for x in grids], axis=1)
        strides = np.concatenate(([1], np.cumprod(partition.coarse_dims[:-1])))
        self.contained_coarse = np.sort(multi @ strides)

        self.fine_cells = partition._cell_box(self.lo, self.hi)
        node_lo = self.lo * partition.factor
        node_hi = self.hi * partition.factor
        self.fine_nodes = partition._node_box(node_lo, node_hi)

        nm = g.node_multi_indices()[self.fine_nodes]
        inside = np.ones(len(self.fine_nodes), dtype=bool)
        for a in range(g.ndim):
            ok = (nm[:, a] > node_lo[a]) & (nm[:, a] < node_hi[a])
            if not zero_trace_everywhere:
                # region sides lying on the physical boundary stay free
                if node_lo[a] == 0:
                    ok |= nm[:, a] == 0
                if node_hi[a] == g.dims[a]:
                    ok |= nm[:, a] == g.dims[a]
            inside &= ok
        interior = self.fine_nodes[inside]
        if not zero_trace_everywhere:
            dir_mask = g.boundary_node_mask(DIRICHLET)
            interior = interior[~dir_mask[interior]]
        self.interior_nodes = interior


def oversample_region(partition, i, m):
    """Oversampling window of coarse element ``i`` grown by ``m`` coarse layers.

    Layer counting is Chebyshev distance in coarse index space, clipped at
    the domain boundary; m=0 is the element itself.
    """
    if not (0 <= i < partition.n_elements):
        raise ConfigurationError("coarse element %d out of range" % i)
    if m < 0:
        raise ConfigurationError("oversampling layers must be >= 0")
    multi = partition.element_multi(i)
    lo = np.maximum(multi - m, 0)
    hi = np.minimum(multi + m + 1, partition.coarse_dims)
    return OversampleRegion(partition, lo, hi, center_element=i, layers=m)


def neighborhood(partition, coarse_node):
    """Neighborhood of a coarse node: the coarse elements sharing it.

    Interior nodes follow a zero trace on the whole neighborhood boundary,
    as used by the local dual-norm solves.
    """
    if not (0 <= coarse_node < partition.coarse_node_count):
        raise ConfigurationError("coarse node %d out of range" % coarse_node)
    multi = np.empty(partition.grid.ndim, dtype=np.int64)
    n = coarse_node
    for a in range(partition.grid.ndim):
        multi[a] = n % partition.coarse_node_dims[a]
        n //= partition.coarse_node_dims[a]
    lo = np.maximum(multi - 1, 0)
    hi = np.minimum(multi + 1, partition.coarse_dims)
    return OversampleRegion(partition, lo, hi, zero_trace_everywhere=True)


class PartitionOfUnity:
    """Multilinear coarse hat functions sampled at fine nodes.

    ``chi`` is a sparse (coarse_node_count, fine_node_count) matrix, one hat
    per row.  ``grad_sq_sum`` holds sum_i |grad chi_i|^2 evaluated at fine
    cell centers, the weight entering the local spectral problems.
    """

    def __init__(self, grid, partition):
        self.grid = grid
        self.partition = partition
        self.chi = self._build_hats()
        self.grad_sq_sum = self._build_grad_sq()

    def _axis_hats(self, a):
        """(coarse nodes, fine nodes) 1D hat values along axis ``a``."""
        p = self.partition
        xf = np.arange(self.grid.node_dims[a]) * self.grid.spacing[a]
        xc = np.arange(p.coarse_node_dims[a]) * p.H[a]
        vals = np.maximum(0.0, 1.0 - np.abs(xf[None, :] - xc[:, None]) / p.H[a])
        return sparse.csr_matrix(vals)

    def _build_hats(self):
        mats = [self._axis_hats(a) for a in range(self.grid.ndim)]
        chi = mats[0]
        for m in mats[1:]:
            chi = sparse.kron(m, chi, format="csr")  # x fastest
        return chi

    def _build_grad_sq(self):
        p = self.partition
        g = self.grid
        cm = g.cell_multi_indices()
        # local coordinate of the cell center within its coarse cell
        t = ((cm % p.factor) + 0.5) / p.factor  # (ncells, d)
        vals = np.stack([1.0 - t, t], axis=2)  # (ncells, d, 2)
        dercoef = 1.0 / p.H  # |d hat / dx| per axis
        total = np.zeros(g.cell_count)
        d = g.ndim
        for corner in range(2 ** d):
            sel = [(corner >> a) & 1 for a in range(d)]
            for a in range(d):
                grad = np.ones(g.cell_count) * (dercoef[a] if sel[a] else -dercoef[a])
                for b in range(d):
                    if b != a:
                        grad = grad * vals[:, b, sel[b]]
                total += grad ** 2
        return total


def build_partition_of_unity(grid, partition):
    return PartitionOfUnity(grid, partition)
