"""Graph-based depth correction anchored to sparse LiDAR.

A dense depth map is lifted to 3D on a strided pixel grid. Every node is
expressed as an affine combination of its k nearest 3D neighbours. The
corrected depths keep those local reconstructions while matching LiDAR
depth at anchor nodes::

    min_z  sum_i (z_i - sum_j w_ij z_j)^2 + s * sum_a (z_a - Z_a)^2
           + lam * sum_i (z_i - c z0_i)^2

The last term is a weak pull toward the initial depth rescaled by the
median anchor ratio ``c``; it keeps the system definite when the anchors
are too sparse to pin every affine mode.

Hard anchors (``s = inf``) are eliminated from the unknowns. The normal
equations are solved with Jacobi-preconditioned conjugate gradients and the
per-node correction ratio is interpolated back to full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConvergenceError, ParameterError, UnanchoredSystemError
from .geometry import CameraIntrinsics, backproject, bilinear_sample, project
from .pdr import PointCloud
from .validation import check_depth, check_points

__all__ = [
    "scaled_prior",
    "DepthGraph",
    "CorrectionResult",
    "reconstruction_weights",
    "build_graph",
    "normal_equations",
    "conjugate_gradient",
    "solve_correction",
    "GraphDepthCorrector",
]


@dataclass
class DepthGraph:
    """kNN reconstruction graph over lifted depth pixels.

    Attributes
    ----------
    pixels : (M, 2) int
        ``(row, col)`` of each node.
    positions : (M, 3)
        Initial 3D position of each node.
    neighbors, weights : (M, k)
        Neighbour indices and affine reconstruction weights (rows sum to 1).
    anchors : (A,) int
        Node indices with a LiDAR measurement.
    anchor_depth : (A,)
        LiDAR depth at each anchor (meters).
    shape : (H, W) of the source depth map
    stride : grid stride in pixels
    """

    pixels: np.ndarray
    positions: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray
    anchors: np.ndarray
    anchor_depth: np.ndarray
    shape: tuple = None
    stride: int = 1
    initial_depth: np.ndarray = None

    def __post_init__(self):
        if self.initial_depth is None:
            self.initial_depth = np.asarray(self.positions)[:, 2].copy()

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def weight_matrix(self) -> sp.csr_matrix:
        m, k = self.neighbors.shape
        rows = np.repeat(np.arange(m), k)
        return sp.csr_matrix((self.weights.ravel(), (rows, self.neighbors.ravel())), shape=(m, m))


@dataclass
class CorrectionResult:
    node_depth: np.ndarray
    depth: np.ndarray
    iterations: int
    residual: float


def reconstruction_weights(center, neighbors, rcond=1e-3):
    """Affine weights reconstructing each centre from its neighbours.

    Solves ``min ||sum_j w_j (x_j - x_i)||`` subject to ``sum_j w_j = 1``,
    taking the minimum-norm solution and discarding directions whose
    singular value is below ``rcond`` times the largest. Where the centre
    lies in the affine hull of its neighbours the reconstruction is exact.

    Parameters
    ----------
    center : (M, 3)
    neighbors : (M, k, 3)

    Returns
    -------
    (M, k) weights, each row summing to one.
    """
    center = np.asarray(center, dtype=np.float64)
    nbrs = np.asarray(neighbors, dtype=np.float64)
    m, k, _ = nbrs.shape
    # orthonormal basis of {w : sum w = 0}
    basis = np.linalg.qr(np.eye(k) - 1.0 / k, mode="reduced")[0][:, : k - 1] if k > 1 else np.zeros((1, 0))
    diff = np.swapaxes(nbrs - center[:, None, :], 1, 2)  # (M, 3, k)
    dq = diff @ basis  # (M, 3, k-1)
    rhs = -diff.mean(axis=2)  # -D 1/k
    z = np.einsum("mij,mj->mi", np.linalg.pinv(dq, rcond=rcond), rhs)
    return 1.0 / k + z @ basis.T


def _inverse_depth_at(depth, u, v):
    """Depth at continuous pixel positions by bilinear interpolation of inverse depth.

    Inverse depth is affine in pixel coordinates on a plane, so this is exact
    for planar surfaces. Positions past the last pixel centre extrapolate
    from the border cell. Returns 0 where a needed tap has no depth.
    """
    h, w = depth.shape
    x0 = np.clip(np.floor(u), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(v), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    a = u - x0
    b = v - y0
    taps = np.stack([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]])
    ok = np.all(taps > 0, axis=0)
    inv = 1.0 / np.where(taps > 0, taps, 1.0)
    val = (1 - a) * (1 - b) * inv[0] + a * (1 - b) * inv[1] + (1 - a) * b * inv[2] + a * b * inv[3]
    ok &= val > 0
    return np.where(ok, 1.0 / np.where(ok, val, 1.0), 0.0)


def _anchor_nodes(lidar, intrinsics, node_lookup, stride, shape, initial_depth=None):
    pts = lidar.points if isinstance(lidar, PointCloud) else check_points(lidar)
    uvz = project(pts, intrinsics)
    if uvz.shape[0] == 0:
        return np.zeros(0, np.intp), np.zeros(0)
    h, w = shape
    gr = np.rint(uvz[:, 1] / stride).astype(np.intp)
    gc = np.rint(uvz[:, 0] / stride).astype(np.intp)
    dist = np.hypot(uvz[:, 0] - gc * stride, uvz[:, 1] - gr * stride)
    ok = (dist <= 1.0) & (gr >= 0) & (gc >= 0) & (gr * stride <= h - 1) & (gc * stride <= w - 1)
    node = np.full(uvz.shape[0], -1, dtype=np.intp)
    node[ok] = node_lookup[gr[ok], gc[ok]]
    ok &= node >= 0
    if not ok.any():
        return np.zeros(0, np.intp), np.zeros(0)
    z = uvz[ok, 2]
    if initial_depth is not None:
        # move the measurement from the hit location onto the node pixel using
        # the local depth ratio of the initial map
        at_point = _inverse_depth_at(initial_depth, uvz[ok, 0], uvz[ok, 1])
        at_node = initial_depth[gr[ok] * stride, gc[ok] * stride]
        usable = at_point > 0
        z = np.where(usable, z * at_node / np.where(usable, at_point, 1.0), z)
    idx, inv = np.unique(node[ok], return_inverse=True)
    z = np.bincount(inv, weights=z) / np.bincount(inv)
    return idx, z


def build_graph(
    initial_depth, intrinsics: CameraIntrinsics, lidar, k=10, stride=2, rcond=1e-3, transfer_anchors=True
) -> DepthGraph:
    """Assemble the correction graph for one depth map.

    Nodes are pixels on a ``stride`` grid with positive depth, lifted to 3D.
    A node becomes an anchor when a projected LiDAR point lies within one
    pixel of it; several points on one node are averaged. With
    ``transfer_anchors`` the LiDAR depth is multiplied by the ratio of the
    initial depth at the node to the initial depth at the hit location
    (interpolated in inverse depth), so a sub-pixel offset between point and
    node does not bias the anchor.
    """
    depth = check_depth(initial_depth)
    k, stride = int(k), int(stride)
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    xyz, valid = backproject(depth, intrinsics)
    grid = np.zeros_like(valid)
    grid[::stride, ::stride] = True
    node_mask = valid & grid
    rows, cols = np.nonzero(node_mask)
    m = rows.size
    if m < k + 1:
        raise ParameterError(f"graph needs at least k+1={k + 1} nodes, found {m}")
    pos = xyz[rows, cols]
    tree = cKDTree(pos)
    _, nn = tree.query(pos, k=k + 1)
    self_idx = np.arange(m)[:, None]
    is_self = nn == self_idx
    # drop the node itself (or the farthest hit when duplicates hide it)
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
    keep = np.ones_like(nn, dtype=bool)
    keep[np.arange(m), drop] = False
    nbr = nn[keep].reshape(m, k)
    weights = reconstruction_weights(pos, pos[nbr], rcond=rcond)

    lookup = np.full(((depth.shape[0] - 1) // stride + 1, (depth.shape[1] - 1) // stride + 1), -1, dtype=np.intp)
    lookup[rows // stride, cols // stride] = np.arange(m)
    anchors, anchor_depth = _anchor_nodes(
        lidar, intrinsics, lookup, stride, depth.shape, depth if transfer_anchors else None
    )
    return DepthGraph(
        pixels=np.column_stack([rows, cols]),
        positions=pos,
        neighbors=nbr,
        weights=weights,
        anchors=anchors,
        anchor_depth=anchor_depth,
        shape=depth.shape,
        stride=stride,
        initial_depth=pos[:, 2].copy(),
    )


def scaled_prior(graph: DepthGraph) -> np.ndarray:
    """Initial node depths rescaled by the median anchor/initial ratio."""
    ratio = graph.anchor_depth / graph.initial_depth[graph.anchors]
    return graph.initial_depth * float(np.median(ratio))


def normal_equations(graph: DepthGraph, anchor_strength=np.inf, ridge=1e-4):
    """Sparse normal equations of the correction problem.

    Parameters
    ----------
    graph : DepthGraph
    anchor_strength : float
        ``inf`` eliminates anchors as fixed values.
    ridge : float
        Weak pull toward :func:`scaled_prior`, relative to the mean
        diagonal of the reconstruction term. Affine-exact weights leave
        near-null modes that sparse anchors do not pin; the pull makes the
        system definite. ``0`` disables it.

    Returns
    -------
    A, b, free
        For hard anchors the system is over the free (non-anchor) nodes
        listed in ``free``; otherwise over all nodes.
    """
    if graph.anchors.size == 0:
        raise UnanchoredSystemError("unanchored system: no LiDAR point falls on a graph node")
    s = float(anchor_strength)
    if np.isnan(s) or s <= 0:
        raise ParameterError(f"anchor_strength must be > 0 (inf for hard anchors), got {anchor_strength}")
    if not ridge >= 0:
        raise ParameterError(f"ridge must be >= 0, got {ridge}")
    m = graph.n_nodes
    lap = (sp.identity(m, format="csr") - graph.weight_matrix()).tocsc()
    if np.isinf(s):
        free = np.setdiff1d(np.arange(m), graph.anchors)
        mf = lap[:, free]
        ma = lap[:, graph.anchors]
        a = (mf.T @ mf).tocsr()
        b = -(mf.T @ (ma @ graph.anchor_depth))
        if ridge > 0:
            lam = ridge * float(a.diagonal().mean())
            a = (a + lam * sp.identity(free.size, format="csr")).tocsr()
            b = b + lam * scaled_prior(graph)[free]
        return a, b, free
    p = np.zeros(m)
    p[graph.anchors] = s
    rhs = np.zeros(m)
    rhs[graph.anchors] = s * graph.anchor_depth
    a = (lap.T @ lap).tocsr()
    if ridge > 0:
        lam = ridge * float(a.diagonal().mean())
        p = p + lam
        rhs = rhs + lam * scaled_prior(graph)
    a = (a + sp.diags(p)).tocsr()
    return a, rhs, np.arange(m)


def conjugate_gradient(a, b, x0=None, tol=1e-10, max_iter=None):
    """Jacobi-preconditioned CG for a symmetric positive (semi-)definite ``a``.

    Stops when ``||b - a x|| <= tol * ||b||``. Returns ``(x, iterations,
    relative_residual)``; raises :class:`ConvergenceError` otherwise.
    """
    n = b.shape[0]
    max_iter = 10 * n if max_iter is None else int(max_iter)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), 0, 0.0
    diag = a.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    r = b - a @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol and it < max_iter:
        ap = a @ p
        pap = p @ ap
        if pap <= 0:
            break
        step = rz / pap
        x += step * p
        r -= step * ap
        it += 1
        if it % 50 == 0:
            r = b - a @ x  # refresh against drift
        res = np.linalg.norm(r) / bnorm
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - a @ x) / bnorm
    if res > tol:
        raise ConvergenceError(f"conjugate gradient stopped after {it} iterations at relative residual {res:.3e}", res)
    return x, it, res


def _ratio_to_full(graph, ratio, depth_shape):
    h, w = depth_shape
    s = graph.stride
    gh, gw = (h - 1) // s + 1, (w - 1) // s + 1
    grid = np.ones((gh, gw))
    grid[graph.pixels[:, 0] // s, graph.pixels[:, 1] // s] = ratio
    v, u = np.meshgrid(np.arange(h) / s, np.arange(w) / s, indexing="ij")
    # the last grid row/column may not reach the image border
    u = np.minimum(u, gw - 1)
    v = np.minimum(v, gh - 1)
    if gw == 1:
        u = np.zeros_like(u)
    if gh == 1:
        v = np.zeros_like(v)
    padded = np.pad(grid, ((0, 1), (0, 1)), mode="edge")
    out, _ = bilinear_sample(padded, u, v)
    return out[..., 0]


def solve_correction(
    graph: DepthGraph, anchor_strength=np.inf, initial_depth=None, tol=1e-10, max_iter=None, ridge=1e-4
) -> CorrectionResult:
    """Solve for corrected node depths and a full-resolution corrected map.

    Parameters
    ----------
    graph : DepthGraph
    anchor_strength : float
        Weight of the anchor term; ``inf`` pins anchors exactly.
    initial_depth : (H, W), optional
        Full-resolution map to rescale by the interpolated per-node
        correction ratio. Without it ``result.depth`` is None.
    ridge : float
        See :func:`normal_equations`.
    """
    a, b, free = normal_equations(graph, anchor_strength, ridge)
    z = graph.initial_depth.copy()
    if np.isinf(float(anchor_strength)):
        z[graph.anchors] = graph.anchor_depth
        if free.size:
            sol, it, res = conjugate_gradient(a, b, z[free], tol=tol, max_iter=max_iter)
            z[free] = sol
        else:
            it, res = 0, 0.0
    else:
        z, it, res = conjugate_gradient(a, b, z, tol=tol, max_iter=max_iter)
    full = None
    if initial_depth is not None:
        init = check_depth(initial_depth)
        ratio = z / graph.initial_depth
        full = np.where(init > 0, init * _ratio_to_full(graph, ratio, init.shape), 0.0)
        full[graph.pixels[:, 0], graph.pixels[:, 1]] = z
    return CorrectionResult(z, full, it, res)


class GraphDepthCorrector(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(depth, lidar)`` corrects ``depth`` against ``lidar``.

    Parameters
    ----------
    intrinsics : CameraIntrinsics
    k : int, default=10
    stride : int, default=2
    anchor_strength : float, default=inf
    rcond : float, default=1e-3
    tol : float, default=1e-10
    max_iter : int or None
        ``None`` means ``10 * n_unknowns``.
    ridge : float, default=1e-4

    Attributes
    ----------
    graph_ : DepthGraph
    result_ : CorrectionResult
    depth_ : (H, W) corrected depth
    """

    def __init__(self, intrinsics=None, k=10, stride=2, anchor_strength=np.inf, rcond=1e-3, tol=1e-10, max_iter=None, ridge=1e-4):
        self.intrinsics = intrinsics
        self.k = k
        self.stride = stride
        self.anchor_strength = anchor_strength
        self.rcond = rcond
        self.tol = tol
        self.max_iter = max_iter
        self.ridge = ridge

    def fit(self, X, y):
        if not isinstance(self.intrinsics, CameraIntrinsics):
            raise ParameterError("intrinsics must be a CameraIntrinsics instance")
        self.graph_ = build_graph(X, self.intrinsics, y, k=self.k, stride=self.stride, rcond=self.rcond)
        self.result_ = solve_correction(self.graph_, self.anchor_strength, X, self.tol, self.max_iter, self.ridge)
        self.depth_ = self.result_.depth
        return self

    def transform(self, X, y):
        return self.fit(X, y).depth_

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).depth_
