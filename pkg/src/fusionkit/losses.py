"""Self-supervised depth objective with analytic gradients.

Components
----------
- photometric error: SSIM / L1 mix between two images
- reprojection loss: photometric error of neighbour frames warped into the
  target view, with per-pixel minimum over neighbours and an auto-mask that
  drops pixels where the un-warped neighbour already matches better
- edge-aware smoothness of mean-normalised inverse depth
- scale-invariant log-depth loss used for distillation
- total: ``alpha * (L_p + smoothness_weight * L_smooth) + beta * L_si``

Every differentiable term returns its gradient w.r.t. the depth map. The
auto-mask is treated as a constant.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .exceptions import ParameterError
from .geometry import CameraIntrinsics, warp_image, warp_jacobian
from .validation import check_depth, check_image, check_same_shape

__all__ = [
    "LossConfig",
    "LossReport",
    "ReprojectionResult",
    "box_filter",
    "box_filter_adjoint",
    "ssim",
    "photometric_error",
    "photometric_error_grad",
    "reprojection_loss",
    "smoothness_loss",
    "scale_invariant_loss",
    "si_pairwise",
    "total_loss",
    "upsample_prediction",
]

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossConfig:
    """Weights of the objective. Defaults follow the Monodepth2 lineage."""

    gamma: float = 0.85
    alpha: float = 1.0
    beta: float = 0.05
    lam: float = 1.0
    eta: float = 1.0
    smoothness_weight: float = 1e-3
    ssim_window: int = 3
    aggregate: str = "min"
    automask: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError(f"gamma must be in [0, 1], got {self.gamma}")
        for name in ("alpha", "beta", "lam", "eta", "smoothness_weight"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ParameterError(f"{name} must be finite and >= 0, got {value}")
        if int(self.ssim_window) != self.ssim_window or self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ParameterError(f"ssim_window must be an odd integer >= 3, got {self.ssim_window}")
        if self.aggregate not in ("min", "sum"):
            raise ParameterError(f"aggregate must be 'min' or 'sum', got {self.aggregate!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    total: float
    l_re: float
    l_p: float
    l_smooth: float
    l_si: float
    masked_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReprojectionResult:
    l_p: float
    masked_fraction: float
    grad_depth: np.ndarray
    grad_poses: list
    mask: np.ndarray
    valid: np.ndarray


# --------------------------------------------------------------------------
# windowed statistics


def _reflect_pad(x, r):
    pad = [(r, r), (r, r)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, pad, mode="reflect")


def box_filter(x, window=3):
    """Mean over a ``window`` x ``window`` neighbourhood with reflection padding."""
    r = window // 2
    h, w = x.shape[:2]
    p = _reflect_pad(x, r)
    out = np.zeros_like(x)
    for dy in range(window):
        for dx in range(window):
            out += p[dy : dy + h, dx : dx + w]
    return out / window**2


def _fold_reflect(p, r, h, w):
    # adjoint of reflection padding along the first two axes
    col = p[:, r : r + w].copy()
    for i in range(r):
        col[:, r - i] += p[:, i]
        col[:, w - 2 - i] += p[:, w + r + i]
    out = col[r : r + h].copy()
    for i in range(r):
        out[r - i] += col[i]
        out[h - 2 - i] += col[h + r + i]
    return out


def box_filter_adjoint(g, window=3):
    """Adjoint (transpose) of :func:`box_filter`."""
    r = window // 2
    h, w = g.shape[:2]
    p = np.zeros((h + 2 * r, w + 2 * r) + g.shape[2:])
    scaled = g / window**2
    for dy in range(window):
        for dx in range(window):
            p[dy : dy + h, dx : dx + w] += scaled
    return _fold_reflect(p, r, h, w)


def _ssim_parts(a, b, window):
    mu_a = box_filter(a, window)
    mu_b = box_filter(b, window)
    var_a = box_filter(a * a, window) - mu_a**2
    var_b = box_filter(b * b, window) - mu_b**2
    cov = box_filter(a * b, window) - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * cov + SSIM_C2
    d1 = mu_a**2 + mu_b**2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim(a, b, window=3):
    """Per-pixel SSIM map, averaged over channels.

    Uses box-window statistics with reflection padding and the usual
    stabilisers ``c1 = 0.01**2``, ``c2 = 0.03**2`` for [0, 1] intensities.
    """
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    _, _, n1, n2, d1, d2 = _ssim_parts(a, b, window)
    return (n1 * n2 / (d1 * d2)).mean(axis=2)


def _ssim_grad_b(a, b, window, upstream):
    """Gradient of ``sum(upstream * ssim(a, b))`` w.r.t. ``b``; ``upstream`` is (H, W)."""
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_parts(a, b, window)
    g = upstream[..., None] / a.shape[2]
    den = d1 * d2
    s = n1 * n2 / den
    ds_dmub = (2 * mu_a * n2) / den - s * (2 * mu_b) / d1
    ds_dvarb = -s / d2
    ds_dcov = 2 * n1 / den
    # var_b = E[b^2] - mu_b^2, cov = E[ab] - mu_a mu_b
    g_mub = g * (ds_dmub - 2 * mu_b * ds_dvarb - mu_a * ds_dcov)
    g_m2b = g * ds_dvarb
    g_mab = g * ds_dcov
    return (
        box_filter_adjoint(g_mub, window)
        + 2 * b * box_filter_adjoint(g_m2b, window)
        + a * box_filter_adjoint(g_mab, window)
    )


def photometric_error(a, b, gamma=0.85, window=3):
    """``gamma/2 * (1 - SSIM(a, b)) + (1 - gamma) * mean_c |a - b|`` per pixel."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    return _pe(a, b, gamma, window)


def _pe(a, b, gamma, window):
    l1 = np.abs(a - b).mean(axis=2)
    if gamma == 0:
        return l1
    _, _, n1, n2, d1, d2 = _ssim_parts(a, b, window)
    s = (n1 * n2 / (d1 * d2)).mean(axis=2)
    return 0.5 * gamma * (1.0 - s) + (1.0 - gamma) * l1


def photometric_error_grad(a, b, upstream, gamma=0.85, window=3):
    """Gradient of ``sum(upstream * photometric_error(a, b))`` w.r.t. ``b``, shape (H, W, 3)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    grad = (1.0 - gamma) * upstream[..., None] * np.sign(b - a) / a.shape[2]
    if gamma != 0:
        grad = grad - 0.5 * gamma * _ssim_grad_b(a, b, window, upstream)
    return grad


# --------------------------------------------------------------------------
# reprojection


def reprojection_loss(
    target,
    neighbors,
    depth,
    intrinsics: CameraIntrinsics,
    config: LossConfig | None = None,
    with_grad=True,
) -> ReprojectionResult:
    """Masked photometric reprojection loss ``L_p`` and its gradients.

    Parameters
    ----------
    target : (H, W, 3) image ``I_t``
    neighbors : sequence of ``(image, pose)``
        ``pose`` maps target-camera coordinates into the neighbour camera.
    depth : (H, W) target depth, positive where used
    intrinsics : CameraIntrinsics
    config : LossConfig

    Notes
    -----
    Pixels a warp cannot sample are given the target intensity before the
    SSIM window is applied, which keeps the loss a smooth function of depth
    everywhere the validity mask is stable. The mean is taken over pixels
    that are valid and kept by the auto-mask; ``masked_fraction`` is the
    share of valid pixels the auto-mask removes.
    """
    config = config or LossConfig()
    if not neighbors:
        raise ParameterError("reprojection_loss needs at least one neighbour frame")
    target = check_image(target, "target")
    depth = check_depth(depth)
    h, w = depth.shape
    gamma, win = config.gamma, config.ssim_window

    warped, valids, d_depth, d_pose, pe_warp, pe_ident = [], [], [], [], [], []
    for image, pose in neighbors:
        image = check_image(image, "neighbor")
        check_same_shape(image, target, ("neighbor", "target"))
        if with_grad:
            wimg, valid, jd, jp = warp_jacobian(image, depth, pose, intrinsics)
        else:
            wimg, valid = warp_image(image, depth, pose, intrinsics)
            jd = jp = None
        wimg = np.where(valid[..., None], wimg, target)
        warped.append(wimg)
        valids.append(valid)
        d_depth.append(jd)
        d_pose.append(jp)
        pe_warp.append(_pe(target, wimg, gamma, win))
        pe_ident.append(_pe(target, image, gamma, win))

    valid_stack = np.stack(valids)
    pe_stack = np.stack(pe_warp)
    if config.aggregate == "min":
        masked = np.where(valid_stack, pe_stack, np.inf)
        choice = np.argmin(masked, axis=0)
        agg = np.take_along_axis(masked, choice[None], axis=0)[0]
        valid = valid_stack.any(axis=0)
        best_warp = agg
    else:
        valid = valid_stack.all(axis=0)
        agg = pe_stack.sum(axis=0)
        best_warp = np.where(valid_stack, pe_stack, np.inf).min(axis=0)
    if config.automask:
        mask = valid & (best_warp < np.stack(pe_ident).min(axis=0))
    else:
        mask = valid.copy()
    n_valid = int(valid.sum())
    n_used = int(mask.sum())
    masked_fraction = 1.0 - n_used / n_valid if n_valid else 1.0
    l_p = float(agg[mask].sum() / n_used) if n_used else 0.0

    grad_depth = np.zeros((h, w))
    grad_poses = [np.zeros(6) for _ in neighbors]
    if with_grad and n_used:
        for k in range(len(neighbors)):
            if config.aggregate == "min":
                up = (mask & (choice == k)).astype(np.float64) / n_used
            else:
                up = mask.astype(np.float64) / n_used
            if not up.any():
                continue
            g_img = photometric_error_grad(target, warped[k], up, gamma, win)
            g_img[~valids[k]] = 0.0
            grad_depth += np.einsum("hwc,hwc->hw", g_img, d_depth[k])
            grad_poses[k] = np.einsum("hwc,hwci->i", g_img, d_pose[k])
    return ReprojectionResult(l_p, masked_fraction, grad_depth, grad_poses, mask, valid)


# --------------------------------------------------------------------------
# smoothness


def smoothness_loss(depth, image, with_grad=True):
    """Edge-aware smoothness of mean-normalised inverse depth.

    ``d* = (1/depth) / mean(1/depth)``; the loss is
    ``mean(|dx d*| exp(-|dx I|)) + mean(|dy d*| exp(-|dy I|))`` with forward
    differences and the image gradient averaged over channels.

    Returns ``(loss, grad)``; ``grad`` is None when ``with_grad`` is False.
    """
    depth = check_depth(depth)
    image = check_image(image)
    if depth.shape != image.shape[:2]:
        raise ParameterError(f"depth {depth.shape} and image {image.shape[:2]} differ in size")
    if np.any(depth <= 0):
        raise ParameterError("smoothness_loss requires strictly positive depth")
    inv = 1.0 / depth
    m = inv.mean()
    dn = inv / m
    wx = np.exp(-np.abs(np.diff(image, axis=1)).mean(axis=2))
    wy = np.exp(-np.abs(np.diff(image, axis=0)).mean(axis=2))
    gx = np.diff(dn, axis=1)
    gy = np.diff(dn, axis=0)
    loss = float((np.abs(gx) * wx).mean() + (np.abs(gy) * wy).mean())
    if not with_grad:
        return loss, None
    sx = np.sign(gx) * wx / gx.size
    sy = np.sign(gy) * wy / gy.size
    g_dn = np.zeros_like(depth)
    g_dn[:, 1:] += sx
    g_dn[:, :-1] -= sx
    g_dn[1:, :] += sy
    g_dn[:-1, :] -= sy
    n = depth.size
    g_inv = g_dn / m - (g_dn * inv).sum() / (n * m * m)
    return loss, -g_inv / depth**2


# --------------------------------------------------------------------------
# scale-invariant distillation


def si_pairwise(y, y_star):
    """Literal pairwise form ``(1/n^2) sum_ij ((log y_i - log y_j) - (log y*_i - log y*_j))^2``."""
    ly = np.log(np.asarray(y, dtype=np.float64).ravel())
    ls = np.log(np.asarray(y_star, dtype=np.float64).ravel())
    diff = (ly[:, None] - ly[None, :]) - (ls[:, None] - ls[None, :])
    return float((diff**2).sum() / ly.size**2)


def scale_invariant_loss(y, y_star, valid=None, lam=1.0, eta=1.0, with_grad=True):
    """``lam * sqrt(eta * Si)`` over the valid pixels, with its gradient w.r.t. ``y``.

    ``Si`` is evaluated in closed form,
    ``Si = (2/n) sum d_i^2 - (2/n^2) (sum d_i)^2`` with ``d = log y - log y*``.
    ``valid`` defaults to ``y_star > 0``.
    """
    y = np.asarray(y, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    check_same_shape(y, y_star, ("y", "y_star"))
    valid = y_star > 0 if valid is None else np.asarray(valid, dtype=bool)
    check_same_shape(y, valid, ("y", "valid"))
    n = int(valid.sum())
    if n == 0:
        raise ParameterError("scale_invariant_loss needs at least one valid pixel")
    yv, sv = y[valid], y_star[valid]
    if np.any(yv <= 0) or np.any(sv <= 0) or not (np.all(np.isfinite(yv)) and np.all(np.isfinite(sv))):
        raise ParameterError("scale_invariant_loss requires finite positive depths on the valid mask")
    d = np.log(yv) - np.log(sv)
    # remove the mean first: same value as the closed form, without cancellation
    dc = d - d.mean()
    si = 2.0 * float((dc**2).sum()) / n
    grad = np.zeros_like(y) if with_grad else None
    if si <= 0.0:
        return 0.0, grad
    loss = lam * np.sqrt(eta * si)
    if with_grad:
        # dSi/dd_i = (4/n) (d_i - mean d)
        grad[valid] = lam * eta / (2.0 * np.sqrt(eta * si)) * (4.0 / n) * dc / yv
    return float(loss), grad


# --------------------------------------------------------------------------
# total


def total_loss(
    target,
    neighbors,
    depth,
    intrinsics: CameraIntrinsics,
    config: LossConfig | None = None,
    enhanced=None,
    enhanced_valid=None,
    with_grad=True,
):
    """Full objective and its gradient.

    Returns ``(report, grad_depth, grad_poses)``. The scale-invariant term
    is only present when ``enhanced`` (the distillation target) is given.
    """
    config = config or LossConfig()
    depth = check_depth(depth)
    h, w = depth.shape
    grad = np.zeros((h, w))
    grad_poses = [np.zeros(6) for _ in neighbors]
    l_p = l_smooth = l_si = 0.0
    masked_fraction = 0.0
    if config.alpha > 0:
        rep = reprojection_loss(target, neighbors, depth, intrinsics, config, with_grad)
        l_p, masked_fraction = rep.l_p, rep.masked_fraction
        l_smooth, g_smooth = smoothness_loss(depth, target, with_grad)
        if with_grad:
            grad += config.alpha * (rep.grad_depth + config.smoothness_weight * g_smooth)
            grad_poses = [config.alpha * g for g in rep.grad_poses]
    if config.beta > 0 and enhanced is not None:
        l_si, g_si = scale_invariant_loss(depth, enhanced, enhanced_valid, config.lam, config.eta, with_grad)
        if with_grad:
            grad += config.beta * g_si
    l_re = l_p + config.smoothness_weight * l_smooth
    total = config.alpha * l_re + config.beta * l_si
    report = LossReport(total, l_re, l_p, l_smooth, l_si, masked_fraction)
    return report, (grad if with_grad else None), (grad_poses if with_grad else None)


# --------------------------------------------------------------------------
# resolution


def _interp_matrix(n_out, n_in):
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    x = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(x).astype(np.intp), n_in - 2)
    t = x - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - t
    m[rows, i0 + 1] += t
    return m


def upsample_prediction(depth_lowres, target_w: int, target_h: int, return_matrices=False):
    """Bilinear upsampling with corner-aligned sample grids.

    Output pixel ``j`` samples the input at ``j * (n_in - 1) / (n_out - 1)``.
    With ``return_matrices`` also returns the row/column interpolation
    matrices ``(Uy, Ux)`` so that ``out = Uy @ depth @ Ux.T``; their
    transposes give the adjoint for gradients.
    """
    d = np.asarray(depth_lowres, dtype=np.float64)
    if d.ndim != 2:
        raise ParameterError(f"depth must be 2-D, got shape {d.shape}")
    h, w = d.shape
    if target_h < h or target_w < w:
        raise ParameterError(f"target {target_w}x{target_h} is smaller than source {w}x{h}")
    uy = _interp_matrix(int(target_h), h)
    ux = _interp_matrix(int(target_w), w)
    out = uy @ d @ ux.T
    if return_matrices:
        return out, uy, ux
    return out
