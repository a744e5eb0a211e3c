"""Direct per-pixel depth optimisation on a frame triplet.

Stands in for a depth network at desk scale: the depth map itself (and
optionally the two relative poses) are the parameters, updated with
first-order adaptive steps on the full self-supervised objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import DivergenceError, ParameterError
from .geometry import CameraIntrinsics, Pose
from .losses import LossConfig, LossReport, total_loss
from .pdr import PDR
from .validation import check_depth, check_image

__all__ = ["OptimizeConfig", "OptimizeState", "optimize_depth", "median_scale", "DepthOptimizer", "MedianScaler"]


@dataclass(frozen=True)
class OptimizeConfig:
    iterations: int = 500
    step: float = 1e-2
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    d_min: float = 0.1
    d_max: float = 100.0
    pose_step: float = 1e-3
    init_depth: float = 10.0
    pdr_confidence: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ParameterError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 < self.d_min < self.d_max:
            raise ParameterError("need 0 < d_min < d_max")
        if self.step <= 0 or self.pose_step < 0:
            raise ParameterError("step sizes must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizeConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown optimizer config keys: {sorted(unknown)}")
        if isinstance(data.get("loss"), dict):
            data["loss"] = LossConfig.from_dict(data["loss"])
        return cls(**data)


@dataclass
class OptimizeState:
    depth_param: np.ndarray
    d_min: float
    d_max: float
    pose_param: list | None = None
    history: list = field(default_factory=list)

    @property
    def depth(self) -> np.ndarray:
        return _decode(self.depth_param, self.d_min, self.d_max)

    @property
    def poses(self):
        return None if self.pose_param is None else [Pose.from_vector(p) for p in self.pose_param]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _decode(param, d_min, d_max):
    return d_min + (d_max - d_min) * _sigmoid(param)


def _encode(depth, d_min, d_max):
    t = np.clip((depth - d_min) / (d_max - d_min), 1e-9, 1 - 1e-9)
    return np.log(t) - np.log1p(-t)


def _initial_depth(shape, config, init_depth, pdr):
    if init_depth is not None:
        depth = check_depth(init_depth, "init_depth").copy()
        if depth.shape != shape:
            raise ParameterError(f"init_depth {depth.shape} does not match frames {shape}")
        depth[depth <= 0] = config.init_depth
        return depth
    depth = np.full(shape, float(config.init_depth))
    if pdr is not None:
        seeded = pdr.confidence > config.pdr_confidence
        if seeded.any():
            vals = pdr.depth[seeded]
            depth[:] = vals.size / np.sum(1.0 / vals)
            depth[seeded] = vals
    return depth


class _Adam:
    def __init__(self, shape, step, b1, b2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step, self.b1, self.b2, self.eps = step, b1, b2, eps
        self.t = 0

    def update(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return self.step * m_hat / (np.sqrt(v_hat) + self.eps)


def optimize_depth(
    frames,
    intrinsics: CameraIntrinsics,
    poses=None,
    config: OptimizeConfig | None = None,
    pdr: PDR | None = None,
    enhanced=None,
    init_depth=None,
    optimize_pose=False,
    callback=None,
):
    """Recover the depth of the middle frame of ``(I_{t-1}, I_t, I_{t+1})``.

    Parameters
    ----------
    frames : sequence of three (H, W, 3) images
    intrinsics : CameraIntrinsics
    poses : (Pose, Pose), optional
        Target-to-neighbour transforms for ``I_{t-1}`` and ``I_{t+1}``.
        Required unless ``optimize_pose`` is set; then they are the
        starting point (identity when omitted).
    config : OptimizeConfig
    pdr : PDR, optional
        Pixels with confidence above ``config.pdr_confidence`` seed the
        initial depth; the rest start at the harmonic mean of the seeds.
    enhanced : (H, W), optional
        Distillation target for the scale-invariant term (zeros ignored).
    init_depth : (H, W), optional
        Explicit starting depth; overrides ``pdr`` seeding.
    optimize_pose : bool
        Jointly update both poses.
    callback : callable(iteration, report), optional

    Returns
    -------
    depth : (H, W) ndarray
    state : OptimizeState
    """
    config = config or OptimizeConfig()
    if len(frames) != 3:
        raise ParameterError("frames must be (previous, current, next)")
    prev, cur, nxt = (check_image(f) for f in frames)
    if not (prev.shape == cur.shape == nxt.shape):
        raise ParameterError("frames must share one shape")
    if poses is None:
        if not optimize_pose:
            raise ParameterError("poses are required unless optimize_pose=True")
        poses = (Pose.identity(), Pose.identity())
    pose_param = [p.to_vector() for p in poses] if optimize_pose else None

    shape = cur.shape[:2]
    depth0 = _initial_depth(shape, config, init_depth, pdr)
    state = OptimizeState(_encode(depth0, config.d_min, config.d_max), config.d_min, config.d_max, pose_param)
    enh = None if enhanced is None else check_depth(enhanced, "enhanced")
    enh_valid = None if enh is None else enh > 0
    if enh is not None and not enh_valid.any():
        enh = enh_valid = None

    depth_opt = _Adam(shape, config.step, config.momentum, config.beta2, config.eps)
    pose_opt = _Adam((2, 6), config.pose_step, config.momentum, config.beta2, config.eps) if optimize_pose else None
    span = config.d_max - config.d_min
    last_good = None

    for it in range(int(config.iterations)):
        depth = state.depth
        cur_poses = state.poses if optimize_pose else list(poses)
        neighbors = [(prev, cur_poses[0]), (nxt, cur_poses[1])]
        report, grad, grad_poses = total_loss(cur, neighbors, depth, intrinsics, config.loss, enh, enh_valid)
        if not np.isfinite(report.total) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss at iteration {it}", state=last_good)
        state.history.append(report)
        if callback is not None:
            callback(it, report)
        last_good = OptimizeState(
            state.depth_param.copy(),
            state.d_min,
            state.d_max,
            None if pose_param is None else [p.copy() for p in state.pose_param],
            list(state.history),
        )
        sig = _sigmoid(state.depth_param)
        state.depth_param = state.depth_param - depth_opt.update(grad * span * sig * (1 - sig))
        if optimize_pose:
            delta = pose_opt.update(np.stack(grad_poses))
            state.pose_param = [state.pose_param[k] - delta[k] for k in range(2)]
    return state.depth, state


def median_scale(pred, reference, intrinsics: CameraIntrinsics | None = None, return_scale=False):
    """Rescale ``pred`` so its median matches the reference over their overlap.

    ``reference`` is a depth map, or a point cloud (PointCloud or (N, 3)
    array) in which case ``intrinsics`` is needed to sample ``pred`` at the
    projected points.
    """
    pred = check_depth(pred, "pred")
    ref = np.asarray(getattr(reference, "points", reference), dtype=np.float64)
    if ref.ndim == 2 and ref.shape == pred.shape:
        overlap = (pred > 0) & (ref > 0)
        p, r = pred[overlap], ref[overlap]
    else:
        from .geometry import project

        if intrinsics is None:
            raise ParameterError("intrinsics are required to median-scale against points")
        uvz = project(ref, intrinsics)
        col = np.floor(uvz[:, 0] + 0.5).astype(np.intp)
        row = np.floor(uvz[:, 1] + 0.5).astype(np.intp)
        h, w = pred.shape
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        p = pred[row[inside], col[inside]]
        r = uvz[inside, 2]
        keep = p > 0
        p, r = p[keep], r[keep]
    if p.size == 0:
        raise ParameterError("prediction and reference have no valid overlap")
    scale = float(np.median(r) / np.median(p))
    out = pred * scale
    return (out, scale) if return_scale else out


class DepthOptimizer(BaseEstimator):
    """Estimator interface to :func:`optimize_depth`.

    ``fit(frames, poses=..., pdr=..., enhanced=..., init_depth=...)``
    stores ``depth_`` and ``state_``; ``predict()`` returns ``depth_``.
    """

    def __init__(self, intrinsics=None, iterations=500, step=1e-2, loss=None, optimize_pose=False, d_min=0.1, d_max=100.0):
        self.intrinsics = intrinsics
        self.iterations = iterations
        self.step = step
        self.loss = loss
        self.optimize_pose = optimize_pose
        self.d_min = d_min
        self.d_max = d_max

    def _config(self):
        cfg = OptimizeConfig(iterations=self.iterations, step=self.step, d_min=self.d_min, d_max=self.d_max)
        if self.loss is not None:
            cfg = replace(cfg, loss=self.loss)
        return cfg

    def fit(self, X, y=None, poses=None, pdr=None, enhanced=None, init_depth=None):
        if not isinstance(self.intrinsics, CameraIntrinsics):
            raise ParameterError("intrinsics must be a CameraIntrinsics instance")
        self.depth_, self.state_ = optimize_depth(
            X,
            self.intrinsics,
            poses=poses,
            config=self._config(),
            pdr=pdr,
            enhanced=enhanced,
            init_depth=init_depth,
            optimize_pose=self.optimize_pose,
        )
        self.history_ = self.state_.history
        return self

    def predict(self, X=None):
        if not hasattr(self, "depth_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("DepthOptimizer is not fitted yet")
        return self.depth_


class MedianScaler(BaseEstimator):
    """``fit(pred, reference)`` learns ``scale_``; ``transform(pred)`` applies it."""

    def __init__(self, intrinsics=None):
        self.intrinsics = intrinsics

    def fit(self, X, y):
        _, self.scale_ = median_scale(X, y, self.intrinsics, return_scale=True)
        return self

    def transform(self, X):
        return check_depth(X) * self.scale_

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)
