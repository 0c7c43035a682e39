"""Online pose refinement by inverting the renderer.

Gradient descent (Adam) on a 6-vector of local increments: translation in
mm plus an axis-angle rotation composed onto the current rotation. Only
iterates that improve a fixed evaluation pixel set are accepted, and the
whole procedure restarts from seeded perturbations of the initial pose,
keeping the best restart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, RefinementFailedError
from .field import ImpedanceField
from .geometry import (Pose, ProbeGeometry, _local_rays, euler_zyx_to_matrix,
                       image_plane_rays, matrix_to_euler_zyx)
from .image import ImageGray
from .train import GradientBuffer, backward_arrays


@dataclass
class RefineConfig:
    pixels_per_step: int = 512
    max_iterations: int = 120
    lr_mm: float = 0.5
    lr_deg: float = 0.5
    restarts: int = 4
    perturb_deg: float = 2.0
    perturb_mm: float = 2.0
    loss_tol: float = 1e-7
    patience: int = 25
    resample_every: int = 20
    eval_pixels: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1 or self.max_iterations < 1:
            raise ContractError("restarts and max_iterations must be >= 1")


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """exp of the skew matrix of a 3-vector (angle = norm, radians)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v)
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _pixel_set(rng, geom: ProbeGeometry, count: int):
    total = geom.image_w * geom.image_h
    idx = rng.integers(total, size=min(count, total))
    return idx // geom.image_w, idx % geom.image_w, idx


def _loss_at(R, t, observed_flat, field, geom, pixels, clamp=True):
    vs, us, flat = pixels
    pts, dirs = _rays_for(R, t, geom, us, vs)
    vals = field.forward(pts, dirs, clamp=clamp)
    return float(np.mean((vals - observed_flat[flat]) ** 2))


def _rays_for(R, t, geom, us, vs):
    pts_l, dirs_l = _local_rays(geom, us, vs)
    return pts_l @ R.T + t, dirs_l @ R.T


def _grad_at(R, t, observed_flat, field, geom, pixels, clamp=True, grads=None):
    """Loss plus its gradient wrt (translation mm, rotation increment rad)."""
    vs, us, flat = pixels
    pts, dirs = _rays_for(R, t, geom, us, vs)
    if grads is None:
        grads = GradientBuffer(field)
    else:
        grads.zero()
    loss, d_pts, d_dirs = backward_arrays(
        pts, dirs, observed_flat[flat], field, grads, clamp=clamp, want_point_grads=True
    )
    g_t = d_pts.sum(axis=0)
    arm = pts - t  # R @ local point
    g_rot = np.cross(arm, d_pts).sum(axis=0) + np.cross(dirs, d_dirs).sum(axis=0)
    return loss, np.concatenate([g_t, g_rot])


def photometric_loss(pose: Pose, observed: ImageGray, field: ImpedanceField,
                     geom: ProbeGeometry, pixels, clamp=True) -> float:
    """Mean squared rendered-vs-observed difference over a (vs, us, flat) pixel set."""
    _check_pixels(observed, geom, pixels)
    R = euler_zyx_to_matrix(pose.euler_zyx)
    return _loss_at(R, pose.position, observed.data.astype(np.float64).ravel(),
                    field, geom, pixels, clamp)


def pose_gradient(pose: Pose, observed: ImageGray, field: ImpedanceField,
                  geom: ProbeGeometry, pixels, clamp=True):
    """(loss, 6-vector d loss / d [translation, axis-angle increment])."""
    _check_pixels(observed, geom, pixels)
    R = euler_zyx_to_matrix(pose.euler_zyx)
    return _grad_at(R, pose.position, observed.data.astype(np.float64).ravel(),
                    field, geom, pixels, clamp)


def _check_pixels(observed, geom, pixels):
    vs, us, flat = pixels
    if observed.width != geom.image_w or observed.height != geom.image_h:
        raise ContractError("observed image does not match the probe geometry")
    if np.any(vs < 0) or np.any(vs >= geom.image_h) or np.any(us < 0) or np.any(us >= geom.image_w):
        raise ContractError("pixel set out of image bounds")


def make_pixel_set(geom: ProbeGeometry, count: int, seed: int = 0):
    """Seeded uniform pixel subset in the (vs, us, flat) form the loss expects."""
    return _pixel_set(np.random.default_rng(seed), geom, count)


@dataclass
class RefineResult:
    pose: Pose
    loss_trace: list
    iterations: int
    initial_loss: float
    final_loss: float


def refine(initial: Pose, observed: ImageGray, field: ImpedanceField,
           geom: ProbeGeometry, config: RefineConfig, clamp=True) -> RefineResult:
    """Monte Carlo restart photometric refinement; returns the best restart."""
    rng = np.random.default_rng(config.seed)
    obs_flat = observed.data.astype(np.float64).ravel()
    if observed.width != geom.image_w or observed.height != geom.image_h:
        raise ContractError("observed image does not match the probe geometry")

    pts, _ = image_plane_rays(initial, geom)
    x01 = (pts - field.config.domain_min) / (field.config.domain_max - field.config.domain_min)
    inside = np.all((x01 >= 0.0) & (x01 <= 1.0), axis=1).mean()
    if inside < 0.5:
        raise ContractError(f"initial pose renders only {inside:.0%} of pixels inside the domain")

    eval_pixels = _pixel_set(rng, geom, config.eval_pixels)
    R0 = euler_zyx_to_matrix(initial.euler_zyx)
    t0 = initial.position.copy()
    lr = np.concatenate([
        np.full(3, config.lr_mm), np.full(3, math.radians(config.lr_deg)),
    ])

    best_loss = math.inf
    best_Rt = (R0, t0)
    best_trace: list = []
    total_iters = 0
    any_finite = False
    scratch = GradientBuffer(field)
    initial_loss = _loss_at(R0, t0, obs_flat, field, geom, eval_pixels, clamp)

    for restart in range(config.restarts):
        if restart == 0:
            R, t = R0.copy(), t0.copy()
        else:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            angle = math.radians(rng.uniform(0.0, config.perturb_deg))
            R = rodrigues(axis * angle) @ R0
            t = t0 + rng.uniform(-config.perturb_mm, config.perturb_mm, 3)
        m = np.zeros(6)
        v = np.zeros(6)
        cur_best = _loss_at(R, t, obs_flat, field, geom, eval_pixels, clamp)
        cur_best_Rt = (R.copy(), t.copy())
        trace = [cur_best]
        if not math.isfinite(cur_best):
            continue
        stall = 0
        step_pixels = _pixel_set(rng, geom, config.pixels_per_step)
        for it in range(1, config.max_iterations + 1):
            total_iters += 1
            if config.resample_every and it % config.resample_every == 0:
                step_pixels = _pixel_set(rng, geom, config.pixels_per_step)
            loss, g = _grad_at(R, t, obs_flat, field, geom, step_pixels, clamp, grads=scratch)
            if not (math.isfinite(loss) and np.isfinite(g).all()):
                break
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1.0 - 0.9**it)
            vh = v / (1.0 - 0.999**it)
            step = lr * mh / (np.sqrt(vh) + 1e-12)
            t = t - step[:3]
            R = rodrigues(-step[3:]) @ R
            ev = _loss_at(R, t, obs_flat, field, geom, eval_pixels, clamp)
            trace.append(ev)
            if math.isfinite(ev) and ev < cur_best - config.loss_tol:
                cur_best = ev
                cur_best_Rt = (R.copy(), t.copy())
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
        if math.isfinite(cur_best):
            any_finite = True
            if cur_best < best_loss:
                best_loss = cur_best
                best_Rt = cur_best_Rt
                best_trace = trace

    if not any_finite:
        raise RefinementFailedError(
            "all restarts diverged", best_pose=initial, best_loss=initial_loss
        )
    if initial_loss <= best_loss:  # accept-only-improvement policy
        best_loss = initial_loss
        best_Rt = (R0, t0)
    R, t = best_Rt
    final = Pose(t, matrix_to_euler_zyx(R))
    return RefineResult(pose=final, loss_trace=best_trace, iterations=total_iters,
                        initial_loss=initial_loss, final_loss=best_loss)
