"""Reconstruction training: manual reverse-mode gradients and Adam.

The loss is the mean squared difference between decoded and observed pixel
intensities. The backward pass chains through the logistic output, both
MLPs, and the trilinear weights, scatter-adding into the hash-table rows
each sample touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels as K
from .errors import ContractError, SonomapError
from .field import ImpedanceField, PixelSample
from .geometry import image_plane_rays
from .image import psnr, ssim
from .sh import sh_basis_grad


@dataclass
class TrainConfig:
    iterations: int = 50_000
    pixels_per_step: int = 4096
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    seed: int = 0
    val_every: int = 250
    clamp: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.pixels_per_step < 1:
            raise ContractError("iterations and pixels_per_step must be >= 1")
        if self.lr_tables <= 0 or self.lr_mlp <= 0:
            raise ContractError("learning rates must be positive")


class GradientBuffer:
    """Per-parameter gradient accumulators mirroring the field layout."""

    def __init__(self, field: ImpedanceField):
        self.tables = np.zeros_like(field.tables, dtype=np.float64)
        self.density = [np.zeros(p.shape, dtype=np.float64) for p in field.mlp_density.params()]
        self.color = [np.zeros(p.shape, dtype=np.float64) for p in field.mlp_color.params()]
        self.touched_rows = np.empty(0, dtype=np.int64)

    def zero(self):
        self.tables[self.touched_rows] = 0.0
        for g in self.density + self.color:
            g[...] = 0.0
        self.touched_rows = np.empty(0, dtype=np.int64)

    def all_finite(self) -> bool:
        parts = [self.tables[self.touched_rows]] + self.density + self.color
        return all(np.isfinite(p).all() for p in parts)


def _samples_to_arrays(samples):
    pts = np.stack([s.point for s in samples])
    dirs = np.stack([s.wave_dir for s in samples])
    targets = [s.target for s in samples]
    if any(t is None for t in targets):
        raise ContractError("every sample must carry a target intensity")
    return pts, dirs, np.asarray(targets, dtype=np.float64)


def loss_recon_arrays(pts, dirs, targets, field: ImpedanceField, clamp=True) -> float:
    vals = field.forward(pts, dirs, clamp=clamp)
    return float(np.mean((vals - targets) ** 2))


def loss_recon(samples: list[PixelSample], field: ImpedanceField, clamp=True) -> float:
    return loss_recon_arrays(*_samples_to_arrays(samples), field, clamp=clamp)


def backward_arrays(pts, dirs, targets, field: ImpedanceField, out: GradientBuffer,
                    clamp=True, want_point_grads=False):
    """Accumulate d(loss)/d(params) into `out`; returns the loss.

    With want_point_grads=True additionally returns (d loss/d point [mm],
    d loss/d direction) per sample, used by pose refinement.
    """
    n = pts.shape[0]
    intensity, (feat, enc_cache, sh_vals, dec_cache) = field.forward(
        pts, dirs, clamp=clamp, want_cache=True
    )
    x01, corners, w8, frac = enc_cache
    cache_d, out1, cin, cache_c, raw = dec_cache
    resid = intensity - targets
    loss = float(np.mean(resid**2))

    d_int = (2.0 / n) * resid
    d_raw = (d_int * intensity * (1.0 - intensity))[:, None]  # logistic derivative
    d_cin, grads_c = field.mlp_color.backward(d_raw, cache_c)
    d_embed = d_cin[:, : field.embed_dim]
    d_sh = d_cin[:, field.embed_dim :]
    d_out1 = np.zeros((n, 1 + field.embed_dim))
    d_out1[:, 1:] = d_embed  # sigma head takes no gradient from this loss
    d_feat, grads_d = field.mlp_density.backward(d_out1, cache_d)

    for g, acc in zip(grads_c, out.color):
        acc += g
    for g, acc in zip(grads_d, out.density):
        acc += g
    K.encode_bwd_tables(d_feat, corners, w8, out.tables)
    out.touched_rows = np.union1d(out.touched_rows, np.unique(corners))

    if not want_point_grads:
        return loss
    d_x01 = K.encode_bwd_points(d_feat, corners, w8, frac, field.level_res, field.tables)
    span = field.config.domain_max - field.config.domain_min
    d_pts = d_x01 / span[None, :]
    d_dirs = sh_basis_grad(dirs, d_sh, field.config.sh_degree)
    return loss, d_pts, d_dirs


def backward(samples: list[PixelSample], field: ImpedanceField, out: GradientBuffer,
             clamp=True) -> float:
    return backward_arrays(*_samples_to_arrays(samples), field, out, clamp=clamp)


class AdamState:
    """First/second moment buffers; tables update sparsely on touched rows."""

    def __init__(self, field: ImpedanceField):
        self.t = 0
        self.m_tables = np.zeros_like(field.tables, dtype=np.float64)
        self.v_tables = np.zeros_like(field.tables, dtype=np.float64)
        mlps = field.mlp_density.params() + field.mlp_color.params()
        self.m_mlp = [np.zeros(p.shape, dtype=np.float64) for p in mlps]
        self.v_mlp = [np.zeros(p.shape, dtype=np.float64) for p in mlps]


def adam_step(field: ImpedanceField, grads: GradientBuffer, state: AdamState,
              config: TrainConfig, dense_tables: bool = False) -> None:
    """One Adam update in place. Moments always decay; table rows with zero
    gradient keep their parameter values (update applied to touched rows
    only, identical to the dense update for those rows)."""
    b1, b2, eps = config.beta1, config.beta2, config.eps
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t

    state.m_tables *= b1
    state.v_tables *= b2
    rows = np.arange(field.tables.shape[0]) if dense_tables else grads.touched_rows
    if rows.size:
        g = grads.tables[rows]
        state.m_tables[rows] += (1.0 - b1) * g
        state.v_tables[rows] += (1.0 - b2) * g * g
        step = config.lr_tables * (state.m_tables[rows] / bc1) / (
            np.sqrt(state.v_tables[rows] / bc2) + eps
        )
        field.tables[rows] -= step.astype(field.tables.dtype)
        if not np.isfinite(field.tables[rows]).all():
            raise SonomapError("non-finite hash-table parameters after update")

    mlp_params = field.mlp_density.params() + field.mlp_color.params()
    mlp_grads = grads.density + grads.color
    for p, g, m, v in zip(mlp_params, mlp_grads, state.m_mlp, state.v_mlp):
        m *= b1
        v *= b2
        m += (1.0 - b1) * g
        v += (1.0 - b2) * g * g
        step = config.lr_mlp * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p -= step.astype(p.dtype)
        if not np.isfinite(p).all():
            raise SonomapError("non-finite MLP parameters after update")


@dataclass
class TrainResult:
    trace: list = dc_field(default_factory=list)  # (step, psnr, ssim, loss)
    final_loss: float = 0.0


def train(dataset, field: ImpedanceField, config: TrainConfig,
          metrics_path=None, progress=None) -> TrainResult:
    """Optimize the field against a ScanDataset.

    Per iteration one training image is chosen and pixels_per_step pixels
    sampled uniformly from it; deterministic for a fixed seed when the
    kernel backend runs single-threaded.
    """
    train_entries = [e for e in dataset.entries if e.split == "train"]
    val_entries = [e for e in dataset.entries if e.split == "val"]
    if not train_entries:
        raise ContractError("dataset has no training images")
    geom = dataset.geometry
    images = [dataset.load_image(e).data.astype(np.float64).ravel() for e in train_entries]
    rays = [image_plane_rays(e.pose, geom) for e in train_entries]
    val_images = [(e.pose, dataset.load_image(e)) for e in val_entries]

    rng = np.random.default_rng(config.seed)
    grads = GradientBuffer(field)
    state = AdamState(field)
    result = TrainResult()
    log = open(metrics_path, "w") if metrics_path else None
    try:
        loss = 0.0
        for step in range(1, config.iterations + 1):
            img_i = int(rng.integers(len(images)))
            px = rng.integers(images[img_i].size, size=config.pixels_per_step)
            pts, dirs = rays[img_i]
            grads.zero()
            loss = backward_arrays(
                pts[px], dirs[px], images[img_i][px], field, grads, clamp=config.clamp
            )
            if not np.isfinite(loss):
                raise SonomapError(f"non-finite loss at step {step}")
            adam_step(field, grads, state, config)
            if config.val_every and step % config.val_every == 0:
                p, s = _validate(field, geom, val_images, config.clamp)
                result.trace.append((step, p, s, loss))
                if log:
                    log.write(f"{step} {p:.6f} {s:.6f} {loss:.8f}\n")
                    log.flush()
                if progress:
                    progress(step, p, s, loss)
        result.final_loss = loss
    finally:
        if log:
            log.close()
    return result


def _validate(field, geom, val_images, clamp):
    if not val_images:
        return float("nan"), float("nan")
    ps, ss = [], []
    for pose, img in val_images:
        rendered = field.render_image(pose, geom, clamp=clamp)
        ps.append(psnr(rendered, img))
        ss.append(ssim(rendered, img))
    return float(np.mean(ps)), float(np.mean(ss))
