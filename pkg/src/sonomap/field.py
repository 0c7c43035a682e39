"""The implicit acoustic-impedance map.

Multi-resolution hashed feature grids feed a tiny density MLP whose
embedding, concatenated with a spherical-harmonic encoding of the wave
direction, feeds a tiny color MLP. New-view images are rendered by direct
per-pixel decoding; a ray-marching compositor is kept as the speed/quality
baseline.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels as K
from .errors import ContractError, FileFormatError, OutOfDomainError
from .geometry import Pose, ProbeGeometry, image_plane_rays
from .image import ImageGray
from .sh import sh_basis, sh_dim

PRIME_1 = 2654435761
PRIME_2 = 805459861
U64_MASK = 0xFFFFFFFFFFFFFFFF

CHECKPOINT_MAGIC = b"AIAU"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GridConfig:
    """Hash-grid layout plus the world-space box it covers."""

    levels: int = 16
    feature_dim: int = 8
    table_size: int = 1 << 21
    res_min: int = 16
    res_max: int = 512
    domain_min: np.ndarray = dc_field(default_factory=lambda: np.array([-50.0, -50.0, -5.0]))
    domain_max: np.ndarray = dc_field(default_factory=lambda: np.array([50.0, 50.0, 95.0]))
    prime1: int = PRIME_1
    prime2: int = PRIME_2
    sh_degree: int = 4

    def __post_init__(self):
        dmin = np.asarray(self.domain_min, dtype=np.float64).reshape(3).copy()
        dmax = np.asarray(self.domain_max, dtype=np.float64).reshape(3).copy()
        dmin.setflags(write=False)
        dmax.setflags(write=False)
        object.__setattr__(self, "domain_min", dmin)
        object.__setattr__(self, "domain_max", dmax)
        if self.levels < 1 or self.feature_dim < 1:
            raise ContractError("levels and feature_dim must be >= 1")
        if self.table_size < 1 or (self.table_size & (self.table_size - 1)) != 0:
            raise ContractError("table_size must be a power of two")
        if not (1 <= self.res_min <= self.res_max):
            raise ContractError("need 1 <= res_min <= res_max")
        if not np.all(dmin < dmax):
            raise ContractError("domain_min must be < domain_max componentwise")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.res_max) - math.log(self.res_min)) / (self.levels - 1))

    def resolution(self, level: int) -> int:
        """Per-axis cell count N_l of 1-based level l (geometric schedule)."""
        if not 1 <= level <= self.levels:
            raise ContractError(f"level {level} out of range 1..{self.levels}")
        if self.levels == 1:
            return self.res_min
        ratio = self.res_max / self.res_min
        return int(math.floor(self.res_min * ratio ** ((level - 1) / (self.levels - 1))))

    def level_rows(self, level: int) -> int:
        """Rows stored for a level: dense (N_l+1)^3 when that fits the table."""
        r1 = self.resolution(level) + 1
        return min(self.table_size, r1 * r1 * r1)

    def level_is_hashed(self, level: int) -> bool:
        r1 = self.resolution(level) + 1
        return r1 * r1 * r1 > self.table_size


def grid_resolution(config: GridConfig, level: int) -> int:
    return config.resolution(level)


def hash_index(i: int, j: int, k: int, config: GridConfig) -> int:
    """Spatial hash slot: (i ^ j*pi1 ^ k*pi2) mod table_size, wrapping u64."""
    if i < 0 or j < 0 or k < 0:
        raise ContractError("cell coordinates must be non-negative")
    h = (i & U64_MASK) ^ ((j * config.prime1) & U64_MASK) ^ ((k * config.prime2) & U64_MASK)
    return h % config.table_size


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Mlp2:
    """Two affine layers with a ReLU in between; weights are (out, in)."""

    def __init__(self, n_in, n_hidden, n_out, rng=None, dtype=np.float32):
        self.n_in, self.n_hidden, self.n_out = n_in, n_hidden, n_out
        if rng is None:
            self.W1 = np.zeros((n_hidden, n_in), dtype=dtype)
            self.W2 = np.zeros((n_out, n_hidden), dtype=dtype)
        else:
            lim1 = 1.0 / math.sqrt(n_in)
            lim2 = 1.0 / math.sqrt(n_hidden)
            self.W1 = rng.uniform(-lim1, lim1, (n_hidden, n_in)).astype(dtype)
            self.W2 = rng.uniform(-lim2, lim2, (n_out, n_hidden)).astype(dtype)
        self.b1 = np.zeros(n_hidden, dtype=dtype)
        self.b2 = np.zeros(n_out, dtype=dtype)

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=self.W1.dtype)
        z1 = x @ self.W1.T + self.b1
        a1 = np.maximum(z1, 0.0)
        out = a1 @ self.W2.T + self.b2
        return out, (x, z1, a1)

    def backward(self, dout, cache):
        """Returns (dx, [dW1, db1, dW2, db2]); accumulations in float64."""
        x, z1, a1 = cache
        dout = dout.astype(np.float64)
        a64 = a1.astype(np.float64)
        dW2 = dout.T @ a64
        db2 = dout.sum(axis=0)
        da1 = dout @ self.W2.astype(np.float64)
        dz1 = da1 * (z1 > 0)
        dW1 = dz1.T @ x.astype(np.float64)
        db1 = dz1.sum(axis=0)
        dx = dz1 @ self.W1.astype(np.float64)
        return dx, [dW1, db1, dW2, db2]


class ImpedanceField:
    """Trainable field: hash tables + density/color MLPs + grid config."""

    EMBED_DIM = 15
    HIDDEN_DIM = 128

    def __init__(self, config: GridConfig, hidden_dim: int = HIDDEN_DIM,
                 embed_dim: int = EMBED_DIM, dtype=np.float32, seed: int = 0):
        self.config = config
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.dtype = np.dtype(dtype)
        L = config.levels
        rows = [config.level_rows(l) for l in range(1, L + 1)]
        self.level_offsets = np.concatenate([[0], np.cumsum(rows)]).astype(np.int64)
        self.level_res = np.array([config.resolution(l) for l in range(1, L + 1)], dtype=np.int64)
        self.level_hashed = np.array(
            [config.level_is_hashed(l) for l in range(1, L + 1)], dtype=np.uint8
        )
        rng = np.random.default_rng(seed)
        self.tables = rng.uniform(-1e-4, 1e-4, (int(self.level_offsets[-1]), config.feature_dim)
                                  ).astype(self.dtype)
        feat_len = L * config.feature_dim
        self.mlp_density = Mlp2(feat_len, hidden_dim, 1 + embed_dim, rng, self.dtype)
        self.mlp_color = Mlp2(embed_dim + sh_dim(config.sh_degree), hidden_dim, 1, rng, self.dtype)

    # ----- parameter bookkeeping -------------------------------------------------

    @property
    def feat_len(self) -> int:
        return self.config.levels * self.config.feature_dim

    def level_table(self, level: int) -> np.ndarray:
        """(rows, f) view of 1-based level l."""
        return self.tables[self.level_offsets[level - 1] : self.level_offsets[level]]

    def n_params(self) -> int:
        n = self.tables.size
        for m in (self.mlp_density, self.mlp_color):
            n += sum(p.size for p in m.params())
        return n

    def astype(self, dtype) -> "ImpedanceField":
        out = ImpedanceField.__new__(ImpedanceField)
        out.config = self.config
        out.hidden_dim = self.hidden_dim
        out.embed_dim = self.embed_dim
        out.dtype = np.dtype(dtype)
        out.level_offsets = self.level_offsets
        out.level_res = self.level_res
        out.level_hashed = self.level_hashed
        out.tables = self.tables.astype(dtype)
        for name in ("mlp_density", "mlp_color"):
            src = getattr(self, name)
            dst = Mlp2(src.n_in, src.n_hidden, src.n_out, None, dtype)
            dst.W1, dst.b1 = src.W1.astype(dtype), src.b1.astype(dtype)
            dst.W2, dst.b2 = src.W2.astype(dtype), src.b2.astype(dtype)
            setattr(out, name, dst)
        return out

    # ----- encoding / decoding ---------------------------------------------------

    def normalize_points(self, pts, clamp: bool):
        """World mm -> unit-cube coordinates; raises when outside and not clamping."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        span = self.config.domain_max - self.config.domain_min
        x01 = (pts - self.config.domain_min) / span
        if clamp:
            np.clip(x01, 0.0, 1.0, out=x01)
        else:
            bad = (x01 < -1e-12) | (x01 > 1.0 + 1e-12)
            if bad.any():
                idx = int(np.argwhere(bad.any(axis=1))[0][0])
                raise OutOfDomainError(f"point {pts[idx]} outside domain box")
            np.clip(x01, 0.0, 1.0, out=x01)
        return x01

    def encode_points(self, pts, clamp: bool = False):
        """Concatenated multi-level features; returns (feat, cache for backward)."""
        x01 = self.normalize_points(pts, clamp)
        feat, corners, w8, frac = K.encode_fwd(
            x01, self.tables, self.level_offsets, self.level_res, self.level_hashed,
            self.config.table_size, self.config.prime1, self.config.prime2,
        )
        return feat, (x01, corners, w8, frac)

    def decode_arrays(self, feat, sh_vals, want_cache: bool = False):
        """(intensity, sigma, embedding) for stacked feature/SH rows."""
        feat = np.asarray(feat)
        sh_vals = np.asarray(sh_vals, dtype=self.dtype)
        if feat.ndim != 2 or feat.shape[1] != self.feat_len:
            raise ContractError(f"features must be (N, {self.feat_len})")
        if sh_vals.ndim != 2 or sh_vals.shape[1] != sh_dim(self.config.sh_degree):
            raise ContractError(f"sh must be (N, {sh_dim(self.config.sh_degree)})")
        out1, cache_d = self.mlp_density.forward(feat)
        sigma = np.maximum(out1[:, 0], 0.0)
        embed = out1[:, 1:]
        cin = np.concatenate([embed, sh_vals], axis=1)
        raw, cache_c = self.mlp_color.forward(cin)
        intensity = _stable_sigmoid(raw[:, 0].astype(np.float64))
        if want_cache:
            return intensity, sigma, embed, (cache_d, out1, cin, cache_c, raw)
        return intensity, sigma, embed

    def forward(self, pts, dirs, clamp: bool = False, want_cache: bool = False):
        """Full pipeline point+direction -> intensity."""
        feat, enc_cache = self.encode_points(pts, clamp)
        sh_vals = sh_basis(np.asarray(dirs, dtype=np.float64).reshape(-1, 3),
                           self.config.sh_degree)
        if want_cache:
            intensity, sigma, embed, dec_cache = self.decode_arrays(feat, sh_vals, True)
            return intensity, (feat, enc_cache, sh_vals, dec_cache)
        intensity, _, _ = self.decode_arrays(feat, sh_vals)
        return intensity

    # ----- rendering -------------------------------------------------------------

    def render_image(self, pose: Pose, geom: ProbeGeometry, clamp: bool = True) -> ImageGray:
        pts, dirs = image_plane_rays(pose, geom)
        vals = self.forward(pts, dirs, clamp=clamp)
        return ImageGray(vals.reshape(geom.image_h, geom.image_w).astype(np.float32))

    def render_image_raymarch(self, pose: Pose, geom: ProbeGeometry, k: int = 64,
                              clamp: bool = True) -> ImageGray:
        """Dense-sampling baseline: composite k samples per pixel ray with
        transmittance weights w_i = T_i (1 - exp(-sigma_i * delta_i))."""
        if k < 2:
            raise ContractError("ray marching needs k >= 2 samples")
        pts, dirs = image_plane_rays(pose, geom)
        h, w = geom.image_h, geom.image_w
        depth = (np.arange(h, dtype=np.float64) / (h - 1) * geom.depth_mm)
        out = np.empty((h, w))
        for row in range(h):
            sl = slice(row * w, (row + 1) * w)
            origins = pts[sl] - depth[row] * dirs[sl]
            delta = max(depth[row], 1e-6) / k
            t = (np.arange(k) + 0.5) * delta
            sample_pts = origins[:, None, :] + t[None, :, None] * dirs[sl][:, None, :]
            sample_dirs = np.repeat(dirs[sl], k, axis=0)
            feat, _ = self.encode_points(sample_pts.reshape(-1, 3), clamp=True)
            sh_vals = sh_basis(sample_dirs, self.config.sh_degree)
            intensity, sigma, _ = self.decode_arrays(feat, sh_vals)
            sig = sigma.reshape(w, k).astype(np.float64) * delta
            color = intensity.reshape(w, k)
            trans = np.exp(-np.concatenate([np.zeros((w, 1)), np.cumsum(sig, axis=1)[:, :-1]], axis=1))
            weights = trans * (1.0 - np.exp(-sig))
            out[row] = (weights * color).sum(axis=1)
        return ImageGray(np.clip(out, 0.0, 1.0).astype(np.float32))

    # ----- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(checkpoint_bytes(self))

    @staticmethod
    def load(path, dtype=np.float32) -> "ImpedanceField":
        with open(path, "rb") as f:
            return field_from_checkpoint(f.read(), dtype)


@dataclass(frozen=True)
class PixelSample:
    """One supervised pixel: world point, unit wave direction, optional target."""

    point: np.ndarray
    wave_dir: np.ndarray
    target: float | None = None

    def __post_init__(self):
        p = np.asarray(self.point, dtype=np.float64).reshape(3)
        d = np.asarray(self.wave_dir, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ContractError(f"wave_dir must be unit length, |d| = {n}")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "wave_dir", d)
        if self.target is not None and not (0.0 <= self.target <= 1.0):
            raise ContractError("target intensity must be in [0, 1]")


def encode_point(x, field: ImpedanceField) -> np.ndarray:
    feat, _ = field.encode_points(np.asarray(x).reshape(1, 3), clamp=False)
    return feat[0]


def sh_encode(wave_dir, degree: int = 4) -> np.ndarray:
    return sh_basis(np.asarray(wave_dir, dtype=np.float64), degree)


def decode(features, sh_vals, field: ImpedanceField):
    """(intensity in [0,1], sigma >= 0, embedding) for a single sample."""
    intensity, sigma, embed = field.decode_arrays(
        np.asarray(features).reshape(1, -1), np.asarray(sh_vals).reshape(1, -1)
    )
    return float(intensity[0]), float(sigma[0]), embed[0]


def render_pixel(sample: PixelSample, field: ImpedanceField) -> float:
    vals = field.forward(sample.point.reshape(1, 3), sample.wave_dir.reshape(1, 3))
    return float(vals[0])


def domain_from_poses(poses, geom: ProbeGeometry, pad: float = 0.05):
    """Axis-aligned box over all pixel world-points, padded by `pad` per side."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for pose in poses:
        pts, _ = image_plane_rays(pose, geom)
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    span = np.maximum(hi - lo, 1e-6)
    return lo - pad * span, hi + pad * span


# ----- checkpoint format ("AIAU") ------------------------------------------------

_HEADER = struct.Struct("<4sIIIQIIQQIII6d")


def checkpoint_bytes(field: ImpedanceField) -> bytes:
    cfg = field.config
    parts = [
        _HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.levels, cfg.feature_dim,
            cfg.table_size, cfg.res_min, cfg.res_max, cfg.prime1, cfg.prime2,
            cfg.sh_degree, field.hidden_dim, field.embed_dim,
            *cfg.domain_min, *cfg.domain_max,
        )
    ]
    for level in range(1, cfg.levels + 1):
        parts.append(field.level_table(level).astype("<f4").tobytes())
    for mlp in (field.mlp_density, field.mlp_color):
        for p in mlp.params():
            parts.append(np.ascontiguousarray(p).astype("<f4").tobytes())
    return b"".join(parts)


def field_from_checkpoint(buf: bytes, dtype=np.float32) -> ImpedanceField:
    if len(buf) < _HEADER.size or buf[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError("not an impedance-field checkpoint (bad magic)")
    (_, version, levels, feature_dim, table_size, res_min, res_max, p1, p2,
     sh_degree, hidden_dim, embed_dim, *box) = _HEADER.unpack_from(buf, 0)
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"unsupported checkpoint version {version}")
    cfg = GridConfig(
        levels=levels, feature_dim=feature_dim, table_size=table_size,
        res_min=res_min, res_max=res_max,
        domain_min=np.array(box[:3]), domain_max=np.array(box[3:]),
        prime1=p1, prime2=p2, sh_degree=sh_degree,
    )
    field = ImpedanceField(cfg, hidden_dim=hidden_dim, embed_dim=embed_dim, dtype=dtype, seed=0)
    off = _HEADER.size

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        a = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
        off += 4 * n
        return a.reshape(shape).astype(dtype)

    field.tables = take(field.tables.shape)
    for mlp in (field.mlp_density, field.mlp_color):
        mlp.W1 = take(mlp.W1.shape)
        mlp.b1 = take(mlp.b1.shape)
        mlp.W2 = take(mlp.W2.shape)
        mlp.b2 = take(mlp.b2.shape)
    if off != len(buf):
        raise FileFormatError("checkpoint has trailing or missing parameter bytes")
    return field
