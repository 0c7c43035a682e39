"""Dual-supervised deep hashing for plane retrieval.

One shared-weight convolutional encoder sees a weakly transformed (teacher)
and a strongly transformed (student) view of each image. Training combines
proxy cross-entropy on both paths, a cosine self-distillation term, and a
Gaussian-posterior quantization penalty pushing code entries toward +/-1.
Retrieval binarizes codes with sign() and scans the gallery by Hamming
distance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractError, FileFormatError
from .geometry import Pose, pose_angular_error_deg
from .image import ImageGray

GALLERY_MAGIC = b"AIAG"
GALLERY_VERSION = 1
ENCODER_MAGIC = b"AIAE"
ENCODER_VERSION = 1

INPUT_SIZE = 64
CONV_CHANNELS = (16, 32, 64)


# ----- image plumbing ---------------------------------------------------------


def resize_area(img: ImageGray, out_h: int = INPUT_SIZE, out_w: int = INPUT_SIZE) -> np.ndarray:
    """Exact area-average resampling (box filter); reproducible everywhere."""
    if img.height == out_h and img.width == out_w:
        return img.data.astype(np.float64)
    return _resize_matrix(img.height, out_h) @ img.data.astype(np.float64) @ _resize_matrix(
        img.width, out_w
    ).T


_RESIZE_CACHE: dict = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    if key not in _RESIZE_CACHE:
        m = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for o in range(n_out):
            lo, hi = o * scale, (o + 1) * scale
            for i in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
                m[o, i] = min(hi, i + 1) - max(lo, i)
        _RESIZE_CACHE[key] = m / scale
    return _RESIZE_CACHE[key]


def add_black_blocks(data: np.ndarray, rng: np.random.Generator, count: int,
                     max_area_frac: float = 0.10) -> np.ndarray:
    """Zero `count` random rectangles, each covering <= max_area_frac of the image."""
    h, w = data.shape
    out = data.copy()
    for _ in range(count):
        area = rng.uniform(0.02, max_area_frac)
        aspect = rng.uniform(0.5, 2.0)
        bw = max(1, min(w, int(round(w * math.sqrt(area * aspect)))))
        bh = max(1, min(h, int(round(h * math.sqrt(area / aspect)))))
        while bw * bh > max_area_frac * w * h:
            bw = max(1, bw - 1)
            bh = max(1, bh - 1)
            if bw == 1 and bh == 1:
                break
        x0 = int(rng.integers(0, w - bw + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        out[y0 : y0 + bh, x0 : x0 + bw] = 0.0
    return out


def _translate(data: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer shift with zero fill."""
    out = np.zeros_like(data)
    h, w = data.shape
    ys = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, dx), min(w, w + dx))
    yd = slice(max(0, -dy), min(h, h - dy))
    xd = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs] = data[yd, xd]
    return out


def augment(img: ImageGray, mode: str, seed: int) -> ImageGray:
    """Seeded augmentation; weak = small brightness/translation, strong adds
    heavier jitter, Gaussian noise, and 1-3 black occlusion blocks."""
    if mode not in ("weak", "strong"):
        raise ContractError(f"unknown augmentation mode {mode!r}")
    rng = np.random.default_rng(seed)
    data = img.data.astype(np.float64)
    h, w = data.shape
    if mode == "weak":
        bright = rng.uniform(0.9, 1.1)
        max_t = max(1, int(round(0.02 * w)))
    else:
        bright = rng.uniform(0.6, 1.4)
        max_t = max(1, int(round(0.08 * w)))
    dx = int(rng.integers(-max_t, max_t + 1))
    dy = int(rng.integers(-max_t, max_t + 1))
    data = _translate(data, dx, dy) * bright
    if mode == "strong":
        data = data + rng.normal(0.0, 0.05, size=data.shape)
        data = add_black_blocks(data, rng, count=int(rng.integers(1, 4)))
    return ImageGray(np.clip(data, 0.0, 1.0).astype(np.float32))


# ----- encoder ---------------------------------------------------------------


def _conv_gather_idx(c: int, h: int, w: int):
    """Flat gather indices mapping padded (c, h+2, w+2) input to im2col rows.

    Column layout is (channel, kh, kw) C-order; output positions row-major
    over the (h//2, w//2) grid of stride-2 窗 windows.
    """
    oh, ow = h // 2, w // 2
    hp, wp = h + 2, w + 2
    idx = np.empty((oh * ow, c * 9), dtype=np.int64)
    p = 0
    for oy in range(oh):
        for ox in range(ow):
            col = 0
            for ch in range(c):
                for kh in range(3):
                    for kw in range(3):
                        idx[p, col] = (ch * hp + 2 * oy + kh) * wp + 2 * ox + kw
                        col += 1
            p += 1
    return idx, oh, ow


_IDX_CACHE: dict = {}


def _gather_idx(c, h, w):
    key = (c, h, w)
    if key not in _IDX_CACHE:
        _IDX_CACHE[key] = _conv_gather_idx(c, h, w)
    return _IDX_CACHE[key]


class ConvEncoder:
    """64x64 grayscale -> q-dim real hash code.

    Three 3x3 stride-2 conv blocks (16/32/64 channels, ReLU), global average
    pooling, one affine layer. Conv weights are stored as (c_out, c_in*9)
    matrices matching the im2col column layout.
    """

    def __init__(self, q: int = 64, seed: int = 0, dtype=np.float32):
        self.q = q
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.conv_w, self.conv_b = [], []
        c_in = 1
        for c_out in CONV_CHANNELS:
            lim = 1.0 / math.sqrt(c_in * 9)
            self.conv_w.append(rng.uniform(-lim, lim, (c_out, c_in * 9)).astype(self.dtype))
            self.conv_b.append(np.zeros(c_out, dtype=self.dtype))
            c_in = c_out
        lim = 1.0 / math.sqrt(CONV_CHANNELS[-1])
        self.fc_w = rng.uniform(-lim, lim, (q, CONV_CHANNELS[-1])).astype(self.dtype)
        self.fc_b = np.zeros(q, dtype=self.dtype)

    def params(self):
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out += [w, b]
        return out + [self.fc_w, self.fc_b]

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """x: (B, 64, 64) in [0,1]. Returns h (B, q) [and the backward cache]."""
        x = np.ascontiguousarray(x, dtype=self.dtype).reshape(-1, 1, INPUT_SIZE, INPUT_SIZE)
        if not np.isfinite(x).all():
            raise ContractError("encoder input must be finite")
        b = x.shape[0]
        cache = []
        cur = x
        size = INPUT_SIZE
        c_in = 1
        for li, (w, bias) in enumerate(zip(self.conv_w, self.conv_b)):
            idx, oh, ow = _gather_idx(c_in, size, size)
            xp = np.zeros((b, c_in, size + 2, size + 2), dtype=self.dtype)
            xp[:, :, 1:-1, 1:-1] = cur
            sw = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
            cols = np.ascontiguousarray(sw.transpose(0, 2, 3, 1, 4, 5)).reshape(
                b, oh * ow, c_in * 9
            )  # (B, P, c_in*9), column layout (c, kh, kw)
            z = cols @ w.T + bias
            a = np.maximum(z, 0.0)
            cache.append((cols, z, idx, c_in, size))
            cur = a.transpose(0, 2, 1).reshape(b, w.shape[0], oh, ow)
            c_in = w.shape[0]
            size = oh
        pooled = cur.reshape(b, c_in, -1).mean(axis=2)
        h = pooled @ self.fc_w.T + self.fc_b
        if not np.isfinite(h).all():
            raise ContractError("encoder produced non-finite code")
        if want_cache:
            return h, (cache, pooled, b)
        return h

    def backward(self, dh: np.ndarray, cache):
        """d(loss)/d(params) for a forward cache; returns list matching params().

        Math runs in the encoder's own dtype; use a float64 encoder for
        gradient checking.
        """
        conv_cache, pooled, b = cache
        dh = np.ascontiguousarray(dh, dtype=self.dtype)
        d_fc_w = dh.T @ pooled
        d_fc_b = dh.sum(axis=0)
        d_pooled = dh @ self.fc_w
        grads = [None] * (2 * len(self.conv_w)) + [d_fc_w, d_fc_b]
        p = conv_cache[-1][1].shape[1]
        d_a = np.broadcast_to(d_pooled[:, None, :] / p, (b, p, d_pooled.shape[1]))
        for li in range(len(self.conv_w) - 1, -1, -1):
            cols, z, idx, c_in, size = conv_cache[li]
            dz = d_a * (z > 0)
            grads[2 * li] = np.tensordot(dz, cols, axes=([0, 1], [0, 1]))
            grads[2 * li + 1] = dz.sum(axis=(0, 1))
            if li == 0:
                break
            d_cols = dz @ self.conv_w[li]  # (B, P, c_in*9)
            span = c_in * (size + 2) * (size + 2)
            # one scatter for the whole batch: offset indices per sample
            ridx = (np.arange(b)[:, None] * span + idx.ravel()[None, :]).ravel()
            flat = np.bincount(ridx, weights=d_cols.astype(np.float64).ravel(),
                               minlength=b * span)
            d_xp = flat.reshape(b, c_in, size + 2, size + 2).astype(self.dtype)
            d_prev = d_xp[:, :, 1:-1, 1:-1]  # (B, c_in, size, size)
            d_a = d_prev.reshape(b, c_in, -1).transpose(0, 2, 1)
        return grads

    # -- persistence ("AIAE") --

    def save(self, path) -> None:
        parts = [struct.pack("<4sII", ENCODER_MAGIC, ENCODER_VERSION, self.q)]
        for w, bias in zip(self.conv_w, self.conv_b):
            parts.append(np.ascontiguousarray(w).astype("<f4").tobytes())
            parts.append(np.ascontiguousarray(bias).astype("<f4").tobytes())
        parts.append(np.ascontiguousarray(self.fc_w).astype("<f4").tobytes())
        parts.append(np.ascontiguousarray(self.fc_b).astype("<f4").tobytes())
        with open(path, "wb") as f:
            f.write(b"".join(parts))

    @staticmethod
    def load(path) -> "ConvEncoder":
        with open(path, "rb") as f:
            buf = f.read()
        head = struct.Struct("<4sII")
        if len(buf) < head.size or buf[:4] != ENCODER_MAGIC:
            raise FileFormatError("not an encoder file (bad magic)")
        _, version, q = head.unpack_from(buf)
        if version != ENCODER_VERSION:
            raise FileFormatError(f"unsupported encoder version {version}")
        enc = ConvEncoder(q=q, seed=0)
        off = head.size

        def take(shape):
            nonlocal off
            n = int(np.prod(shape))
            a = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
            off += 4 * n
            return a.reshape(shape).astype(np.float32)

        for i in range(len(enc.conv_w)):
            enc.conv_w[i] = take(enc.conv_w[i].shape)
            enc.conv_b[i] = take(enc.conv_b[i].shape)
        enc.fc_w = take(enc.fc_w.shape)
        enc.fc_b = take(enc.fc_b.shape)
        if off != len(buf):
            raise FileFormatError("encoder file has trailing or missing bytes")
        return enc


def encode_image(img: ImageGray, encoder: ConvEncoder) -> np.ndarray:
    return encoder.forward(resize_area(img)[None])[0]


@dataclass(frozen=True)
class HashCode:
    real: np.ndarray

    @property
    def binary(self) -> np.ndarray:
        return binarize(self.real)


def binarize(h: np.ndarray) -> np.ndarray:
    """sign() with sign(0) = +1, as int8 in {-1, +1}."""
    return np.where(np.asarray(h) >= 0, 1, -1).astype(np.int8)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a, dtype=np.int32)
    b = np.asarray(b, dtype=np.int32)
    return int((a.size - int(a @ b)) // 2)


# ----- losses -----------------------------------------------------------------


def _norm_rows(x, eps_check=True):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if eps_check and np.any(n == 0.0):
        raise ContractError("zero vector has no cosine similarity")
    return x / n, n


def loss_dhl(h_t: np.ndarray, h_s: np.ndarray) -> float:
    """Self-distillation: 1 - cosine similarity, in [0, 2]."""
    h_t = np.asarray(h_t, dtype=np.float64)
    h_s = np.asarray(h_s, dtype=np.float64)
    if h_t.shape != h_s.shape:
        raise ContractError("hash codes must have equal length")
    t, _ = _norm_rows(h_t)
    s, _ = _norm_rows(h_s)
    return float(1.0 - np.sum(t * s, axis=-1).mean())


def class_predictions(h: np.ndarray, proxies: np.ndarray) -> np.ndarray:
    """Cosine similarity of h against every proxy row; entries in [-1, 1]."""
    h = np.asarray(h, dtype=np.float64)
    p, _ = _norm_rows(np.asarray(proxies, dtype=np.float64))
    hn, _ = _norm_rows(h)
    return hn @ p.T


def _check_onehot(y):
    y = np.asarray(y, dtype=np.float64)
    ok = np.all(np.isin(y, (0.0, 1.0)), axis=-1) & (y.sum(axis=-1) == 1.0)
    if not np.all(ok):
        raise ContractError("labels must be one-hot")
    return y


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_hpl(y, p_t, p_s, tau_t: float, tau_s: float) -> float:
    """Cross-entropy of softmax-scaled proxy similarities on both paths."""
    if tau_t <= 0 or tau_s <= 0:
        raise ContractError("temperatures must be positive")
    y = _check_onehot(y)
    ce_t = -(y * np.log(_softmax(np.asarray(p_t) / tau_t))).sum(axis=-1)
    ce_s = -(y * np.log(_softmax(np.asarray(p_s) / tau_s))).sum(axis=-1)
    return float((ce_t + ce_s).mean())


def loss_ql(h, rho: float = 0.5) -> float:
    """Gaussian-posterior BCE pushing each entry toward +/-1.

    p_plus = g+(h) / (g+(h) + g-(h)) with g±  Gaussians centered at ±1; the
    target bit is sign(h). Equals ln 2 at h = 0 and decreases toward ±1.
    """
    h = np.asarray(h, dtype=np.float64)
    u = 2.0 * h / (rho * rho)  # log g+ - log g-
    t = (h >= 0.0).astype(np.float64)
    # BCE of sigmoid(u) against t, in the numerically stable logits form
    per_bit = np.maximum(u, 0.0) - u * t + np.log1p(np.exp(-np.abs(u)))
    return float(per_bit.mean())


@dataclass
class LocalizerConfig:
    q: int = 64
    tau_t: float = 0.2
    tau_s: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 0.5
    rho: float = 0.5
    batch_size: int = 16
    iterations: int = 400
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    teacher_mode: str = "weak"
    student_mode: str = "strong"


def loss_local(batch, encoder: ConvEncoder, proxies: np.ndarray, lambda1: float,
               lambda2: float, tau_t: float, tau_s: float, *, rho: float = 0.5,
               seed: int = 0, teacher_mode: str = "weak", student_mode: str = "strong"):
    """Combined localization loss over a batch of (image, one-hot label).

    Returns (loss, encoder gradients, proxy gradients). Images are resized
    to the encoder input first and both views are augmented at that
    resolution; teacher and student share the per-sample seed, so identical
    modes yield identical views (and a vanishing distillation term).
    """
    small = [ImageGray(resize_area(b[0]).astype(np.float32)) for b in batch]
    y = _check_onehot(np.stack([b[1] for b in batch]))
    xt = np.stack([augment(im, teacher_mode, seed + i).data for i, im in enumerate(small)])
    xs = np.stack([augment(im, student_mode, seed + i).data for i, im in enumerate(small)])
    return _loss_local_arrays(xt, xs, y, encoder, proxies, lambda1, lambda2, tau_t, tau_s, rho)


def _loss_local_arrays(xt, xs, y, encoder, proxies, lambda1, lambda2, tau_t, tau_s, rho):
    b = xt.shape[0]
    h_t, cache_t = encoder.forward(xt, want_cache=True)
    h_s, cache_s = encoder.forward(xs, want_cache=True)
    h_t = h_t.astype(np.float64)
    h_s = h_s.astype(np.float64)
    p_unit, p_norm = _norm_rows(np.asarray(proxies, dtype=np.float64))
    ht_unit, ht_norm = _norm_rows(h_t)
    hs_unit, hs_norm = _norm_rows(h_s)
    pt = ht_unit @ p_unit.T
    ps = hs_unit @ p_unit.T

    sm_t = _softmax(pt / tau_t)
    sm_s = _softmax(ps / tau_s)
    l_hpl = float((-(y * np.log(sm_t)).sum(1) - (y * np.log(sm_s)).sum(1)).mean())
    cos_ts = (ht_unit * hs_unit).sum(1)
    l_dhl = float((1.0 - cos_ts).mean())
    u_t = 2.0 * h_t / (rho * rho)
    u_s = 2.0 * h_s / (rho * rho)
    tt = (h_t >= 0.0).astype(np.float64)
    ts = (h_s >= 0.0).astype(np.float64)
    l_ql = float(
        (np.maximum(u_t, 0.0) - u_t * tt + np.log1p(np.exp(-np.abs(u_t)))).mean()
        + (np.maximum(u_s, 0.0) - u_s * ts + np.log1p(np.exp(-np.abs(u_s)))).mean()
    )
    loss = l_hpl + lambda1 * l_dhl + lambda2 * l_ql

    # -- backward --
    d_pt = (sm_t - y) / tau_t / b
    d_ps = (sm_s - y) / tau_s / b
    # cosine-vs-proxies path
    d_ht = (d_pt @ p_unit - (d_pt * pt).sum(1, keepdims=True) * ht_unit) / ht_norm
    d_hs = (d_ps @ p_unit - (d_ps * ps).sum(1, keepdims=True) * hs_unit) / hs_norm
    d_p = (
        d_pt.T @ ht_unit - ((d_pt * pt).sum(0))[:, None] * p_unit
        + d_ps.T @ hs_unit - ((d_ps * ps).sum(0))[:, None] * p_unit
    ) / p_norm
    # distillation path
    c = lambda1 / b
    d_ht += -c * (hs_unit - cos_ts[:, None] * ht_unit) / ht_norm
    d_hs += -c * (ht_unit - cos_ts[:, None] * hs_unit) / hs_norm
    # quantization path: d/du BCE(sigmoid(u), t) = sigmoid(u) - t
    scale = lambda2 * (2.0 / (rho * rho)) / (b * h_t.shape[1])
    d_ht += scale * (_sigmoid(u_t) - tt)
    d_hs += scale * (_sigmoid(u_s) - ts)

    grads_t = encoder.backward(d_ht, cache_t)
    grads_s = encoder.backward(d_hs, cache_s)
    enc_grads = [a + b2 for a, b2 in zip(grads_t, grads_s)]
    return loss, enc_grads, d_p


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ----- training / retrieval ----------------------------------------------------


@dataclass
class Gallery:
    codes: np.ndarray  # (N, q) int8 in {-1, +1}
    poses: list
    classes: np.ndarray  # (N,) int

    def __post_init__(self):
        if len(self.poses) != self.codes.shape[0] or self.classes.shape[0] != self.codes.shape[0]:
            raise ContractError("gallery arrays must have matching lengths")

    def save(self, path) -> None:
        n, q = self.codes.shape
        parts = [struct.pack("<4sIII", GALLERY_MAGIC, GALLERY_VERSION, q, n)]
        for i in range(n):
            bits = (self.codes[i] > 0).astype(np.uint8)
            parts.append(np.packbits(bits, bitorder="little").tobytes())
            parts.append(struct.pack("<6d", *self.poses[i].position, *self.poses[i].euler_zyx))
            parts.append(struct.pack("<I", int(self.classes[i])))
        with open(path, "wb") as f:
            f.write(b"".join(parts))

    @staticmethod
    def load(path) -> "Gallery":
        with open(path, "rb") as f:
            buf = f.read()
        head = struct.Struct("<4sIII")
        if len(buf) < head.size or buf[:4] != GALLERY_MAGIC:
            raise FileFormatError("not a gallery file (bad magic)")
        _, version, q, n = head.unpack_from(buf)
        if version != GALLERY_VERSION:
            raise FileFormatError(f"unsupported gallery version {version}")
        nbytes = (q + 7) // 8
        off = head.size
        codes = np.empty((n, q), dtype=np.int8)
        poses, classes = [], np.empty(n, dtype=np.int64)
        for i in range(n):
            bits = np.unpackbits(
                np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=off),
                bitorder="little", count=q,
            )
            codes[i] = np.where(bits > 0, 1, -1)
            off += nbytes
            vals = struct.unpack_from("<6d", buf, off)
            off += 48
            poses.append(Pose(vals[:3], vals[3:]))
            (classes[i],) = struct.unpack_from("<I", buf, off)
            off += 4
        if off != len(buf):
            raise FileFormatError("gallery file has trailing bytes")
        return Gallery(codes, poses, classes)


def train_localizer(images, poses, config: LocalizerConfig):
    """Train encoder + proxies on a gallery where image i is class i.

    Returns (encoder, proxies, gallery, loss trace). Deterministic per seed.
    """
    n_cls = len(images)
    if n_cls < 2 or len(poses) != n_cls:
        raise ContractError("need at least two classes with matching poses")
    rng = np.random.default_rng(config.seed)
    small = [ImageGray(resize_area(im).astype(np.float32)) for im in images]
    encoder = ConvEncoder(q=config.q, seed=int(rng.integers(2**31)))
    proxies = rng.standard_normal((n_cls, config.q))
    proxies /= np.linalg.norm(proxies, axis=1, keepdims=True)
    eye = np.eye(n_cls)

    params = encoder.params()
    m = [np.zeros(p.shape) for p in params] + [np.zeros(proxies.shape)]
    v = [np.zeros(p.shape) for p in params] + [np.zeros(proxies.shape)]
    trace = []
    for step in range(1, config.iterations + 1):
        idx = rng.integers(n_cls, size=config.batch_size)
        batch = [(small[i], eye[i]) for i in idx]
        loss, enc_grads, d_p = loss_local(
            batch, encoder, proxies, config.lambda1, config.lambda2,
            config.tau_t, config.tau_s, rho=config.rho,
            seed=int(rng.integers(2**31)),
            teacher_mode=config.teacher_mode, student_mode=config.student_mode,
        )
        trace.append(loss)
        all_params = params + [proxies]
        all_grads = enc_grads + [d_p]
        bc1 = 1.0 - config.beta1**step
        bc2 = 1.0 - config.beta2**step
        for p, g, mi, vi in zip(all_params, all_grads, m, v):
            mi *= config.beta1
            mi += (1.0 - config.beta1) * g
            vi *= config.beta2
            vi += (1.0 - config.beta2) * g * g
            p -= (config.lr * (mi / bc1) / (np.sqrt(vi / bc2) + config.eps)).astype(p.dtype)
        proxies /= np.linalg.norm(proxies, axis=1, keepdims=True)

    codes = np.stack([binarize(encode_image(im, encoder)) for im in images])
    gallery = Gallery(codes, list(poses), np.arange(n_cls))
    return encoder, proxies, gallery, trace


def retrieve(query: ImageGray, encoder: ConvEncoder, gallery: Gallery):
    """Nearest gallery entry by Hamming distance; ties take the lowest class."""
    if gallery.codes.shape[0] == 0:
        raise ContractError("gallery is empty")
    code = binarize(encode_image(query, encoder)).astype(np.int32)
    dists = (gallery.codes.shape[1] - gallery.codes.astype(np.int32) @ code) // 2
    best = dists.min()
    tied = np.flatnonzero(dists == best)
    winner = tied[np.argmin(gallery.classes[tied])]
    return gallery.poses[winner], int(gallery.classes[winner]), int(best)


def similarity_score(y1, y2) -> float:
    """1 for equal one-hot positions, else 1/|pos1 - pos2|."""
    y1 = _check_onehot(np.asarray(y1).reshape(1, -1))[0]
    y2 = _check_onehot(np.asarray(y2).reshape(1, -1))[0]
    p1 = int(np.argmax(y1))
    p2 = int(np.argmax(y2))
    if p1 == p2:
        return 1.0
    return 1.0 / abs(p1 - p2)


def evaluate_retrieval(queries, encoder: ConvEncoder, gallery: Gallery):
    """Mean angular error (deg) and success rate at the 10-degree criterion."""
    if not queries:
        raise ContractError("need at least one query")
    errors = []
    for img, true_pose in queries:
        pose, _, _ = retrieve(img, encoder, gallery)
        errors.append(pose_angular_error_deg(true_pose, pose))
    errors = np.asarray(errors)
    return float(errors.mean()), float((errors < 10.0).mean())
