"""Synthetic ground truth: procedural impedance volumes, a deterministic
B-mode forward model, and scan trajectories.

The forward model maps the first-order interface reflection magnitude
r(x) = |d . grad Z| / (2 Z) through log compression, then applies seeded
multiplicative value-noise speckle. It is an evaluation device: scale-free
in Z and a pure function of (point, direction) for fixed seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels as K
from .errors import ContractError, FileFormatError
from .geometry import (Pose, ProbeGeometry, euler_zyx_to_matrix, image_plane_rays,
                       matrix_to_euler_zyx, rot_x, rot_z)
from .image import ImageGray

PHANTOM_MAGIC = b"AIPZ"
PHANTOM_VERSION = 1

BETA_LOG_COMPRESSION = 200.0
SPECKLE_SCALE_MM = 1.0


@dataclass(frozen=True)
class PhantomVolume:
    """Voxelized acoustic impedance (MRayl), C-order (nx, ny, nz) layout."""

    values: np.ndarray
    spacing: np.ndarray  # mm per voxel, per axis
    origin: np.ndarray  # world mm of voxel (0, 0, 0)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        sp = np.asarray(self.spacing, dtype=np.float64).reshape(3).copy()
        og = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        if v.ndim != 3 or min(v.shape) < 2:
            raise ContractError("volume must be 3-D with dims >= 2")
        if np.any(sp <= 0):
            raise ContractError("voxel spacing must be positive")
        if v.min() <= 0 or not np.isfinite(v).all():
            raise ContractError("impedances must be finite and > 0")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", og)

    @property
    def dims(self):
        return self.values.shape

    def bounds(self):
        lo = self.origin
        hi = self.origin + (np.array(self.dims) - 1) * self.spacing
        return lo, hi

    def save(self, path) -> None:
        nx, ny, nz = self.dims
        header = struct.pack(
            "<4sIIII3f3f", PHANTOM_MAGIC, PHANTOM_VERSION, nx, ny, nz,
            *self.spacing.astype(np.float32), *self.origin.astype(np.float32),
        )
        with open(path, "wb") as f:
            f.write(header)
            f.write(self.values.astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "PhantomVolume":
        with open(path, "rb") as f:
            buf = f.read()
        head = struct.Struct("<4sIIII3f3f")
        if len(buf) < head.size or buf[:4] != PHANTOM_MAGIC:
            raise FileFormatError("not a phantom volume file (bad magic)")
        _, version, nx, ny, nz, sx, sy, sz, ox, oy, oz = head.unpack_from(buf)
        if version != PHANTOM_VERSION:
            raise FileFormatError(f"unsupported phantom version {version}")
        vals = np.frombuffer(buf, dtype="<f4", count=nx * ny * nz, offset=head.size)
        return PhantomVolume(vals.reshape(nx, ny, nz), (sx, sy, sz), (ox, oy, oz))


@dataclass(frozen=True)
class Primitive:
    kind: str  # ellipsoid | slab | tube
    center: tuple
    size: tuple  # ellipsoid: semi-axes; slab: full extents; tube: (radius, _, length)
    impedance: float
    euler_zyx: tuple = (0.0, 0.0, 0.0)
    edge_mm: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "slab", "tube"):
            raise ContractError(f"unknown primitive kind {self.kind!r}")
        if self.impedance <= 0:
            raise ContractError("primitive impedance must be > 0")
        if min(self.size[0], self.size[2]) <= 0 or (self.kind != "tube" and self.size[1] <= 0):
            raise ContractError("zero-volume primitive")


@dataclass(frozen=True)
class PhantomSpec:
    background: float = 1.38
    primitives: tuple = ()
    speckle_amp: float = 0.1
    seed: int = 0
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (-32.0, -32.0, 0.0)

    def __post_init__(self):
        if self.background <= 0:
            raise ContractError("background impedance must be > 0")
        if not 0.0 <= self.speckle_amp <= 0.5:
            raise ContractError("speckle amplitude must be in [0, 0.5]")


def _primitive_distance(prim: Primitive, pts: np.ndarray) -> np.ndarray:
    """Approximate signed distance (mm, negative inside) for blending."""
    R = euler_zyx_to_matrix(prim.euler_zyx)
    local = (pts - np.asarray(prim.center)) @ R  # R^T applied to rows
    sx, sy, sz = prim.size
    if prim.kind == "ellipsoid":
        rho = np.sqrt(
            (local[:, 0] / sx) ** 2 + (local[:, 1] / sy) ** 2 + (local[:, 2] / sz) ** 2
        )
        return (rho - 1.0) * min(sx, sy, sz)
    if prim.kind == "slab":
        q = np.abs(local) - np.array([sx, sy, sz]) / 2.0
        return q.max(axis=1)
    # tube: radius sx about the local z axis, full length sz
    radial = np.hypot(local[:, 0], local[:, 1]) - sx
    axial = np.abs(local[:, 2]) - sz / 2.0
    return np.maximum(radial, axial)


def gen_phantom(spec: PhantomSpec) -> PhantomVolume:
    """Voxelize primitives back-to-front over the background; later
    primitives overwrite earlier ones, with smoothstep blending across
    each primitive's edge width."""
    nx, ny, nz = spec.dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pts = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3) * np.asarray(spec.spacing) + np.asarray(
        spec.origin
    )
    vals = np.full(pts.shape[0], spec.background, dtype=np.float64)
    for prim in spec.primitives:
        d = _primitive_distance(prim, pts)
        if prim.edge_mm > 0:
            t = np.clip((prim.edge_mm / 2.0 - d) / prim.edge_mm, 0.0, 1.0)
            s = t * t * (3.0 - 2.0 * t)
        else:
            s = (d <= 0.0).astype(np.float64)
        vals = vals * (1.0 - s) + prim.impedance * s
    return PhantomVolume(vals.reshape(nx, ny, nz), spec.spacing, spec.origin)


def sample_impedance(vol: PhantomVolume, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    out, inside = K.volume_sample(vol.values, vol.origin, vol.spacing, x, False)
    if not inside[0]:
        raise ContractError(f"point {x[0]} outside volume bounds")
    return float(out[0])


def sample_impedance_many(vol: PhantomVolume, pts, clamp=True):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return K.volume_sample(vol.values, vol.origin, vol.spacing, pts, clamp)


def reflectivity(vol: PhantomVolume, pts, dirs) -> np.ndarray:
    """r(x) = |d . grad Z| / (2 Z), central differences at voxel spacing."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    z0, _ = sample_impedance_many(vol, pts)
    proj = np.zeros(pts.shape[0])
    for a in range(3):
        h = vol.spacing[a]
        step = np.zeros(3)
        step[a] = h
        zp, _ = sample_impedance_many(vol, pts + step)
        zm, _ = sample_impedance_many(vol, pts - step)
        proj += dirs[:, a] * (zp - zm) / (2.0 * h)
    return np.abs(proj) / (2.0 * z0)


def simulate_bmode(vol: PhantomVolume, pose: Pose, geom: ProbeGeometry, noise_seed: int,
                   r_max: float | None = None, speckle_amp: float = 0.1,
                   beta: float = BETA_LOG_COMPRESSION, depth_atten_mu: float = 0.0) -> ImageGray:
    """Forward-model one scan image; bit-reproducible per (seed, pose, r_max)."""
    pts, dirs = image_plane_rays(pose, geom)
    lo, hi = vol.bounds()
    if np.any(pts < lo - 1e-9) or np.any(pts > hi + 1e-9):
        raise ContractError("image plane extends outside the phantom volume")
    r = reflectivity(vol, pts, dirs)
    if r_max is None:
        r_max = float(r.max())
    # interface responses are O(1e-2..1)/mm; anything below this is trilinear
    # round-off and must not be amplified by the normalizer
    if r_max <= 1e-9:
        raw = np.zeros_like(r)
    else:
        raw = np.log1p(beta * r) / math.log1p(beta * r_max)
    if depth_atten_mu > 0.0:
        depth = np.repeat(
            np.arange(geom.image_h) / (geom.image_h - 1) * geom.depth_mm, geom.image_w
        )
        raw = raw * np.exp(-depth_atten_mu * depth)
    if speckle_amp > 0.0:
        eta = K.value_noise(pts, SPECKLE_SCALE_MM, noise_seed)
        raw = raw * (1.0 + speckle_amp * (eta - 0.5))
    img = np.clip(raw, 0.0, 1.0).reshape(geom.image_h, geom.image_w)
    return ImageGray(img.astype(np.float32))


def dataset_r_max(vol: PhantomVolume, poses, geom: ProbeGeometry) -> float:
    """Shared log-compression normalizer: max reflectivity over all views."""
    r_max = 0.0
    for pose in poses:
        pts, dirs = image_plane_rays(pose, geom)
        r_max = max(r_max, float(reflectivity(vol, pts, dirs).max()))
    return r_max


# ----- trajectories ---------------------------------------------------------------


def gen_trajectory(kind: str, count: int | None = None, *, diameter_mm: float = 20.0,
                   center_depth_mm: float = 30.0, step_deg: float = 5.0,
                   tilt_count: int = 5, tilt_step_deg: float = 5.0,
                   z_mm: float = 0.0, base_pose: Pose | None = None) -> list[Pose]:
    """Scan trajectories.

    circular: poses evenly spaced on a circle (default 72 on 2 cm diameter),
    each probe axis through the common center center_depth_mm below the
    circle plane (remote-center constraint).
    fixed_rotation: poses rotating about the probe's own axis in step_deg
    increments (default 37 poses, 5 degrees).
    rotation_tilt_grid: axial sweep x symmetric tilt ladder around the base
    pose; used to render retrieval galleries.
    """
    if kind == "circular":
        n = 72 if count is None else count
        if n < 1:
            raise ContractError("need at least one pose")
        radius = diameter_mm / 2.0
        axis = np.array([-radius, 0.0, center_depth_mm])
        axis = axis / np.linalg.norm(axis)
        tangent = np.array([0.0, 1.0, 0.0])
        yloc = tangent - np.dot(tangent, axis) * axis
        yloc /= np.linalg.norm(yloc)
        xloc = np.cross(yloc, axis)
        R0 = np.stack([xloc, yloc, axis], axis=1)
        p0 = np.array([radius, 0.0, 0.0])
        lift = np.array([0.0, 0.0, z_mm])
        poses = []
        for i in range(n):
            Rz = rot_z(2.0 * math.pi * i / n)
            poses.append(Pose(Rz @ p0 + lift, matrix_to_euler_zyx(Rz @ R0)))
        return poses
    if kind == "fixed_rotation":
        n = 37 if count is None else count
        if n < 1:
            raise ContractError("need at least one pose")
        base = base_pose or Pose(np.array([0.0, 0.0, z_mm]), np.zeros(3))
        R0 = euler_zyx_to_matrix(base.euler_zyx)
        return [
            Pose(base.position, matrix_to_euler_zyx(R0 @ rot_z(math.radians(step_deg * i))))
            for i in range(n)
        ]
    if kind == "rotation_tilt_grid":
        n = 90 if count is None else count
        if n < 1 or tilt_count < 1 or n % tilt_count != 0:
            raise ContractError("count must be a positive multiple of tilt_count")
        base = base_pose or Pose(np.array([0.0, 0.0, z_mm]), np.zeros(3))
        R0 = euler_zyx_to_matrix(base.euler_zyx)
        axial_count = n // tilt_count
        poses = []
        for a in range(axial_count):
            Ra = rot_z(math.radians(step_deg * a))
            for t in range(tilt_count):
                tilt = math.radians(tilt_step_deg * (t - (tilt_count - 1) / 2.0))
                poses.append(Pose(base.position, matrix_to_euler_zyx(R0 @ Ra @ rot_x(tilt))))
        return poses
    raise ContractError(f"unknown trajectory kind {kind!r}")


def default_phantom_spec(seed: int = 0, speckle_amp: float = 0.1) -> PhantomSpec:
    """Demo abdomen-like phantom: fat-like background with a few organ-scale
    inclusions in the liver/kidney impedance range (textbook constants)."""
    return PhantomSpec(
        background=1.38,
        primitives=(
            Primitive("slab", center=(0.0, 0.0, 10.0), size=(180.0, 180.0, 4.0),
                      impedance=1.58, edge_mm=2.0),
            Primitive("ellipsoid", center=(2.0, 4.0, 34.0), size=(20.0, 16.0, 13.0),
                      impedance=1.65, euler_zyx=(0.3, 0.0, 0.2), edge_mm=3.0),
            Primitive("ellipsoid", center=(-14.0, -9.0, 50.0), size=(8.0, 8.0, 8.0),
                      impedance=1.70, edge_mm=2.5),
            Primitive("tube", center=(16.0, 0.0, 44.0), size=(5.0, 0.0, 70.0),
                      impedance=1.52, euler_zyx=(0.0, 0.0, math.pi / 2), edge_mm=2.0),
        ),
        speckle_amp=speckle_amp,
        seed=seed,
        dims=(64, 64, 64),
        spacing=(1.5, 1.5, 1.5),
        origin=(-48.0, -48.0, 0.0),
    )


def phantom_spec_from_obj(obj: dict) -> PhantomSpec:
    """PhantomSpec from a parsed JSON object (CLI --spec files)."""
    prims = tuple(
        Primitive(
            kind=p["kind"], center=tuple(p["center"]), size=tuple(p["size"]),
            impedance=p["impedance"], euler_zyx=tuple(p.get("euler_zyx", (0, 0, 0))),
            edge_mm=p.get("edge_mm", 0.0),
        )
        for p in obj.get("primitives", [])
    )
    base = PhantomSpec()
    return PhantomSpec(
        background=obj.get("background", base.background),
        primitives=prims,
        speckle_amp=obj.get("speckle_amp", base.speckle_amp),
        seed=obj.get("seed", base.seed),
        dims=tuple(obj.get("dims", base.dims)),
        spacing=tuple(obj.get("spacing", base.spacing)),
        origin=tuple(obj.get("origin", base.origin)),
    )


def split_tag(index: int) -> str:
    """Deterministic stride split: every i%10==5 to test, i%10==8 to val."""
    if index % 10 == 5:
        return "test"
    if index % 10 == 8:
        return "val"
    return "train"


def export_dataset(vol: PhantomVolume, poses, geom: ProbeGeometry, out_dir, *,
                   seed: int = 0, speckle_amp: float = 0.1,
                   beta: float = BETA_LOG_COMPRESSION, splits=None):
    """Simulate every pose and write PGM images plus a manifest.

    The log-compression normalizer is shared across the whole dataset so
    images are mutually consistent. Returns the manifest path.
    """
    from pathlib import Path

    from .dataset import DatasetEntry, ScanDataset, write_manifest
    from .image import write_pgm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = [split_tag(i) for i in range(len(poses))]
    if len(splits) != len(poses):
        raise ContractError("splits must match the pose list")
    r_max = dataset_r_max(vol, poses, geom)
    entries = []
    for i, pose in enumerate(poses):
        img = simulate_bmode(vol, pose, geom, noise_seed=seed, r_max=r_max,
                             speckle_amp=speckle_amp, beta=beta)
        name = f"scan_{i:04d}.pgm"
        write_pgm(img, out_dir / name)
        entries.append(DatasetEntry(file=name, pose=pose, split=splits[i], class_index=i))
    ds = ScanDataset(geometry=geom, entries=entries, root=out_dir)
    manifest = out_dir / "manifest.json"
    write_manifest(ds, manifest)
    return manifest
