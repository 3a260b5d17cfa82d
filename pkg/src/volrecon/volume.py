"""Volumes, masks, synthetic tibia phantoms, and the augmentation samplers.

A Volume stores its scalar field as a (W, H, S) float32 array indexed
[x, y, z]; on disk the payload is x-fastest (Fortran ravel of that array).
Everything here is a pure function of its inputs including seeds, so
datasets regenerate bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels, transform
from .errors import (BadMagic, ConfigInvalid, DimsMismatch, GeometryOutOfBounds,
                     TruncatedFile)
from .transform import AffineParams

MASK_TAG_TIBIA = "tibia"
MASK_TAG_VISIBILITY = "visibility"

TIBIA_MASK_THRESHOLD = 0.05  # phantom intensity above this counts as bone


@dataclass
class Volume:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray  # (W, H, S) float32, indexed [x, y, z]

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(d <= 0 for d in self.dims):
            raise DimsMismatch(f"non-positive dims {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise DimsMismatch(f"non-positive spacing {self.spacing}")
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != self.dims:
            if self.data.size == int(np.prod(self.dims)):
                self.data = self.data.reshape(self.dims, order="F")
            else:
                raise DimsMismatch(f"data size {self.data.size} != {self.dims}")

    def copy(self) -> "Volume":
        return Volume(self.dims, self.spacing, self.data.copy())

    def apply_mask(self, mask: "BinaryMask") -> "Volume":
        """Multiplicative masking x * m; removed voxels become 0."""
        if mask.dims != self.dims:
            raise DimsMismatch(f"mask dims {mask.dims} != volume dims {self.dims}")
        return Volume(self.dims, self.spacing, self.data * mask.bits)


@dataclass
class BinaryMask:
    dims: tuple[int, int, int]
    bits: np.ndarray  # (W, H, S) bool
    tag: str = MASK_TAG_TIBIA

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.bits = np.asarray(self.bits)
        if self.bits.dtype != np.bool_:
            self.bits = self.bits.astype(bool)
        if self.bits.shape != self.dims:
            if self.bits.size == int(np.prod(self.dims)):
                self.bits = self.bits.reshape(self.dims, order="F")
            else:
                raise DimsMismatch(f"bits size {self.bits.size} != {self.dims}")

    def mirrored(self) -> "BinaryMask":
        return BinaryMask(self.dims, self.bits[::-1, :, :].copy(), self.tag)

    @classmethod
    def all_ones(cls, dims, tag=MASK_TAG_VISIBILITY) -> "BinaryMask":
        return cls(tuple(dims), np.ones(tuple(dims), dtype=bool), tag)


# ---------------------------------------------------------------------------
# phantom specification and generation

@dataclass
class PhantomSpec:
    """Parametric tibia-like phantom: tapered superellipse shaft, two
    proximal condyle ellipsoids, one medial malleolus bulge, bright cortical
    shell over a noisy trabecular interior."""

    dims: tuple[int, int, int] = (64, 64, 128)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    shaft_length_mm: float = 80.0
    shaft_radius_prox_mm: float = 9.0
    shaft_radius_dist_mm: float = 6.5
    superellipse_exponent: float = 2.5
    condyle_semi_axes_mm: tuple = ((10.5, 8.0, 7.0), (9.0, 7.5, 6.5))
    condyle_offset_mm: float = 7.5
    malleolus_scale: float = 1.0
    cortical_thickness_vox: float = 2.0
    intensity_cortical: float = 0.9
    intensity_trabecular: float = 0.45
    pose: AffineParams = field(default_factory=AffineParams.identity)

    def canonical_extent_mm(self) -> np.ndarray:
        """Half-extent of the canonical shape per axis, falloff included."""
        (a1, b1, c1), (a2, b2, c2) = self.condyle_semi_axes_mm
        r = self.shaft_radius_prox_mm
        ms = self.malleolus_scale
        rx = max(r, self.shaft_radius_dist_mm)
        ex = max(rx, self.condyle_offset_mm + max(a1, a2), 0.67 * r + 4.5 * ms)
        ey = max(0.85 * rx, r / 6.0 + max(b1, b2), 0.22 * r + 3.5 * ms)
        ez = self.shaft_length_mm / 2.0 + max(0.7 * max(c1, c2), 4.8 * ms)
        fall = 2.0 * min(self.spacing)
        return np.array([ex, ey, ez]) + fall


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _phantom_distance(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Approximate signed distance (mm, negative inside) of the canonical
    phantom at points pts (N,3)."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    L = spec.shaft_length_mm
    n = spec.superellipse_exponent

    zn = np.clip((z + L / 2.0) / L, 0.0, 1.0)
    r = spec.shaft_radius_dist_mm + (spec.shaft_radius_prox_mm - spec.shaft_radius_dist_mm) * zn
    rx, ry = r, 0.85 * r
    g = (np.abs(x / rx) ** n + np.abs(y / ry) ** n) ** (1.0 / n)
    d_rad = (g - 1.0) * np.minimum(rx, ry)
    d_ax = np.abs(z) - L / 2.0
    d = np.maximum(d_rad, d_ax)

    def ellipsoid(cx, cy, cz, a, b, c):
        gg = np.sqrt(((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2)
        return (gg - 1.0) * min(a, b, c)

    (a1, b1, c1), (a2, b2, c2) = spec.condyle_semi_axes_mm
    off = spec.condyle_offset_mm
    rp = spec.shaft_radius_prox_mm
    zc = L / 2.0 - 0.3 * max(c1, c2)
    d = np.minimum(d, ellipsoid(+off, rp / 6.0, zc, a1, b1, c1))
    d = np.minimum(d, ellipsoid(-off, -rp / 6.0, zc, a2, b2, c2))
    ms = spec.malleolus_scale
    if ms > 0:
        d = np.minimum(d, ellipsoid(-0.67 * rp, 0.22 * rp, -L / 2.0 + 2.7 * ms,
                                    4.5 * ms, 3.5 * ms, 7.5 * ms))
    return d


def _noise_field(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Smooth trabecular texture locked to the canonical frame."""
    cell = 5.0
    ext = spec.canonical_extent_mm() + 2 * cell
    ngrid = np.ceil(2 * ext / cell).astype(int) + 2
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x7E4]))
    grid = rng.uniform(-1.0, 1.0, size=tuple(ngrid))
    coords = (pts + ext) / cell
    return kernels.trilinear_point_sample(grid, coords)


def _phantom_intensity(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    d = _phantom_distance(spec, pts)
    fall = 1.5 * min(spec.spacing)
    envelope = _smoothstep(-d / fall)
    depth = -d
    shell_mm = spec.cortical_thickness_vox * min(spec.spacing)
    w_trab = _smoothstep((depth - shell_mm) / max(min(spec.spacing), 1e-6))
    level = spec.intensity_cortical * (1.0 - w_trab) + spec.intensity_trabecular * w_trab
    noise = _noise_field(spec, pts)
    level = level + 0.04 * w_trab * noise
    return np.clip(level * envelope, 0.0, 1.0)


def _volume_points_mm(dims, spacing) -> np.ndarray:
    pts = transform._voxel_grid(tuple(dims)).copy()
    c = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    return (pts - c) * np.asarray(spacing, dtype=np.float64)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, BinaryMask]:
    """Deterministic phantom synthesis. The geometry is re-centered so that
    with zero pose jitter the tibia-mask centroid lands on the volume
    center; the pose is then applied analytically (the implicit shape is
    evaluated at T^-1 p, no resampling blur)."""
    dims, spacing = tuple(spec.dims), tuple(spec.spacing)
    if any(d <= 0 for d in dims):
        raise GeometryOutOfBounds(f"non-positive dims {dims}")
    half = np.asarray(dims, dtype=np.float64) * np.asarray(spacing) / 2.0
    ext = spec.canonical_extent_mm()
    if np.any(ext >= half):
        raise GeometryOutOfBounds(f"canonical extent {ext} exceeds half-volume {half}")

    pts = _volume_points_mm(dims, spacing)

    # pass 1: canonical field, to find the mask centroid and support
    vals = _phantom_intensity(spec, pts)
    inside = vals > TIBIA_MASK_THRESHOLD
    if not inside.any():
        raise GeometryOutOfBounds("phantom produced an empty mask")
    support = pts[inside]
    delta = support.mean(axis=0)

    # posed support (subsampled point cloud) must stay inside the volume
    M = transform.params_to_matrix(spec.pose)
    step = max(1, len(support) // 4096)
    posed = (support[::step] - delta) @ M[:3, :3].T + M[:3, 3]
    margin = np.asarray(spacing, dtype=np.float64)
    if np.any(np.abs(posed) >= half - 0.5 * margin):
        raise GeometryOutOfBounds("posed phantom exceeds volume bounds")

    # pass 2: evaluate the centered shape under the pose
    Minv = np.linalg.inv(M)
    q = pts @ Minv[:3, :3].T + Minv[:3, 3] + delta
    vals = _phantom_intensity(spec, q).astype(np.float32)

    vol = Volume(dims, spacing, vals.reshape(dims))
    mask = BinaryMask(dims, (vol.data > TIBIA_MASK_THRESHOLD), MASK_TAG_TIBIA)
    return vol, mask


def random_phantom_spec(rng: np.random.Generator, dims=(64, 64, 128),
                        spacing=(1.0, 1.0, 1.0), pose: AffineParams | None = None,
                        seed: int | None = None) -> PhantomSpec:
    """Draw a jittered anatomy around the default shape."""
    scale = min(dims[0] * spacing[0], dims[1] * spacing[1]) / 64.0
    zscale = dims[2] * spacing[2] / 128.0
    j = lambda lo, hi: float(rng.uniform(lo, hi))
    c1 = (j(9.5, 11.5) * scale, j(7.0, 9.0) * scale, j(6.0, 8.0) * scale)
    c2 = (j(8.0, 10.0) * scale, j(6.5, 8.5) * scale, j(5.5, 7.5) * scale)
    return PhantomSpec(
        dims=tuple(dims), spacing=tuple(spacing),
        seed=int(rng.integers(0, 2 ** 31 - 1)) if seed is None else int(seed),
        shaft_length_mm=j(70, 90) * zscale,
        shaft_radius_prox_mm=j(8.0, 10.0) * scale,
        shaft_radius_dist_mm=j(5.5, 7.5) * scale,
        superellipse_exponent=j(2.0, 3.0),
        condyle_semi_axes_mm=(c1, c2),
        condyle_offset_mm=j(6.5, 8.5) * scale,
        malleolus_scale=j(0.8, 1.2) * scale,
        cortical_thickness_vox=j(1.5, 2.5),
        intensity_cortical=j(0.82, 0.95),
        intensity_trabecular=j(0.38, 0.5),
        pose=pose if pose is not None else AffineParams.identity(),
    )


def mirror_sagittal(v: Volume) -> Volume:
    """Reverse the x axis (left/right mirroring); spacing unchanged."""
    return Volume(v.dims, v.spacing, v.data[::-1, :, :].copy())


def sample_posed_phantom(rng: np.random.Generator, dims, spacing,
                         pose_sampler: "AffineSamplerConfig",
                         max_tries: int = 20):
    """Draw (spec, Volume, BinaryMask) with a random anatomy and pose,
    redrawing (deterministically, from the same stream) when the posed shape
    would clip the volume."""
    last = None
    for _ in range(max_tries):
        pose = sample_affine(pose_sampler, rng)
        spec = random_phantom_spec(rng, dims, spacing, pose=pose)
        try:
            v, m = generate_phantom(spec)
            return spec, v, m
        except GeometryOutOfBounds as exc:
            last = exc
    raise GeometryOutOfBounds(
        f"no admissible pose after {max_tries} draws: {last}")


# ---------------------------------------------------------------------------
# augmentation samplers

@dataclass
class MaskSamplerConfig:
    block_count_range: tuple[int, int] = (1, 4)
    block_side_range: tuple[int, int] = (10, 20)
    seed: int = 0

    def validate(self, dims) -> None:
        bmin, bmax = self.block_count_range
        smin, smax = self.block_side_range
        if bmin > bmax or bmin < 0:
            raise ConfigInvalid(f"bad block count range {self.block_count_range}")
        if smin > smax or smin < 1:
            raise ConfigInvalid(f"bad block side range {self.block_side_range}")
        if smax > min(dims):
            raise ConfigInvalid(f"block side {smax} exceeds dims {dims}")


@dataclass
class AffineSamplerConfig:
    max_angle_deg: float = 15.0
    max_translation_mm: float = 25.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.scale_range
        if self.max_angle_deg < 0 or self.max_translation_mm < 0 or not (0 < lo <= hi):
            raise ConfigInvalid(f"bad affine sampler config {self}")


def sample_blocks(cfg: MaskSamplerConfig, dims, rng: np.random.Generator) -> list[tuple]:
    """Axis-aligned cubic blocks (lo0, lo1, lo2, side), fully contained."""
    cfg.validate(dims)
    bmin, bmax = cfg.block_count_range
    smin, smax = cfg.block_side_range
    count = int(rng.integers(bmin, bmax + 1))
    blocks = []
    for _ in range(count):
        side = int(rng.integers(smin, smax + 1))
        lo = [int(rng.integers(0, d - side + 1)) for d in dims]
        blocks.append((lo[0], lo[1], lo[2], side))
    return blocks


def sample_block_mask(cfg: MaskSamplerConfig, dims,
                      rng: np.random.Generator | None = None) -> BinaryMask:
    """All-ones visibility mask with `count` random cubes zeroed out."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    bits = np.ones(tuple(dims), dtype=bool)
    for (l0, l1, l2, side) in sample_blocks(cfg, dims, rng):
        bits[l0:l0 + side, l1:l1 + side, l2:l2 + side] = False
    return BinaryMask(tuple(dims), bits, MASK_TAG_VISIBILITY)


def sample_affine(cfg: AffineSamplerConfig,
                  rng: np.random.Generator | None = None) -> AffineParams:
    """Uniform, independent draws: Euler angles, translations, isotropic
    scale (uniform in scale, stored as log_scale)."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    amax = np.radians(cfg.max_angle_deg)
    euler = rng.uniform(-amax, amax, size=3)
    trans = rng.uniform(-cfg.max_translation_mm, cfg.max_translation_mm, size=3)
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    return AffineParams(euler=euler, translation=trans, log_scale=float(np.log(scale)))


# ---------------------------------------------------------------------------
# file formats (.vvol volumes, .vmsk packed-bit masks)

_MAGIC = b"VVOL"
_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_BITS = 1
_HEADER = struct.Struct("<4sIIIIfffI")  # magic, version, dims[3], spacing[3], dtype


def _write_header(fh, dims, spacing, dtype_code):
    fh.write(_HEADER.pack(_MAGIC, _VERSION, dims[0], dims[1], dims[2],
                          spacing[0], spacing[1], spacing[2], dtype_code))


def _read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise TruncatedFile(f"{path}: header truncated")
        magic, version, w, h, s, sx, sy, sz, code = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise BadMagic(f"{path}: magic {magic!r}")
        if version != _VERSION:
            raise BadMagic(f"{path}: unsupported version {version}")
        if min(w, h, s) <= 0:
            raise DimsMismatch(f"{path}: bad dims {(w, h, s)}")
        payload = fh.read()
    return (w, h, s), (sx, sy, sz), code, payload


def write_volume(v: Volume, path) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, v.dims, v.spacing, _DTYPE_F32)
        fh.write(np.ascontiguousarray(v.data.ravel(order="F"), dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    dims, spacing, code, payload = _read_header(path)
    if code != _DTYPE_F32:
        raise DimsMismatch(f"{path}: dtype code {code} is not an f32 volume")
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != 4 * n:
        raise TruncatedFile(f"{path}: payload {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return Volume(dims, spacing, np.ascontiguousarray(data))


def write_mask(m: BinaryMask, path) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, m.dims, (1.0, 1.0, 1.0), _DTYPE_BITS)
        packed = np.packbits(m.bits.ravel(order="F"), bitorder="little")
        fh.write(packed.tobytes())


def read_mask(path, tag=MASK_TAG_TIBIA) -> BinaryMask:
    dims, _, code, payload = _read_header(path)
    if code != _DTYPE_BITS:
        raise DimsMismatch(f"{path}: dtype code {code} is not a packed-bit mask")
    n = dims[0] * dims[1] * dims[2]
    expected = (n + 7) // 8
    if len(payload) != expected:
        raise TruncatedFile(f"{path}: payload {len(payload)} bytes, expected {expected}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8),
                         count=n, bitorder="little").astype(bool)
    return BinaryMask(dims, bits.reshape(dims, order="F"), tag)
