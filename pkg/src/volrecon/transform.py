"""Affine parameterization and the differentiable Affine Grid Sampler.

Conventions, fixed here and relied on by tests:
  * Euler angles are intrinsic Z-Y-X (R = Rz @ Ry @ Rx on column vectors),
    radians, wrapped to (-pi, pi].
  * Translations are millimetres in the centered world frame: voxel index i
    maps to world (i - (N-1)/2) * spacing. Normalized coordinate -1 is the
    center of the first voxel, +1 the center of the last.
  * Scale is stored as log_scale so the identity sits at 0 and regression
    losses are symmetric around it.
  * 7-DOF matrix realization: M = Translate(t) @ Rot(euler) @ exp(log_scale)*I.
    Full12 mode: M = Translate(t) @ A for a free 3x3 block.
  * Resampling semantics: output(p) = input(T^-1 p), trilinear, zero outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff
from .autodiff import DiffTensor
from .errors import NonFiniteParams, ShapeMismatch, SingularAffine

MODE_7DOF = "7dof"
MODE_FULL12 = "full12"


def wrap_angle(a):
    """Wrap radians into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = a - 2.0 * np.pi * np.round(a / (2.0 * np.pi))
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    return out if out.ndim else float(out)


@dataclass
class AffineParams:
    """Transform parameter vector theta with a 4x4 matrix realization."""

    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    log_scale: float = 0.0
    mode: str = MODE_7DOF
    matrix3: np.ndarray | None = None  # replaces (euler, log_scale) in full12

    def __post_init__(self):
        self.euler = np.asarray(self.euler, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.mode == MODE_FULL12 and self.matrix3 is None:
            self.matrix3 = np.eye(3)

    @classmethod
    def identity(cls, mode: str = MODE_7DOF) -> "AffineParams":
        return cls(mode=mode)

    @property
    def dof(self) -> int:
        return 7 if self.mode == MODE_7DOF else 12

    def as_vector(self) -> np.ndarray:
        if self.mode == MODE_7DOF:
            return np.concatenate([self.euler, self.translation, [self.log_scale]])
        return np.concatenate([self.translation, self.matrix3.reshape(9)])

    @classmethod
    def from_vector(cls, vec: np.ndarray, mode: str = MODE_7DOF) -> "AffineParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if mode == MODE_7DOF:
            if vec.size != 7:
                raise ShapeMismatch(f"7-DOF vector needs 7 entries, got {vec.size}")
            return cls(euler=vec[:3], translation=vec[3:6], log_scale=float(vec[6]))
        if vec.size != 12:
            raise ShapeMismatch(f"full12 vector needs 12 entries, got {vec.size}")
        return cls(translation=vec[:3], matrix3=vec[3:].reshape(3, 3).copy(),
                   mode=MODE_FULL12)

    def to_json_dict(self) -> dict:
        if self.mode == MODE_7DOF:
            return {
                "euler_deg": [float(np.degrees(a)) for a in self.euler],
                "translation_mm": [float(t) for t in self.translation],
                "scale": float(np.exp(self.log_scale)),
            }
        return {
            "translation_mm": [float(t) for t in self.translation],
            "matrix": [[float(v) for v in row] for row in self.matrix3],
        }


def _rot_xyz(euler):
    rx, ry, rz = [float(a) for a in euler]
    ca, sa = np.cos(rx), np.sin(rx)
    cb, sb = np.cos(ry), np.sin(ry)
    cc, sc = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]])
    dRy = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]])
    dRz = np.array([[-sc, -cc, 0], [cc, -sc, 0], [0, 0, 0]])
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def params_to_matrix(theta: AffineParams | np.ndarray, mode: str | None = None) -> np.ndarray:
    """4x4 world-frame matrix realization of theta."""
    theta = _as_params(theta, mode)
    M = np.eye(4)
    if theta.mode == MODE_7DOF:
        (Rx, Ry, Rz), _ = _rot_xyz(theta.euler)
        M[:3, :3] = (Rz @ Ry @ Rx) * np.exp(theta.log_scale)
    else:
        M[:3, :3] = theta.matrix3
    M[:3, 3] = theta.translation
    return M


def params_matrix_jacobian(vec: np.ndarray, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Matrix M(theta) and dM/dtheta_j, both float64. vec is the canonical
    parameter vector (7 or 12 entries)."""
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if mode == MODE_7DOF:
        euler, t, sigma = vec[:3], vec[3:6], float(vec[6])
        (Rx, Ry, Rz), (dRx, dRy, dRz) = _rot_xyz(euler)
        s = np.exp(sigma)
        M3 = (Rz @ Ry @ Rx) * s
        M = np.eye(4)
        M[:3, :3] = M3
        M[:3, 3] = t
        J = np.zeros((7, 4, 4))
        J[0, :3, :3] = (Rz @ Ry @ dRx) * s
        J[1, :3, :3] = (Rz @ dRy @ Rx) * s
        J[2, :3, :3] = (dRz @ Ry @ Rx) * s
        for j in range(3):
            J[3 + j, j, 3] = 1.0
        J[6, :3, :3] = M3
        return M, J
    t, A = vec[:3], vec[3:].reshape(3, 3)
    M = np.eye(4)
    M[:3, :3] = A
    M[:3, 3] = t
    J = np.zeros((12, 4, 4))
    for j in range(3):
        J[j, j, 3] = 1.0
    for i in range(3):
        for j in range(3):
            J[3 + 3 * i + j, i, j] = 1.0
    return M, J


def _as_params(theta, mode: str | None = None) -> AffineParams:
    if isinstance(theta, AffineParams):
        return theta
    vec = np.asarray(theta, dtype=np.float64).reshape(-1)
    if mode is None:
        mode = MODE_7DOF if vec.size == 7 else MODE_FULL12
    return AffineParams.from_vector(vec, mode)


def matrix_to_params(M: np.ndarray, mode: str = MODE_7DOF) -> AffineParams:
    """Re-extract canonical parameters from a 4x4 matrix. In 7-DOF mode the
    3x3 block must be a (positive) similarity; angles come back wrapped."""
    M = np.asarray(M, dtype=np.float64)
    t = M[:3, 3].copy()
    M3 = M[:3, :3]
    if mode == MODE_FULL12:
        return AffineParams(translation=t, matrix3=M3.copy(), mode=MODE_FULL12)
    det = float(np.linalg.det(M3))
    if det <= 1e-18:
        raise SingularAffine(f"det {det:g} not a positive similarity")
    s = det ** (1.0 / 3.0)
    R = M3 / s
    ry = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    if abs(np.cos(ry)) > 1e-9:
        rx = np.arctan2(R[2, 1], R[2, 2])
        rz = np.arctan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: fold rx into rz
        rx = 0.0
        rz = np.arctan2(-R[0, 1], R[1, 1])
    return AffineParams(euler=wrap_angle(np.array([rx, ry, rz])), translation=t,
                        log_scale=float(np.log(s)))


def invert(theta: AffineParams) -> AffineParams:
    """Parameters realizing the inverse matrix."""
    M = params_to_matrix(theta)
    M3 = M[:3, :3]
    det = float(np.linalg.det(M3))
    if abs(det) < 1e-18:
        raise SingularAffine("cannot invert: scale ~ 0 or singular A")
    if theta.mode == MODE_7DOF:
        inv3 = (M3 / np.exp(theta.log_scale)).T * np.exp(-theta.log_scale)
    else:
        inv3 = np.linalg.inv(M3)
    Minv = np.eye(4)
    Minv[:3, :3] = inv3
    Minv[:3, 3] = -inv3 @ M[:3, 3]
    return matrix_to_params(Minv, theta.mode)


def compose(theta_a: AffineParams, theta_b: AffineParams) -> AffineParams:
    """Parameters realizing matrix(theta_a) @ matrix(theta_b)
    (theta_b acts first)."""
    if theta_a.mode != theta_b.mode:
        raise ShapeMismatch("compose requires matching parameter modes")
    M = params_to_matrix(theta_a) @ params_to_matrix(theta_b)
    return matrix_to_params(M, theta_a.mode)


# ---------------------------------------------------------------------------
# sampling grid

@lru_cache(maxsize=8)
def _voxel_grid(dims: tuple[int, int, int]) -> np.ndarray:
    """(Nvox, 3) voxel-center indices in x-fastest order, float64."""
    w, h, s = dims
    gx, gy, gz = np.meshgrid(np.arange(w), np.arange(h), np.arange(s), indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(np.float64)


@dataclass(frozen=True)
class SampleGrid:
    """Normalized-coordinate grid over the voxel centers of a volume.

    -1 maps to the center of the first voxel along each axis, +1 to the
    center of the last; the identity transform therefore samples every voxel
    exactly at its own center.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def voxel_coords(self) -> np.ndarray:
        return _voxel_grid(tuple(self.dims))

    def world_center(self) -> np.ndarray:
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    def normalized(self, vox: np.ndarray) -> np.ndarray:
        n = np.asarray(self.dims, dtype=np.float64)
        return 2.0 * vox / (n - 1.0) - 1.0


def _voxel_space_affine(Minv: np.ndarray, dims, spacing):
    """Map voxel->voxel implementing world-frame Minv. Built so that an
    exactly-identity Minv yields A == I and o == 0 bitwise (tests rely on
    theta = identity being an exact no-op)."""
    sp = np.asarray(spacing, dtype=np.float64)
    c = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    ratio = sp[None, :] / sp[:, None]     # ratio[i,j] = s_j / s_i, exact 1 on diag
    A = Minv[:3, :3] * ratio
    o = c - A @ c + Minv[:3, 3] / sp
    return A, o


def _theta_vector(theta, mode=None):
    if isinstance(theta, DiffTensor):
        vec = np.asarray(theta.values, dtype=np.float64).reshape(-1)
    elif isinstance(theta, AffineParams):
        vec = theta.as_vector()
        mode = theta.mode
    else:
        vec = np.asarray(theta, dtype=np.float64).reshape(-1)
    if mode is None:
        mode = MODE_7DOF if vec.size == 7 else MODE_FULL12
    if vec.size != (7 if mode == MODE_7DOF else 12):
        raise ShapeMismatch(f"theta vector has {vec.size} entries for mode {mode}")
    if not np.all(np.isfinite(vec)):
        raise NonFiniteParams(f"non-finite transform parameters: {vec}")
    return vec, mode


def _invert_matrix(M: np.ndarray) -> np.ndarray:
    M3 = M[:3, :3]
    det = float(np.linalg.det(M3))
    if abs(det) < 1e-18:
        raise SingularAffine("transform matrix is singular")
    inv3 = np.linalg.inv(M3)
    Minv = np.eye(4)
    Minv[:3, :3] = inv3
    Minv[:3, 3] = -inv3 @ M[:3, 3]
    return Minv


def _sample_prep(data_shape, vec, mode, spacing):
    M, _ = params_matrix_jacobian(vec, mode)
    if mode == MODE_7DOF and np.all(vec == 0.0):
        Minv = np.eye(4)  # exact identity, no trig round-off
    else:
        Minv = _invert_matrix(M)
    A, o = _voxel_space_affine(Minv, data_shape, spacing)
    pts = _voxel_grid(tuple(data_shape))
    q = pts @ A.T + o
    return M, Minv, A, o, pts, q


def _axis_corner_data(shape, q, wdtype):
    """Per-axis floor/frac data for trilinear sampling with zero padding.

    Returns, per axis, ((valid_lo, clipped_lo, w_lo), (valid_hi, clipped_hi,
    w_hi)); combining one entry per axis yields one of the 8 corners.
    Coordinates stay float64 so an exact-identity map keeps frac == 0.
    """
    i0 = np.floor(q).astype(np.int64)
    axes = []
    for a in range(3):
        na = shape[a]
        ia = i0[:, a]
        fa = (q[:, a] - ia).astype(wdtype, copy=False)
        hi = ia + 1
        axes.append((
            ((ia >= 0) & (ia < na), np.clip(ia, 0, na - 1), (1.0 - fa).astype(wdtype, copy=False)),
            ((hi >= 0) & (hi < na), np.clip(hi, 0, na - 1), fa),
        ))
    return axes


def _corner_iter(axes, strides):
    for c in range(8):
        bits = ((c >> 2) & 1, (c >> 1) & 1, c & 1)
        vx, ix, wx = axes[0][bits[0]]
        vy, iy, wy = axes[1][bits[1]]
        vz, iz, wz = axes[2][bits[2]]
        valid = vx & vy & vz
        ic = ix * strides[0] + iy * strides[1] + iz
        yield bits, valid, ic, (wx, wy, wz)


def _trilinear_gather(flat, shape, q, out_dtype):
    """Zero-padded trilinear sample of flat (C-order, given shape) at
    fractional voxel coords q (N, 3)."""
    axes = _axis_corner_data(shape, q, out_dtype)
    strides = (shape[1] * shape[2], shape[2])
    out = np.zeros(q.shape[0], dtype=out_dtype)
    for _, valid, ic, (wx, wy, wz) in _corner_iter(axes, strides):
        out += (wx * wy * wz) * valid * flat[ic]
    return out


def affine_resample(data: np.ndarray, theta, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Plain (non-recorded) resample: output(p) = data(T^-1 p)."""
    vec, mode = _theta_vector(theta)
    _, _, _, _, _, q = _sample_prep(data.shape, vec, mode, spacing)
    flat = np.ascontiguousarray(data, dtype=np.float64).reshape(-1)
    out = _trilinear_gather(flat, data.shape, q, np.float64)
    return out.reshape(data.shape).astype(data.dtype, copy=False)


def ags(x: DiffTensor, theta, spacing=(1.0, 1.0, 1.0)) -> DiffTensor:
    """Affine Grid Sampler: differentiable w.r.t. both the volume and theta.

    x is a single-channel 3-D tensor; theta is a DiffTensor holding the
    canonical 7 (or 12) parameter vector, or a plain AffineParams. Samples
    falling outside the source volume contribute zero. The backward pass
    recomputes the corner weights rather than saving them (they dwarf the
    volume itself), and scatters into the volume gradient with bincount,
    which accumulates in a fixed index order.
    """
    if x.values.ndim != 3:
        raise ShapeMismatch(f"ags expects a 3-D volume, got {x.shape}")
    theta_t = theta if isinstance(theta, DiffTensor) else None
    vec, mode = _theta_vector(theta)
    shape = x.values.shape
    dtype = x.tape.dtype
    _, Minv, A, o, _, q = _sample_prep(shape, vec, mode, spacing)
    flat = np.ascontiguousarray(x.values).reshape(-1)
    out = _trilinear_gather(flat, shape, q, dtype).reshape(shape)
    del q  # recomputed in backward; keeping corner data is ~40x the volume

    sp = np.asarray(spacing, dtype=np.float64)

    def back(g):
        gf = g.reshape(-1)
        pts_b = _voxel_grid(tuple(shape))
        q_b = pts_b @ A.T + o
        axes = _axis_corner_data(shape, q_b, dtype)
        strides = (shape[1] * shape[2], shape[2])
        gx = np.zeros(flat.size, dtype=np.float64)
        dq = np.zeros((3, flat.size), dtype=dtype) if theta_t is not None else None
        for bits, valid, ic, (wx, wy, wz) in _corner_iter(axes, strides):
            contrib = gf * (wx * wy * wz) * valid
            gx += np.bincount(ic[valid], weights=contrib[valid], minlength=flat.size)
            if dq is not None:
                # d weight / d frac is +1 on the high corner, -1 on the low
                gv = gf * valid * flat[ic]
                s = (1.0 if bits[0] else -1.0, 1.0 if bits[1] else -1.0,
                     1.0 if bits[2] else -1.0)
                dq[0] += (gv * s[0]) * (wy * wz)
                dq[1] += (gv * s[1]) * (wx * wz)
                dq[2] += (gv * s[2]) * (wx * wy)
        gx = gx.reshape(shape).astype(g.dtype, copy=False)
        if theta_t is None:
            return (gx,)
        # fold the voxel sum into 0th/1st moments, then chain through
        # dMinv/dtheta_j = -Minv dM/dtheta_j Minv
        dq64 = dq.astype(np.float64, copy=False)
        S1 = dq64.sum(axis=1)
        Sp = dq64 @ pts_b
        _, J = params_matrix_jacobian(vec, mode)
        c = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
        ratio = sp[None, :] / sp[:, None]
        gt = np.zeros(len(J))
        for j, dM in enumerate(J):
            dMinv = -Minv @ dM @ Minv
            dA = dMinv[:3, :3] * ratio
            do = -dA @ c + dMinv[:3, 3] / sp
            gt[j] = float(np.sum(dA * Sp) + do @ S1)
        return gx, gt.astype(g.dtype, copy=False)

    if theta_t is not None:
        return x.tape.op(out, (x, theta_t), back)
    return x.tape.op(out, (x,), back)


def resample_mask(bits: np.ndarray, theta, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Resample a binary mask with the same transform, re-binarized at 0.5."""
    m = affine_resample(bits.astype(np.float32), theta, spacing)
    return m >= 0.5


# ---------------------------------------------------------------------------
# registration error helpers

def rotation_angle_deg(theta: AffineParams) -> float:
    """Magnitude of the rotation, in degrees."""
    M3 = params_to_matrix(theta)[:3, :3]
    det = float(np.linalg.det(M3))
    R = M3 / np.cbrt(det)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def params_error(theta_a: AffineParams, theta_b: AffineParams) -> tuple[float, float]:
    """(rotation deg, translation mm) of the residual inv(theta_a) o theta_b;
    (0, 0) iff the two transforms realize the same matrix."""
    residual = compose(invert(theta_a), theta_b)
    return rotation_angle_deg(residual), float(np.linalg.norm(residual.translation))
