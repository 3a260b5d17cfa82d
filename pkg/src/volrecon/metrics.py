"""Evaluation suite: windowed D-SSIM (also the differentiable loss core),
PSNR, RMSE, marching-cubes isosurfaces, and symmetric root-mean surface
distance.

D-SSIM is (1 - SSIM)/2 with a 3-D Gaussian window (sigma = w/6), dynamic
range 1.0 and the conventional stabilizers C1 = 0.01^2, C2 = 0.03^2. The
SSIM map uses valid windows only (no padded borders), so constant images
reproduce their closed form exactly. The plain metric entry points run in
float64; the same core doubles as the training loss when fed DiffTensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff, mc_tables
from .autodiff import DiffTensor, Tape
from .errors import DimsMismatch, EmptyMesh, WindowTooLarge

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

DSSIM_WINDOWS = (3, 7, 11, 15)
DEFAULT_METRICS = ("dssim15", "dssim11", "dssim7", "dssim3", "psnr", "rmse", "rmsd")


@lru_cache(maxsize=16)
def gaussian_window(w: int) -> np.ndarray:
    sigma = w / 6.0
    x = np.arange(w, dtype=np.float64) - (w - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _as_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimsMismatch(f"{a.shape} vs {b.shape}")


def dssim_core(x: DiffTensor, y: DiffTensor, window: int = 11) -> DiffTensor:
    """Differentiable D-SSIM over two tensors on the same tape."""
    if x.shape != y.shape:
        raise DimsMismatch(f"{x.shape} vs {y.shape}")
    if window % 2 == 0 or window < 3:
        raise WindowTooLarge(f"window must be odd and >= 3, got {window}")
    if window > min(x.shape):
        raise WindowTooLarge(f"window {window} exceeds min dim of {x.shape}")
    k = gaussian_window(window)

    def blur(t):
        for axis in range(t.values.ndim):
            t = autodiff.blur1d(t, k, axis)
        return t

    mx = blur(x)
    my = blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (mx * my * 2.0 + SSIM_C1) * (sxy * 2.0 + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    mean_ssim = autodiff.mean(num / den)
    return (1.0 - mean_ssim) * 0.5


def dssim(x, y, window: int = 11) -> float:
    """Structural dissimilarity in [0, 1]; 0 means identical."""
    xa = _as_array(x).astype(np.float64)
    ya = _as_array(y).astype(np.float64)
    _check_pair(xa, ya)
    tape = Tape(np.float64)
    return float(dssim_core(tape.constant(xa), tape.constant(ya), window).values)


def rmse(x, y) -> float:
    xa = _as_array(x).astype(np.float64)
    ya = _as_array(y).astype(np.float64)
    _check_pair(xa, ya)
    d = xa - ya
    return float(np.sqrt(np.mean(d * d)))


PSNR_CAP_DB = 100.0


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range, capped at
    100 dB when the MSE underflows 1e-10."""
    xa = _as_array(x).astype(np.float64)
    ya = _as_array(y).astype(np.float64)
    _check_pair(xa, ya)
    mse = float(np.mean((xa - ya) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# isosurfaces

@dataclass
class TriMesh:
    vertices: np.ndarray   # (V, 3) mm
    triangles: np.ndarray  # (T, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise DimsMismatch("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())


def marching_cubes(v, iso: float, spacing=None) -> TriMesh:
    """Classic 256-case marching cubes with edge interpolation.

    Accepts a Volume or a raw (W,H,S) array. Vertices are in mm (voxel index
    times spacing). Crossing vertices are computed once per undirected grid
    edge, in the low-to-high direction, so shared faces are watertight and
    the complement volume reproduces identical vertex positions.
    """
    vals = _as_array(v).astype(np.float64)
    if spacing is None:
        spacing = getattr(v, "spacing", (1.0, 1.0, 1.0))
    sp = np.asarray(spacing, dtype=np.float64)
    inside = vals < iso

    verts = []
    edge_ids = []
    base = 0
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        cross = inside[tuple(lo)] != inside[tuple(hi)]
        ids = np.full(cross.shape, -1, dtype=np.int64)
        n = int(cross.sum())
        ids[cross] = base + np.arange(n)
        base += n
        v0 = vals[tuple(lo)][cross]
        v1 = vals[tuple(hi)][cross]
        t = (iso - v0) / (v1 - v0)
        idx = np.argwhere(cross).astype(np.float64)
        pos = idx.copy()
        pos[:, axis] += t
        verts.append(pos * sp)
        edge_ids.append(ids)

    if base == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    vertices = np.concatenate(verts, axis=0)

    # cube case index per cell
    w, h, s = vals.shape
    case = np.zeros((w - 1, h - 1, s - 1), dtype=np.uint16)
    for bit, (ox, oy, oz) in enumerate(mc_tables.CORNER_OFFSET):
        case |= (inside[ox:ox + w - 1, oy:oy + h - 1, oz:oz + s - 1] << bit).astype(np.uint16)
    active = np.argwhere((case != 0) & (case != 255))
    if len(active) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    acase = case[active[:, 0], active[:, 1], active[:, 2]]

    # per active cell: global vertex id of each of the 12 local edges
    gid = np.full((len(active), 12), -1, dtype=np.int64)
    for e in range(12):
        ax = int(mc_tables.EDGE_AXIS[e])
        off = mc_tables.EDGE_OFFSET[e]
        gid[:, e] = edge_ids[ax][active[:, 0] + off[0],
                                 active[:, 1] + off[1],
                                 active[:, 2] + off[2]]

    local = mc_tables.TRI_TABLE[acase].astype(np.int64)  # (M, 16)
    tris = []
    for t0 in range(0, 15, 3):
        chunk = local[:, t0:t0 + 3]
        valid = chunk[:, 0] >= 0
        if not valid.any():
            break
        rows = np.nonzero(valid)[0]
        tri = np.take_along_axis(gid[rows], chunk[rows], axis=1)
        tris.append(tri)
    triangles = np.concatenate(tris, axis=0)

    mesh = TriMesh(vertices, triangles)
    areas = mesh.triangle_areas()
    keep = areas > 1e-12
    if not keep.all():
        mesh = TriMesh(vertices, triangles[keep])
    return mesh


# ---------------------------------------------------------------------------
# surface distance

def _closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray,
                                c: np.ndarray) -> np.ndarray:
    """Vectorized closest point on triangle (Ericson's region tests).
    All inputs (N, 3); returns the closest points (N, 3)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        den_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(den_bc != 0, (d4 - d3) / den_bc, 0.0)
        den = va + vb + vc
        vv = np.where(den != 0, vb / den, 0.0)
        ww = np.where(den != 0, vc / den, 0.0)

    conds = [
        (d1 <= 0) & (d2 <= 0),                      # vertex a
        (d3 >= 0) & (d4 <= d3),                     # vertex b
        (d6 >= 0) & (d5 <= d6),                     # vertex c
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),          # edge ab
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),          # edge ac
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),  # edge bc
    ]
    choices = [
        a,
        b,
        c,
        a + t_ab[:, None] * ab,
        a + t_ac[:, None] * ac,
        b + t_bc[:, None] * (c - b),
    ]
    interior = a + vv[:, None] * ab + ww[:, None] * ac
    out = interior.copy()
    done = np.zeros(len(p), dtype=bool)
    for cond, choice in zip(conds, choices):
        pick = cond & ~done
        out[pick] = choice[pick]
        done |= cond
    return out


class _MeshDistance:
    """Exact point-to-surface distances via a kd-tree over triangle
    centroids with a provable candidate radius."""

    def __init__(self, mesh: TriMesh):
        self.a, self.b, self.c = mesh.triangle_corners()
        self.centroids = (self.a + self.b + self.c) / 3.0
        self.r_max = float(np.sqrt(max(
            ((self.a - self.centroids) ** 2).sum(axis=1).max(),
            ((self.b - self.centroids) ** 2).sum(axis=1).max(),
            ((self.c - self.centroids) ** 2).sum(axis=1).max())))
        self.tree = cKDTree(self.centroids)

    def _exact(self, pts, tri_idx):
        cp = _closest_point_on_triangles(pts, self.a[tri_idx], self.b[tri_idx],
                                         self.c[tri_idx])
        return np.linalg.norm(pts - cp, axis=1)

    def query(self, pts: np.ndarray) -> np.ndarray:
        k = min(8, len(self.centroids))
        dcent, idx = self.tree.query(pts, k=k)
        if k == 1:
            dcent = dcent[:, None]
            idx = idx[:, None]
        d = np.full(len(pts), np.inf)
        for j in range(k):
            d = np.minimum(d, self._exact(pts, idx[:, j]))
        # a missed triangle with centroid beyond dcent[:,-1] can still be as
        # close as dcent[:,-1] - r_max; widen the search where that beats d
        unsure = np.nonzero(d > dcent[:, -1] - self.r_max)[0]
        for i in unsure:
            cand = self.tree.query_ball_point(pts[i], d[i] + self.r_max + 1e-12)
            if cand:
                cand = np.asarray(cand)
                d[i] = min(d[i], self._exact(np.repeat(pts[i][None], len(cand), axis=0),
                                             cand).min())
        return d


def sample_mesh_points(mesh: TriMesh, n_min: int = 10000, seed: int = 0) -> np.ndarray:
    """Vertices plus area-weighted face samples, at least n_min points."""
    if mesh.is_empty:
        raise EmptyMesh("cannot sample an empty mesh")
    pts = [mesh.vertices]
    extra = n_min - len(mesh.vertices)
    if extra > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(mesh.triangles)]))
        areas = mesh.triangle_areas()
        probs = areas / areas.sum()
        counts = rng.multinomial(extra, probs)
        tri_idx = np.repeat(np.arange(len(counts)), counts)
        a, b, c = mesh.triangle_corners()
        u = rng.uniform(size=(len(tri_idx), 1))
        v = rng.uniform(size=(len(tri_idx), 1))
        flip = (u + v) > 1.0
        u = np.where(flip, 1.0 - u, u)
        v = np.where(flip, 1.0 - v, v)
        pts.append(a[tri_idx] + u * (b[tri_idx] - a[tri_idx]) + v * (c[tri_idx] - a[tri_idx]))
    return np.concatenate(pts, axis=0)


def rmsd(mesh_a: TriMesh, mesh_b: TriMesh, n_min: int = 10000, seed: int = 0) -> float:
    """Symmetric root-mean-square point-to-surface distance in mm, pooled
    over both directions."""
    if mesh_a.is_empty or mesh_b.is_empty:
        raise EmptyMesh("rmsd needs two non-empty meshes")
    pa = sample_mesh_points(mesh_a, n_min, seed)
    pb = sample_mesh_points(mesh_b, n_min, seed)
    da = _MeshDistance(mesh_b).query(pa)
    db = _MeshDistance(mesh_a).query(pb)
    ssq_a = float(np.dot(da, da))
    ssq_b = float(np.dot(db, db))
    return float(np.sqrt((ssq_a + ssq_b) / (len(da) + len(db))))


# ---------------------------------------------------------------------------
# mesh export

def write_stl(mesh: TriMesh, path) -> None:
    """Binary STL: 80-byte header, u32 triangle count, 50-byte records."""
    a, b, c = mesh.triangle_corners()
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    with open(path, "wb") as fh:
        fh.write(b"volrecon isosurface".ljust(80, b"\0"))
        fh.write(struct.pack("<I", len(mesh.triangles)))
        rec = np.zeros((len(mesh.triangles), 12), dtype="<f4")
        rec[:, 0:3] = n
        rec[:, 3:6] = a
        rec[:, 6:9] = b
        rec[:, 9:12] = c
        raw = np.zeros(len(mesh.triangles), dtype=np.dtype([("v", "<f4", 12), ("attr", "<u2")]))
        raw["v"] = rec
        fh.write(raw.tobytes())


def read_stl(path) -> TriMesh:
    with open(path, "rb") as fh:
        fh.read(80)
        (count,) = struct.unpack("<I", fh.read(4))
        raw = np.frombuffer(fh.read(count * 50), dtype=np.dtype([("v", "<f4", 12), ("attr", "<u2")]))
    tri = raw["v"][:, 3:].reshape(-1, 3, 3).astype(np.float64)
    verts = tri.reshape(-1, 3)
    faces = np.arange(len(verts)).reshape(-1, 3)
    return TriMesh(verts, faces)


def write_obj(mesh: TriMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    """Per-sample values and mean with 95% confidence interval per metric."""

    per_sample: dict

    def aggregate(self) -> dict:
        out = {}
        for name, vals in self.per_sample.items():
            v = np.asarray([x for x in vals if np.isfinite(x)], dtype=np.float64)
            if len(v) == 0:
                out[name] = (float("nan"), float("nan"))
            elif len(v) == 1:
                out[name] = (float(v[0]), 0.0)
            else:
                se = float(v.std(ddof=1) / np.sqrt(len(v)))
                out[name] = (float(v.mean()), 1.96 * se)
        return out


def compute_pair_metrics(recon, gt, metrics=DEFAULT_METRICS, iso: float = 0.5) -> dict:
    """Metric dict for one (reconstruction, ground truth) volume pair.
    rmsd is NaN when either isosurface is empty."""
    out = {}
    for name in metrics:
        if name.startswith("dssim"):
            out[name] = dssim(recon, gt, int(name[5:]))
        elif name == "psnr":
            out[name] = psnr(recon, gt)
        elif name == "rmse":
            out[name] = rmse(recon, gt)
        elif name == "rmsd":
            ma = marching_cubes(recon, iso)
            mb = marching_cubes(gt, iso)
            out[name] = float("nan") if (ma.is_empty or mb.is_empty) else rmsd(ma, mb)
        else:
            raise DimsMismatch(f"unknown metric '{name}'")
    return out


def evaluate_pairs(pairs, metrics=DEFAULT_METRICS, iso: float = 0.5) -> MetricReport:
    per = {name: [] for name in metrics}
    for recon, gt in pairs:
        row = compute_pair_metrics(recon, gt, metrics, iso)
        for name in metrics:
            per[name].append(row[name])
    return MetricReport(per)


def format_markdown_table(rows, metrics=DEFAULT_METRICS) -> str:
    """rows: list of (registration_method, ae_method, MetricReport).
    Mirrors the registration x autoencoder layout with mean +/- CI cells."""
    header = ["Registration", "Autoencoding"] + list(metrics)
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    for reg, ae, report in rows:
        agg = report.aggregate()
        cells = [reg, ae]
        for m in metrics:
            mean, ci = agg.get(m, (float("nan"), float("nan")))
            cells.append("N/A" if not np.isfinite(mean) else f"{mean:.5g} ± {ci:.2g}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report_csv_rows(rows, metrics=DEFAULT_METRICS) -> list[list[str]]:
    out = [["registration", "autoencoding"] + [f"{m}_{k}" for m in metrics
                                               for k in ("mean", "ci95")]]
    for reg, ae, report in rows:
        agg = report.aggregate()
        line = [reg, ae]
        for m in metrics:
            mean, ci = agg.get(m, (float("nan"), float("nan")))
            line.extend([f"{mean:.10g}", f"{ci:.10g}"])
        out.append(line)
    return out
