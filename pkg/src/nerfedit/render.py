"""Cameras, ray generation, volume rendering, normal maps, mesh extraction.

World frame: y up, +z toward the default (azimuth 0) camera.  The camera
orbits the origin.  Pixel rays follow a pinhole model through pixel centers.
Expected depth from volume rendering is measured along the ray; for normal
estimation it is converted to z-depth (distance along the optical axis) so a
constant depth map is a fronto-parallel plane.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .numerics import Tensor

WORLD_BOUND = 1.5


@dataclass(frozen=True)
class Camera:
    azimuth: float = 0.0
    elevation: float = 0.0
    radius: float = 3.0
    fov: float = 0.7
    resolution: tuple[int, int] = (32, 32)  # (H, W)

    def __post_init__(self):
        if self.radius <= WORLD_BOUND:
            raise ValueError("camera radius must exceed the world bound")
        if not 0.0 < self.fov < np.pi:
            raise ValueError("fov must lie in (0, pi)")

    @property
    def near(self) -> float:
        return self.radius - WORLD_BOUND

    @property
    def far(self) -> float:
        return self.radius + WORLD_BOUND

    def eye(self) -> np.ndarray:
        ca, sa = np.cos(self.azimuth), np.sin(self.azimuth)
        ce, se = np.cos(self.elevation), np.sin(self.elevation)
        return self.radius * np.array([sa * ce, se, ca * ce])

    def frame(self):
        """Right / up / forward unit vectors of the camera."""
        eye = self.eye()
        fwd = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        cup = np.cross(right, fwd)
        return right, cup, fwd


def pixel_tangents(camera: Camera):
    """Per-pixel tangent coordinates (tx, ty): ray = tx*right + ty*up + fwd."""
    h, w = camera.resolution
    half = np.tan(camera.fov / 2.0)
    xs = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * half * (w / h)
    ys = (1.0 - 2.0 * (np.arange(h) + 0.5) / h) * half
    tx = np.broadcast_to(xs[None, :], (h, w)).copy()
    ty = np.broadcast_to(ys[:, None], (h, w)).copy()
    return tx, ty


def camera_rays(camera: Camera):
    """Per-pixel ray (origin, unit direction), row-major, shape (H*W, 3)."""
    h, w = camera.resolution
    right, up, fwd = camera.frame()
    tx, ty = pixel_tangents(camera)
    dirs = (tx[..., None] * right + ty[..., None] * up + fwd)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.eye(), (h, w, 3))
    return origins.reshape(-1, 3).copy(), dirs.reshape(-1, 3).copy()


POSE_AZ_STD = 0.3
POSE_AZ_CLAMP = 0.8
POSE_EL_STD = 0.15
POSE_EL_CLAMP = 0.4


def sample_pose(seed: int, resolution: tuple[int, int] = (32, 32),
                radius: float = 3.0, fov: float = 0.7) -> Camera:
    """Random orbit pose: clamped-normal azimuth/elevation, fixed radius."""
    rg = nm.rng(seed)
    az = float(np.clip(rg.normal(0.0, POSE_AZ_STD), -POSE_AZ_CLAMP, POSE_AZ_CLAMP))
    el = float(np.clip(rg.normal(0.0, POSE_EL_STD), -POSE_EL_CLAMP, POSE_EL_CLAMP))
    return Camera(azimuth=az, elevation=el, radius=radius, fov=fov,
                  resolution=resolution)


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

def volume_render(sigma: Tensor, color: Tensor, feature: Optional[Tensor],
                  t: np.ndarray, far: float, background: float = 1.0):
    """Transmittance-weighted quadrature along rays.

    sigma (R,S), color (R,S,3), feature (R,S,F) or None, t (R,S) strictly
    increasing sample depths.  delta_i = t_{i+1}-t_i with the last delta
    closing the interval to `far`.  Returns (color (R,3), feature, expected
    depth (R,), weights (R,S)).
    """
    if np.any(np.diff(t, axis=1) <= 0):
        raise ValueError("sample depths must be strictly increasing")
    delta = np.concatenate([np.diff(t, axis=1), far - t[:, -1:]], axis=1)
    if np.any(delta < 0):
        raise ValueError("sample depths must not exceed far")
    dt = sigma.data.dtype
    delta_t = nm.tensor(delta.astype(dt))
    sdel = nm.combine("mul", sigma, delta_t)
    inclusive = nm.cumsum(sdel, 1)
    exclusive = nm.combine("sub", inclusive, sdel)
    trans = nm.map_unary("exp", nm.map_unary("neg", exclusive))
    alpha = nm.combine("sub", 1.0, nm.map_unary("exp", nm.map_unary("neg", sdel)))
    weights = nm.combine("mul", trans, alpha)

    wsum = nm.reduce("sum", weights, axes=1)                      # (R,)
    resid = nm.combine("sub", 1.0, wsum)                          # (R,)
    w3 = nm.reshape(weights, (*weights.shape, 1))
    out_color = nm.reduce("sum", nm.combine("mul", w3, color), axes=1)
    out_color = nm.combine("add", out_color,
                           nm.combine("mul", nm.reshape(resid, (-1, 1)), background))
    depth = nm.reduce("sum", nm.combine("mul", weights, nm.tensor(t.astype(dt))), axes=1)
    depth = nm.combine("add", depth, nm.combine("mul", resid, far))
    out_feat = None
    if feature is not None:
        out_feat = nm.reduce("sum", nm.combine("mul", w3, feature), axes=1)
    return out_color, out_feat, depth, weights


def stratified_depths(n_rays: int, n_samples: int, near: float, far: float,
                      seed: int) -> np.ndarray:
    """Stratified samples in [near, far], one jitter per ray per bin."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    rg = nm.rng(seed)
    u = rg.random((n_rays, n_samples))
    bins = (np.arange(n_samples) + u) / n_samples
    return near + (far - near) * bins


# ---------------------------------------------------------------------------
# depth -> normals
# ---------------------------------------------------------------------------

def _replicate_border(t: Tensor, h: int, w: int) -> Tensor:
    """Pad an (H-1, W-1, C) map to (H, W, C) by edge replication."""
    last_col = nm.slice_(t, (slice(None), slice(w - 2, w - 1), slice(None)))
    t = nm.concat([t, last_col], axis=1)
    last_row = nm.slice_(t, (slice(h - 2, h - 1), slice(None), slice(None)))
    return nm.concat([t, last_row], axis=0)


def depth_to_normal(depth: Tensor | np.ndarray, camera: Camera) -> Tensor:
    """Camera-space unit normals from a z-depth map via neighbor cross products.

    depth is the distance along the optical axis (z-depth); each pixel is
    back-projected to p = depth*(tx, ty, -1) in the camera frame.  Normals
    are oriented toward the camera (n . ray < 0 becomes n facing viewer) and
    border pixels replicate their inner neighbor.
    """
    if not isinstance(depth, Tensor):
        depth = nm.tensor(depth)
    h, w = camera.resolution
    if depth.shape != (h, w):
        raise ValueError(f"depth shape {depth.shape} != camera resolution {(h, w)}")
    dt = depth.data.dtype
    tx, ty = pixel_tangents(camera)
    tx = tx.astype(dt)
    ty = ty.astype(dt)

    px = nm.combine("mul", depth, nm.tensor(tx))
    py = nm.combine("mul", depth, nm.tensor(ty))
    pz = nm.map_unary("neg", depth)

    def comp_diff(c: Tensor, axis: int) -> Tensor:
        if axis == 1:  # along columns (u direction)
            a = nm.slice_(c, (slice(0, h - 1), slice(1, w)))
            b = nm.slice_(c, (slice(0, h - 1), slice(0, w - 1)))
        else:          # along rows (v direction)
            a = nm.slice_(c, (slice(1, h), slice(0, w - 1)))
            b = nm.slice_(c, (slice(0, h - 1), slice(0, w - 1)))
        return nm.combine("sub", a, b)

    ux, uy, uz = (comp_diff(c, 1) for c in (px, py, pz))
    vx, vy, vz = (comp_diff(c, 0) for c in (px, py, pz))

    # cross product u x v, componentwise
    nx = nm.combine("sub", nm.combine("mul", uy, vz), nm.combine("mul", uz, vy))
    ny = nm.combine("sub", nm.combine("mul", uz, vx), nm.combine("mul", ux, vz))
    nz = nm.combine("sub", nm.combine("mul", ux, vy), nm.combine("mul", uy, vx))

    # orient toward the camera: flip where dot(n, ray_dir) > 0
    txi = tx[: h - 1, : w - 1]
    tyi = ty[: h - 1, : w - 1]
    dot = nx.data * txi + ny.data * tyi - nz.data
    flipper = nm.tensor(np.where(dot > 0, dt.type(-1.0), dt.type(1.0)))
    nx = nm.combine("mul", nx, flipper)
    ny = nm.combine("mul", ny, flipper)
    nz = nm.combine("mul", nz, flipper)

    sq = nm.combine("add", nm.combine("add", nm.map_unary("square", nx),
                                      nm.map_unary("square", ny)),
                    nm.map_unary("square", nz))
    norm = nm.map_unary("sqrt", nm.combine("add", sq, 1e-24))
    nx = nm.combine("div", nx, norm)
    ny = nm.combine("div", ny, norm)
    nz = nm.combine("div", nz, norm)

    inner = nm.concat([nm.reshape(c, (h - 1, w - 1, 1)) for c in (nx, ny, nz)], axis=2)
    return _replicate_border(inner, h, w)


def ray_to_z_factor(camera: Camera) -> np.ndarray:
    """Per-pixel factor converting along-ray depth t to z-depth: z = t*factor."""
    tx, ty = pixel_tangents(camera)
    return 1.0 / np.sqrt(tx * tx + ty * ty + 1.0)


# ---------------------------------------------------------------------------
# full view render
# ---------------------------------------------------------------------------

@dataclass
class RenderedView:
    rgb: Tensor          # (H,W,3) in [0,1]
    depth: Tensor        # (H,W) along-ray expected depth, world units
    normal: Tensor       # (H,W,3) unit camera-space normals
    weight_sum: Tensor   # (H,W)
    camera: Camera

    def rgb_np(self) -> np.ndarray:
        return self.rgb.data

    def depth_np(self) -> np.ndarray:
        return self.depth.data

    def normal_np(self) -> np.ndarray:
        return self.normal.data

    def weight_sum_np(self) -> np.ndarray:
        return self.weight_sum.data


def render_view(field, w, camera: Camera, n_samples: int = 24, seed: int = 0,
                background: float = 1.0, want_normal: bool = True) -> RenderedView:
    """Volume-render one view of the generative field for a latent w.

    `field` is any object with query(points, view_dirs, w) -> (color Tensor
    (P,3), sdf Tensor (P,1)) and density(sdf) -> Tensor.  Deterministic given
    (w, camera, seed).
    """
    h, wd = camera.resolution
    origins, dirs = camera_rays(camera)
    n_rays = origins.shape[0]
    t = stratified_depths(n_rays, n_samples, camera.near, camera.far, seed)

    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    pts = pts.reshape(-1, 3)
    vdirs = np.repeat(dirs, n_samples, axis=0)

    color, sdf = field.query(pts, vdirs, w)
    sigma = field.density(sdf)

    sigma = nm.reshape(sigma, (n_rays, n_samples))
    color = nm.reshape(color, (n_rays, n_samples, 3))
    out_color, _, depth_ray, weights = volume_render(
        sigma, color, None, t, camera.far, background=background)

    rgb = nm.reshape(out_color, (h, wd, 3))
    depth_img = nm.reshape(depth_ray, (h, wd))
    wsum = nm.reshape(nm.reduce("sum", weights, axes=1), (h, wd))

    normal = None
    if want_normal:
        zfac = ray_to_z_factor(camera).astype(depth_img.data.dtype)
        zdepth = nm.combine("mul", depth_img, nm.tensor(zfac))
        normal = depth_to_normal(zdepth, camera)
    return RenderedView(rgb=rgb, depth=depth_img, normal=normal,
                        weight_sum=wsum, camera=camera)


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V,3) float
    faces: np.ndarray      # (F,3) int

    def is_empty(self) -> bool:
        return len(self.faces) == 0


def _dedupe_mesh(verts: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    """Merge coincident vertices and drop degenerate triangles."""
    if len(faces) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    key = np.round(verts / 1e-9).astype(np.int64)
    _, idx, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    new_verts = verts[idx]
    new_faces = inv[faces]
    ok = (new_faces[:, 0] != new_faces[:, 1]) & \
         (new_faces[:, 1] != new_faces[:, 2]) & \
         (new_faces[:, 0] != new_faces[:, 2])
    new_faces = new_faces[ok]
    a = new_verts[new_faces[:, 1]] - new_verts[new_faces[:, 0]]
    b = new_verts[new_faces[:, 2]] - new_verts[new_faces[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b), axis=1)
    new_faces = new_faces[area2 > 0]
    return TriangleMesh(new_verts, new_faces.astype(np.int64))


def marching_cubes_volume(volume: np.ndarray, spacing: float,
                          origin: float) -> TriangleMesh:
    """Classic single-table marching cubes at isolevel 0 over a cubic grid."""
    from skimage import measure

    if volume.min() > 0 or volume.max() < 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        volume, level=0.0, spacing=(spacing, spacing, spacing), method="lorensen")
    verts = verts + origin
    return _dedupe_mesh(verts, faces)


def extract_mesh(field, w, grid_resolution: int = 64,
                 bound: float = WORLD_BOUND, chunk: int = 65536) -> TriangleMesh:
    """Marching cubes over the field's SDF on a regular grid in world bounds."""
    if grid_resolution < 16:
        raise ValueError("grid resolution must be >= 16")
    g = grid_resolution
    axis = np.linspace(-bound, bound, g)
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    vals = np.empty(len(pts))
    with nm.no_grad():
        for i in range(0, len(pts), chunk):
            p = pts[i:i + chunk]
            v = np.zeros_like(p)
            v[:, 2] = 1.0
            _, sdf = field.query(p, v, w)
            vals[i:i + chunk] = sdf.data.reshape(-1)
    volume = vals.reshape(g, g, g)
    spacing = 2 * bound / (g - 1)
    return marching_cubes_volume(volume, spacing, -bound)


def save_obj(mesh: TriangleMesh, path) -> None:
    """OBJ writer: v/f records, 1-based indices."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
