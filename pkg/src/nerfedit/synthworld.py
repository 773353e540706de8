"""Procedural head scenes: exact SDF geometry, labels, reference renders, masks.

A scene is a CSG head centered at the origin: a skin-colored sphere, a
hair-colored top cap (always present, hue in [-1,1]), an optional
hair-colored forehead band ("bangs"), and an optional carved lower-front
dent ("smile").  A size factor scales the whole head.  Attribute labels are
exact functions of the parameters, which is what stands in for an external
labeled dataset plus attribute classifiers and a parsing network.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import numerics as nm
from .render import Camera, camera_rays

ATTR_NAMES = ("hue", "smile", "bangs", "size")
N_ATTRS = 4
ATTR_HUE, ATTR_SMILE, ATTR_BANGS, ATTR_SIZE = range(4)

WORLD_BOUND = 1.5

# geometry constants, as fractions of the scaled head radius R
CAP_SHELL = 1.07
CAP_Y = 0.38
BANGS_SHELL = 1.035
BANGS_Y_LO = 0.12
BANGS_Y_HI = 0.38
BANGS_Z = 0.25
MOUTH_DIR = np.array([0.0, -0.45, 1.0]) / np.linalg.norm([0.0, -0.45, 1.0])
MOUTH_DIST = 1.06
MOUTH_RAD = 0.28

# image-space target boxes (fractions of H and W): rows then cols
SMILE_BOX = (0.55, 0.97, 0.22, 0.78)
BANGS_BOX = (0.25, 0.55, 0.22, 0.78)

BACKGROUND_COLOR = np.array([1.0, 1.0, 1.0])
MOUTH_COLOR = np.array([0.55, 0.18, 0.18])
SKIN_BASE = np.array([0.92, 0.78, 0.62])


class ComponentId(IntEnum):
    HEAD = 0
    CAP = 1
    BANGS = 2
    MOUTH = 3
    BACKGROUND = 4


@dataclass(frozen=True)
class SceneParams:
    seed: int
    head_radius: float          # r, before the size factor
    hue: float                  # h in [-1,1], sign gives the label
    smile: float                # s in {-1,+1}
    bangs: float                # b in {-1,+1}
    size: float                 # g in [-1,1], sign gives the label
    albedo: tuple[float, float, float]

    @property
    def scaled_radius(self) -> float:
        return self.head_radius * (1.0 + 0.15 * self.size)


def hair_color(hue: float) -> np.ndarray:
    """Warm palette for hue>0, cool palette for hue<0; |hue| picks the shade."""
    m = (min(abs(hue), 1.0) - 0.25) / 0.75
    m = float(np.clip(m, 0.0, 1.0))
    if hue >= 0:
        lo, hi = np.array([0.45, 0.28, 0.12]), np.array([0.95, 0.45, 0.10])
    else:
        lo, hi = np.array([0.16, 0.22, 0.42]), np.array([0.25, 0.55, 0.95])
    return lo + m * (hi - lo)


def label_of(params: SceneParams) -> np.ndarray:
    """Exact 4-vector label (hue, smile, bangs, size), each in {-1,+1}."""
    return np.array([np.sign(params.hue), params.smile, params.bangs,
                     np.sign(params.size)], dtype=np.float64)


def sample_scene(seed: int) -> tuple[SceneParams, np.ndarray]:
    """Deterministic scene draw; binary attributes are balanced coins."""
    rg = nm.rng(seed)
    r = float(rg.uniform(0.78, 0.82))
    hue = float(rg.choice([-1.0, 1.0]) * rg.uniform(0.25, 1.0))
    smile = float(rg.choice([-1.0, 1.0]))
    bangs = float(rg.choice([-1.0, 1.0]))
    size = float(rg.choice([-1.0, 1.0]) * rg.uniform(0.3, 1.0))
    jitter = rg.uniform(-0.04, 0.04, size=3)
    albedo = tuple(np.clip(SKIN_BASE + jitter, 0.0, 1.0))
    params = SceneParams(seed=seed, head_radius=r, hue=hue, smile=smile,
                         bangs=bangs, size=size, albedo=albedo)
    return params, label_of(params)


# ---------------------------------------------------------------------------
# SDF evaluation
# ---------------------------------------------------------------------------

def _component_sdfs(params: SceneParams, x: np.ndarray):
    """Distances to each CSG part for points x (...,3)."""
    R = params.scaled_radius
    rad = np.linalg.norm(x, axis=-1)
    d_head = rad - R
    d_cap = np.maximum(rad - CAP_SHELL * R, CAP_Y * R - x[..., 1])
    if params.bangs > 0:
        d_band = np.maximum.reduce([
            rad - BANGS_SHELL * R,
            np.abs(x[..., 1] - 0.5 * (BANGS_Y_LO + BANGS_Y_HI) * R)
            - 0.5 * (BANGS_Y_HI - BANGS_Y_LO) * R,
            BANGS_Z * R - x[..., 2],
        ])
    else:
        d_band = np.full(rad.shape, np.inf)
    if params.smile > 0:
        center = MOUTH_DIST * R * MOUTH_DIR
        d_dent_ball = np.linalg.norm(x - center, axis=-1) - MOUTH_RAD * R
    else:
        d_dent_ball = np.full(rad.shape, np.inf)
    return d_head, d_cap, d_band, d_dent_ball


def scene_distance(params: SceneParams, x: np.ndarray) -> np.ndarray:
    """Signed distance to the full CSG head at points x (...,3)."""
    d_head, d_cap, d_band, d_dent = _component_sdfs(params, x)
    union = np.minimum(np.minimum(d_head, d_cap), d_band)
    return np.maximum(union, -d_dent)


def scene_sdf(params: SceneParams, x: np.ndarray):
    """(signed distance, albedo color, component id) at points x (...,3).

    The component is the CSG part whose surface the point is nearest to: the
    dent wins where the carve is the active branch, otherwise the closest of
    head/cap/band.
    """
    x = np.asarray(x, dtype=np.float64)
    d_head, d_cap, d_band, d_dent = _component_sdfs(params, x)
    union = np.minimum(np.minimum(d_head, d_cap), d_band)
    neg_dent = -d_dent
    d = np.maximum(union, neg_dent)

    comp = np.where(d_cap <= np.minimum(d_head, d_band), ComponentId.CAP,
                    np.where(d_band <= d_head, ComponentId.BANGS, ComponentId.HEAD))
    comp = np.where(neg_dent >= union, ComponentId.MOUTH, comp).astype(np.int64)

    hair = hair_color(params.hue)
    albedo_table = np.stack([np.asarray(params.albedo), hair, hair, MOUTH_COLOR,
                             BACKGROUND_COLOR])
    color = albedo_table[comp]
    return d, color, comp


def scene_normal(params: SceneParams, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Outward surface normal from central differences of the SDF."""
    x = np.asarray(x, dtype=np.float64)
    n = np.zeros_like(x)
    for i in range(3):
        dx = np.zeros(3)
        dx[i] = h
        n[..., i] = scene_distance(params, x + dx) - scene_distance(params, x - dx)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


# ---------------------------------------------------------------------------
# reference rendering (sphere tracing)
# ---------------------------------------------------------------------------

def render_reference(params: SceneParams, camera: Camera,
                     max_steps: int = 128, hit_eps: float = 1e-4):
    """Sphere-traced reference image.

    Returns (rgb (H,W,3) in [0,1], depth (H,W) along-ray, component map
    (H,W) int).  Shading is albedo modulated by the Lambert term of a
    headlight at the camera; misses are background.
    """
    h, w = camera.resolution
    origins, dirs = camera_rays(camera)
    n = origins.shape[0]

    t = np.full(n, camera.near)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        x = origins[idx] + t[idx, None] * dirs[idx]
        d = scene_distance(params, x)
        newly_hit = d < hit_eps
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False
        adv = idx[~newly_hit]
        t[adv] += d[~newly_hit]
        escaped = t[adv] > camera.far
        active[adv[escaped]] = False

    rgb = np.broadcast_to(BACKGROUND_COLOR, (n, 3)).copy()
    depth = np.full(n, camera.far)
    comp = np.full(n, int(ComponentId.BACKGROUND), dtype=np.int64)

    hidx = np.nonzero(hit)[0]
    if hidx.size:
        xs = origins[hidx] + t[hidx, None] * dirs[hidx]
        _, albedo, comp_hit = scene_sdf(params, xs)
        normal = scene_normal(params, xs)
        lam = np.maximum(0.0, np.sum(normal * (-dirs[hidx]), axis=-1))
        rgb[hidx] = albedo * lam[:, None]
        depth[hidx] = t[hidx]
        comp[hidx] = comp_hit

    return (rgb.reshape(h, w, 3), depth.reshape(h, w), comp.reshape(h, w))


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def _box_mask(shape: tuple[int, int], box) -> np.ndarray:
    h, w = shape
    r0, r1, c0, c1 = box
    m = np.zeros(shape, dtype=bool)
    m[int(r0 * h):int(r1 * h), int(c0 * w):int(c1 * w)] = True
    return m


def region_mask(component_map: np.ndarray, attribute: int | str) -> np.ndarray:
    """Per-pixel preserve weights: 1 on the non-target region, 0 on the target.

    hue targets the hair pixels (cap + bangs); smile targets a fixed
    lower-front box plus any dent pixels; bangs targets a fixed forehead box
    plus any band pixels; size targets the whole image (all-zero mask).
    """
    if isinstance(attribute, str):
        if attribute not in ATTR_NAMES:
            raise ValueError(f"unknown attribute {attribute!r}")
        attribute = ATTR_NAMES.index(attribute)
    if attribute not in range(N_ATTRS):
        raise ValueError(f"unknown attribute index {attribute}")

    comp = np.asarray(component_map)
    if attribute == ATTR_HUE:
        target = (comp == ComponentId.CAP) | (comp == ComponentId.BANGS)
    elif attribute == ATTR_SMILE:
        target = _box_mask(comp.shape, SMILE_BOX) | (comp == ComponentId.MOUTH)
    elif attribute == ATTR_BANGS:
        target = _box_mask(comp.shape, BANGS_BOX) | (comp == ComponentId.BANGS)
    else:  # size: whole image is the target
        target = np.ones(comp.shape, dtype=bool)
    return np.where(target, 0.0, 1.0)


def parse_components(depth: np.ndarray, weight_sum: np.ndarray,
                     camera: Camera) -> np.ndarray:
    """Component map for a generated view, from rendered geometry alone.

    Back-projects each foreground pixel to world space and classifies it by
    the same angular rules that define the scene geometry.  This is the
    stand-in parser used when no ground-truth component map exists.
    """
    h, w = camera.resolution
    origins, dirs = camera_rays(camera)
    pts = origins + depth.reshape(-1, 1) * dirs
    rad = np.linalg.norm(pts, axis=-1)
    safe_rad = np.maximum(rad, 1e-9)
    u = pts / safe_rad[:, None]

    comp = np.full(h * w, int(ComponentId.HEAD), dtype=np.int64)
    cap = u[:, 1] >= CAP_Y / CAP_SHELL
    lo = BANGS_Y_LO / BANGS_SHELL
    hi = BANGS_Y_HI / BANGS_SHELL
    band = (~cap) & (u[:, 1] >= lo) & (u[:, 1] <= hi) & (u[:, 2] >= BANGS_Z)
    mouth_cos = float(np.cos(np.arcsin(min(MOUTH_RAD / MOUTH_DIST, 1.0))))
    mouth = (u @ MOUTH_DIR) >= mouth_cos
    comp[cap] = ComponentId.CAP
    comp[band] = ComponentId.BANGS
    comp[mouth] = ComponentId.MOUTH
    comp[weight_sum.reshape(-1) < 0.5] = ComponentId.BACKGROUND
    return comp.reshape(h, w)


# ---------------------------------------------------------------------------
# dataset export
# ---------------------------------------------------------------------------

def export_dataset(out_dir, n: int, seed: int,
                   resolution: tuple[int, int] = (32, 32)) -> Path:
    """Write n reference renders plus a manifest.

    Line i of the manifest describes img_{i:05d}.png:
    scene seed, the four label entries, camera azimuth, camera elevation.
    """
    from .imgio import save_png

    from .render import sample_pose

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = nm.spawn_seeds(seed, 2 * n)
    lines = []
    for i in range(n):
        scene_seed, pose_seed = seeds[2 * i], seeds[2 * i + 1]
        params, label = sample_scene(scene_seed)
        cam = sample_pose(pose_seed, resolution=resolution)
        rgb, _, _ = render_reference(params, cam)
        save_png(rgb, out / f"img_{i:05d}.png")
        fields = [str(scene_seed)] + [f"{v:.0f}" for v in label] \
            + [f"{cam.azimuth:.6f}", f"{cam.elevation:.6f}"]
        lines.append(",".join(fields))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out
