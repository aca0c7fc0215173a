"""Synthetic driving scenes shared by the archive generator and the toy
downstream model.

A scene is a handful of objects on a [0,10) x [0,10) ground plane.  From
one scene we derive, all deterministically:
  - a scene-level annotation (meters, yaw) and six per-camera
    annotations (pixel coordinates within each camera's 60-degree
    azimuth sector),
  - reference feature maps for the image-branch (per-view) and
    BEV-branch modules, rendered as class-signature blobs on a fixed
    background,
  - camera images for the toy perception model and an occupancy grid
    used as its task label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .text import CLASS_NAMES, NUM_CAMERAS, GroundTruthRecord, SceneObject

WORLD = 10.0
IMG_U, IMG_V = 96.0, 48.0  # camera pixel plane
IFEM_SHAPE = (NUM_CAMERAS, 32, 8, 12)
BFEM_SHAPE = (32, 16, 16)
TOY_IMAGE_SHAPE = (NUM_CAMERAS, 3, 16, 24)
OCCUPANCY_GRID = 4

_CLASS_SIZES = {
    "barrier": (2.0, 0.6),
    "bus": (8.5, 2.9),
    "car": (4.5, 1.8),
    "cyclist": (1.8, 0.6),
    "pedestrian": (0.7, 0.7),
    "truck": (7.0, 2.5),
}


_SIG_CACHE = {}


def _class_signatures(channels: int) -> np.ndarray:
    """Fixed unit channel signature per class (stable across runs)."""
    if channels not in _SIG_CACHE:
        rng = np.random.default_rng(np.random.SeedSequence([0x51674, channels]))
        sig = rng.standard_normal((len(CLASS_NAMES), channels))
        _SIG_CACHE[channels] = sig / np.linalg.norm(sig, axis=1, keepdims=True)
    return _SIG_CACHE[channels]


_CLASS_COLORS = np.abs(_class_signatures(3)) + 0.2


@dataclass
class Scene:
    sample_id: int
    objects: list  # SceneObject entries with (x, y) centers in meters


def sample_scene(sample_id: int, rng: np.random.Generator,
                 max_objects: int = 2) -> Scene:
    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        cls = str(rng.choice(CLASS_NAMES))
        base_l, base_w = _CLASS_SIZES[cls]
        l = base_l * rng.uniform(0.9, 1.1)
        w = base_w * rng.uniform(0.9, 1.1)
        objects.append(SceneObject(
            class_name=cls,
            center=(float(rng.uniform(0.5, WORLD - 0.5)),
                    float(rng.uniform(0.5, WORLD - 0.5))),
            size=(float(min(l, 9.99)), float(min(w, 9.99))),
            yaw=float(rng.uniform(0.0, 3.14)),
        ))
    return Scene(sample_id, objects)


def _azimuth(obj: SceneObject) -> float:
    cx = obj.center[0] - WORLD / 2.0
    cy = obj.center[1] - WORLD / 2.0
    return float(np.arctan2(cy, cx) % (2.0 * np.pi))


def camera_of(obj: SceneObject) -> int:
    return min(int(_azimuth(obj) / (2.0 * np.pi / NUM_CAMERAS)), NUM_CAMERAS - 1)


def project_to_camera(obj: SceneObject) -> tuple:
    """(u, v, w_px, h_px) pixel footprint inside the object's camera."""
    az = _azimuth(obj)
    sector = 2.0 * np.pi / NUM_CAMERAS
    frac = (az % sector) / sector
    cx = obj.center[0] - WORLD / 2.0
    cy = obj.center[1] - WORLD / 2.0
    dist = float(np.hypot(cx, cy))
    u = frac * (IMG_U - 1.0)
    v = min(dist / (WORLD * 0.75), 1.0) * (IMG_V - 1.0)
    scale = 12.0 / (1.0 + dist)
    w_px = min(obj.size[0] * scale, 99.0)
    h_px = min(obj.size[1] * scale + 1.0, 99.0)
    return u, v, w_px, h_px


def scene_records(scene: Scene) -> tuple:
    """(scene-level record, list of six per-camera records)."""
    scene_rec = GroundTruthRecord(scene.sample_id, None, list(scene.objects))
    per_cam = [GroundTruthRecord(scene.sample_id, c, []) for c in range(NUM_CAMERAS)]
    for obj in scene.objects:
        c = camera_of(obj)
        u, v, w_px, h_px = project_to_camera(obj)
        per_cam[c].objects.append(SceneObject(obj.class_name, (u, v), (w_px, h_px)))
    return scene_rec, per_cam


def _bump(h: int, w: int, ci: float, cj: float, sigma: float) -> np.ndarray:
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    return np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma * sigma))


def _background(channels: int, h: int, w: int, phase: float = 0.0) -> np.ndarray:
    cc = np.arange(channels)[:, None, None]
    hh = np.arange(h)[None, :, None]
    ww = np.arange(w)[None, None, :]
    return 0.08 * np.cos(2.0 * np.pi * (hh + ww) / max(h, w) + 0.7 * cc + phase) + 0.02


def render_bev_reference(scene: Scene, shape=BFEM_SHAPE) -> np.ndarray:
    C, H, W = shape
    out = _background(C, H, W)
    sigs = _class_signatures(C)
    for obj in scene.objects:
        ci = obj.center[1] / WORLD * (H - 1)
        cj = obj.center[0] / WORLD * (W - 1)
        amp = 0.6 + obj.size[0] * obj.size[1] / 12.0
        sig = sigs[CLASS_NAMES.index(obj.class_name)]
        out += amp * sig[:, None, None] * _bump(H, W, ci, cj, sigma=1.4)[None]
    return out


def render_view_reference(scene: Scene, shape=IFEM_SHAPE) -> np.ndarray:
    V, C, H, W = shape
    out = np.stack([_background(C, H, W, phase=0.9 * v) for v in range(V)])
    sigs = _class_signatures(C)
    for obj in scene.objects:
        cam = camera_of(obj) % V
        u, v, w_px, h_px = project_to_camera(obj)
        ci = v / (IMG_V - 1.0) * (H - 1)
        cj = u / (IMG_U - 1.0) * (W - 1)
        amp = 0.5 + (w_px + h_px) / 40.0
        sig = sigs[CLASS_NAMES.index(obj.class_name)]
        out[cam] += amp * sig[:, None, None] * _bump(H, W, ci, cj, sigma=1.1)[None]
    return out


def render_toy_images(scene: Scene, rng: np.random.Generator) -> np.ndarray:
    """Camera images for the toy model: colored blobs plus sensor noise."""
    V, C, H, W = TOY_IMAGE_SHAPE
    out = np.full(TOY_IMAGE_SHAPE, 0.1)
    for obj in scene.objects:
        cam = camera_of(obj)
        u, v, w_px, h_px = project_to_camera(obj)
        ci = v / (IMG_V - 1.0) * (H - 1)
        cj = u / (IMG_U - 1.0) * (W - 1)
        color = _CLASS_COLORS[CLASS_NAMES.index(obj.class_name)]
        out[cam] += color[:, None, None] * _bump(H, W, ci, cj, sigma=1.6)[None]
    out += 0.05 * rng.standard_normal(out.shape)
    return out


def occupancy_label(scene: Scene) -> np.ndarray:
    """OCCUPANCY_GRID^2 cells over the ground plane; 1 if a center falls in."""
    grid = np.zeros((OCCUPANCY_GRID, OCCUPANCY_GRID))
    for obj in scene.objects:
        gi = min(int(obj.center[1] / WORLD * OCCUPANCY_GRID), OCCUPANCY_GRID - 1)
        gj = min(int(obj.center[0] / WORLD * OCCUPANCY_GRID), OCCUPANCY_GRID - 1)
        grid[gi, gj] = 1.0
    return grid
