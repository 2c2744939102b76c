"""Deterministic synthetic static-camera videos: pinhole projection of
billboard objects moving on a ground plane, with exact annotations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import ContractError

# billboard width as a fraction of physical height, per rendered rectangle
ASPECT = 0.6


class ProjectionError(ValueError):
    """Point is behind the camera."""


@dataclass
class Camera:
    focal: float = 110.0  # pixels
    height: float = 3.0  # meters above ground
    pitch: float = 0.0  # radians, positive looks down


@dataclass
class CategorySpec:
    id: int
    name: str
    height_mean: float  # meters
    height_std: float
    color: tuple  # RGB in [0,1]


@dataclass
class SceneSpec:
    view: str = "view0"
    camera: Camera = field(default_factory=Camera)
    image_hw: tuple = (96, 144)
    categories: list = field(default_factory=lambda: [
        CategorySpec(0, "pedestrian", 1.7, 0.1, (0.85, 0.25, 0.2)),
        CategorySpec(1, "vehicle", 1.5, 0.1, (0.2, 0.35, 0.85)),
    ])
    object_count: tuple = (3, 6)
    speed_range: tuple = (0.5, 2.0)  # m/s
    depth_range: tuple = (8.0, 45.0)  # spawn distance from camera, meters
    frame_rate: float = 5.0
    frames_per_video: int = 40
    n_videos: int = 20
    noise_sigma: float = 0.02
    visibility_threshold: float = 0.25
    # expected number of one-frame distractors per frame: object lookalikes
    # (sensor glints) that are rendered but never annotated
    transient_rate: float = 0.0

    def __post_init__(self):
        if self.camera.height <= 0:
            raise ContractError("camera must sit above the ground plane")
        if self.camera.focal <= 0 or self.frame_rate <= 0:
            raise ContractError("focal length and frame rate must be positive")


@dataclass
class AnnotatedFrame:
    image: np.ndarray  # [3,H,W] in [0,1]
    boxes: list  # (category, x1, y1, x2, y2)
    frame_index: int
    view: str


def project(point, camera, image_hw):
    """World point (X lateral, Y up, Z forward from the camera base) -> (u, v)."""
    x, y_up, z = point
    ct, st = math.cos(camera.pitch), math.sin(camera.pitch)
    yl = camera.height - y_up  # level-camera frame, y down
    y_cam = yl * ct - z * st
    z_cam = yl * st + z * ct
    if z_cam <= 0:
        raise ProjectionError(f"point {point} is behind the camera")
    h, w = image_hw
    u = (w - 1) / 2.0 + camera.focal * x / z_cam
    v = (h - 1) / 2.0 + camera.focal * y_cam / z_cam
    return u, v


def project_box(obj_x, obj_z, phys_h, camera, image_hw):
    """Bounding box of an upright billboard centred at (obj_x, obj_z)."""
    half_w = phys_h * ASPECT / 2.0
    us, vs = [], []
    for dx in (-half_w, half_w):
        for y_up in (0.0, phys_h):
            u, v = project((obj_x + dx, y_up, obj_z), camera, image_hw)
            us.append(u)
            vs.append(v)
    return min(us), min(vs), max(us), max(vs)


@dataclass
class _Obj:
    category: int
    phys_h: float
    x: float
    z: float
    vx: float
    vz: float
    color: np.ndarray


def _spawn(rng, spec):
    cat = spec.categories[int(rng.integers(len(spec.categories)))]
    phys_h = max(0.3, cat.height_mean + cat.height_std * rng.standard_normal())
    z = rng.uniform(*spec.depth_range)
    # keep the spawn inside the horizontal view frustum at its depth
    h, w = spec.image_hw
    x_lim = 0.6 * z * (w / 2.0) / spec.camera.focal
    x = rng.uniform(-x_lim, x_lim)
    speed = rng.uniform(*spec.speed_range)
    ang = rng.uniform(0, 2 * math.pi)
    jitter = 1.0 + 0.6 * rng.uniform(-1.0, 1.0)
    color = np.clip(np.asarray(cat.color) * jitter, 0.0, 1.0)
    return _Obj(cat.id, phys_h, x, z, speed * math.cos(ang),
                speed * math.sin(ang), color)


def _in_view(obj, spec):
    if not (spec.depth_range[0] * 0.8 <= obj.z <= spec.depth_range[1] * 1.2):
        return False
    x_lim = 0.8 * obj.z * (spec.image_hw[1] / 2.0) / spec.camera.focal
    return abs(obj.x) <= x_lim


def _render(objs, spec, rng, n_annotated=None):
    """Paint objects far-to-near; annotate only the first n_annotated."""
    if n_annotated is None:
        n_annotated = len(objs)
    h, w = spec.image_hw
    # static background gradient plus per-frame pixel noise
    grad = np.linspace(0.35, 0.65, h)[None, :, None]
    img = np.tile(grad, (3, 1, w)).astype(np.float64)
    owner = np.full((h, w), -1, dtype=np.int64)
    order = sorted(range(len(objs)), key=lambda i: -objs[i].z)  # far to near
    boxes = {}
    for i in order:
        o = objs[i]
        try:
            box = project_box(o.x, o.z, o.phys_h, spec.camera, spec.image_hw)
        except ProjectionError:
            continue
        x1, y1, x2, y2 = box
        cx1, cy1 = max(0, int(round(x1))), max(0, int(round(y1)))
        cx2, cy2 = min(w, int(round(x2))), min(h, int(round(y2)))
        if cx2 <= cx1 or cy2 <= cy1:
            continue
        img[:, cy1:cy2, cx1:cx2] = o.color[:, None, None]
        owner[cy1:cy2, cx1:cx2] = i
        area = max(1, (min(w, int(round(x2))) - max(0, int(round(x1))))
                   * (min(h, int(round(y2))) - max(0, int(round(y1)))))
        boxes[i] = (box, area)
    annotations = []
    for i in order:
        if i >= n_annotated or i not in boxes:
            continue
        (x1, y1, x2, y2), area = boxes[i]
        visible = int((owner == i).sum())
        if visible < spec.visibility_threshold * area:
            continue
        x1c, y1c = max(0.0, x1), max(0.0, y1)
        x2c, y2c = min(float(w), x2), min(float(h), y2)
        if x2c <= x1c or y2c <= y1c:
            continue
        annotations.append((objs[i].category, x1c, y1c, x2c, y2c))
    img += rng.normal(0.0, spec.noise_sigma, img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return img.astype(np.float32), annotations


def generate_video(spec, seed, video_index=0):
    """One video of AnnotatedFrames, fully determined by (seed, video_index)."""
    rng = np.random.default_rng([seed, video_index])
    n_obj = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    objs = [_spawn(rng, spec) for _ in range(n_obj)]
    dt = 1.0 / spec.frame_rate
    frames = []
    for t in range(spec.frames_per_video):
        for i, o in enumerate(objs):
            if not _in_view(o, spec):
                objs[i] = _spawn(rng, spec)
        transients = []
        if spec.transient_rate > 0:
            k = int(rng.poisson(spec.transient_rate))
            transients = [_spawn(rng, spec) for _ in range(k)]
        img, boxes = _render(objs + transients, spec, rng,
                             n_annotated=len(objs))
        frames.append(AnnotatedFrame(image=img, boxes=boxes, frame_index=t,
                                     view=spec.view))
        for o in objs:
            o.x += o.vx * dt
            o.z += o.vz * dt
    return frames


def sample_clips(n_frames, clip_len, stride=1):
    """All clips [s, s+stride, ..., s+(clip_len-1)*stride], dense in s.

    Every frame at least (clip_len-1)*stride from both video ends occurs
    once as a first frame and once as a last frame.
    """
    span = (clip_len - 1) * stride
    if n_frames <= span:
        return []
    return [tuple(s + j * stride for j in range(clip_len))
            for s in range(n_frames - span)]
