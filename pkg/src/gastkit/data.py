"""Dataset persistence: manifest, frame storage (binary planar-float or PNG),
and JSON Lines annotations."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .engine import ContractError

_FRAME_MAGIC = b"GVID"
_FRAME_VERSION = 1


def save_frames_binary(path, images):
    """Planar float32 frames: magic, version, then u32 T,C,H,W and raw data."""
    images = np.ascontiguousarray(np.stack(images).astype("<f4"))
    t, c, h, w = images.shape
    with open(path, "wb") as f:
        f.write(_FRAME_MAGIC)
        f.write(struct.pack("<IIIII", _FRAME_VERSION, t, c, h, w))
        f.write(images.tobytes())


def load_frames_binary(path):
    with open(path, "rb") as f:
        if f.read(4) != _FRAME_MAGIC:
            raise ContractError(f"{path}: not a frame archive")
        version, t, c, h, w = struct.unpack("<IIIII", f.read(20))
        if version != _FRAME_VERSION:
            raise ContractError(f"{path}: unsupported frame format version {version}")
        data = np.frombuffer(f.read(t * c * h * w * 4), dtype="<f4")
    return data.reshape(t, c, h, w).copy()


def save_frames_png(dirpath, images):
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        arr = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(dirpath / f"frame_{i:04d}.png")


def load_frames_png(dirpath):
    paths = sorted(Path(dirpath).glob("frame_*.png"))
    frames = [np.asarray(Image.open(p)).transpose(2, 0, 1) / 255.0 for p in paths]
    return np.stack(frames).astype(np.float32)


def load_frames(path):
    path = Path(path)
    if path.is_dir():
        return load_frames_png(path)
    return load_frames_binary(path)


def save_annotations(path, frames):
    """One JSON record per box: {frame, category, x1, y1, x2, y2}."""
    with open(path, "w") as f:
        for fr in frames:
            for (cat, x1, y1, x2, y2) in fr.boxes:
                f.write(json.dumps({
                    "frame": fr.frame_index, "category": int(cat),
                    "x1": x1, "y1": y1, "x2": x2, "y2": y2,
                }) + "\n")


def load_annotations(path, n_frames=None):
    """List of per-frame box lists [(category, x1, y1, x2, y2), ...]."""
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    if n_frames is None:
        n_frames = max((r["frame"] for r in records), default=-1) + 1
    frames = [[] for _ in range(n_frames)]
    for r in records:
        frames[r["frame"]].append(
            (r["category"], r["x1"], r["y1"], r["x2"], r["y2"])
        )
    return frames


def write_dataset(root, spec_by_view, seed, train_fraction=0.7, image_format="binary"):
    """Generate and persist a dataset; returns the manifest dict.

    spec_by_view: ordered list of SceneSpec, one per view. Videos cycle
    round-robin over views; per-view videos split train/test by order.
    """
    from . import synthscene

    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    videos = []
    counters = {}
    for spec in spec_by_view:
        counters[spec.view] = 0
    total = sum(s.n_videos for s in spec_by_view)
    vid = 0
    for spec in spec_by_view:
        n_train = int(np.ceil(train_fraction * spec.n_videos))
        for k in range(spec.n_videos):
            frames = synthscene.generate_video(spec, seed, video_index=vid)
            name = f"video_{vid:04d}"
            vdir = root / "videos" / name
            vdir.mkdir(parents=True, exist_ok=True)
            if image_format == "png":
                frame_path = vdir / "frames"
                save_frames_png(frame_path, [f.image for f in frames])
            else:
                frame_path = vdir / "frames.bin"
                save_frames_binary(frame_path, [f.image for f in frames])
            ann_path = vdir / "annotations.jsonl"
            save_annotations(ann_path, frames)
            videos.append({
                "id": name,
                "view": spec.view,
                "n_frames": len(frames),
                "split": "train" if k < n_train else "test",
                "frames": str(frame_path.relative_to(root)),
                "annotations": str(ann_path.relative_to(root)),
            })
            vid += 1
    h, w = spec_by_view[0].image_hw
    manifest = {
        "image_size": [h, w],
        "seed": seed,
        "categories": [
            {"id": c.id, "name": c.name} for c in spec_by_view[0].categories
        ],
        "views": [s.view for s in spec_by_view],
        "videos": videos,
    }
    assert vid == total
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_manifest(root):
    with open(Path(root) / "manifest.json") as f:
        return json.load(f)


def video_entries(manifest, split=None, view=None):
    out = []
    for v in manifest["videos"]:
        if split is not None and v["split"] != split:
            continue
        if view is not None and v["view"] != view:
            continue
        out.append(v)
    return out
