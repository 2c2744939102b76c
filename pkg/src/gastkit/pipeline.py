"""End-to-end operations: prior estimation over a dataset, the training
loop, dual-prediction inference, and evaluation glue."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import data, decoder, geometry, losses, metrics, nn
from .engine import ContractError, Tensor
from .losses import LossConfig
from .model import CornerNetwork, ModelConfig
from .synthscene import sample_clips

log = logging.getLogger(__name__)

STRIDE = 4  # network output stride: input resolution / working resolution


@dataclass
class RunConfig:
    dataset: str = "dataset"
    out_dir: str = "runs/default"
    priors_dir: str = ""  # defaults to <dataset>/priors
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 4
    steps_per_epoch: int = 0  # 0 = every clip once
    clip_stride: int = 1
    seed: int = 0
    score_threshold: float = 0.1
    topk: int = 20
    emb_threshold: float = 0.5
    iou_nms: float = 0.5

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# geometry prior estimation (training split only)
# ---------------------------------------------------------------------------


def estimate_priors(dataset_root, out_dir):
    """One prior JSON per view at working resolution, from train annotations."""
    root = Path(dataset_root)
    manifest = data.load_manifest(root)
    h, w = manifest["image_size"]
    wh, ww = h // STRIDE, w // STRIDE
    n_cat = len(manifest["categories"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for view in manifest["views"]:
        entries = data.video_entries(manifest, split="train", view=view)
        if not entries:
            raise geometry.PriorUnavailable(f"view {view} has no training videos")
        annotations = []
        for v in entries:
            per_frame = data.load_annotations(root / v["annotations"], v["n_frames"])
            for boxes in per_frame:
                for (cat, x1, y1, x2, y2) in boxes:
                    annotations.append(
                        (view, cat,
                         (x1 / STRIDE, y1 / STRIDE, x2 / STRIDE, y2 / STRIDE))
                    )
        prior = geometry.build_prior(annotations, view, n_cat, wh, ww)
        path = out_dir / f"prior_{view}.json"
        geometry.save_prior(prior, path)
        paths.append(path)
    return paths


def load_prior_stacks(priors_dir, views, dtype=np.float32):
    stacks = {}
    for view in views:
        prior = geometry.load_prior(Path(priors_dir) / f"prior_{view}.json")
        stacks[view] = geometry.prior_input_stack(prior, dtype)
    return stacks


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class _VideoCache:
    def __init__(self, root, capacity=8):
        self.root = Path(root)
        self.capacity = capacity
        self._cache = {}

    def frames(self, entry):
        key = entry["id"]
        if key not in self._cache:
            if len(self._cache) >= self.capacity:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = data.load_frames(self.root / entry["frames"])
        return self._cache[key]


def _clip_targets(per_frame_boxes, clip_frames, n_cat, working_hw, loss_cfg):
    targets = {}
    for slot, idx in (("first", clip_frames[0]), ("last", clip_frames[-1])):
        boxes = [
            (cat, x1 / STRIDE, y1 / STRIDE, x2 / STRIDE, y2 / STRIDE)
            for (cat, x1, y1, x2, y2) in per_frame_boxes[idx]
        ]
        targets[slot] = losses.make_targets(boxes, n_cat, working_hw, loss_cfg)
    return targets


def _clip_index(manifest, clip_len, stride):
    clips = []
    for v in data.video_entries(manifest, split="train"):
        windows = sample_clips(v["n_frames"], clip_len, stride)
        if not windows:
            log.warning("video %s too short for clips, skipped", v["id"])
            continue
        for win in windows:
            clips.append((v, win))
    return clips


@dataclass
class TrainResult:
    final_checkpoint: str
    loss_log: str
    steps: int
    aborted: bool = False


def save_model_checkpoint(path, net, optimizer=None, epoch=0):
    arrays = dict(net.state_dict())
    arrays["meta.epoch"] = np.array([epoch], dtype=np.float64)
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    nn.save_checkpoint(path, arrays)


def load_model_checkpoint(path, net, optimizer=None):
    arrays = nn.load_checkpoint(path)
    net.load_state_dict(
        {k: v for k, v in arrays.items()
         if not k.startswith(("opt.", "meta."))}
    )
    if optimizer is not None and "opt.__step__" in arrays:
        optimizer.load_state_arrays(arrays)
    return int(arrays.get("meta.epoch", np.zeros(1))[0])


def train(cfg: RunConfig, resume=None):
    root = Path(cfg.dataset)
    manifest = data.load_manifest(root)
    h, w = manifest["image_size"]
    mc = cfg.model
    if mc.working_hw != (h // STRIDE, w // STRIDE):
        raise ContractError(
            f"model working size {mc.working_hw} does not match dataset "
            f"{(h // STRIDE, w // STRIDE)}"
        )
    n_cat = len(manifest["categories"])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")

    net = CornerNetwork(mc, seed=cfg.seed)
    opt = nn.Adam(net, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    start_epoch = 0
    if resume:
        start_epoch = load_model_checkpoint(resume, net, opt)

    stacks = {}
    if mc.uses_geometry:
        priors_dir = cfg.priors_dir or root / "priors"
        stacks = load_prior_stacks(priors_dir, manifest["views"])

    clips = _clip_index(manifest, mc.clip_len, cfg.clip_stride)
    if not clips:
        raise ContractError("no usable training clips")
    cache = _VideoCache(root)
    ann_cache = {
        v["id"]: data.load_annotations(root / v["annotations"], v["n_frames"])
        for v in data.video_entries(manifest, split="train")
    }

    log_path = out / "loss_log.csv"
    logf = open(log_path, "a" if resume else "w", newline="")
    logw = csv.writer(logf)
    if not resume:
        logw.writerow(["step", "focal", "pull", "push", "total"])

    step = 0
    aborted = False
    last_good = None
    net.train()
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(clips))
        n_steps = len(order) // cfg.batch_size
        if cfg.steps_per_epoch:
            n_steps = min(n_steps, cfg.steps_per_epoch)
        for s in range(n_steps):
            batch = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            net.zero_grad()
            parts_sum = {"focal": 0.0, "pull": 0.0, "push": 0.0}
            total_val = 0.0
            for ci in batch:
                entry, win = clips[ci]
                frames = cache.frames(entry)
                clip = Tensor(
                    np.ascontiguousarray(
                        frames[list(win)].transpose(1, 0, 2, 3)
                    )
                )
                targets = _clip_targets(
                    ann_cache[entry["id"]], win, n_cat, mc.working_hw, cfg.loss
                )
                fields = net(clip, stacks.get(entry["view"]))
                loss, parts = losses.total_loss(fields, targets, cfg.loss)
                scaled = loss * (1.0 / cfg.batch_size)
                scaled.backward()
                total_val += loss.item() / cfg.batch_size
                for k in parts_sum:
                    parts_sum[k] += parts[k] / cfg.batch_size
            if not np.isfinite(total_val):
                log.error("non-finite loss at step %d; aborting", step)
                aborted = True
                break
            try:
                opt.step()
            except nn.NonFiniteGradient as e:
                log.error("aborting training: %s", e)
                aborted = True
                break
            step += 1
            logw.writerow([step, parts_sum["focal"], parts_sum["pull"],
                           parts_sum["push"], total_val])
        if aborted:
            break
        ckpt = out / f"epoch_{epoch + 1:03d}.ckpt"
        save_model_checkpoint(ckpt, net, opt, epoch + 1)
        last_good = ckpt
    logf.close()
    if last_good is None:
        raise ContractError("training produced no checkpoint")
    final = out / "final.ckpt"
    final.write_bytes(last_good.read_bytes())
    return TrainResult(final_checkpoint=str(final), loss_log=str(log_path),
                       steps=step, aborted=aborted)


# ---------------------------------------------------------------------------
# inference: every interior frame predicted twice, then merged
# ---------------------------------------------------------------------------


def infer(cfg: RunConfig, checkpoint, split="test", out_path=None):
    root = Path(cfg.dataset)
    manifest = data.load_manifest(root)
    mc = cfg.model
    n_cat = len(manifest["categories"])
    net = CornerNetwork(mc, seed=cfg.seed)
    load_model_checkpoint(checkpoint, net)
    net.eval()
    stacks = {}
    if mc.uses_geometry:
        priors_dir = cfg.priors_dir or root / "priors"
        stacks = load_prior_stacks(priors_dir, manifest["views"])

    span = (mc.clip_len - 1) * cfg.clip_stride
    results = {}
    single_pass_frames = []
    for entry in data.video_entries(manifest, split=split):
        frames = data.load_frames(root / entry["frames"])
        n = entry["n_frames"]
        per_frame = {i: {"first": None, "last": None} for i in range(n)}
        windows = sample_clips(n, mc.clip_len, cfg.clip_stride)
        if not windows:
            log.warning("video %s too short for inference, skipped", entry["id"])
            continue
        for win in windows:
            clip = Tensor(
                np.ascontiguousarray(frames[list(win)].transpose(1, 0, 2, 3))
            )
            fields = net(clip, stacks.get(entry["view"]))
            for slot, idx in (("first", win[0]), ("last", win[-1])):
                dets = decoder.decode_frame(
                    fields, slot, cfg.score_threshold, cfg.topk,
                    cfg.emb_threshold, scale=float(STRIDE),
                )
                if per_frame[idx][slot] is None:
                    per_frame[idx][slot] = dets
        for i in range(n):
            as_first = per_frame[i]["first"]
            as_last = per_frame[i]["last"]
            if as_first is not None and as_last is not None:
                dets = decoder.merge_dual_predictions(as_last, as_first,
                                                      cfg.iou_nms)
            else:
                only = as_first if as_first is not None else (as_last or [])
                dets = decoder.nms(only, cfg.iou_nms)
                single_pass_frames.append([entry["id"], i])
            results[(entry["id"], i)] = dets

    if out_path:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w") as f:
            for (vid, frame), dets in results.items():
                for d in dets:
                    f.write(json.dumps({
                        "video": vid, "frame": frame, "category": d.category,
                        "x1": d.box[0], "y1": d.box[1],
                        "x2": d.box[2], "y2": d.box[3], "score": d.score,
                    }) + "\n")
        with open(out_path.with_suffix(".meta.json"), "w") as f:
            json.dump({"split": split, "checkpoint": str(checkpoint),
                       "single_pass_frames": single_pass_frames}, f, indent=2)
    return results


def load_detections(path):
    results = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            key = (r["video"], r["frame"])
            results.setdefault(key, []).append(
                (r["category"], r["score"], (r["x1"], r["y1"], r["x2"], r["y2"]))
            )
    return results


def evaluate(cfg: RunConfig, detections_path, split="test"):
    root = Path(cfg.dataset)
    manifest = data.load_manifest(root)
    dets_by_frame = load_detections(detections_path)
    gts_by_frame = {}
    for entry in data.video_entries(manifest, split=split):
        per_frame = data.load_annotations(root / entry["annotations"],
                                          entry["n_frames"])
        for i, boxes in enumerate(per_frame):
            gts_by_frame[(entry["id"], i)] = [
                (cat, (x1, y1, x2, y2)) for (cat, x1, y1, x2, y2) in boxes
            ]
        for i in range(entry["n_frames"]):
            dets_by_frame.setdefault((entry["id"], i), [])
    cats = [c["id"] for c in manifest["categories"]]
    return metrics.evaluate_detections(dets_by_frame, gts_by_frame, cats)
