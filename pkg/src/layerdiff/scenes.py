"""Procedural multi-instance scenes: stick figures over textured gradients.

Every image value is a multiple of 1/255 so PNG round trips are exact.
Keypoint order: head, neck, chest, pelvis, left hand, right hand, left foot,
right foot. Parsing labels: 0 background, 1 head, 2 torso, 3 limbs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .conditioning import NUM_KEYPOINTS, MaskSet, tokenize
from .config import DataConfig
from .rng import DRng

KEYPOINT_NAMES = ("head", "neck", "chest", "pelvis", "l_hand", "r_hand", "l_foot", "r_foot")
COUNT_WORDS = ("one", "two", "three", "four")
PALETTE = [0, 0, 0, 255, 200, 160, 40, 90, 220, 220, 60, 60]


class DatasetError(Exception):
    pass


@dataclass
class SceneSample:
    composite: np.ndarray
    background: np.ndarray
    masks: MaskSet
    layers: list
    keypoints: np.ndarray  # N x 8 x 3 integer (x, y, visible)
    parsing: np.ndarray
    prompt: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.composite.shape[0]

    @property
    def n_instances(self) -> int:
        return len(self.masks)


def _quantize(img) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _segment_distance(px, py, a, b) -> np.ndarray:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    s = np.zeros_like(px) if denom == 0 else np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + s * dx), py - (ay + s * dy))


def make_background(rng: DRng, size: int) -> np.ndarray:
    c0 = rng.uniform((3,), 0.15, 0.85)
    c1 = rng.uniform((3,), 0.15, 0.85)
    theta = rng.uniform((), 0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    u = (np.cos(theta) * xx + np.sin(theta) * yy)
    u = (u - u.min()) / max(u.max() - u.min(), 1e-12)
    coarse = rng.uniform((4, 4), -1.0, 1.0)
    texture = ndimage.zoom(coarse, size / 4, order=1, mode="nearest")[:size, :size]
    img = c0 + (c1 - c0) * u[..., None] + 0.04 * texture[..., None] + rng.uniform((size, size, 3), -0.015, 0.015)
    return _quantize(img)


def make_figure(rng: DRng, size: int):
    """One stick figure: (part label map, keypoints 8x3)."""
    height = rng.uniform((), 0.45, 0.7) * size
    r_head = max(1.0, 0.11 * height)
    half_w = (height * 0.35) / 2 + 0.5
    cx = rng.uniform((), half_w, size - 1 - half_w)
    top = rng.uniform((), 0.0, size - 1 - height)
    head = (cx, top + r_head)
    neck = (cx + rng.uniform((), -0.5, 0.5), top + 2.0 * r_head + 0.3)
    pelvis = (cx + rng.uniform((), -0.5, 0.5), top + 0.62 * height)
    chest = ((neck[0] + pelvis[0]) / 2, (neck[1] + pelvis[1]) / 2)
    arm = 0.3 * height
    leg = height - (pelvis[1] - top)
    angles = rng.uniform((4,), 0.15, 1.0)
    l_hand = (neck[0] - arm * np.sin(angles[0]), neck[1] + arm * np.cos(angles[0]))
    r_hand = (neck[0] + arm * np.sin(angles[1]), neck[1] + arm * np.cos(angles[1]))
    spread = 0.45 * angles[2:]
    l_foot = (pelvis[0] - leg * np.sin(spread[0]), pelvis[1] + leg * np.cos(spread[0]))
    r_foot = (pelvis[0] + leg * np.sin(spread[1]), pelvis[1] + leg * np.cos(spread[1]))
    joints = [head, neck, chest, pelvis, l_hand, r_hand, l_foot, r_foot]

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.zeros((size, size), dtype=np.int64)
    limb_w = max(0.55, 0.045 * height)
    for a, b in ((neck, l_hand), (neck, r_hand), (pelvis, l_foot), (pelvis, r_foot)):
        labels[_segment_distance(xx, yy, a, b) <= limb_w] = 3
    labels[_segment_distance(xx, yy, neck, pelvis) <= max(0.8, 0.08 * height)] = 2
    labels[np.hypot(xx - head[0], yy - head[1]) <= r_head] = 1
    kp = np.zeros((NUM_KEYPOINTS, 3), dtype=np.int64)
    for i, (x, y) in enumerate(joints):
        xi, yi = int(np.clip(np.round(x), 0, size - 1)), int(np.clip(np.round(y), 0, size - 1))
        kp[i] = (xi, yi, 1)
    return labels, kp


def generate_scene(rng: DRng, cfg: DataConfig) -> SceneSample:
    size = cfg.size
    background = make_background(rng.spawn("background"), size)
    n_target = rng.integers(cfg.min_instances, cfg.max_instances + 1)
    label_maps, keypoints, colors = [], [], []
    for k in range(n_target):
        krng = rng.spawn("instance", k)
        allow_overlap = krng.uniform() < cfg.occlusion_prob
        for attempt in range(30):
            labels, kp = make_figure(krng.spawn("try", attempt), size)
            support = labels > 0
            if allow_overlap or not any(np.any(support & (m > 0)) for m in label_maps):
                break
        else:
            continue
        label_maps.append(labels)
        keypoints.append(kp)
        colors.append(_quantize(krng.uniform((4, 3), 0.0, 1.0)))
    n = len(label_maps)
    depth = [int(i) + 1 for i in rng.spawn("depth").permutation(n)]

    masks = np.stack([(lm > 0).astype(np.float64) for lm in label_maps])
    layers = []
    for lm, col in zip(label_maps, colors):
        layer = background.copy()
        for part in (1, 2, 3):
            layer[lm == part] = col[part]
        layers.append(layer)
    composite = background.copy()
    parsing = np.zeros((size, size), dtype=np.int64)
    for k in depth:
        sel = masks[k - 1] > 0
        composite[sel] = layers[k - 1][sel]
        parsing[sel] = label_maps[k - 1][sel]
    noun = "person" if n == 1 else "people"
    prompt = tokenize(["remove", COUNT_WORDS[n - 1], noun, "background"])
    return SceneSample(composite, background, MaskSet(masks, depth), layers,
                       np.stack(keypoints), parsing, prompt)


def render_pose_map(keypoints, H: int, W: int, sigma: float = 1.5) -> np.ndarray:
    """One Gaussian heatmap per keypoint, peak 1; invisible keypoints give zero channels."""
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    maps = np.zeros((len(kp), H, W))
    for i, (x, y, vis) in enumerate(kp):
        if vis <= 0 or not (0 <= x < W and 0 <= y < H):
            continue
        maps[i] = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma ** 2))
    return maps


def scene_pose_map(sample: SceneSample, sigma: float = 1.5) -> np.ndarray:
    """Pose map of all instances: per-keypoint maximum over instances."""
    H, W = sample.parsing.shape
    return np.max([render_pose_map(kp, H, W, sigma) for kp in sample.keypoints], axis=0)


def _dilate(mask, px: int) -> np.ndarray:
    if px == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask > 0, np.ones((3, 3)), iterations=px).astype(np.float64)


def augment(sample: SceneSample, rng: DRng, cfg: DataConfig) -> SceneSample:
    """Random crop, horizontal flip, and per-mask dilation by 0..max_dilation pixels."""
    size = sample.size
    crop = cfg.crop or size
    if crop > size:
        raise ValueError(f"crop {crop} larger than image {size}")
    oy = rng.integers(0, size - crop + 1)
    ox = rng.integers(0, size - crop + 1)
    flip = rng.uniform() < cfg.flip_prob
    dil = [rng.integers(0, cfg.max_dilation + 1) for _ in range(sample.n_instances)]

    def tf(img):
        out = img[oy:oy + crop, ox:ox + crop]
        return out[:, ::-1].copy() if flip else out.copy()

    masks = np.stack([_dilate(tf(m), d) for m, d in zip(sample.masks.masks, dil)])
    kp = sample.keypoints.copy()
    kp[..., 0] -= ox
    kp[..., 1] -= oy
    outside = (kp[..., 0] < 0) | (kp[..., 0] >= crop) | (kp[..., 1] < 0) | (kp[..., 1] >= crop)
    kp[..., 2] = np.where(outside, 0, kp[..., 2])
    if flip:
        kp[..., 0] = crop - 1 - kp[..., 0]
    return replace(sample, composite=tf(sample.composite), background=tf(sample.background),
                   masks=MaskSet(masks, list(sample.masks.depth_order)),
                   layers=[tf(x) for x in sample.layers], keypoints=kp, parsing=tf(sample.parsing))


def flip_sample(sample: SceneSample) -> SceneSample:
    cfg = DataConfig(size=sample.size, flip_prob=1.0, max_dilation=0)
    return augment(sample, DRng(0), cfg)


# -- dataset I/O -------------------------------------------------------------
def _to_u8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img):
    Image.fromarray(_to_u8(img)).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).astype(np.float64) / 255.0


def _write_sample(d, i: int, s: SceneSample):
    save_png(os.path.join(d, f"composite_{i:05d}.png"), s.composite)
    save_png(os.path.join(d, f"background_{i:05d}.png"), s.background)
    for k in range(1, s.n_instances + 1):
        save_png(os.path.join(d, f"mask_{i:05d}_{k}.png"), s.masks[k])
        save_png(os.path.join(d, f"layer_{i:05d}_{k}.png"), s.layers[k - 1])
    with open(os.path.join(d, f"pose_{i:05d}.json"), "w") as fh:
        json.dump({"keypoints": s.keypoints.tolist(), "depth_order": list(s.masks.depth_order),
                   "names": list(KEYPOINT_NAMES)}, fh, sort_keys=True)
    im = Image.fromarray(s.parsing.astype(np.uint8), mode="P")
    im.putpalette(PALETTE)
    im.save(os.path.join(d, f"parsing_{i:05d}.png"))
    with open(os.path.join(d, f"prompt_{i:05d}.txt"), "w") as fh:
        fh.write(" ".join(map(str, s.prompt)) + "\n")


def write_dataset(samples, directory, config: dict | None = None, seed: int | None = None):
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        _write_sample(directory, i, s)
    manifest = {"count": len(samples), "config": config or {}, "seed": seed}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _need(path, field_name):
    if not os.path.exists(path):
        raise DatasetError(f"missing {field_name}: {os.path.basename(path)}")
    return path


def read_sample(directory, i: int) -> SceneSample:
    p = lambda name: os.path.join(directory, name)  # noqa: E731
    composite = load_png(_need(p(f"composite_{i:05d}.png"), "composite"))
    background = load_png(_need(p(f"background_{i:05d}.png"), "background"))
    try:
        with open(_need(p(f"pose_{i:05d}.json"), "pose")) as fh:
            pose = json.load(fh)
        keypoints = np.asarray(pose["keypoints"], dtype=np.int64)
        depth = [int(k) for k in pose["depth_order"]]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"corrupt pose file for sample {i}: {exc}") from None
    n = len(keypoints)
    masks = np.stack([load_png(_need(p(f"mask_{i:05d}_{k}.png"), "mask")) for k in range(1, n + 1)])
    masks = (masks > 0.5).astype(np.float64)
    layers = [load_png(_need(p(f"layer_{i:05d}_{k}.png"), "layer")) for k in range(1, n + 1)]
    with Image.open(_need(p(f"parsing_{i:05d}.png"), "parsing")) as im:
        parsing = np.asarray(im, dtype=np.int64)
    with open(_need(p(f"prompt_{i:05d}.txt"), "prompt")) as fh:
        text = fh.read().split()
    try:
        prompt = [int(w) for w in text]
    except ValueError:
        prompt = tokenize(text)
    return SceneSample(composite, background, MaskSet(masks, depth), layers, keypoints, parsing, prompt)


def read_dataset(directory) -> list:
    manifest_path = _need(os.path.join(directory, "manifest.json"), "manifest")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        count = int(manifest["count"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DatasetError(f"corrupt manifest: {exc}") from None
    return [read_sample(directory, i) for i in range(count)]


def generate_dataset(count: int, cfg: DataConfig, seed: int) -> list:
    root = DRng(seed)
    return [generate_scene(root.spawn("scene", i), cfg) for i in range(count)]
