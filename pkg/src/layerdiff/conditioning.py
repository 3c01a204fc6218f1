"""Morphology-guided conditioning tokens: text, pose, parsing, target and context masks.

Instance indices are 1-based throughout the public API.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import pool_mask
from .nn import Conv2d, Linear, Module
from .rng import DRng
from .tensor import Tensor

NUM_KEYPOINTS = 8
NUM_PARTS = 4  # background, head, torso, limbs
SEGMENTS = ("text", "pose", "parse", "mask", "context")

VOCAB = (
    "<pad>", "remove", "erase", "the", "a", "person", "people", "background", "keep",
    "one", "two", "three", "four", "standing", "group", "occluded", "scene", "clean",
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def tokenize(words) -> list:
    if isinstance(words, str):
        words = words.split()
    try:
        return [WORD_TO_ID[w] for w in words]
    except KeyError as exc:
        raise ValueError(f"word {exc.args[0]!r} not in vocabulary") from None


def detokenize(ids) -> list:
    return [VOCAB[i] for i in ids]


@dataclass
class MaskSet:
    """``N`` binary instance masks plus back-to-front painting order."""

    masks: np.ndarray
    depth_order: list = field(default_factory=list)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 3 or len(self.masks) < 1:
            raise ValueError("MaskSet needs an N x H x W array with N >= 1")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("instance masks must be binary")
        if not self.depth_order:
            self.depth_order = list(range(1, len(self.masks) + 1))
        if sorted(self.depth_order) != list(range(1, len(self.masks) + 1)):
            raise ValueError(f"depth order {self.depth_order} is not a permutation of 1..N")

    def __len__(self):
        return len(self.masks)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.masks[_check_index(k, len(self))]

    @property
    def shape(self):
        return self.masks.shape[1:]

    def union(self) -> np.ndarray:
        return self.masks.max(axis=0)


def _check_index(k: int, n: int) -> int:
    if not 1 <= k <= n:
        raise IndexError(f"instance index {k} outside 1..{n}")
    return k - 1


def context_mask(masks: MaskSet, k: int) -> np.ndarray:
    """Layout of every instance except ``k``: ``clamp(sum_{j != k} M_j, 0, 1)``."""
    i = _check_index(k, len(masks))
    others = np.delete(masks.masks, i, axis=0)
    return np.clip(others.sum(axis=0), 0.0, 1.0) if len(others) else np.zeros(masks.shape)


def parsing_onehot(labels, num_parts: int = NUM_PARTS) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_parts:
        raise ValueError("parsing label out of range")
    return (np.arange(num_parts)[:, None, None] == labels[None]).astype(np.float64)


class SpatialEncoder(Module):
    """Strided 3x3 convolutions, then each spatial cell becomes one token."""

    def __init__(self, c_in: int, hidden: int, d_cond: int, n_convs: int, n_tokens: int, rng: DRng):
        self.convs = [Conv2d(c_in if i == 0 else hidden, hidden, rng.spawn("conv", i), stride=2)
                      for i in range(n_convs)]
        self.proj = Linear(hidden, d_cond, rng.spawn("proj"))
        # zero-init so constant inputs map to identical tokens at the start
        self.pos = T.parameter(np.zeros((n_tokens, d_cond)))
        self.n_tokens = n_tokens

    def __call__(self, x) -> Tensor:
        h = T.as_tensor(x)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = T.silu(h)
        C = h.shape[0]
        if h.shape[1] * h.shape[2] != self.n_tokens:
            raise ValueError(f"encoder resolution gives {h.shape[1] * h.shape[2]} tokens, "
                             f"configured for {self.n_tokens}")
        tokens = T.transpose(T.reshape(h, (C, -1)))
        return self.proj(tokens) + self.pos


class TextEmbedding(Module):
    def __init__(self, d_cond: int, rng: DRng, vocab_size: int = len(VOCAB)):
        if vocab_size > 64:
            raise ValueError("toy vocabulary is limited to 64 words")
        self.table = T.parameter(rng.normal((vocab_size, d_cond)) * 0.5)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise ValueError("token id outside vocabulary")
        return T.take_rows(self.table, ids)


@dataclass
class ConditionSequence:
    tokens: Tensor
    tags: list

    def __post_init__(self):
        if len(self.tags) != self.tokens.shape[-2]:
            raise ValueError("tag count differs from token count")

    def __len__(self):
        return len(self.tags)

    def segment(self, tag: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=np.int64)

    def lengths(self) -> dict:
        return {s: int(sum(t == s for t in self.tags)) for s in SEGMENTS}


def _assemble(parts) -> ConditionSequence:
    parts = [(tag, T.as_tensor(x)) for tag, x in parts if x is not None]
    widths = {x.shape[-1] for _, x in parts}
    if len(widths) > 1:
        raise ValueError(f"condition segments disagree on width: {sorted(widths)}")
    tokens = T.concat([x for _, x in parts], axis=0)
    tags = [tag for tag, x in parts for _ in range(x.shape[0])]
    return ConditionSequence(tokens, tags)


def assemble_condition_fg(text, pose, parse, target_mask, context) -> ConditionSequence:
    """Order: text, pose, parse, target mask, context mask. ``None`` segments are dropped."""
    return _assemble([("text", text), ("pose", pose), ("parse", parse),
                      ("mask", target_mask), ("context", context)])


def assemble_condition_bg(text, pose, parse) -> ConditionSequence:
    return _assemble([("text", text), ("pose", pose), ("parse", parse)])


class MorphologyEncoder(Module):
    """All conditioning encoders for one model.

    Pose and parsing are encoded at image resolution with two stride-2 convs;
    masks are pooled to the latent grid first and encoded with one stride-2 conv,
    so both produce ``(H/4)(W/4)`` tokens when the latent patch size is 2.
    """

    def __init__(self, image_size: int, latent_size: int, d_cond: int, rng: DRng,
                 hidden: int = 16, use_pose: bool = True, use_parsing: bool = True):
        self.image_size = image_size
        self.latent_size = latent_size
        self.use_pose = use_pose
        self.use_parsing = use_parsing
        n_img = (image_size // 4) ** 2
        n_lat = (latent_size // 2) ** 2
        self.text = TextEmbedding(d_cond, rng.spawn("text"))
        self.pose = SpatialEncoder(NUM_KEYPOINTS, hidden, d_cond, 2, n_img, rng.spawn("pose"))
        self.parse = SpatialEncoder(NUM_PARTS, hidden, d_cond, 2, n_img, rng.spawn("parse"))
        self.target_mask = SpatialEncoder(1, hidden, d_cond, 1, n_lat, rng.spawn("target"))
        self.context_mask = SpatialEncoder(1, hidden, d_cond, 1, n_lat, rng.spawn("context"))

    def fg_only_parameters(self):
        return self.target_mask.parameters() + self.context_mask.parameters()

    def encode_pose(self, heatmaps) -> Tensor:
        heatmaps = np.asarray(heatmaps, dtype=np.float64)
        self._check_res(heatmaps, self.image_size)
        return self.pose(heatmaps)

    def encode_parsing(self, labels) -> Tensor:
        labels = np.asarray(labels)
        self._check_res(labels[None], self.image_size)
        return self.parse(parsing_onehot(labels))

    def encode_mask(self, mask, which: str = "target") -> Tensor:
        m = np.asarray(mask, dtype=np.float64)
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary")
        if m.shape[-1] != self.latent_size:
            m = pool_mask(m, self.latent_size, self.latent_size).astype(np.float64)
        enc = self.target_mask if which == "target" else self.context_mask
        return enc(m[None])

    def embed_text(self, ids) -> Tensor:
        return self.text(ids)

    @staticmethod
    def _check_res(x, size):
        if x.shape[-1] != size or x.shape[-2] != size:
            raise ValueError(f"input resolution {x.shape[-2:]} does not match configured {size}")

    def shared(self, prompt, pose_map, parsing):
        text = self.embed_text(prompt)
        pose = self.encode_pose(pose_map) if self.use_pose else None
        parse = self.encode_parsing(parsing) if self.use_parsing else None
        return text, pose, parse

    def build(self, prompt, pose_map, parsing, masks: MaskSet):
        """Per-instance foreground conditions and the background condition."""
        text, pose, parse = self.shared(prompt, pose_map, parsing)
        fg = []
        for k in range(1, len(masks) + 1):
            fg.append(assemble_condition_fg(text, pose, parse,
                                            self.encode_mask(masks[k], "target"),
                                            self.encode_mask(context_mask(masks, k), "context")))
        return fg, assemble_condition_bg(text, pose, parse)
