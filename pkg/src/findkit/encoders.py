"""Synthetic vision/language encoders, embedding sampler and query pool.

The "foundation models" here are fixed hash-derived lookup tables followed by
a learnable residual adapter, so every output is a pure function of
(input, params).  Images are grid scenes whose cells carry a shape kind and
a color; text is a whitespace/punctuation tokenization over a closed
vocabulary.
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .tensor import Tensor, concat, fan_in_scaled, mean_rows

SHAPES = ("circle", "square", "triangle", "diamond")
COLORS = ("red", "green", "blue", "yellow", "purple")
CONNECTIVES = ("next to", "and", "near", "above", "beside", "with", "below", "left of",
               "right of", "holding", "under", "on")
_WORDS = ("the", "a", "an", "scene", "showing", "there", "is", "are", "of", "in", "to",
          "next", "and", "near", "above", "beside", "with", "below", "left", "right",
          "holding", "under", "on", "sitting", "image", "picture", "photo", "object",
          "shape", "thing", "some", "two", "one")
VOCAB: tuple[str, ...] = ("<unk>",) + SHAPES + COLORS + tuple(
    w for w in _WORDS if w not in SHAPES and w not in COLORS)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}


class EncoderError(ValueError):
    pass


# ------------------------------------------------------------------ domain types

@dataclass
class SegmentAnnotation:
    ann_id: int
    mask: np.ndarray          # H x W bool
    category: int
    phrase: str
    bbox: list                # [x0, y0, w, h] in cells
    shape_kind: int = 0
    color: int = 0


@dataclass
class Scene:
    scene_id: int
    shape_kind: np.ndarray    # H x W int
    color: np.ndarray         # H x W int
    segment_id: np.ndarray    # H x W int, index into ``segments``
    segments: list

    @property
    def H(self) -> int:
        return int(self.segment_id.shape[0])

    @property
    def W(self) -> int:
        return int(self.segment_id.shape[1])

    def segment(self, ann_id: int) -> SegmentAnnotation:
        for s in self.segments:
            if s.ann_id == ann_id:
                return s
        raise KeyError(ann_id)

    def validate(self):
        n = len(self.segments)
        if self.segment_id.min() < 0 or self.segment_id.max() >= n:
            raise EncoderError(f"scene {self.scene_id}: segment_id out of range")
        for k, seg in enumerate(self.segments):
            if not np.array_equal(seg.mask, self.segment_id == k):
                raise EncoderError(f"scene {self.scene_id}: mask of {seg.ann_id} disagrees with grid")
            if not seg.mask.any():
                raise EncoderError(f"scene {self.scene_id}: empty segment {seg.ann_id}")
            if list(seg.bbox) != tight_bbox(seg.mask):
                raise EncoderError(f"scene {self.scene_id}: loose bbox on {seg.ann_id}")


def tight_bbox(mask: np.ndarray) -> list:
    ys, xs = np.nonzero(mask)
    return [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]


@dataclass(frozen=True)
class TextSeq:
    tokens: tuple
    source_text: str

    @classmethod
    def from_text(cls, text: str) -> "TextSeq":
        return cls(tokenize(text), text)

    def __len__(self):
        return len(self.tokens)


def tokenize(text: str) -> tuple:
    words = re.findall(r"[a-z]+", text.lower())
    return tuple(TOKEN_ID.get(w, 0) for w in words)


@dataclass(frozen=True)
class TextSpan:
    """An entity expressed in words; ``target`` is the grounded ann_id if known."""
    text: str
    target: int | None = None


@dataclass(frozen=True)
class VisualRef:
    """An entity expressed as a segment of (usually another) scene."""
    scene_id: int
    ann_id: int
    target: int | None = None


@dataclass(frozen=True)
class Connection:
    text: str


Node = Union[TextSpan, VisualRef, Connection]


@dataclass
class InterleaveEntry:
    nodes: list

    @property
    def entity_count(self) -> int:
        return sum(1 for n in self.nodes if not isinstance(n, Connection))

    @property
    def entities(self) -> list:
        return [n for n in self.nodes if not isinstance(n, Connection)]

    def ref_scenes(self) -> set:
        return {n.scene_id for n in self.nodes if isinstance(n, VisualRef)}


@dataclass
class Embedded:
    """A token matrix plus optional row ranges (entities, phrases, rois...)."""
    tensor: Tensor
    segments: list | None = None
    node_spans: list | None = None


@dataclass
class PromptSet:
    streams: dict                 # name -> Tensor, canonical order
    kinds: dict                   # name -> kind
    segments: dict = field(default_factory=dict)   # name -> list of (start, end)

    @property
    def width(self) -> int:
        return next(iter(self.streams.values())).shape[1]


@dataclass
class QuerySet:
    streams: dict                 # name -> Tensor
    learnable: dict = field(default_factory=dict)  # name -> pool param name


# ------------------------------------------------------------------ tables

def _hash_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


@lru_cache(maxsize=None)
def _hash_vector(namespace: str, name: str, d: int) -> np.ndarray:
    v = np.random.default_rng(_hash_seed(namespace, name, d)).standard_normal(d)
    v.setflags(write=False)
    return v


@lru_cache(maxsize=None)
def appearance_table(d: int) -> np.ndarray:
    """[len(SHAPES) * len(COLORS) x d]; row = shape vector + color vector."""
    rows = [_hash_vector("shape", s, d) + _hash_vector("color", c, d)
            for s in SHAPES for c in COLORS]
    t = np.stack(rows)
    t.setflags(write=False)
    return t


@lru_cache(maxsize=None)
def token_table(d: int) -> np.ndarray:
    t = np.stack([_hash_vector("token", w, d) for w in VOCAB])
    t.setflags(write=False)
    return t


@lru_cache(maxsize=None)
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


def init_encoder_params(d: int) -> dict:
    return {
        "enc.image.adapter": Tensor(np.zeros((d, d)), requires_grad=True),
        "enc.text.adapter": Tensor(np.zeros((d, d)), requires_grad=True),
    }


def _width(params) -> int:
    return params["enc.image.adapter"].shape[0]


# ------------------------------------------------------------------ encoders

def image_base(scene: Scene, d: int) -> np.ndarray:
    idx = (scene.shape_kind * len(COLORS) + scene.color).reshape(-1)
    return appearance_table(d)[idx]


def encode_image(scene: Scene, params) -> Tensor:
    """One embedding per cell, row-major; [(H*W) x d]."""
    base = Tensor._wrap(image_base(scene, _width(params)))
    return base + base @ fan_in_scaled(params["enc.image.adapter"])


def encode_text(text: TextSeq, params) -> Tensor:
    if len(text.tokens) == 0:
        raise EncoderError(f"empty text: {text.source_text!r}")
    d = _width(params)
    base = Tensor._wrap(token_table(d)[list(text.tokens)])
    pos = Tensor._wrap(np.array(sinusoidal_positions(len(text.tokens), d)))
    return base + base @ fan_in_scaled(params["enc.text.adapter"]) + pos


def roi_pool(features: Tensor, bbox, grid_w: int, grid_h: int | None = None) -> Tensor:
    """Mean of the cells inside ``bbox = [x0, y0, w, h]``; [1 x d]."""
    x0, y0, w, h = (int(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise EncoderError(f"empty roi {bbox}")
    grid_h = features.shape[0] // grid_w if grid_h is None else grid_h
    if x0 < 0 or y0 < 0 or x0 + w > grid_w or y0 + h > grid_h:
        raise EncoderError(f"roi {bbox} outside {grid_h}x{grid_w} grid")
    rows = [y * grid_w + x for y in range(y0, y0 + h) for x in range(x0, x0 + w)]
    return _rows_mean(features, rows)


def mask_pool(features: Tensor, mask: np.ndarray) -> Tensor:
    rows = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    if rows.size == 0:
        raise EncoderError("empty mask")
    return _rows_mean(features, rows)


def _rows_mean(features: Tensor, rows) -> Tensor:
    return mean_rows(features[np.asarray(rows, dtype=np.int64)])


def encode_phrases(phrases: Sequence[TextSeq], params) -> Embedded:
    """Concatenate independently encoded phrases, remembering each one's rows."""
    parts, segs, start = [], [], 0
    for p in phrases:
        t = encode_text(p, params)
        parts.append(t)
        segs.append((start, start + t.shape[0]))
        start += t.shape[0]
    return Embedded(concat(parts, axis=0), segs, list(segs))


def encode_interleave(entry: InterleaveEntry, params, scenes: Mapping,
                      features_cache: dict | None = None) -> Embedded:
    """Tokens in node order; one pooled token per visual reference.

    ``scenes`` maps scene_id -> Scene.  ``segments`` lists the row range of
    every entity node, ``node_spans`` the range of every node.
    """
    cache = {} if features_cache is None else features_cache
    parts, node_spans, ent_spans, start = [], [], [], 0
    for node in entry.nodes:
        if isinstance(node, VisualRef):
            scene = scenes.get(node.scene_id)
            seg = None
            if scene is not None:
                try:
                    seg = scene.segment(node.ann_id)
                except KeyError:
                    seg = None
            if seg is None:
                raise EncoderError(
                    f"dangling visual reference: ann_id {node.ann_id} in scene {node.scene_id}")
            if node.scene_id not in cache:
                cache[node.scene_id] = encode_image(scene, params)
            t = mask_pool(cache[node.scene_id], seg.mask)
        else:
            t = encode_text(TextSeq.from_text(node.text), params)
        parts.append(t)
        span = (start, start + t.shape[0])
        node_spans.append(span)
        if not isinstance(node, Connection):
            ent_spans.append(span)
        start = span[1]
    if not parts:
        raise EncoderError("empty interleave entry")
    return Embedded(concat(parts, axis=0), ent_spans, node_spans)


# ------------------------------------------------------------------ sampler

# stream kind -> key of the embedding source it samples from
SOURCE_OF_KIND = {"image": "image", "spatial": "image", "text": "text",
                  "caption": "caption", "class": "class", "interleave": "interleave"}


@dataclass
class Strategy:
    """How one prompt stream is carved from its source embeddings.

    kind: ``identity`` | ``downsample`` | ``roi`` | ``interleave``.
    """
    kind: str = "identity"
    stride: int = 1
    grid: tuple | None = None     # (H, W) for 2-D downsample / roi
    rois: list | None = None      # list of bboxes or boolean masks


def _as_embedded(x) -> Embedded:
    return x if isinstance(x, Embedded) else Embedded(x)


def sample_prompts(embeddings: Mapping, task, strategies: Mapping | None = None) -> PromptSet:
    """Build the task's prompt streams from encoder outputs.

    ``embeddings`` maps a source key (image, text, caption, class,
    interleave) to a Tensor or :class:`Embedded`.  Every sampled row is an
    input row or a mean of input rows.
    """
    strategies = dict(strategies or {})
    streams, kinds, segments = {}, {}, {}
    for name, kind in task.prompts:
        src_key = SOURCE_OF_KIND.get(kind)
        if src_key is None or src_key not in embeddings:
            raise EncoderError(f"unknown stream {name!r}: no {src_key or kind!r} embeddings given")
        src = _as_embedded(embeddings[src_key])
        strat = strategies.get(name) or Strategy("roi" if kind == "spatial" else
                                                 "interleave" if kind == "interleave" else "identity")
        x = src.tensor
        segs = src.segments
        if strat.kind == "identity":
            pass
        elif strat.kind == "interleave":
            if segs is None:
                raise EncoderError(f"stream {name!r}: interleave sampling needs entity spans")
        elif strat.kind == "downsample":
            if strat.stride < 1:
                raise EncoderError("downsample stride must be >= 1")
            if strat.grid is not None:
                H, W = strat.grid
                idx = [y * W + xx for y in range(0, H, strat.stride) for xx in range(0, W, strat.stride)]
            else:
                idx = list(range(0, x.shape[0], strat.stride))
            x = x[np.asarray(idx, dtype=np.int64)]
            segs = None
        elif strat.kind == "roi":
            if not strat.rois:
                raise EncoderError(f"stream {name!r}: roi sampling needs at least one roi")
            if strat.grid is None:
                raise EncoderError(f"stream {name!r}: roi sampling needs the grid shape")
            H, W = strat.grid
            rows = []
            for roi in strat.rois:
                if isinstance(roi, np.ndarray) and roi.dtype == bool:
                    if roi.shape != (H, W):
                        raise EncoderError(f"roi mask {roi.shape} outside {H}x{W} grid")
                    rows.append(mask_pool(x, roi))
                else:
                    rows.append(roi_pool(x, roi, W, H))
            x = concat(rows, axis=0)
            segs = [(i, i + 1) for i in range(len(rows))]
        else:
            raise EncoderError(f"unknown sampling strategy {strat.kind!r}")
        streams[name] = x
        kinds[name] = kind
        if segs is not None:
            segments[name] = list(segs)
    return PromptSet(streams, kinds, segments)


# ------------------------------------------------------------------ query pool

OBJECT_KINDS = ("object", "entity", "grounding", "segment")


def pool_key(kind: str) -> str:
    return "pool.object" if kind in OBJECT_KINDS else f"pool.{kind}"


def init_query_pool(d: int, n_obj: int, kinds: Sequence[str], rng: np.random.Generator) -> dict:
    pool = {}
    for kind in kinds:
        key = pool_key(kind)
        if key in pool:
            continue
        rows = n_obj if kind in OBJECT_KINDS else 1
        pool[key] = Tensor(rng.standard_normal((rows, d)), requires_grad=True)
    return pool


def sample_queries(pool: Mapping, task, counts: Mapping | None = None) -> QuerySet:
    """Draw the task's query streams from the learnable pool.

    Object-like streams take every pool row; other streams duplicate their
    single pool row ``counts[name]`` times (default 1).
    """
    counts = dict(counts or {})
    streams, learnable = {}, {}
    for name, kind in task.queries:
        key = pool_key(kind)
        if key not in pool:
            raise EncoderError(f"query stream {name!r}: no pool for kind {kind!r}")
        p = pool[key]
        if kind in OBJECT_KINDS:
            if name in counts and counts[name] != p.shape[0]:
                raise EncoderError(f"query stream {name!r}: pool has {p.shape[0]} rows, asked {counts[name]}")
            x = p
        else:
            n = int(counts.get(name, 1))
            if n < 1:
                raise EncoderError(f"query stream {name!r}: needs at least one row")
            x = p[np.zeros(n, dtype=np.int64)]
        streams[name] = x
        learnable[name] = key
    return QuerySet(streams, learnable)


# ------------------------------------------------------------------ embedding store

_EMB_MAGIC = b"FKEMB1\0\0"


def write_embedding(path, array: np.ndarray) -> None:
    """Header (magic, ndim, shape as u64, dtype tag) + little-endian float64 payload."""
    a = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(b"<f8\0")
        f.write(a.tobytes())


def read_embedding(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != _EMB_MAGIC:
        raise EncoderError(f"{path}: not an embedding record")
    (ndim,) = struct.unpack_from("<I", raw, 8)
    off = 12
    shape = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    if raw[off:off + 4] != b"<f8\0":
        raise EncoderError(f"{path}: unsupported dtype tag {raw[off:off + 4]!r}")
    off += 4
    n = int(np.prod(shape)) if shape else 1
    payload = raw[off:]
    if len(payload) != 8 * n:
        raise EncoderError(f"{path}: payload has {len(payload)} bytes, expected {8 * n}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


class EmbeddingStore:
    """Directory of precomputed embeddings: ``image_<scene_id>.emb``, ``text_<key>.emb``.

    When a record exists it replaces the synthetic table lookup for that
    input; the learnable adapter is still applied on top.
    """

    def __init__(self, root):
        self.root = Path(root)

    def image_path(self, scene_id) -> Path:
        return self.root / f"image_{scene_id}.emb"

    def has_image(self, scene_id) -> bool:
        return self.image_path(scene_id).exists()

    def put_image(self, scene_id, array):
        self.root.mkdir(parents=True, exist_ok=True)
        write_embedding(self.image_path(scene_id), array)

    def encode_image(self, scene: Scene, params) -> Tensor:
        if not self.has_image(scene.scene_id):
            return encode_image(scene, params)
        base = read_embedding(self.image_path(scene.scene_id))
        d = _width(params)
        if base.shape != (scene.H * scene.W, d):
            raise EncoderError(
                f"stored image {scene.scene_id} has shape {base.shape}, expected {(scene.H * scene.W, d)}")
        b = Tensor._wrap(base)
        return b + b @ fan_in_scaled(params["enc.image.adapter"])
