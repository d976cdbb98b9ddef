"""Benchmark records and their line-delimited JSON files.

One record per line::

    {"scene_id": 3, "caption_raw": "[4001]<the red circle> near ...",
     "entities": [{"ann_id": 4001, "span": [7, 21], "phrase": "the red circle",
                   "bbox": [0, 0, 3, 2], "mask_rle": {"size": [8, 8], "counts": [0, 3, 5, ...]},
                   "category": 0, "visual_ref": {"scene_id": 9, "ann_id": 10002} | null}]}

``mask_rle.counts`` are row-major run lengths that alternate between 0 and 1
cells, always starting with a (possibly empty) run of zeros.  Scenes go in a
companion file with the same one-object-per-line layout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import kernels
from ..encoders import (Connection, InterleaveEntry, Scene, SegmentAnnotation, TextSpan, VisualRef,
                        tight_bbox, tokenize)
from .caption import CaptionParseError, InterleavedCaption, parse_caption


class DatasetError(ValueError):
    pass


@dataclass
class EntityAnn:
    ann_id: int
    span: tuple
    phrase: str
    bbox: list
    mask: np.ndarray
    category: int
    visual_ref: tuple | None = None      # (scene_id, ann_id)

    def __eq__(self, other):
        if not isinstance(other, EntityAnn):
            return NotImplemented
        return (self.ann_id == other.ann_id and tuple(self.span) == tuple(other.span)
                and self.phrase == other.phrase and list(self.bbox) == list(other.bbox)
                and self.mask.shape == other.mask.shape and np.array_equal(self.mask, other.mask)
                and self.category == other.category and self.visual_ref == other.visual_ref)


@dataclass
class BenchRecord:
    scene_id: int
    caption: InterleavedCaption
    entities: list = field(default_factory=list)

    def validate(self) -> "BenchRecord":
        if not self.entities:
            raise DatasetError(f"record {self.scene_id}: no entities")
        cap = self.caption.entities
        if [e.ann_id for e in cap] != [e.ann_id for e in self.entities]:
            raise DatasetError(f"record {self.scene_id}: entity list disagrees with caption")
        for e in self.entities:
            if e.visual_ref is not None and tuple(e.visual_ref) == (self.scene_id, e.ann_id):
                raise DatasetError(f"record {self.scene_id}: entity {e.ann_id} references itself")
        return self

    def with_refs(self, refs: dict) -> "BenchRecord":
        """Copy with ``visual_ref`` set for the ann_ids in ``refs``."""
        ents = [replace(e, visual_ref=refs.get(e.ann_id, e.visual_ref)) for e in self.entities]
        return BenchRecord(self.scene_id, self.caption, ents)


def record_from_scene(scene: Scene, caption: InterleavedCaption) -> BenchRecord:
    ents = []
    for ce in caption.entities:
        try:
            seg = scene.segment(ce.ann_id)
        except KeyError:
            raise DatasetError(f"scene {scene.scene_id}: caption references unknown ann_id {ce.ann_id}")
        ents.append(EntityAnn(ce.ann_id, tuple(ce.span), ce.phrase, list(seg.bbox),
                              seg.mask.copy(), int(seg.category)))
    return BenchRecord(scene.scene_id, caption, ents).validate()


def record_to_entry(record: BenchRecord) -> InterleaveEntry:
    """Entities become visual references when they carry one, text spans otherwise.

    Connective text without any word is dropped.
    """
    by_id = {e.ann_id: e for e in record.entities}
    nodes = []
    for part in record.caption.parts:
        if isinstance(part, str):
            if tokenize(part):
                nodes.append(Connection(part))
            continue
        ent = by_id[part.ann_id]
        if ent.visual_ref is not None:
            nodes.append(VisualRef(int(ent.visual_ref[0]), int(ent.visual_ref[1]), target=part.ann_id))
        else:
            nodes.append(TextSpan(part.phrase, target=part.ann_id))
    return InterleaveEntry(nodes)


# ------------------------------------------------------------------ masks

def mask_to_rle(mask: np.ndarray) -> dict:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DatasetError(f"mask must be 2-D, got shape {m.shape}")
    return {"size": [int(m.shape[0]), int(m.shape[1])],
            "counts": [int(c) for c in kernels.rle_encode(m.reshape(-1))]}


def rle_to_mask(rle: dict) -> np.ndarray:
    try:
        H, W = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed mask_rle: {e}")
    if H < 0 or W < 0:
        raise DatasetError(f"negative mask size {[H, W]}")
    try:
        flat = kernels.rle_decode(np.asarray(counts, dtype=np.int64), H * W)
    except ValueError as e:
        raise DatasetError(str(e))
    return np.asarray(flat, dtype=bool).reshape(H, W)


# ------------------------------------------------------------------ records

def record_to_json(r: BenchRecord) -> dict:
    return {
        "scene_id": int(r.scene_id),
        "caption_raw": r.caption.raw,
        "entities": [{
            "ann_id": int(e.ann_id),
            "span": [int(e.span[0]), int(e.span[1])],
            "phrase": e.phrase,
            "bbox": [int(v) for v in e.bbox],
            "mask_rle": mask_to_rle(e.mask),
            "category": int(e.category),
            "visual_ref": None if e.visual_ref is None else
            {"scene_id": int(e.visual_ref[0]), "ann_id": int(e.visual_ref[1])},
        } for e in r.entities],
    }


def record_from_json(obj) -> BenchRecord:
    if not isinstance(obj, dict):
        raise DatasetError("record is not an object")
    try:
        caption = parse_caption(obj["caption_raw"])
        ents = []
        for e in obj["entities"]:
            vr = e["visual_ref"]
            ents.append(EntityAnn(int(e["ann_id"]), tuple(int(v) for v in e["span"]), str(e["phrase"]),
                                  [int(v) for v in e["bbox"]], rle_to_mask(e["mask_rle"]),
                                  int(e["category"]),
                                  None if vr is None else (int(vr["scene_id"]), int(vr["ann_id"]))))
        rec = BenchRecord(int(obj["scene_id"]), caption, ents)
    except CaptionParseError as e:
        raise DatasetError(f"caption_raw: {e}")
    except KeyError as e:
        raise DatasetError(f"missing field {e}")
    except (TypeError, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"bad field value: {e}")
    for ce, e in zip(caption.entities, ents):
        if tuple(ce.span) != tuple(e.span) or ce.phrase != e.phrase:
            raise DatasetError(f"entity {e.ann_id}: span/phrase disagree with caption_raw")
    return rec.validate()


def _dump_lines(objs) -> str:
    return "".join(json.dumps(o, sort_keys=True, separators=(",", ":")) + "\n" for o in objs)


def _load_lines(path, decode):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(decode(json.loads(line)))
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            except DatasetError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
    return out


def write_dataset(records, path) -> None:
    Path(path).write_text(_dump_lines(record_to_json(r) for r in records), encoding="utf-8")


def read_dataset(path) -> list:
    return _load_lines(path, record_from_json)


# ------------------------------------------------------------------ scenes

def scene_to_json(s: Scene) -> dict:
    return {
        "scene_id": int(s.scene_id),
        "size": [s.H, s.W],
        "shape_kind": s.shape_kind.reshape(-1).tolist(),
        "color": s.color.reshape(-1).tolist(),
        "segment_id": s.segment_id.reshape(-1).tolist(),
        "segments": [{"ann_id": int(a.ann_id), "category": int(a.category), "phrase": a.phrase,
                      "shape_kind": int(a.shape_kind), "color": int(a.color)} for a in s.segments],
    }


def scene_from_json(obj) -> Scene:
    try:
        H, W = (int(v) for v in obj["size"])
        grids = [np.asarray(obj[k], dtype=np.int64).reshape(H, W)
                 for k in ("shape_kind", "color", "segment_id")]
        segs = []
        for k, a in enumerate(obj["segments"]):
            m = grids[2] == k
            if not m.any():
                raise DatasetError(f"segment {a['ann_id']} is empty")
            segs.append(SegmentAnnotation(int(a["ann_id"]), m, int(a["category"]), str(a["phrase"]),
                                          tight_bbox(m), int(a["shape_kind"]), int(a["color"])))
        scene = Scene(int(obj["scene_id"]), grids[0], grids[1], grids[2], segs)
    except KeyError as e:
        raise DatasetError(f"missing field {e}")
    except (TypeError, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"bad field value: {e}")
    try:
        scene.validate()
    except ValueError as e:
        raise DatasetError(str(e))
    return scene


def write_scenes(scenes, path) -> None:
    Path(path).write_text(_dump_lines(scene_to_json(s) for s in scenes), encoding="utf-8")


def read_scenes(path) -> list:
    return _load_lines(path, scene_from_json)
