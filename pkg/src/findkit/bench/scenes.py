"""Synthetic grid scenes: connected, uniformly colored segments tiling the grid."""
from __future__ import annotations

import numpy as np

from ..encoders import COLORS, CONNECTIVES, SHAPES, Scene, SegmentAnnotation, tight_bbox


class SceneError(ValueError):
    pass


def ann_id_for(scene_id: int, k: int) -> int:
    return 1000 * (int(scene_id) + 1) + k + 1


def phrase_for(shape_kind: int, color: int) -> str:
    return f"the {COLORS[color]} {SHAPES[shape_kind]}"


def _grow_regions(rng: np.random.Generator, H: int, W: int, n: int) -> np.ndarray:
    labels = np.full(H * W, -1, dtype=np.int64)
    for k, cell in enumerate(rng.choice(H * W, size=n, replace=False)):
        labels[cell] = k
    remaining = H * W - n
    while remaining:
        frontier = []
        for cell in np.flatnonzero(labels < 0):
            y, x = divmod(int(cell), W)
            for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= yy < H and 0 <= xx < W and labels[yy * W + xx] >= 0:
                    frontier.append((int(cell), int(labels[yy * W + xx])))
        cell, lab = frontier[int(rng.integers(len(frontier)))]
        labels[cell] = lab
        remaining -= 1
    # renumber by first appearance in reading order
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(v)] for v in labels], dtype=np.int64).reshape(H, W)


def generate_scene(seed: int, H: int = 8, W: int = 8, n_segments: int = 4,
                   scene_id: int | None = None):
    """Deterministic scene plus its template caption.

    Each segment gets a distinct (shape, color) pair, so segments never share
    appearance within a scene.
    """
    if n_segments < 1 or n_segments > H * W:
        raise SceneError(f"cannot pack {n_segments} segments into a {H}x{W} grid")
    if n_segments > len(SHAPES) * len(COLORS):
        raise SceneError(f"only {len(SHAPES) * len(COLORS)} distinct appearances for {n_segments} segments")
    scene_id = seed if scene_id is None else scene_id
    rng = np.random.default_rng(seed)
    seg = _grow_regions(rng, H, W, n_segments)
    looks = rng.choice(len(SHAPES) * len(COLORS), size=n_segments, replace=False)
    shape_kind = np.zeros((H, W), dtype=np.int64)
    color = np.zeros((H, W), dtype=np.int64)
    segments = []
    for k in range(n_segments):
        s, c = divmod(int(looks[k]), len(COLORS))
        m = seg == k
        shape_kind[m] = s
        color[m] = c
        segments.append(SegmentAnnotation(ann_id_for(scene_id, k), m, s, phrase_for(s, c),
                                          tight_bbox(m), s, c))
    scene = Scene(int(scene_id), shape_kind, color, seg, segments)
    return scene, template_caption(scene)


def connective(scene_id: int, k: int) -> str:
    return CONNECTIVES[(int(scene_id) + k) % len(CONNECTIVES)]


def template_caption(scene: Scene) -> str:
    words = [scene.segments[0].phrase]
    for k, s in enumerate(scene.segments[1:]):
        words.append(f"{connective(scene.scene_id, k)} {s.phrase}")
    return " ".join(words)


def pseudo_description(scene: Scene) -> str:
    """Stand-in for a captioning model's free-form description."""
    n = len(scene.segments)
    big = max(scene.segments, key=lambda s: (int(s.mask.sum()), -s.ann_id))
    return (f"a picture with {n} shapes; the largest one is {big.phrase[4:]} "
            f"covering {int(big.mask.sum())} cells")


def gt_partition(scene: Scene):
    return scene.segment_id.copy(), {k: s.category for k, s in enumerate(scene.segments)}
