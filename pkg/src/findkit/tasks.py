"""Task unification: every task is encoders -> sampler -> interface -> heads -> argmax.

``forward_*`` functions return the differentiable intermediates used by the
trainer; ``run_*`` functions are the inference entry points returning plain
numpy results.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoders import (SHAPES, Embedded, InterleaveEntry, Scene, Strategy, TextSeq,
                       encode_interleave, encode_phrases, encode_text, sample_prompts,
                       sample_queries)
from .interface import head_mask, interface_forward, project, score
from .model import FindModel
from .taskspec import get_task
from .tensor import Tensor, _sigmoid_np, concat, mean_rows


class MatchError(ValueError):
    pass


# ------------------------------------------------------------------ unification

def _exclusion_matrix(exclusion, shape) -> np.ndarray:
    if exclusion is None:
        return np.zeros(shape, dtype=bool)
    if isinstance(exclusion, np.ndarray) and exclusion.dtype == bool:
        if exclusion.shape != shape:
            raise MatchError(f"exclusion {exclusion.shape} vs sim {shape}")
        return exclusion
    ex = np.zeros(shape, dtype=bool)
    for i, j in exclusion:
        ex[i, j] = True
    return ex


def unify_match(sim, exclusion=None) -> list:
    """Per source row, the best non-excluded target; ties go to the lowest index."""
    s = np.asarray(sim.data if isinstance(sim, Tensor) else sim, dtype=np.float64)
    if s.ndim != 2:
        raise MatchError(f"sim must be a matrix, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise MatchError("sim contains non-finite values")
    ex = _exclusion_matrix(exclusion, s.shape)
    out = []
    for i in range(s.shape[0]):
        if ex[i].all():
            raise MatchError(f"source {i}: every target is excluded")
        row = np.where(ex[i], -np.inf, s[i])
        out.append(int(np.argmax(row)))
    return out


# ------------------------------------------------------------------ helpers

def class_names() -> list:
    return list(SHAPES)


def class_prompts(model: FindModel) -> Embedded:
    rows = [mean_rows(encode_text(TextSeq.from_text(c), model.params)) for c in class_names()]
    return Embedded(concat(rows, axis=0), [(i, i + 1) for i in range(len(rows))])


def _sem(model, a, b):
    return score(a, b, model.params, model.cfg)


@dataclass
class SegOutputs:
    """Differentiable outputs of a mask-producing task."""
    mask_logits: Tensor      # [n_obj x HW]
    scores: Tensor           # [n_obj x n_targets]
    image: Tensor            # M_I
    semantic: dict
    pixel: dict


def _seg_forward(model: FindModel, task_name: str, scene: Scene, second_key: str,
                 second: Embedded, q_second: str, strategies=None, image=None) -> SegOutputs:
    task = get_task(task_name)
    m_i = model.encode_image(scene) if image is None else image
    embeddings = {"image": m_i, second_key: second}
    prompts = sample_prompts(embeddings, task, strategies)
    counts = {q_second: len(prompts.segments[task.prompt_names[1]])}
    queries = sample_queries(model.params, task, counts)
    q_l = interface_forward(prompts, queries, task, model.cfg, model.params)
    obj = task.query_names[0]
    proj = project(q_l, task, model.params)
    scores = _sem(model, proj.semantic_streams[obj], proj.semantic_streams[q_second])
    logits = head_mask(proj.pixel_streams[obj], m_i)
    return SegOutputs(logits, scores, m_i, proj.semantic_streams, proj.pixel_streams)


# ------------------------------------------------------------------ forward passes

def forward_interleave_grounding(model: FindModel, scene: Scene, entry: InterleaveEntry,
                                 scenes: Mapping) -> SegOutputs:
    if entry.entity_count < 1:
        raise MatchError("interleave entry has no entities")
    cache = {}
    m_i = model.encode_image(scene)
    cache[scene.scene_id] = m_i
    enc = encode_interleave(entry, model.params, scenes, cache)
    return _seg_forward(model, "interleave_grounding", scene, "interleave", enc,
                        "q.interleave", image=m_i)


def forward_generic_segmentation(model: FindModel, scene: Scene) -> SegOutputs:
    out = _seg_forward(model, "generic_segmentation", scene, "class", class_prompts(model), "q.class")
    noobj = Tensor._wrap(np.ones((out.scores.shape[0], 1))) * model.params["head.noobj"]
    out.scores = concat([out.scores, noobj], axis=1)
    return out


def forward_grounded_segmentation(model: FindModel, scene: Scene, phrases: Sequence[str]) -> SegOutputs:
    enc = encode_phrases([TextSeq.from_text(p) for p in phrases], model.params)
    return _seg_forward(model, "grounded_segmentation", scene, "text", enc, "q.text")


def forward_interactive_segmentation(model: FindModel, scene: Scene, rois: Sequence) -> SegOutputs:
    """``rois``: bboxes ``[x0, y0, w, h]`` (a click is a 1x1 box) or boolean masks."""
    m_i = model.encode_image(scene)
    strat = {"p.spatial": Strategy("roi", grid=(scene.H, scene.W), rois=list(rois))}
    return _seg_forward(model, "interactive_segmentation", scene, "image", m_i, "q.spatial",
                        strategies=strat, image=m_i)


def image_embedding(model: FindModel, scene: Scene, image=None) -> Tensor:
    """Semantic retrieval vector of a scene, [1 x d]."""
    task = get_task("image_text_retrieval").restrict({"p.image", "q.image"})
    m_i = model.encode_image(scene) if image is None else image
    prompts = sample_prompts({"image": m_i}, task)
    queries = sample_queries(model.params, task)
    q_l = interface_forward(prompts, queries, task, model.cfg, model.params)
    return project(q_l, task, model.params).semantic_streams["q.image"]


def caption_embedding(model: FindModel, caption: str) -> Tensor:
    task = get_task("image_text_retrieval").restrict({"p.caption", "q.caption"})
    prompts = sample_prompts({"caption": encode_text(TextSeq.from_text(caption), model.params)}, task)
    queries = sample_queries(model.params, task)
    q_l = interface_forward(prompts, queries, task, model.cfg, model.params)
    return project(q_l, task, model.params).semantic_streams["q.caption"]


def entry_embedding(model: FindModel, entry: InterleaveEntry, scenes: Mapping) -> Tensor:
    """Mean of the interleave query rows after semantic projection, [1 x d]."""
    task = get_task("interleave_retrieval").restrict({"p.interleave", "q._interleave"})
    enc = encode_interleave(entry, model.params, scenes)
    prompts = sample_prompts({"interleave": enc}, task)
    queries = sample_queries(model.params, task, {"q._interleave": len(enc.segments)})
    q_l = interface_forward(prompts, queries, task, model.cfg, model.params)
    sem = project(q_l, task, model.params).semantic_streams["q._interleave"]
    return mean_rows(sem) if sem.shape[0] > 1 else sem


# ------------------------------------------------------------------ inference

def _select_masks(out: SegOutputs) -> tuple:
    # column argmax: best object query per target
    index = unify_match(out.scores.data.T)
    logits = out.mask_logits.data[index]
    return logits, index


def run_interleave_grounding(scene: Scene, entry: InterleaveEntry, model: FindModel,
                             scenes: Mapping) -> np.ndarray:
    """Per-entity mask logits, [n_entities x (H*W)]."""
    out = forward_interleave_grounding(model, scene, entry, scenes)
    return _select_masks(out)[0]


def run_grounded_segmentation(scene: Scene, phrases: Sequence[str], model: FindModel) -> np.ndarray:
    return _select_masks(forward_grounded_segmentation(model, scene, phrases))[0]


def run_interactive_segmentation(scene: Scene, rois: Sequence, model: FindModel) -> np.ndarray:
    return _select_masks(forward_interactive_segmentation(model, scene, rois))[0]


def run_generic_segmentation(scene: Scene, model: FindModel):
    """Panoptic prediction: (segment label grid with -1 for void, {label: category})."""
    out = forward_generic_segmentation(model, scene)
    return panoptic_inference(out.scores.data, out.mask_logits.data, scene.H, scene.W)


def panoptic_inference(class_logits: np.ndarray, mask_logits: np.ndarray, H: int, W: int):
    n_cls = class_logits.shape[1] - 1
    z = class_logits - class_logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    cls = prob.argmax(axis=1)
    keep = np.flatnonzero(cls < n_cls)
    labels = np.full(H * W, -1, dtype=np.int64)
    cats = {}
    if keep.size:
        sig = _sigmoid_np(mask_logits[keep])
        weighted = prob[keep, cls[keep]][:, None] * sig
        best = weighted.argmax(axis=0)
        on = sig[best, np.arange(H * W)] > 0.5
        used = {}
        for pix in np.flatnonzero(on):
            q = int(best[pix])
            if q not in used:
                used[q] = len(used)
                cats[used[q]] = int(cls[keep[q]])
            labels[pix] = used[q]
    return labels.reshape(H, W), cats


def run_image_text_retrieval(scenes: Sequence[Scene], captions: Sequence[str], model: FindModel):
    """Text-to-image: for each caption, scene indices ranked best first, and the score matrix."""
    imgs = concat([image_embedding(model, s) for s in scenes], axis=0)
    caps = concat([caption_embedding(model, c) for c in captions], axis=0)
    sim = _sem(model, caps, imgs).data
    return [list(np.argsort(-row, kind="stable")) for row in sim], sim


def run_interleave_retrieval(corpus: Sequence[Scene], queries: Sequence[InterleaveEntry],
                             model: FindModel, scenes: Mapping | None = None,
                             image_embs: np.ndarray | None = None):
    """Per entry, corpus scene ids ranked best first with their scores.

    Scenes that contributed a visual reference to an entry are excluded from
    that entry's ranking.
    """
    scenes = scenes if scenes is not None else {s.scene_id: s for s in corpus}
    if image_embs is None:
        imgs = concat([image_embedding(model, s) for s in corpus], axis=0)
    else:
        imgs = Tensor._wrap(np.asarray(image_embs))
    results = []
    for entry in queries:
        excluded = entry.ref_scenes()
        allowed = [i for i, s in enumerate(corpus) if s.scene_id not in excluded]
        if not allowed:
            raise MatchError("corpus is empty after excluding the entry's reference scenes")
        e = entry_embedding(model, entry, scenes)
        row = _sem(model, e, imgs).data[0]
        order = sorted(allowed, key=lambda i: (-row[i], i))
        results.append([(corpus[i].scene_id, float(row[i])) for i in order])
    return results
