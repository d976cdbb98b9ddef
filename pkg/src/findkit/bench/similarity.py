"""Cross-scene segment similarity: which segment elsewhere looks most like this one."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoders import encode_image, mask_pool


class SimilarityError(ValueError):
    pass


@dataclass
class SimilarityIndex:
    S: np.ndarray                 # [n_seg x d], unit rows
    owner: list                   # row -> (scene_id, ann_id)

    def __post_init__(self):
        self.row_of = {o: i for i, o in enumerate(self.owner)}
        self._scene = np.array([o[0] for o in self.owner], dtype=np.int64)

    @property
    def W(self) -> np.ndarray:
        return self.S @ self.S.T


def build_similarity_index(scenes, encoder_params) -> SimilarityIndex:
    """One mask-pooled, L2-normalized embedding per segment of every scene."""
    rows, owner = [], []
    for scene in scenes:
        feats = encode_image(scene, encoder_params)
        for seg in scene.segments:
            rows.append(mask_pool(feats, seg.mask).data[0])
            owner.append((int(scene.scene_id), int(seg.ann_id)))
    if len(rows) < 2:
        raise SimilarityError(f"need at least 2 segments, got {len(rows)}")
    S = np.stack(rows)
    S = S / np.linalg.norm(S, axis=1, keepdims=True)
    return SimilarityIndex(S, owner)


def match_segment(index: SimilarityIndex, i: int) -> int:
    """Row j != i of another scene with the highest cosine; ties go to the lowest j."""
    n = index.S.shape[0]
    if n < 2:
        raise SimilarityError("index has fewer than 2 rows")
    if not 0 <= i < n:
        raise SimilarityError(f"row {i} out of range [0, {n})")
    sim = index.S @ index.S[i]
    allowed = index._scene != index._scene[i]
    allowed[i] = False
    if not allowed.any():
        raise SimilarityError(f"row {i}: every candidate is in the same scene")
    return int(np.argmax(np.where(allowed, sim, -np.inf)))


def replace_entities(record, index: SimilarityIndex, p_replace: float, rng: np.random.Generator):
    """Give each entity, with probability ``p_replace``, a visual reference to its best match."""
    if not 0.0 <= p_replace <= 1.0:
        raise SimilarityError(f"p_replace must be in [0, 1], got {p_replace}")
    refs = {}
    for e in record.entities:
        if rng.random() < p_replace:
            i = index.row_of[(int(record.scene_id), int(e.ann_id))]
            refs[e.ann_id] = index.owner[match_segment(index, i)]
    return record.with_refs(refs) if refs else record
