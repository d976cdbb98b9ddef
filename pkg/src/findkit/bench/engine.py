"""Data engine: ask an annotation model for entity-grounded captions, then add visual references."""
from __future__ import annotations

import json
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..encoders import SHAPES, Scene
from .caption import CaptionParseError, InterleavedCaption, parse_caption, serialize_caption
from .dataset import record_from_scene
from .scenes import generate_scene, pseudo_description
from .similarity import build_similarity_index, replace_entities

TOKEN_ENV = "FINDKIT_API_TOKEN"

PROMPT_TEMPLATE = """\
You write image captions whose entities are tied to annotated regions.
Human caption: <{gt}>
Model description: <{pd}>
Annotated boxes, each [x0, y0, w, h] with (x0, y0) the top-left cell and (w, h) the size:
{box}
Region details, one per line:
{si}
Task: {sp}
Write entities as [index]<phrase>, for example "[12]<the red circle> next to [13]<a blue square>",
where index is a region index from the list above. Use each region at most once.
"""

TASK_LINE = "write one caption for this image that mentions its annotated regions"


class AnnotationError(RuntimeError):
    pass


class AnnotationClient(Protocol):
    def complete(self, prompt: str) -> str: ...


def build_prompt(scene: Scene, gt_caption: str, pseudo: str) -> str:
    box = "\n".join(f"{s.ann_id}: {list(s.bbox)}" for s in scene.segments)
    si = "\n".join(f"index={s.ann_id} bbox={list(s.bbox)} category={SHAPES[s.category]} "
                   f"description={s.phrase}" for s in scene.segments)
    return PROMPT_TEMPLATE.format(gt=gt_caption, pd=pseudo, box=box, si=si, sp=TASK_LINE)


_SI_LINE = re.compile(r"^index=(\d+) bbox=\[[^\]]*\] category=\S+ description=(.+)$", re.M)
_GT_LINE = re.compile(r"^Human caption: <(.*)>$", re.M)


class MockAnnotationClient:
    """Offline stand-in: marks every region's description inside the human caption.

    Regions are taken in listed order; a description not found after the
    previous one is appended with "and".
    """

    def __init__(self):
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        gt = _GT_LINE.search(prompt)
        text = gt.group(1) if gt else ""
        pieces, cursor = [], 0
        for ann_id, phrase in _SI_LINE.findall(prompt):
            at = text.find(phrase, cursor)
            if at < 0:
                pieces.append(text[cursor:])
                pieces.append(" and " if pieces and any(pieces) else "")
                text, cursor, at = "", 0, 0
            else:
                pieces.append(text[cursor:at])
                cursor = at + len(phrase)
            pieces.append((int(ann_id), phrase))
        pieces.append(text[cursor:])
        return serialize_caption(InterleavedCaption.build(pieces))


class HttpAnnotationClient:
    """Chat-completion style JSON endpoint; bearer token read from ``FINDKIT_API_TOKEN``."""

    def __init__(self, url: str, model: str = "default", timeout: float = 30.0, retries: int = 3,
                 backoff: float = 1.0, token_env: str = TOKEN_ENV):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.token_env = token_env

    def _request(self, prompt: str) -> urllib.request.Request:
        body = json.dumps({"model": self.model, "temperature": 0,
                           "messages": [{"role": "user", "content": prompt}]}).encode()
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return urllib.request.Request(self.url, data=body, headers=headers, method="POST")

    def complete(self, prompt: str) -> str:
        last = None
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(self._request(prompt), timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return payload["choices"][0]["message"]["content"]
            except urllib.error.HTTPError as e:
                last = e
                if e.code < 500 and e.code != 429:
                    break          # not worth retrying
            except (urllib.error.URLError, TimeoutError, OSError) as e:
                last = e
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise AnnotationError(f"malformed response from {self.url}: {e}")
            if attempt < self.retries:
                time.sleep(self.backoff * 2 ** attempt)
        raise AnnotationError(f"annotation request to {self.url} failed: {last}")


def validate_caption(scene: Scene, caption: InterleavedCaption) -> None:
    known = {s.ann_id for s in scene.segments}
    reasons, seen = [], set()
    if not caption.entities:
        reasons.append("no entities")
    for e in caption.entities:
        if e.ann_id not in known:
            reasons.append(f"unknown ann_id {e.ann_id}")
        if e.ann_id in seen:
            reasons.append(f"ann_id {e.ann_id} used more than once")
        seen.add(e.ann_id)
    if reasons:
        raise AnnotationError(f"scene {scene.scene_id}: invalid caption: " + "; ".join(reasons))


def annotate(scene: Scene, gt_caption: str, pseudo: str, client: AnnotationClient) -> InterleavedCaption:
    if not scene.segments:
        raise AnnotationError(f"scene {scene.scene_id} has no segments")
    reply = client.complete(build_prompt(scene, gt_caption, pseudo))
    try:
        caption = parse_caption(reply.strip())
    except CaptionParseError as e:
        raise AnnotationError(f"scene {scene.scene_id}: unparsable reply: {e}")
    validate_caption(scene, caption)
    return caption


@dataclass
class Corpus:
    scenes: list
    records: list
    index: object
    stats: dict


def scene_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def generate_scenes(n: int, seed: int, H: int = 8, W: int = 8, seg_range=(3, 5), first_id: int = 0):
    scenes, captions = [], []
    for i in range(n):
        rng = np.random.default_rng(scene_seed(seed, i))
        k = int(rng.integers(seg_range[0], seg_range[1] + 1))
        s, c = generate_scene(scene_seed(seed, i), H, W, k, scene_id=first_id + i)
        scenes.append(s)
        captions.append(c)
    return scenes, captions


def build_corpus(n_scenes: int, seed: int, p_replace: float, client: AnnotationClient | None = None,
                 encoder_params=None, H: int = 8, W: int = 8, seg_range=(3, 5), workers: int = 4,
                 first_id: int = 0) -> Corpus:
    """Scenes -> annotated captions -> visual-reference replacement."""
    from ..encoders import init_encoder_params
    client = client or MockAnnotationClient()
    encoder_params = encoder_params or init_encoder_params(64)
    scenes, gts = generate_scenes(n_scenes, seed, H, W, seg_range, first_id)

    def one(k):
        try:
            cap = annotate(scenes[k], gts[k], pseudo_description(scenes[k]), client)
        except Exception as e:
            raise AnnotationError(f"record {scenes[k].scene_id}: {e}") from e
        return record_from_scene(scenes[k], cap)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(one, range(len(scenes))))
    index = build_similarity_index(scenes, encoder_params) if n_scenes > 1 else None
    if p_replace > 0:
        if index is None:
            raise AnnotationError("visual replacement needs at least two scenes")
        rng = np.random.default_rng([seed, 1])
        records = [replace_entities(r, index, p_replace, rng) for r in records]
    stats = {"images": len(scenes), "captions": len(records),
             "entities": sum(len(r.entities) for r in records)}
    return Corpus(scenes, records, index, stats)
