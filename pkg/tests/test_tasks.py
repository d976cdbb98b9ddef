import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from findkit.encoders import InterleaveEntry, TextSpan, VisualRef, Connection
from findkit.interface import head_score
from findkit.taskspec import (TASK_NAMES, TaskSpecError, builtin_tasks, format_task, get_task,
                              parse_tasks)
from findkit.tasks import (MatchError, caption_embedding, entry_embedding, image_embedding,
                           panoptic_inference, run_generic_segmentation,
                           run_grounded_segmentation, run_image_text_retrieval,
                           run_interactive_segmentation, run_interleave_grounding,
                           run_interleave_retrieval, unify_match)
from findkit.tensor import Tensor

from oracles import argmax_excluding


# ------------------------------------------------------------------ task registry and format

def test_six_builtin_tasks():
    assert len(TASK_NAMES) == 6
    assert get_task("interleave_grounding").projections == {"Semantic", "Pixel"}
    assert get_task("image_text_retrieval").projections == {"Semantic"}
    with pytest.raises(TaskSpecError):
        get_task("nope")


@pytest.mark.parametrize("task", builtin_tasks(), ids=lambda t: t.name)
def test_task_format_round_trip(task):
    text = format_task(task)
    (back,) = parse_tasks(text)
    assert back == task
    assert format_task(back) == text


def test_parse_multiple_and_comments():
    text = "# all of them\n" + "\n".join(format_task(t) for t in builtin_tasks())
    assert parse_tasks(text) == builtin_tasks()


@pytest.mark.parametrize("text,msg", [
    ("task a\nprompt p.x image\nquery q.x object\ncontent q.x <- p.y\nend\n", "undeclared"),
    ("task a\nprompt p.x image\nend\ntask b\n", "missing 'end'"),
    ("prompt p.x image\n", "outside"),
    ("task a\nfoo bar\nend\n", "unknown directive"),
    ("task a\nprompt p.x image\nquery q.x object\ncontent q.x -> p.x\nend\n", "expected"),
    ("task a\nprompt p.x image\ncontent p.x <- p.x\nend\n", "query stream"),
    ("task a\ntask b\n", "nested"),
])
def test_parse_errors(text, msg):
    with pytest.raises(TaskSpecError, match=msg):
        parse_tasks(text)


# ------------------------------------------------------------------ unify_match

@settings(max_examples=200, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31 - 1), st.booleans())
def test_unify_match_oracle(n, m, seed, ties):
    rng = np.random.default_rng(seed)
    sim = rng.standard_normal((n, m))
    if ties:
        sim = np.round(sim)
    excluded = {(i, j) for i in range(n) for j in range(m) if rng.random() < 0.3}
    for i in range(n):          # keep at least one target per row
        excluded.discard((i, int(rng.integers(0, m))))
    got = unify_match(sim, excluded)
    assert got == argmax_excluding(sim.tolist(), excluded)
    assert all((i, j) not in excluded for i, j in enumerate(got))


def test_unify_match_examples():
    assert unify_match(np.eye(3)) == [0, 1, 2]
    assert unify_match(np.ones((2, 3))) == [0, 0]
    with pytest.raises(MatchError):
        unify_match(np.ones((1, 2)), {(0, 0), (0, 1)})
    with pytest.raises(MatchError):
        unify_match(np.array([[np.nan, 1.0]]))
    assert unify_match(np.zeros((0, 3))) == []


# ------------------------------------------------------------------ runs with untrained params

def test_grounding_untrained_shapes(small_model, data):
    rec = data.records[0]
    scene = data.scenes[rec.scene_id]
    out = run_interleave_grounding(scene, data.entry(rec), small_model, data.scenes)
    assert out.shape == (len(rec.entities), scene.H * scene.W)
    assert np.all(np.isfinite(out))


def test_other_runs_untrained(small_model, data):
    scene = next(iter(data.scenes.values()))
    hw = scene.H * scene.W
    g = run_grounded_segmentation(scene, [s.phrase for s in scene.segments], small_model)
    assert g.shape == (len(scene.segments), hw)
    i = run_interactive_segmentation(scene, [[0, 0, 1, 1]], small_model)
    assert i.shape == (1, hw)
    labels, cats = run_generic_segmentation(scene, small_model)
    assert labels.shape == (scene.H, scene.W)
    assert set(np.unique(labels)) - {-1} <= set(cats)


def test_panoptic_inference_examples():
    cls = np.array([[5.0, 0, 0, 0, 0], [0, 0, 0, 0, 9.0]])     # 4 classes + no-object
    masks = np.array([[9.0, 9.0, -9.0, -9.0], [9.0, 9.0, 9.0, 9.0]])
    labels, cats = panoptic_inference(cls, masks, 2, 2)
    assert labels.tolist() == [[0, 0], [-1, -1]] and cats == {0: 0}


def test_image_text_retrieval_ranking_oracle(small_model, corpus):
    scenes = corpus.scenes[:4]
    caps = [r.caption.plain_text for r in corpus.records[:4]]
    ranks, sim = run_image_text_retrieval(scenes, caps, small_model)
    for row, r in zip(sim, ranks):
        brute = sorted(range(len(row)), key=lambda j: (-row[j], j))
        assert [int(x) for x in r] == brute


def test_interleave_retrieval_ranking_and_exclusion(small_model, corpus, data):
    scenes = corpus.scenes
    entries = [data.entry(r) for r in corpus.records]
    res = run_interleave_retrieval(scenes, entries, small_model, data.scenes)
    imgs = np.concatenate([image_embedding(small_model, s).data for s in scenes])
    for entry, ranked in zip(entries, res):
        ids = [sid for sid, _ in ranked]
        assert not set(ids) & entry.ref_scenes()
        e = entry_embedding(small_model, entry, data.scenes)
        row = head_score(e, Tensor(imgs), np.exp(small_model.params["head.log_tau"].data[0])).data[0]
        allowed = [k for k, s in enumerate(scenes) if s.scene_id not in entry.ref_scenes()]
        brute = sorted(allowed, key=lambda k: (-row[k], k))
        assert ids == [scenes[k].scene_id for k in brute]
        assert np.allclose([v for _, v in ranked], row[brute], atol=1e-12)


def test_interleave_retrieval_single_and_empty(small_model, corpus, data):
    s0, s1 = corpus.scenes[:2]
    a = s1.segments[0]
    entry = InterleaveEntry([Connection("look at"), VisualRef(s1.scene_id, a.ann_id, a.bbox)])
    (ranked,) = run_interleave_retrieval([s0, s1], [entry], small_model, data.scenes)
    assert [sid for sid, _ in ranked] == [s0.scene_id]
    with pytest.raises(MatchError):
        run_interleave_retrieval([s1], [entry], small_model, data.scenes)


def test_caption_embedding_shape(small_model):
    assert caption_embedding(small_model, "the red circle").shape == (1, small_model.cfg.d)
