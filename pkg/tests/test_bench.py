import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from findkit.bench import (AnnotationError, BenchRecord, CaptionParseError, DatasetError,
                           InterleavedCaption, MockAnnotationClient, annotate, build_corpus,
                           build_prompt, build_similarity_index, generate_scene, match_segment,
                           metric_ciou, metric_ir_at_k, metric_miou, metric_pq, parse_caption,
                           read_dataset, record_to_entry, replace_entities, serialize_caption,
                           write_dataset)
from findkit.bench.caption import CaptionEntity
from findkit.bench.dataset import mask_to_rle, read_scenes, rle_to_mask, write_scenes
from findkit.bench.engine import HttpAnnotationClient, validate_caption
from findkit.bench.metrics import MetricError
from findkit.bench.scenes import SceneError, pseudo_description
from findkit.bench.similarity import SimilarityError, SimilarityIndex
from findkit.encoders import VisualRef, init_encoder_params

from oracles import ciou_loop, ir_loop, match_segment_brute, miou_loop, pq_loop

# ------------------------------------------------------------------ captions

def test_parse_single_entity():
    c = parse_caption("[7]<a dog> runs")
    (e,) = c.entities
    assert (e.ann_id, e.phrase, e.span) == (7, "a dog", (4, 9))
    assert c.parts[-1] == " runs"


def test_parse_plain_text():
    c = parse_caption("just words here")
    assert c.entities == [] and c.raw == "just words here"


def test_parse_adjacent_entities():
    c = parse_caption("[1]<a>[2]<b>")
    assert [(e.ann_id, e.phrase) for e in c.entities] == [(1, "a"), (2, "b")]
    assert not any(isinstance(p, str) for p in c.parts)


@pytest.mark.parametrize("raw,pos,reason", [
    ("abc [12", 4, "unclosed '['"),
    ("[x]<a>", 1, "non-numeric"),
    ("[]<a>", 1, "non-numeric"),
    ("[3] <a>", 3, "expected '<'"),
    ("[3]<abc", 3, "unclosed '<'"),
    ("[3]<>", 3, "empty phrase"),
    ("[3]<a<b>", 5, "nested"),
    ("oops > here", 5, "unexpected"),
])
def test_parse_errors_are_positioned(raw, pos, reason):
    with pytest.raises(CaptionParseError) as exc:
        parse_caption(raw)
    assert exc.value.position == pos
    assert reason in exc.value.reason


def test_serialize_examples():
    c = InterleavedCaption.build([(4, "the sky"), " above"])
    assert serialize_caption(c).startswith("[")
    assert serialize_caption(InterleavedCaption(["no entities"])) == "no entities"
    with pytest.raises(ValueError):
        serialize_caption(InterleavedCaption([CaptionEntity(1, "a>b", (4, 7))]))


text_piece = st.text(alphabet=st.characters(blacklist_characters="[]<>", blacklist_categories=("Cs",)),
                     max_size=8)
phrase = st.text(alphabet=st.characters(blacklist_characters="<>", blacklist_categories=("Cs",)),
                 min_size=1, max_size=8)
pieces = st.lists(st.one_of(text_piece, st.tuples(st.integers(0, 10**6), phrase)), max_size=6)


@settings(max_examples=300, deadline=None)
@given(pieces)
def test_caption_round_trip(ps):
    c = InterleavedCaption.build(ps)
    assert parse_caption(serialize_caption(c)) == c


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="[]<>0123ab ", max_size=20))
def test_parser_fuzz_never_crashes(raw):
    try:
        c = parse_caption(raw)
    except CaptionParseError as e:
        assert 0 <= e.position <= len(raw)
    else:
        assert serialize_caption(c) == raw

# ------------------------------------------------------------------ scenes

def test_scene_determinism_and_partition():
    a, ca = generate_scene(11, 8, 8, 4)
    b, cb = generate_scene(11, 8, 8, 4)
    assert ca == cb
    assert np.array_equal(a.segment_id, b.segment_id)
    total = sum(s.mask.astype(int) for s in a.segments)
    assert np.all(total == 1)
    a.validate()


def test_scene_segments_are_connected():
    from collections import deque
    s, _ = generate_scene(3, 8, 8, 5)
    for seg in s.segments:
        cells = set(zip(*np.nonzero(seg.mask)))
        start = next(iter(cells))
        seen, todo = {start}, deque([start])
        while todo:
            y, x = todo.popleft()
            for nb in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if nb in cells and nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        assert seen == cells


def test_single_segment_caption():
    s, cap = generate_scene(0, 4, 4, 1)
    assert cap == s.segments[0].phrase
    client = MockAnnotationClient()
    c = annotate(s, cap, pseudo_description(s), client)
    assert len(c.entities) == 1


def test_infeasible_scene():
    with pytest.raises(SceneError):
        generate_scene(0, 2, 2, 5)

# ------------------------------------------------------------------ data engine

def test_mock_annotation_in_template_order():
    s, cap = generate_scene(2, 8, 8, 5)
    c = annotate(s, cap, pseudo_description(s), MockAnnotationClient())
    assert [e.ann_id for e in c.entities] == [seg.ann_id for seg in s.segments]
    assert c.plain_text == cap


class Replying:
    def __init__(self, reply):
        self.reply = reply
        self.calls = 0

    def complete(self, prompt):
        self.calls += 1
        return self.reply


def test_annotation_validation_errors():
    s, cap = generate_scene(2, 8, 8, 3)
    with pytest.raises(AnnotationError, match="unknown ann_id 99"):
        annotate(s, cap, "", Replying("[99]<x> and more"))
    a = s.segments[0].ann_id
    with pytest.raises(AnnotationError, match="more than once"):
        annotate(s, cap, "", Replying(f"[{a}]<x> and [{a}]<y>"))
    with pytest.raises(AnnotationError, match="unparsable"):
        annotate(s, cap, "", Replying("[1<x>"))


def test_empty_scene_fails_before_client():
    s, cap = generate_scene(2, 8, 8, 3)
    s.segments = []
    client = Replying("whatever")
    with pytest.raises(AnnotationError):
        annotate(s, cap, "", client)
    assert client.calls == 0


def test_prompt_contains_all_slots():
    s, cap = generate_scene(2, 8, 8, 3)
    p = build_prompt(s, cap, "desc")
    assert cap in p and "desc" in p
    for seg in s.segments:
        assert f"index={seg.ann_id}" in p and str(list(seg.bbox)) in p


def test_http_client_retries_then_surfaces(monkeypatch):
    import urllib.error
    import urllib.request
    calls = []

    def boom(req, timeout):
        calls.append(req)
        raise urllib.error.URLError("down")

    monkeypatch.setattr(urllib.request, "urlopen", boom)
    monkeypatch.setenv("FINDKIT_API_TOKEN", "tok")
    client = HttpAnnotationClient("http://example.invalid/v1", retries=2, backoff=0.0)
    with pytest.raises(AnnotationError, match="failed"):
        client.complete("hi")
    assert len(calls) == 3
    assert calls[0].get_header("Authorization") == "Bearer tok"


def test_http_client_parses_reply(monkeypatch):
    import io
    import urllib.request

    class Resp(io.BytesIO):
        def __enter__(self):
            return self

        def __exit__(self, *a):
            return False

    body = json.dumps({"choices": [{"message": {"content": "[1]<a>"}}]}).encode()
    monkeypatch.setattr(urllib.request, "urlopen", lambda req, timeout: Resp(body))
    assert HttpAnnotationClient("http://x").complete("p") == "[1]<a>"


def test_corpus_stats(corpus):
    assert set(corpus.stats) == {"images", "captions", "entities"}
    assert corpus.stats["images"] == 8
    assert corpus.stats["entities"] >= 8

# ------------------------------------------------------------------ similarity

def test_similarity_index_shape_and_norm(corpus):
    idx = corpus.index
    assert idx.S.shape[0] == sum(len(s.segments) for s in corpus.scenes)
    assert np.all(np.abs(np.linalg.norm(idx.S, axis=1) - 1) < 1e-12)


def test_duplicated_scene_gives_mutual_matches():
    s, _ = generate_scene(4, 8, 8, 3, scene_id=0)
    t, _ = generate_scene(4, 8, 8, 3, scene_id=1)
    for seg in t.segments:
        seg.ann_id += 5000
    idx = build_similarity_index([s, t], init_encoder_params(16))
    for i in range(3):
        j = match_segment(idx, i)
        assert j == i + 3 and match_segment(idx, j) == i
        assert abs(idx.S[i] @ idx.S[j] - 1) < 1e-12


def test_match_segment_brute_force(rng):
    for trial in range(30):
        n = int(rng.integers(2, 40))
        S = rng.standard_normal((n, 5))
        S = np.round(S, 1)       # encourage ties
        S[np.all(S == 0, axis=1)] = 1.0
        S /= np.linalg.norm(S, axis=1, keepdims=True)
        owner = [(int(rng.integers(0, 4)), k) for k in range(n)]
        if len({o[0] for o in owner}) < 2:
            continue
        idx = SimilarityIndex(S, owner)
        for i in range(n):
            j = match_segment(idx, i)
            assert j != i
            assert j == match_segment_brute(S.tolist(), owner, i)


def test_match_segment_single_scene_errors():
    S = np.eye(2)
    with pytest.raises(SimilarityError):
        match_segment(SimilarityIndex(S, [(0, 1), (0, 2)]), 0)


def test_replace_entities(corpus):
    rng = np.random.default_rng(0)
    rec = corpus.records[0]
    plain = rec.with_refs({})
    plain.entities = [e.__class__(**{**e.__dict__, "visual_ref": None}) for e in rec.entities]
    assert replace_entities(plain, corpus.index, 0.0, rng) is plain
    full = replace_entities(plain, corpus.index, 1.0, rng)
    for e in full.entities:
        assert e.visual_ref is not None and e.visual_ref[0] != rec.scene_id
        assert e.phrase  # text kept for provenance


def test_replacement_fraction():
    rng = np.random.default_rng(1)
    hits = sum(rng.random() < 0.5 for _ in range(10_000))
    # the same draw replace_entities makes per entity
    assert abs(hits / 10_000 - 0.5) < 0.02

# ------------------------------------------------------------------ metrics

def test_iou_metrics_examples():
    m = np.eye(4, dtype=bool)
    assert metric_ciou([m], [m]) == 1.0 and metric_miou([m], [m]) == 1.0
    a = np.zeros((2, 2), bool); a[0] = True
    b = np.zeros((2, 2), bool); b[1] = True
    assert metric_ciou([a], [b]) == 0.0 and metric_miou([a], [b]) == 0.0
    # IoU 1 and 1/3 with equal areas
    p2 = np.array([[1, 1, 0, 0]], bool)
    g2 = np.array([[0, 1, 1, 0]], bool)
    p1 = np.array([[1, 1, 0, 0]], bool)
    assert metric_miou([p1, p2], [p1, g2]) == pytest.approx(2 / 3, abs=1e-15)
    assert metric_ciou([p1, p2], [p1, g2]) == pytest.approx((2 + 1) / (2 + 3), abs=1e-15)
    z = np.zeros((2, 2), bool)
    assert metric_miou([z], [z]) == 1.0


def test_metrics_against_loops(rng):
    for _ in range(50):
        n = int(rng.integers(1, 6))
        preds = [rng.random((3, 4)) < 0.4 for _ in range(n)]
        gts = [rng.random((3, 4)) < 0.4 for _ in range(n)]
        assert abs(metric_ciou(preds, gts) - ciou_loop(preds, gts)) < 1e-12
        assert abs(metric_miou(preds, gts) - miou_loop(preds, gts)) < 1e-12


def test_ir_at_k(rng):
    assert metric_ir_at_k([[3, 1], [2, 0]], [3, 2], 1) == 1.0
    assert metric_ir_at_k([list(range(20))], [19], 10) == 0.0
    with pytest.warns(UserWarning):
        assert metric_ir_at_k([[0, 1]], [1], 5) == 1.0
    for _ in range(30):
        rankings = [list(rng.permutation(12)) for _ in range(7)]
        targets = [int(t) for t in rng.integers(0, 12, size=7)]
        k = int(rng.integers(1, 12))
        assert abs(metric_ir_at_k(rankings, targets, k) - ir_loop(rankings, targets, k)) < 1e-12


def test_ir_at_k_random_scores_monte_carlo(rng):
    N, k, trials = 20, 5, 4000
    rankings = [list(rng.permutation(N)) for _ in range(trials)]
    targets = [int(t) for t in rng.integers(0, N, size=trials)]
    assert abs(metric_ir_at_k(rankings, targets, k) - k / N) < 0.05


def test_pq_examples():
    gt = (np.array([[0, 0, 1, 1]]), {0: 1, 1: 2})
    assert metric_pq(gt, gt) == 1.0
    assert metric_pq((np.zeros((1, 4), int), {0: 1}), gt) == 0.0
    assert metric_pq((np.array([[0, 0, 1, 1]]), {0: 2, 1: 1}), gt) == 0.0
    with pytest.raises(MetricError):
        metric_pq((np.array([[0, -2, 1, 1]]), {0: 1, 1: 2}), gt)
    with pytest.raises(MetricError):
        metric_pq((np.array([[0, 0, 1, 1]]), {0: 1}), gt)


def test_pq_against_loop(rng):
    for _ in range(60):
        g = rng.integers(0, 4, size=(4, 5))
        p = g.copy()
        flip = rng.random(p.shape) < 0.3
        p[flip] = rng.integers(-1, 5, size=flip.sum())
        gc = {k: int(rng.integers(0, 2)) for k in range(4)}
        pc = {k: int(rng.integers(0, 2)) for k in range(5)}
        assert abs(metric_pq((p, pc), (g, gc)) - pq_loop(p, pc, g, gc)) < 1e-12

# ------------------------------------------------------------------ dataset files

def test_dataset_round_trip(corpus, tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(corpus.records, path)
    back = read_dataset(path)
    assert back == corpus.records
    write_dataset(back, tmp_path / "e.jsonl")
    assert path.read_bytes() == (tmp_path / "e.jsonl").read_bytes()


def test_scenes_round_trip(corpus, tmp_path):
    write_scenes(corpus.scenes, tmp_path / "s.jsonl")
    back = read_scenes(tmp_path / "s.jsonl")
    for a, b in zip(corpus.scenes, back):
        assert np.array_equal(a.segment_id, b.segment_id)
        assert [s.ann_id for s in a.segments] == [s.ann_id for s in b.segments]


def test_empty_dataset(tmp_path):
    (tmp_path / "x.jsonl").write_text("")
    assert read_dataset(tmp_path / "x.jsonl") == []


def test_malformed_line_reports_line_number(corpus, tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(corpus.records[:2], path)
    lines = path.read_text().splitlines()
    lines.insert(1, "{not json")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=":2:"):
        read_dataset(path)


def test_rle_mask_format():
    m = np.array([[1, 1, 0], [0, 0, 1]], bool)
    rle = mask_to_rle(m)
    assert rle == {"size": [2, 3], "counts": [0, 2, 3, 1]}
    assert np.array_equal(rle_to_mask(rle), m)


def test_entities_per_record_shape(corpus):
    mean = np.mean([len(r.entities) for r in corpus.records])
    assert 3 <= mean <= 5


def test_record_to_entry(corpus):
    rec = next(r for r in corpus.records if any(e.visual_ref for e in r.entities))
    entry = record_to_entry(rec)
    assert entry.entity_count == len(rec.entities)
    refs = [n for n in entry.nodes if isinstance(n, VisualRef)]
    assert all(n.scene_id != rec.scene_id for n in refs)
