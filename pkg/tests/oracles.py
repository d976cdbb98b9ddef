"""Independent brute-force references used across the test suite."""
import itertools

import numpy as np

from findkit.encoders import PromptSet, QuerySet
from findkit.interface import _aligned_pairs, build_masks, expand_mask
from findkit.taskspec import TaskSpec
from findkit.tensor import Tensor


def assignment_brute(cost):
    """Minimum total cost over all injective maps of the smaller side."""
    c = np.asarray(cost, dtype=float)
    n, m = c.shape
    if n == 0 or m == 0:
        return 0.0
    best = np.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = min(best, sum(c[i, j] for i, j in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = min(best, sum(c[i, j] for j, i in enumerate(rows)))
    return best


def argmax_excluding(sim, excluded):
    out = []
    for i in range(len(sim)):
        best, arg = None, None
        for j in range(len(sim[i])):
            if (i, j) in excluded:
                continue
            if best is None or sim[i][j] > best:
                best, arg = sim[i][j], j
        out.append(arg)
    return out


def match_segment_brute(S, owner, i):
    best, arg = None, None
    for j in range(len(S)):
        if j == i or owner[j][0] == owner[i][0]:
            continue
        c = sum(S[i][k] * S[j][k] for k in range(len(S[i])))
        if best is None or c > best:
            best, arg = c, j
    return arg


def iou_loop(p, g):
    inter = union = 0
    for a, b in zip(np.ravel(p), np.ravel(g)):
        inter += bool(a) and bool(b)
        union += bool(a) or bool(b)
    return 1.0 if union == 0 else inter / union


def ciou_loop(preds, gts):
    inter = union = 0
    for p, g in zip(preds, gts):
        for a, b in zip(np.ravel(p), np.ravel(g)):
            inter += bool(a) and bool(b)
            union += bool(a) or bool(b)
    return 1.0 if union == 0 else inter / union


def miou_loop(preds, gts):
    vals = [iou_loop(p, g) for p, g in zip(preds, gts)]
    return sum(vals) / len(vals)


def ir_loop(rankings, targets, k):
    hits = 0
    for r, t in zip(rankings, targets):
        for pos, item in enumerate(r):
            if pos >= k:
                break
            if item == t:
                hits += 1
                break
    return hits / len(rankings)


def pq_loop(pred_labels, pred_cats, gt_labels, gt_cats):
    p = np.ravel(pred_labels)
    g = np.ravel(gt_labels)
    p_ids = sorted({int(x) for x in p if x >= 0})
    g_ids = sorted({int(x) for x in g if x >= 0})
    if not p_ids and not g_ids:
        return 1.0
    tp, iou_sum, mp, mg = 0, 0.0, set(), set()
    for a in p_ids:
        for b in g_ids:
            if pred_cats[a] != gt_cats[b]:
                continue
            inter = sum(1 for x, y in zip(p, g) if x == a and y == b)
            union = sum(1 for x, y in zip(p, g) if x == a or y == b)
            iou = inter / union
            if iou > 0.5:
                tp += 1
                iou_sum += iou
                mp.add(a)
                mg.add(b)
    fp = len(p_ids) - len(mp)
    fn = len(g_ids) - len(mg)
    return iou_sum / (tp + 0.5 * fp + 0.5 * fn)


def rle_loop(flat):
    counts, cur, run = [], False, 0
    for v in flat:
        if bool(v) == cur:
            run += 1
        else:
            counts.append(run)
            cur, run = not cur, 1
    counts.append(run)
    return counts


# ------------------------------------------------------------------ interface reachability

def random_streams(task, rng, d=8, gaps=True):
    """Random prompt/query sets for ``task``; segmented prompts get gaps between segments."""
    streams, kinds, segs = {}, {}, {}
    n_seg = {}
    for name, kind in task.prompts:
        if kind == "image":
            n = int(rng.integers(2, 7))
        else:
            k = int(rng.integers(1, 4))
            cuts, pos = [], 0
            for _ in range(k):
                pos += int(rng.integers(0, 3)) if gaps else 0
                ln = int(rng.integers(1, 3))
                cuts.append((pos, pos + ln))
                pos += ln
            n = pos + (int(rng.integers(0, 3)) if gaps else 0)
            segs[name] = cuts
            n_seg[name] = k
        streams[name] = Tensor(rng.standard_normal((n, d)))
        kinds[name] = kind
    qs = {}
    for name, kind in task.queries:
        src = next((e.src for e in task.content_edges if e.dst == name and e.aligned), None)
        rows = n_seg[src] if src is not None else int(rng.integers(1, 4))
        qs[name] = Tensor(rng.standard_normal((rows, d)))
    return PromptSet(streams, kinds, segs), QuerySet(qs)


def reachable_prompt_rows(task, prompts, queries):
    """Tokens any query output can depend on (conservative transitive closure)."""
    content, condition = build_masks(task)
    lengths = {n: t.shape[0] for n, t in {**prompts.streams, **queries.streams}.items()}
    a = expand_mask(content, lengths, prompts.segments, _aligned_pairs(task, "content"))
    b = expand_mask(condition, lengths, prompts.segments, _aligned_pairs(task, "condition"))
    g = a | b | np.eye(a.shape[0], dtype=bool)
    n_p = sum(lengths[n] for n in task.prompt_names)
    seen = np.zeros(a.shape[0], bool)
    seen[n_p:] = True
    while True:
        nxt = seen | g[seen].any(axis=0)
        if (nxt == seen).all():
            return seen[:n_p]
        seen = nxt


def drop_edges(task, rng):
    keep = lambda es: [e for e in es if rng.random() < 0.6]
    return TaskSpec(task.name, task.prompts, task.queries, keep(task.content_edges),
                    keep(task.condition_edges), task.frozen, task.semantic, task.pixel)


def faithfulness_trials(task, cfg, params, rng, trials):
    """Perturb unreachable prompt rows and compare Q^L bitwise.

    Odd trials use a copy of ``task`` with random edges dropped.  Returns
    (number of trials whose output changed, number of rows perturbed).
    """
    from findkit.interface import interface_forward
    changed = perturbed = 0
    for trial in range(trials):
        t = task if trial % 2 == 0 else drop_edges(task, rng)
        prompts, queries = random_streams(t, rng, d=cfg.d)
        reach = reachable_prompt_rows(t, prompts, queries)
        out = interface_forward(prompts, queries, t, cfg, params)
        pert, start = {}, 0
        for n in t.prompt_names:
            x = prompts.streams[n].data.copy()
            for i in range(x.shape[0]):
                if not reach[start + i]:
                    x[i] = rng.standard_normal(x.shape[1]) * 10
                    perturbed += 1
            start += x.shape[0]
            pert[n] = Tensor(x)
        out2 = interface_forward(PromptSet(pert, prompts.kinds, prompts.segments), queries, t, cfg, params)
        if any(not np.array_equal(out.streams[n].data, out2.streams[n].data) for n in out.streams):
            changed += 1
    return changed, perturbed
