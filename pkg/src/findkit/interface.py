"""The interface: block attention masks, content/condition attention, projections, heads.

Streams are laid out in the task's canonical order (prompts first, then
queries).  Block masks say which stream may attend which; they are expanded
to token level at apply time, with ``aligned`` edges narrowed so that query
row i only sees the i-th segment of its source stream.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import PromptSet, QuerySet
from .taskspec import TaskSpec, TaskSpecError
from .tensor import (Tensor, ShapeError, concat, layer_norm, matmul, mlp_forward,
                     multi_head_attention, normalize_rows, exp, fan_in_scaled)


class InterfaceError(ValueError):
    pass


@dataclass
class AttentionMask:
    order: list              # stream names
    matrix: np.ndarray       # [nb x nb] bool, [r, c] -> r may attend c

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=bool)
        nb = len(self.order)
        if self.matrix.shape != (nb, nb):
            raise InterfaceError(f"mask is {self.matrix.shape}, expected {(nb, nb)}")

    def allows(self, dst: str, src: str) -> bool:
        return bool(self.matrix[self.order.index(dst), self.order.index(src)])


@dataclass
class InterfaceConfig:
    d: int = 64
    L: int = 3
    heads: int = 4
    n_obj: int = 16
    score_mode: str = "cosine"     # or "raw"

    def validate(self) -> "InterfaceConfig":
        if self.d % self.heads:
            raise InterfaceError(f"d={self.d} not divisible by heads={self.heads}")
        if self.L < 1:
            raise InterfaceError("L must be >= 1")
        if self.score_mode not in ("cosine", "raw"):
            raise InterfaceError(f"unknown score mode {self.score_mode!r}")
        return self


@dataclass
class ProjectedQueries:
    semantic: Tensor
    pixel: Tensor | None
    semantic_streams: dict = field(default_factory=dict)
    pixel_streams: dict = field(default_factory=dict)


# ------------------------------------------------------------------ masks

def build_masks(task: TaskSpec):
    """(content, condition) block masks for ``task``."""
    task.validate()
    order = task.order
    idx = {n: i for i, n in enumerate(order)}
    nb = len(order)
    content = np.zeros((nb, nb), dtype=bool)
    for e in task.content_edges:
        content[idx[e.dst], idx[e.src]] = True
    condition = np.zeros((nb, nb), dtype=bool)
    for n in order:
        if n not in task.frozen:
            condition[idx[n], idx[n]] = True
    for e in task.condition_edges:
        condition[idx[e.dst], idx[e.src]] = True
    return AttentionMask(list(order), content), AttentionMask(list(order), condition)


def _aligned_pairs(task: TaskSpec, which: str) -> set:
    edges = task.content_edges if which == "content" else task.condition_edges
    return {(e.dst, e.src) for e in edges if e.aligned}


def expand_mask(mask: AttentionMask, lengths: dict, segments: dict | None = None,
                aligned: set = frozenset()) -> np.ndarray:
    """Token-level boolean mask; aligned (dst, src) blocks become segment diagonals."""
    segments = segments or {}
    offs, o = {}, 0
    for n in mask.order:
        offs[n] = o
        o += lengths[n]
    out = np.zeros((o, o), dtype=bool)
    for r, dst in enumerate(mask.order):
        for c, src in enumerate(mask.order):
            if not mask.matrix[r, c]:
                continue
            r0, c0 = offs[dst], offs[src]
            if (dst, src) in aligned:
                segs = segments.get(src)
                if segs is None or len(segs) != lengths[dst]:
                    raise InterfaceError(
                        f"aligned edge {dst} <- {src}: {lengths[dst]} rows vs "
                        f"{'no' if segs is None else len(segs)} segments")
                for i, (s, e) in enumerate(segs):
                    out[r0 + i, c0 + s:c0 + e] = True
            else:
                out[r0:r0 + lengths[dst], c0:c0 + lengths[src]] = True
    return out


# ------------------------------------------------------------------ params

def _attn_params(prefix, d, rng, two_norms):
    p = {}
    names = ("ln_q", "ln_kv") if two_norms else ("ln",)
    for n in names:
        p[f"{prefix}.{n}.g"] = Tensor(np.ones(d), requires_grad=True)
        p[f"{prefix}.{n}.b"] = Tensor(np.zeros(d), requires_grad=True)
    for w in ("q", "k", "v", "o"):
        p[f"{prefix}.w{w}"] = Tensor(rng.standard_normal((d, d)), requires_grad=True)
        p[f"{prefix}.b{w}"] = Tensor(np.zeros(d), requires_grad=True)
    return p


def _mlp_params(prefix, d, rng):
    return {
        f"{prefix}.w1": Tensor(rng.standard_normal((d, d)), requires_grad=True),
        f"{prefix}.b1": Tensor(np.zeros(d), requires_grad=True),
        f"{prefix}.w2": Tensor(rng.standard_normal((d, d)), requires_grad=True),
        f"{prefix}.b2": Tensor(np.zeros(d), requires_grad=True),
    }


def init_interface_params(cfg: InterfaceConfig, rng: np.random.Generator) -> dict:
    cfg.validate()
    p = {}
    for layer in range(cfg.L):
        p.update(_attn_params(f"if.{layer}.content", cfg.d, rng, True))
        p.update(_attn_params(f"if.{layer}.condition", cfg.d, rng, False))
    p.update(_mlp_params("proj.semantic", cfg.d, rng))
    p.update(_mlp_params("proj.pixel", cfg.d, rng))
    p["head.log_tau"] = Tensor(np.array([np.log(10.0)]), requires_grad=True)
    p["head.noobj"] = Tensor(np.zeros(1), requires_grad=True)
    return p


def mlp_weights(params, prefix):
    """(w1, b1, w2, b2) with the matrices at their applied scale."""
    w1, b1, w2, b2 = (params[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2"))
    return [fan_in_scaled(w1), b1, fan_in_scaled(w2), b2]


# ------------------------------------------------------------------ attention

def _layout(order, prompts: PromptSet, queries: QuerySet):
    lengths = {}
    for n in order:
        t = prompts.streams.get(n) if n in prompts.streams else queries.streams.get(n)
        if t is None:
            raise InterfaceError(f"stream {n!r} missing from prompts/queries")
        lengths[n] = t.shape[0]
    width = {t.shape[1] for t in list(prompts.streams.values()) + list(queries.streams.values())}
    if len(width) != 1:
        raise InterfaceError(f"streams disagree on width: {sorted(width)}")
    return lengths


def _stream(prompts, queries, n):
    return prompts.streams[n] if n in prompts.streams else queries.streams[n]


def _attend(params, prefix, dst_x, src_x, tok_mask, heads, separate_norms):
    """Pre-norm masked attention update for ``dst_x`` rows reading ``src_x`` rows."""
    if separate_norms:
        qn = layer_norm(dst_x, params[f"{prefix}.ln_q.g"], params[f"{prefix}.ln_q.b"])
        kn = layer_norm(src_x, params[f"{prefix}.ln_kv.g"], params[f"{prefix}.ln_kv.b"])
    else:
        g, b = params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"]
        qn = layer_norm(dst_x, g, b)
        kn = layer_norm(src_x, g, b)
    q = qn @ fan_in_scaled(params[f"{prefix}.wq"]) + params[f"{prefix}.bq"]
    k = kn @ fan_in_scaled(params[f"{prefix}.wk"]) + params[f"{prefix}.bk"]
    v = kn @ fan_in_scaled(params[f"{prefix}.wv"]) + params[f"{prefix}.bv"]
    a = multi_head_attention(q, k, v, tok_mask, heads)
    # rows without any visible source get exactly zero update
    support = Tensor._wrap(tok_mask.any(axis=1, keepdims=True).astype(np.float64))
    return a @ fan_in_scaled(params[f"{prefix}.wo"]) + support * params[f"{prefix}.bo"]


def _apply(mask: AttentionMask, prompts, queries, params, prefix, heads, aligned,
           update_prompts, separate_norms):
    order = mask.order
    lengths = _layout(order, prompts, queries)
    tok = expand_mask(mask, lengths, prompts.segments, aligned)
    offs, o = {}, 0
    for n in order:
        offs[n] = (o, o + lengths[n])
        o += lengths[n]
    idx = {n: i for i, n in enumerate(order)}
    qnames = set(queries.streams)
    dst = [n for n in order if mask.matrix[idx[n]].any() and (update_prompts or n in qnames)]
    src = [n for n in order if any(mask.matrix[idx[r], idx[n]] for r in dst)]
    new_p, new_q = dict(prompts.streams), dict(queries.streams)
    if dst:
        rows = np.concatenate([np.arange(*offs[n]) for n in dst])
        cols = np.concatenate([np.arange(*offs[n]) for n in src])
        sub = tok[np.ix_(rows, cols)]
        dst_x = concat([_stream(prompts, queries, n) for n in dst], axis=0) if len(dst) > 1 \
            else _stream(prompts, queries, dst[0])
        src_x = concat([_stream(prompts, queries, n) for n in src], axis=0) if len(src) > 1 \
            else _stream(prompts, queries, src[0])
        upd = dst_x + _attend(params, prefix, dst_x, src_x, sub, heads, separate_norms)
        start = 0
        for n in dst:
            piece = upd[start:start + lengths[n]] if len(dst) > 1 else upd
            start += lengths[n]
            (new_q if n in qnames else new_p)[n] = piece
    return (PromptSet(new_p, dict(prompts.kinds), dict(prompts.segments)),
            QuerySet(new_q, dict(queries.learnable)))


def _check_order(mask, prompts, queries):
    expect = list(prompts.streams) + list(queries.streams)
    if list(mask.order) != expect:
        raise InterfaceError(f"mask order {mask.order} does not match streams {expect}")


def content_attention(prompts: PromptSet, queries: QuerySet, mask: AttentionMask, params,
                      layer: int = 0, heads: int = 4, aligned=frozenset()) -> QuerySet:
    """Queries read prompts under ``mask``; prompts pass through untouched."""
    _check_order(mask, prompts, queries)
    _, q = _apply(mask, prompts, queries, params, f"if.{layer}.content", heads, aligned,
                  update_prompts=False, separate_norms=True)
    return q


def condition_attention(prompts: PromptSet, queries: QuerySet, mask: AttentionMask, params,
                        layer: int = 0, heads: int = 4, aligned=frozenset()):
    """Joint attention over prompts and queries; any stream with a true row updates."""
    _check_order(mask, prompts, queries)
    return _apply(mask, prompts, queries, params, f"if.{layer}.condition", heads, aligned,
                  update_prompts=True, separate_norms=False)


_MASK_CACHE: dict = {}


def task_masks(task: TaskSpec):
    from .taskspec import format_task
    key = format_task(task)
    if key not in _MASK_CACHE:
        _MASK_CACHE[key] = build_masks(task)
    return _MASK_CACHE[key]


def interface_forward(prompts: PromptSet, queries: QuerySet, task: TaskSpec,
                      cfg: InterfaceConfig, params, return_prompts: bool = False):
    """L rounds of (content attention, condition attention); returns Q^L."""
    if cfg.L < 1:
        raise InterfaceError("L must be >= 1")
    content, condition = task_masks(task)
    al_t, al_d = _aligned_pairs(task, "content"), _aligned_pairs(task, "condition")
    _check_order(content, prompts, queries)
    for layer in range(cfg.L):
        queries = content_attention(prompts, queries, content, params, layer, cfg.heads, al_t)
        prompts, queries = condition_attention(prompts, queries, condition, params, layer,
                                               cfg.heads, al_d)
    return (queries, prompts) if return_prompts else queries


# ------------------------------------------------------------------ projection & heads

def project(queries: QuerySet, task: TaskSpec, params, want_pixel: bool | None = None) -> ProjectedQueries:
    if want_pixel and not task.pixel:
        raise InterfaceError(f"task {task.name} has no pixel projection")
    sem_names = [n for n in task.semantic if n in queries.streams]
    sem_streams, pix_streams = {}, {}
    sem = None
    if sem_names:
        x = concat([queries.streams[n] for n in sem_names], axis=0) if len(sem_names) > 1 \
            else queries.streams[sem_names[0]]
        sem = mlp_forward(x, mlp_weights(params, "proj.semantic"))
        start = 0
        for n in sem_names:
            k = queries.streams[n].shape[0]
            sem_streams[n] = sem[start:start + k] if len(sem_names) > 1 else sem
            start += k
    pix = None
    pix_names = [n for n in task.pixel if n in queries.streams]
    if pix_names and want_pixel is not False:
        x = concat([queries.streams[n] for n in pix_names], axis=0) if len(pix_names) > 1 \
            else queries.streams[pix_names[0]]
        pix = mlp_forward(x, mlp_weights(params, "proj.pixel"))
        start = 0
        for n in pix_names:
            k = queries.streams[n].shape[0]
            pix_streams[n] = pix[start:start + k] if len(pix_names) > 1 else pix
            start += k
    return ProjectedQueries(sem, pix, sem_streams, pix_streams)


def head_mask(pixel_queries: Tensor, image_embeddings: Tensor) -> Tensor:
    """Mask logits ``Q^p x M_I^T``; [n_t x n_p]."""
    if pixel_queries.shape[1] != image_embeddings.shape[1]:
        raise ShapeError(f"head_mask: query width {pixel_queries.shape[1]} vs "
                         f"image width {image_embeddings.shape[1]}")
    return matmul(pixel_queries, image_embeddings.T)


def temperature(params) -> Tensor:
    return exp(params["head.log_tau"])


def head_score(a: Tensor, b: Tensor, tau=None, mode: str = "cosine") -> Tensor:
    """Similarity matrix between two sets of semantic rows.

    ``cosine``: tau * normalize(a) normalize(b)^T; ``raw``: a b^T.
    ``tau`` is a float or a 1-element tensor (default 1).
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"head_score: widths {a.shape[1]} and {b.shape[1]} differ")
    if mode == "raw":
        return matmul(a, b.T)
    if mode != "cosine":
        raise InterfaceError(f"unknown score mode {mode!r}")
    try:
        s = matmul(normalize_rows(a), normalize_rows(b).T)
    except ZeroDivisionError:
        raise InterfaceError("head_score: zero-norm row") from None
    if tau is None:
        return s
    return s * tau


def score(a: Tensor, b: Tensor, params, cfg: InterfaceConfig) -> Tensor:
    if cfg.score_mode == "raw":
        return head_score(a, b, mode="raw")
    return head_score(a, b, temperature(params), "cosine")
