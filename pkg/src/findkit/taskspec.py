"""Declarative task descriptions and their line-oriented text format.

Example::

    task interleave_grounding
    prompt p.image image frozen
    prompt p.interleave interleave
    query q.entity entity
    query q.interleave interleave
    content q.entity <- p.image
    content q.interleave <- p.interleave aligned
    condition q.entity <- p.image
    condition q.interleave <- p.interleave
    semantic q.entity q.interleave
    pixel q.entity
    end

``frozen`` prompts get no self block in condition attention (they are never
updated).  ``aligned`` content edges restrict query row i to the i-th
segment (entity span, class token, roi...) of the prompt stream.
"""
from __future__ import annotations

from dataclasses import dataclass, field


class TaskSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    dst: str
    src: str
    aligned: bool = False


@dataclass
class TaskSpec:
    name: str
    prompts: list                       # [(stream, kind)]
    queries: list                       # [(stream, kind)]
    content_edges: list = field(default_factory=list)
    condition_edges: list = field(default_factory=list)
    frozen: list = field(default_factory=list)
    semantic: list = field(default_factory=list)     # query streams projected semantically
    pixel: list = field(default_factory=list)        # query streams projected to pixels

    @property
    def projections(self) -> set:
        out = set()
        if self.semantic:
            out.add("Semantic")
        if self.pixel:
            out.add("Pixel")
        return out

    @property
    def order(self) -> list:
        return [n for n, _ in self.prompts] + [n for n, _ in self.queries]

    @property
    def prompt_names(self) -> list:
        return [n for n, _ in self.prompts]

    @property
    def query_names(self) -> list:
        return [n for n, _ in self.queries]

    def kind(self, stream: str) -> str:
        for n, k in self.prompts + self.queries:
            if n == stream:
                return k
        raise TaskSpecError(f"{self.name}: undeclared stream {stream!r}")

    def validate(self) -> "TaskSpec":
        names = self.order
        if len(set(names)) != len(names):
            raise TaskSpecError(f"{self.name}: duplicate stream names")
        pset, qset = set(self.prompt_names), set(self.query_names)
        for e in self.content_edges:
            for s in (e.dst, e.src):
                if s not in pset | qset:
                    raise TaskSpecError(f"{self.name}: edge {e.dst} <- {e.src} references undeclared stream {s!r}")
            if e.dst not in qset:
                raise TaskSpecError(f"{self.name}: content edge must target a query stream, got {e.dst!r}")
        for e in self.condition_edges:
            for s in (e.dst, e.src):
                if s not in pset | qset:
                    raise TaskSpecError(f"{self.name}: edge {e.dst} <- {e.src} references undeclared stream {s!r}")
        for s in self.frozen:
            if s not in pset:
                raise TaskSpecError(f"{self.name}: frozen stream {s!r} is not a prompt")
        for s in self.semantic + self.pixel:
            if s not in qset:
                raise TaskSpecError(f"{self.name}: projected stream {s!r} is not a query")
        return self

    def restrict(self, keep) -> "TaskSpec":
        """Sub-task over the streams in ``keep`` (edges touching others dropped)."""
        keep = set(keep)
        return TaskSpec(
            self.name,
            [p for p in self.prompts if p[0] in keep],
            [q for q in self.queries if q[0] in keep],
            [e for e in self.content_edges if e.dst in keep and e.src in keep],
            [e for e in self.condition_edges if e.dst in keep and e.src in keep],
            [s for s in self.frozen if s in keep],
            [s for s in self.semantic if s in keep],
            [s for s in self.pixel if s in keep],
        )


def _spec(name, prompts, queries, content, condition, semantic, pixel) -> TaskSpec:
    frozen = [n for n, k in prompts if k == "image"]
    return TaskSpec(name, prompts, queries, content, condition, frozen, semantic, pixel).validate()


def builtin_tasks() -> list:
    """The six tasks of the interface table, in table order."""
    E = Edge
    return [
        _spec("generic_segmentation",
              [("p.image", "image"), ("p.class", "class")],
              [("q.object", "object"), ("q.class", "class")],
              [E("q.object", "p.image"), E("q.class", "p.class", aligned=True)],
              [],
              ["q.object", "q.class"], ["q.object"]),
        _spec("grounded_segmentation",
              [("p.image", "image"), ("p.text", "text")],
              [("q.grounding", "grounding"), ("q.text", "text")],
              [E("q.grounding", "p.image"), E("q.text", "p.text", aligned=True)],
              [E("q.grounding", "p.text")],
              ["q.grounding", "q.text"], ["q.grounding"]),
        _spec("image_text_retrieval",
              [("p.image", "image"), ("p.caption", "caption")],
              [("q.image", "image"), ("q.caption", "caption")],
              [E("q.image", "p.image"), E("q.caption", "p.caption")],
              [],
              ["q.image", "q.caption"], []),
        _spec("interactive_segmentation",
              [("p.image", "image"), ("p.spatial", "spatial")],
              [("q.segment", "segment"), ("q.spatial", "spatial")],
              [E("q.segment", "p.image"), E("q.spatial", "p.spatial", aligned=True)],
              [E("q.segment", "p.spatial")],
              ["q.segment", "q.spatial"], ["q.segment"]),
        _spec("interleave_grounding",
              [("p.image", "image"), ("p.interleave", "interleave")],
              [("q.entity", "entity"), ("q.interleave", "interleave")],
              [E("q.entity", "p.image"), E("q.interleave", "p.interleave", aligned=True)],
              [E("q.entity", "p.image"), E("q.interleave", "p.interleave")],
              ["q.entity", "q.interleave"], ["q.entity"]),
        _spec("interleave_retrieval",
              [("p.image", "image"), ("p.interleave", "interleave")],
              [("q.image", "image"), ("q._interleave", "_interleave")],
              [E("q.image", "p.image"), E("q._interleave", "p.interleave", aligned=True)],
              [],
              ["q.image", "q._interleave"], []),
    ]


def get_task(name: str) -> TaskSpec:
    for t in builtin_tasks():
        if t.name == name:
            return t
    raise TaskSpecError(f"unknown task {name!r}")


TASK_NAMES = tuple(t.name for t in builtin_tasks())


# ------------------------------------------------------------------ text format

def format_task(t: TaskSpec) -> str:
    lines = [f"task {t.name}"]
    for n, k in t.prompts:
        lines.append(f"prompt {n} {k}" + (" frozen" if n in t.frozen else ""))
    for n, k in t.queries:
        lines.append(f"query {n} {k}")
    for e in t.content_edges:
        lines.append(f"content {e.dst} <- {e.src}" + (" aligned" if e.aligned else ""))
    for e in t.condition_edges:
        lines.append(f"condition {e.dst} <- {e.src}" + (" aligned" if e.aligned else ""))
    if t.semantic:
        lines.append("semantic " + " ".join(t.semantic))
    if t.pixel:
        lines.append("pixel " + " ".join(t.pixel))
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_tasks(text: str) -> list:
    """Parse one or more ``task ... end`` blocks; ``#`` starts a comment."""
    tasks, cur = [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        head = words[0]
        if head == "task":
            if cur is not None:
                raise TaskSpecError(f"line {lineno}: nested task block")
            if len(words) != 2:
                raise TaskSpecError(f"line {lineno}: expected 'task NAME'")
            cur = TaskSpec(words[1], [], [])
            continue
        if cur is None:
            raise TaskSpecError(f"line {lineno}: {head!r} outside a task block")
        if head == "end":
            tasks.append(cur.validate())
            cur = None
        elif head in ("prompt", "query"):
            if len(words) not in (3, 4) or (len(words) == 4 and (head == "query" or words[3] != "frozen")):
                raise TaskSpecError(f"line {lineno}: expected '{head} NAME KIND'" +
                                    (" [frozen]" if head == "prompt" else ""))
            (cur.prompts if head == "prompt" else cur.queries).append((words[1], words[2]))
            if len(words) == 4:
                cur.frozen.append(words[1])
        elif head in ("content", "condition"):
            if len(words) not in (4, 5) or words[2] != "<-" or (len(words) == 5 and words[4] != "aligned"):
                raise TaskSpecError(f"line {lineno}: expected '{head} DST <- SRC [aligned]'")
            edge = Edge(words[1], words[3], len(words) == 5)
            (cur.content_edges if head == "content" else cur.condition_edges).append(edge)
        elif head in ("semantic", "pixel"):
            getattr(cur, head).extend(words[1:])
        else:
            raise TaskSpecError(f"line {lineno}: unknown directive {head!r}")
    if cur is not None:
        raise TaskSpecError(f"task {cur.name!r}: missing 'end'")
    return tasks
