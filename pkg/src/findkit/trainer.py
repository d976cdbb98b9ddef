"""Joint multi-task training, evaluation, metric logs and checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .bench.dataset import record_to_entry
from .bench.metrics import metric_ciou, metric_ir_at_k, metric_miou, metric_pq
from .encoders import InterleaveEntry, pool_key
from .interface import InterfaceConfig
from .losses import LossReport, LossWeights, SegTarget, combined_loss
from .model import FindModel, init_params
from .taskspec import TASK_NAMES, builtin_tasks
from .tasks import (_select_masks, forward_generic_segmentation, forward_grounded_segmentation,
                    forward_interactive_segmentation, forward_interleave_grounding, image_embedding,
                    caption_embedding, entry_embedding, panoptic_inference, _sem)
from .tensor import Tape, Tensor, concat


class TrainError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# task name -> loss key
LOSS_KEY = {
    "generic_segmentation": "pano",
    "grounded_segmentation": "grd",
    "interactive_segmentation": "iseg",
    "image_text_retrieval": "imgtextr",
    "interleave_retrieval": "intr",
    "interleave_grounding": "intg",
}

DEFAULT_MIX = {
    "generic_segmentation": 1.0,
    "grounded_segmentation": 1.0,
    "interactive_segmentation": 1.0,
    "image_text_retrieval": 1.0,
    "interleave_retrieval": 1.0,
    "interleave_grounding": 2.0,
}


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 3e-3
    weight_decay: float = 1.0
    task_mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    interface: InterfaceConfig = field(default_factory=InterfaceConfig)
    p_replace: float = 0.5

    def validate(self) -> "TrainConfig":
        if self.steps < 1:
            raise TrainError("steps must be >= 1")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise TrainError(f"learning_rate must be >= 0, got {self.learning_rate}")
        unknown = set(self.task_mix) - set(TASK_NAMES)
        if unknown:
            raise TrainError(f"task_mix has unknown tasks {sorted(unknown)}")
        if any(v < 0 for v in self.task_mix.values()) or sum(self.task_mix.values()) <= 0:
            raise TrainError("task_mix weights must be >= 0 with a positive sum")
        if not np.isfinite(self.weight_decay) or self.weight_decay < 0:
            raise TrainError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.p_replace <= 1.0:
            raise TrainError("p_replace must be in [0, 1]")
        self.loss_weights.validate()
        self.interface.validate()
        return self

    def to_dict(self) -> dict:
        return {"seed": self.seed, "steps": self.steps, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
                "weight_decay": self.weight_decay, "task_mix": dict(self.task_mix),
                "loss_weights": self.loss_weights.as_dict(), "interface": asdict(self.interface),
                "p_replace": self.p_replace}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        lw = LossWeights.from_dict(d.pop("loss_weights", {}))
        ic = InterfaceConfig(**d.pop("interface", {}))
        mix = dict(DEFAULT_MIX)
        if "task_mix" in d:
            mix = {k: float(v) for k, v in d.pop("task_mix").items()}
        known = {"seed", "steps", "batch_size", "learning_rate", "weight_decay", "p_replace"}
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown config keys {sorted(unknown)}")
        return cls(task_mix=mix, loss_weights=lw, interface=ic, **d).validate()


def config_hash(cfg: InterfaceConfig) -> bytes:
    """Architecture fingerprint: parameters saved under one hash load under the same one."""
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


# ------------------------------------------------------------------ data

@dataclass
class TrainData:
    """Scenes by id plus benchmark records (one per scene)."""
    scenes: dict
    records: list

    def __post_init__(self):
        if not self.records:
            raise TrainError("corpus is empty")
        for r in self.records:
            if r.scene_id not in self.scenes:
                raise TrainError(f"record {r.scene_id} has no scene")

    def entry(self, record) -> InterleaveEntry:
        return record_to_entry(record)


@dataclass
class Batch:
    task: str
    examples: list
    step: int


def _eligible(data: TrainData, task: str) -> list:
    if task in ("image_text_retrieval", "interleave_retrieval"):
        return list(range(len(data.records))) if len(data.records) >= 2 else []
    return [i for i, r in enumerate(data.records) if r.entities]


def sample_task(cfg: TrainConfig, rng: np.random.Generator) -> str:
    names = [t for t in TASK_NAMES if cfg.task_mix.get(t, 0.0) > 0]
    w = np.array([cfg.task_mix[t] for t in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=w / w.sum()))]


def make_batch(data: TrainData, cfg: TrainConfig, step: int) -> Batch:
    rng = np.random.default_rng([cfg.seed, step])
    task = sample_task(cfg, rng)
    pool = _eligible(data, task)
    if not pool:
        raise TrainError(f"task {task} has no eligible records")
    n = min(cfg.batch_size, len(pool))
    picks = rng.choice(len(pool), size=n, replace=False)
    examples = []
    for k in picks:
        rec = data.records[pool[int(k)]]
        scene = data.scenes[rec.scene_id]
        ex = {"record": rec, "scene": scene}
        if task == "interactive_segmentation":
            clicks = []
            for seg in scene.segments:
                cells = np.flatnonzero(seg.mask.reshape(-1))
                c = int(cells[rng.integers(len(cells))])
                clicks.append([c % scene.W, c // scene.W, 1, 1])
            ex["rois"] = clicks
        examples.append(ex)
    return Batch(task, examples, step)


def _seg_target(masks, cats=None) -> SegTarget:
    return SegTarget(np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in masks]), cats)


def forward_batch(model: FindModel, batch: Batch, data: TrainData):
    """Outputs and ground truth for ``combined_loss``, keyed by loss task key."""
    key = LOSS_KEY[batch.task]
    outs, gts = [], []
    if batch.task == "image_text_retrieval":
        imgs = concat([image_embedding(model, ex["scene"]) for ex in batch.examples], axis=0)
        caps = concat([caption_embedding(model, ex["record"].caption.plain_text)
                       for ex in batch.examples], axis=0)
        return {key: _sem(model, caps, imgs)}, {}
    if batch.task == "interleave_retrieval":
        imgs = concat([image_embedding(model, ex["scene"]) for ex in batch.examples], axis=0)
        ents = concat([entry_embedding(model, data.entry(ex["record"]), data.scenes)
                       for ex in batch.examples], axis=0)
        return {key: _sem(model, ents, imgs)}, {}
    for ex in batch.examples:
        scene, rec = ex["scene"], ex["record"]
        if batch.task == "generic_segmentation":
            outs.append(forward_generic_segmentation(model, scene))
            gts.append(_seg_target([s.mask for s in scene.segments], [s.category for s in scene.segments]))
        elif batch.task == "grounded_segmentation":
            outs.append(forward_grounded_segmentation(model, scene, [s.phrase for s in scene.segments]))
            gts.append(_seg_target([s.mask for s in scene.segments]))
        elif batch.task == "interactive_segmentation":
            outs.append(forward_interactive_segmentation(model, scene, ex["rois"]))
            gts.append(_seg_target([s.mask for s in scene.segments]))
        elif batch.task == "interleave_grounding":
            outs.append(forward_interleave_grounding(model, scene, data.entry(rec), data.scenes))
            gts.append(_seg_target([e.mask for e in rec.entities]))
        else:
            raise TrainError(f"unknown task {batch.task}")
    return {key: outs}, {key: gts}


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()})


# pulls query rows toward zero so no single row becomes a fixed answer
DECAYED_PREFIX = "pool."


def adam_update(params: dict, grads: Mapping, state: AdamState, lr: float,
                weight_decay: float = 0.0):
    """One adaptive-moment step with decoupled weight decay.

    Decay applies to the learnable query pools only. Parameters without a
    gradient keep their values and moments.
    """
    t = state.t + 1
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    b1, b2 = state.beta1, state.beta2
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mh = m[k] / (1 - b1 ** t)
        vh = v[k] / (1 - b2 ** t)
        if lr != 0:
            keep = 1 - lr * weight_decay if k.startswith(DECAYED_PREFIX) else 1.0
            new_params[k] = Tensor(p.data * keep - lr * mh / (np.sqrt(vh) + state.eps), requires_grad=True)
    return new_params, AdamState(m, v, t, b1, b2, state.eps)


def train_step(model: FindModel, batch: Batch, data: TrainData, opt: AdamState, cfg: TrainConfig):
    """Forward, combined loss, backward, Adam.  Returns (model', opt', report dict)."""
    w = cfg.loss_weights.restricted([LOSS_KEY[batch.task]])
    if not w.any_active():
        # every term of this task is switched off: no gradient, no update
        return model, opt, {"total": 0.0}
    with Tape() as tape:
        outs, gts = forward_batch(model, batch, data)
        rep: LossReport = combined_loss(outs, gts, w)
    total = float(rep.total.data)
    if not np.isfinite(total):
        raise TrainError(f"non-finite loss at step {batch.step} ({batch.task}): "
                         + json.dumps(rep.terms, sort_keys=True, default=str))
    grads = tape.backward(rep.total)
    named = {k: grads.get(p) for k, p in model.params.items()}
    for k, g in named.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for {k} at step {batch.step} ({batch.task})")
    params, opt = adam_update(model.params, named, opt, cfg.learning_rate,
                              cfg.weight_decay)
    return FindModel(params, model.cfg, model.image_encoder), opt, rep.as_dict()


def _log_line(step: int, task: str, lr: float, report: dict) -> str:
    return json.dumps({"step": step, "task": task, "lr": lr, "loss": report},
                      sort_keys=True, separators=(",", ":")) + "\n"


def train(data: TrainData, cfg: TrainConfig, model: FindModel | None = None,
          opt: AdamState | None = None, log_path=None, start_step: int = 0, progress=None):
    """Run ``cfg.steps`` steps from ``start_step``; returns (model, opt, history)."""
    cfg.validate()
    model = model or FindModel.create(cfg.interface, cfg.seed)
    opt = opt or AdamState.zeros(model.params)
    history = []
    log = open(log_path, "a" if start_step else "w", encoding="utf-8") if log_path else None
    try:
        for step in range(start_step, start_step + cfg.steps):
            batch = make_batch(data, cfg, step)
            model, opt, rep = train_step(model, batch, data, opt, cfg)
            history.append({"step": step, "task": batch.task, **rep})
            if log:
                log.write(_log_line(step, batch.task, cfg.learning_rate, rep))
            if progress:
                progress(step, batch.task, rep)
    finally:
        if log:
            log.close()
    return model, opt, history


# ------------------------------------------------------------------ evaluation

class ModelPredictor:
    """Turns a model into the per-task predictions that ``evaluate`` scores."""

    def __init__(self, model: FindModel):
        self.model = model

    def ground(self, scene, entry, scenes):
        out = forward_interleave_grounding(self.model, scene, entry, scenes)
        return _select_masks(out)[0] > 0

    def grounded(self, scene, phrases):
        return _select_masks(forward_grounded_segmentation(self.model, scene, phrases))[0] > 0

    def interactive(self, scene, rois):
        return _select_masks(forward_interactive_segmentation(self.model, scene, rois))[0] > 0

    def panoptic(self, scene):
        out = forward_generic_segmentation(self.model, scene)
        return panoptic_inference(out.scores.data, out.mask_logits.data, scene.H, scene.W)

    def image_vectors(self, scenes):
        return concat([image_embedding(self.model, s) for s in scenes], axis=0)

    def caption_vectors(self, captions):
        return concat([caption_embedding(self.model, c) for c in captions], axis=0)

    def entry_vectors(self, entries, scenes):
        return concat([entry_embedding(self.model, e, scenes) for e in entries], axis=0)

    def similarity(self, a, b) -> np.ndarray:
        return _sem(self.model, a, b).data


class GroundTruthPredictor:
    """Returns the annotations themselves; every metric it is scored on is 1."""

    def __init__(self, data: TrainData):
        self.data = data
        self._by_scene = {r.scene_id: r for r in data.records}

    def ground(self, scene, entry, scenes):
        rec = self._by_scene[scene.scene_id]
        return np.stack([e.mask.reshape(-1) for e in rec.entities])

    def grounded(self, scene, phrases):
        return np.stack([s.mask.reshape(-1) for s in scene.segments])

    def interactive(self, scene, rois):
        return self.grounded(scene, None)

    def panoptic(self, scene):
        return scene.segment_id.copy(), {k: s.category for k, s in enumerate(scene.segments)}

    # retrieval: one-hot vectors keyed by scene position
    def _onehot(self, idx, n):
        out = np.zeros((len(idx), n))
        out[np.arange(len(idx)), idx] = 1.0
        return Tensor._wrap(out)

    def image_vectors(self, scenes):
        self._order = {s.scene_id: i for i, s in enumerate(scenes)}
        return self._onehot(list(range(len(scenes))), len(scenes))

    def caption_vectors(self, captions):
        return self._onehot(list(range(len(captions))), len(captions))

    def entry_vectors(self, entries, scenes):
        return self._onehot(list(range(len(entries))), len(entries))

    def similarity(self, a, b) -> np.ndarray:
        return a.data @ b.data.T


def _clicks(scene):
    # deterministic evaluation click: the first cell of each segment in reading order
    out = []
    for seg in scene.segments:
        c = int(np.flatnonzero(seg.mask.reshape(-1))[0])
        out.append([c % scene.W, c // scene.W, 1, 1])
    return out


def evaluate(predictor, data: TrainData, retrieval_limit: int | None = None) -> dict:
    """Metrics report: segmentation quality per task and retrieval accuracy.

    Retrieval is ranked over the first ``retrieval_limit`` records (all by
    default); each record's scene is the target of its caption and entry.
    """
    if not data.records:
        raise TrainError("evaluation corpus is empty")
    recs = data.records
    scenes = [data.scenes[r.scene_id] for r in recs]
    pred_g, gt_g, pred_t, gt_t, pred_i, gt_i, pqs = [], [], [], [], [], [], []
    for rec, scene in zip(recs, scenes):
        entry = record_to_entry(rec)
        pred_g.extend(predictor.ground(scene, entry, data.scenes))
        gt_g.extend(e.mask.reshape(-1) for e in rec.entities)
        gt_masks = [s.mask.reshape(-1) for s in scene.segments]
        pred_t.extend(predictor.grounded(scene, [s.phrase for s in scene.segments]))
        gt_t.extend(gt_masks)
        pred_i.extend(predictor.interactive(scene, _clicks(scene)))
        gt_i.extend(gt_masks)
        pqs.append(metric_pq(predictor.panoptic(scene), (scene.segment_id, {
            k: s.category for k, s in enumerate(scene.segments)})))

    r_recs = recs[:retrieval_limit] if retrieval_limit else recs
    r_scenes = [data.scenes[r.scene_id] for r in r_recs]
    report = {
        "interleave_grounding": {"cIoU": metric_ciou(pred_g, gt_g), "mIoU": metric_miou(pred_g, gt_g)},
        "grounded_segmentation": {"cIoU": metric_ciou(pred_t, gt_t), "mIoU": metric_miou(pred_t, gt_t)},
        "interactive_segmentation": {"cIoU": metric_ciou(pred_i, gt_i), "mIoU": metric_miou(pred_i, gt_i)},
        "generic_segmentation": {"PQ": float(np.mean(pqs))},
    }
    if len(r_recs) >= 2:
        imgs = predictor.image_vectors(r_scenes)
        caps = predictor.caption_vectors([r.caption.plain_text for r in r_recs])
        sim = predictor.similarity(caps, imgs)
        text_rank = [sorted(range(len(r_scenes)), key=lambda j: (-row[j], j)) for row in sim]
        img_rank = [sorted(range(len(r_recs)), key=lambda j: (-col[j], j)) for col in sim.T]
        targets = list(range(len(r_recs)))
        report["image_text_retrieval"] = {"IR@1": metric_ir_at_k(text_rank, targets, 1),
                                          "TR@1": metric_ir_at_k(img_rank, targets, 1)}
        entries = [record_to_entry(r) for r in r_recs]
        ents = predictor.entry_vectors(entries, data.scenes)
        esim = predictor.similarity(ents, imgs)
        rankings, violations, eligible = [], 0, []
        for i, entry in enumerate(entries):
            excluded = entry.ref_scenes()
            allowed = [j for j, s in enumerate(r_scenes) if s.scene_id not in excluded]
            order = sorted(allowed, key=lambda j: (-esim[i, j], j))
            violations += sum(r_scenes[j].scene_id in excluded for j in order)
            rankings.append(order)
        ir = {}
        for k in (1, 5, 10):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ir[f"IR@{k}"] = metric_ir_at_k(rankings, targets, k)
        ir["excluded_ranked"] = violations
        report["interleave_retrieval"] = ir
    return report


def flat_metrics(report: dict) -> dict:
    return {f"{task}.{k}": v for task, d in report.items() for k, v in d.items()}


# ------------------------------------------------------------------ checkpoints

_CKPT_MAGIC = b"FKCKPT\0\0"
_CKPT_VERSION = 1


def _pack_tensor(name: str, a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    nb = name.encode("utf-8")
    return (struct.pack("<H", len(nb)) + nb + struct.pack("<I", a.ndim)
            + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes())


def save_checkpoint(path, model: FindModel, opt: AdamState, cfg: TrainConfig, step: int) -> None:
    """Header (magic, version, config hash, step, config json) + named tensors + crc32."""
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    tensors = [(f"param/{k}", p.data) for k, p in model.params.items()]
    tensors += [(f"adam.m/{k}", a) for k, a in opt.m.items()]
    tensors += [(f"adam.v/{k}", a) for k, a in opt.v.items()]
    body = bytearray()
    body += _CKPT_MAGIC + struct.pack("<I", _CKPT_VERSION) + config_hash(cfg.interface)
    body += struct.pack("<QQ", step, opt.t)
    body += struct.pack("<I", len(cfg_json)) + cfg_json
    body += struct.pack("<I", len(tensors))
    for name, a in tensors:
        body += _pack_tensor(name, a)
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


@dataclass
class Checkpoint:
    cfg: TrainConfig
    step: int
    model: FindModel
    opt: AdamState
    config_hash: bytes


def _read(raw, off, fmt):
    size = struct.calcsize(fmt)
    if off + size > len(raw):
        raise CheckpointError("truncated checkpoint")
    return struct.unpack_from(fmt, raw, off), off + size


def _streams_of(param_name: str) -> str:
    if param_name.startswith("pool."):
        names = []
        for t in builtin_tasks():
            for n, k in t.queries:
                if pool_key(k) == param_name and n not in names:
                    names.append(n)
        return "query stream " + ", ".join(names)
    return "parameter"


def load_checkpoint(path, expected: TrainConfig | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint.  With ``expected`` given, the architecture hash must match
    unless ``force``; tensors are then loaded into a model built from ``expected``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}")
    if len(raw) < 12 or raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    (version,), off = _read(raw, 8, "<I")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    chash = raw[off:off + 32]
    off += 32
    (step, t), off = _read(raw, off, "<QQ")
    (n,), off = _read(raw, off, "<I")
    saved_cfg = TrainConfig.from_dict(json.loads(raw[off:off + n].decode()))
    off += n
    (count,), off = _read(raw, off, "<I")
    tensors = {}
    for _ in range(count):
        (ln,), off = _read(raw, off, "<H")
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        (ndim,), off = _read(raw, off, "<I")
        shape, off = _read(raw, off, f"<{ndim}Q")
        size = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        if off + size > len(raw) - 4:
            raise CheckpointError("truncated checkpoint")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64)
        off += size
    if off != len(raw) - 4:
        raise CheckpointError(f"{path}: {len(raw) - 4 - off} trailing bytes")

    cfg = saved_cfg
    if expected is not None:
        if config_hash(expected.interface) != chash and not force:
            raise CheckpointError(
                f"{path}: config hash mismatch (checkpoint {chash.hex()[:12]}, "
                f"expected {config_hash(expected.interface).hex()[:12]}); use --force to override")
        cfg = expected
    template = init_params(cfg.interface, cfg.seed)
    params, m, v = {}, {}, {}
    for k, p in template.items():
        if f"param/{k}" not in tensors:
            raise CheckpointError(f"checkpoint lacks {_streams_of(k)} tensor {k!r}")
        a = tensors[f"param/{k}"]
        if a.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {_streams_of(k)} ({k!r}): checkpoint "
                                  f"{a.shape} vs model {p.shape}")
        params[k] = Tensor(a, requires_grad=True)
        m[k] = tensors.get(f"adam.m/{k}", np.zeros(a.shape))
        v[k] = tensors.get(f"adam.v/{k}", np.zeros(a.shape))
    model = FindModel(params, cfg.interface)
    return Checkpoint(cfg, int(step), model, AdamState(m, v, int(t)), chash)
