"""Command-line entry point: gen-data, train, eval, retrieve, ground.

Config files hold one ``key = value`` per line; values are JSON literals and
nested fields use dotted keys::

    # toy run
    steps = 2000
    learning_rate = 0.003
    weight_decay = 1.0
    interface.L = 3
    loss_weights.theta = 1.0
    task_mix.interleave_grounding = 2.0

Flags given on the command line override the file.
"""
from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from .bench.caption import CaptionParseError
from .bench.dataset import DatasetError, mask_to_rle, read_dataset, read_scenes, write_dataset, write_scenes
from .bench.engine import AnnotationError, HttpAnnotationClient, MockAnnotationClient, build_corpus
from .encoders import Connection, EncoderError, InterleaveEntry, TextSpan, VisualRef, write_embedding
from .tasks import MatchError, run_interleave_grounding, run_interleave_retrieval
from .trainer import (CheckpointError, GroundTruthPredictor, ModelPredictor, TrainConfig, TrainData,
                      TrainError, evaluate, flat_metrics, load_checkpoint, save_checkpoint, train)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config files

def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        try:
            val = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"line {lineno}: value {value!r} is not a JSON literal") from None
        _set_dotted(out, key, val)
    return out


def _set_dotted(d: dict, key: str, val):
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"key {key!r} conflicts with a scalar")
    d[parts[-1]] = val


def format_config(d: dict, prefix: str = "") -> str:
    lines = []
    for k in sorted(d):
        v = d[k]
        if isinstance(v, dict):
            lines.append(format_config(v, f"{prefix}{k}.").rstrip("\n"))
        else:
            lines.append(f"{prefix}{k} = {json.dumps(v)}")
    return "\n".join(l for l in lines if l) + "\n"


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path, overrides: dict) -> TrainConfig:
    d = TrainConfig().to_dict()
    if path:
        d = _merge(d, parse_config(Path(path).read_text(encoding="utf-8")))
    d = _merge(d, {k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError, TrainError) as e:
        raise ConfigError(str(e))


# ------------------------------------------------------------------ queries

def parse_query(text: str) -> InterleaveEntry:
    """``[ref:SCENE:ANN]`` is a visual reference, ``<phrase>`` a text entity,
    anything else connective text.  Text without markup is one text entity."""
    nodes, i, start, n = [], 0, 0, len(text)

    def flush(end):
        piece = text[start:end]
        if piece.strip():
            nodes.append(Connection(piece))

    while i < n:
        ch = text[i]
        if ch == "[":
            j = text.find("]", i)
            if j < 0:
                raise CaptionParseError("unclosed '['", i)
            body = text[i + 1:j].split(":")
            if len(body) != 3 or body[0] != "ref":
                raise CaptionParseError("expected [ref:SCENE:ANN]", i)
            if not (body[1].isdigit() and body[2].isdigit()):
                raise CaptionParseError("non-numeric scene or ann id", i + 5)
            flush(i)
            nodes.append(VisualRef(int(body[1]), int(body[2])))
            i = start = j + 1
        elif ch == "<":
            j = text.find(">", i)
            if j < 0:
                raise CaptionParseError("unclosed '<'", i)
            if "<" in text[i + 1:j]:
                raise CaptionParseError("nested '<' in phrase", text.index("<", i + 1))
            if not text[i + 1:j].strip():
                raise CaptionParseError("empty phrase", i)
            flush(i)
            nodes.append(TextSpan(text[i + 1:j]))
            i = start = j + 1
        elif ch in "]>":
            raise CaptionParseError(f"unexpected {ch!r}", i)
        else:
            i += 1
    flush(n)
    if not any(not isinstance(x, Connection) for x in nodes):
        if not text.strip():
            raise CaptionParseError("empty query", 0)
        nodes = [TextSpan(text.strip())]
    return InterleaveEntry(nodes)


# ------------------------------------------------------------------ helpers

def _fail(msg: str, code: int = 1):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load_data(data_dir) -> TrainData:
    d = Path(data_dir)
    try:
        scenes = read_scenes(d / "scenes.jsonl")
        records = read_dataset(d / "dataset.jsonl")
        return TrainData({s.scene_id: s for s in scenes}, records)
    except FileNotFoundError as e:
        _fail(f"missing data file: {e.filename}")
    except (DatasetError, TrainError) as e:
        _fail(str(e))


def _load_ckpt(path, force=False):
    try:
        return load_checkpoint(path, force=force)
    except CheckpointError as e:
        _fail(str(e))


def mask_art(mask: np.ndarray) -> str:
    return "\n".join("".join("#" if v else "." for v in row) for row in mask)


# ------------------------------------------------------------------ commands

@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Toy multi-task grounding and retrieval interface."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--scenes", "n_scenes", default=64, show_default=True, type=click.IntRange(1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--p-replace", default=0.5, show_default=True, type=click.FloatRange(0, 1))
@click.option("--client", type=click.Choice(["mock", "http"]), default="mock", show_default=True)
@click.option("--url", default=None, help="Chat-completion endpoint (http client).")
@click.option("--model-name", default="default", show_default=True, help="Model field sent to the endpoint.")
@click.option("--timeout", default=30.0, show_default=True, type=float)
@click.option("--retries", default=3, show_default=True, type=click.IntRange(0))
@click.option("--workers", default=4, show_default=True, type=click.IntRange(1))
@click.option("--first-id", default=0, show_default=True, type=click.IntRange(0), help="Scene id of the first scene.")
def gen_data(out_dir, n_scenes, seed, p_replace, client, url, model_name, timeout, retries, workers, first_id):
    """Generate scenes, annotate them, add visual references, write the dataset."""
    if client == "http":
        if not url:
            _fail("--client http needs --url")
        ann = HttpAnnotationClient(url, model_name, timeout=timeout, retries=retries)
    else:
        ann = MockAnnotationClient()
    try:
        corpus = build_corpus(n_scenes, seed, p_replace, ann, workers=workers, first_id=first_id)
    except (AnnotationError, ValueError) as e:
        _fail(str(e))
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(corpus.records, out / "dataset.jsonl")
        write_scenes(corpus.scenes, out / "scenes.jsonl")
        if corpus.index is not None:
            write_embedding(out / "similarity.emb", corpus.index.S)
            (out / "similarity_owners.json").write_text(json.dumps([list(o) for o in corpus.index.owner]) + "\n")
        (out / "stats.json").write_text(json.dumps(corpus.stats, sort_keys=True) + "\n")
    except OSError as e:
        _fail(f"cannot write to {out}: {e}")
    click.echo(json.dumps(corpus.stats, sort_keys=True))


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "ckpt", required=True, type=click.Path(dir_okay=False), help="Checkpoint path.")
@click.option("--steps", default=None, type=click.IntRange(1))
@click.option("--seed", default=None, type=int)
@click.option("--batch-size", default=None, type=click.IntRange(1))
@click.option("--lr", "learning_rate", default=None, type=click.FloatRange(0))
@click.option("--log", "log_path", default=None, type=click.Path(dir_okay=False),
              help="Metrics log (default: CKPT.metrics.jsonl).")
@click.option("--quiet", is_flag=True)
def train_cmd(data_dir, config_path, ckpt, steps, seed, batch_size, learning_rate, log_path, quiet):
    """Train jointly on all tasks and write a checkpoint."""
    try:
        cfg = resolve_config(config_path, {"steps": steps, "seed": seed, "batch_size": batch_size,
                                           "learning_rate": learning_rate})
    except (ConfigError, OSError) as e:
        _fail(f"config: {e}")
    click.echo("# resolved config")
    click.echo(format_config(cfg.to_dict()), nl=False)
    data = _load_data(data_dir)
    log_path = log_path or f"{ckpt}.metrics.jsonl"
    t0 = time.time()

    def progress(step, task, rep):
        if not quiet and (step % 50 == 0 or step == cfg.steps - 1):
            click.echo(f"step {step} {task} loss {rep['total']:.4f} ({time.time() - t0:.1f}s)", err=True)

    try:
        model, opt, _ = train(data, cfg, log_path=log_path, progress=progress)
        save_checkpoint(ckpt, model, opt, cfg, cfg.steps)
    except (TrainError, EncoderError, MatchError) as e:
        _fail(str(e))
    except OSError as e:
        _fail(f"cannot write: {e}")


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Machine-readable report (default: CKPT.eval.json).")
@click.option("--retrieval-limit", default=None, type=click.IntRange(2))
@click.option("--predictor", type=click.Choice(["model", "gt"]), default="model", show_default=True,
              help="'gt' scores the annotations against themselves (pipeline check).")
@click.option("--force", is_flag=True, help="Load despite a config hash mismatch.")
def eval_cmd(ckpt, data_dir, out_path, retrieval_limit, predictor, force):
    """Evaluate a checkpoint: segmentation and retrieval metrics."""
    data = _load_data(data_dir)
    if predictor == "gt":
        pred = GroundTruthPredictor(data)
    else:
        pred = ModelPredictor(_load_ckpt(ckpt, force).model)
    try:
        report = evaluate(pred, data, retrieval_limit)
    except (EncoderError, MatchError, ValueError) as e:
        _fail(str(e))
    flat = flat_metrics(report)
    width = max(len(k) for k in flat)
    for k, v in flat.items():
        click.echo(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    out_path = out_path or f"{ckpt}.eval.json"
    try:
        Path(out_path).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    except OSError as e:
        _fail(f"cannot write report: {e}")


@main.command("retrieve")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--query", required=True, help="Text with <phrase> entities and [ref:SCENE:ANN] references.")
@click.option("--top", default=10, show_default=True, type=click.IntRange(1))
@click.option("--force", is_flag=True)
def retrieve_cmd(ckpt, data_dir, query, top, force):
    """Rank corpus scenes against an interleaved query."""
    try:
        entry = parse_query(query)
    except CaptionParseError as e:
        _fail(f"query: {e}")
    data = _load_data(data_dir)
    model = _load_ckpt(ckpt, force).model
    corpus = [data.scenes[k] for k in sorted(data.scenes)]
    try:
        (ranked,) = run_interleave_retrieval(corpus, [entry], model, data.scenes)
    except (EncoderError, MatchError) as e:
        _fail(str(e))
    for scene_id, s in ranked[:top]:
        click.echo(f"{scene_id}\t{s:.6f}")


@main.command("ground")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scene", "scene_id", required=True, type=int)
@click.option("--query", required=True, help="Text with <phrase> entities and [ref:SCENE:ANN] references.")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Also write the masks as JSON lines with RLE.")
@click.option("--force", is_flag=True)
def ground_cmd(ckpt, data_dir, scene_id, query, out_path, force):
    """Ground every entity of a query in one scene."""
    try:
        entry = parse_query(query)
    except CaptionParseError as e:
        _fail(f"query: {e}")
    data = _load_data(data_dir)
    if scene_id not in data.scenes:
        _fail(f"unknown scene {scene_id}")
    scene = data.scenes[scene_id]
    model = _load_ckpt(ckpt, force).model
    try:
        logits = run_interleave_grounding(scene, entry, model, data.scenes)
    except (EncoderError, MatchError) as e:
        _fail(str(e))
    lines = []
    for k, (node, row) in enumerate(zip(entry.entities, logits)):
        m = (row > 0).reshape(scene.H, scene.W)
        label = node.text if isinstance(node, TextSpan) else f"ref:{node.scene_id}:{node.ann_id}"
        rle = mask_to_rle(m)
        click.echo(f"entity {k}: {label}")
        click.echo(mask_art(m))
        click.echo("rle " + " ".join(str(c) for c in rle["counts"]))
        lines.append(json.dumps({"entity": k, "label": label, "mask_rle": rle}, sort_keys=True))
    if out_path:
        try:
            Path(out_path).write_text("\n".join(lines) + "\n")
        except OSError as e:
            _fail(f"cannot write masks: {e}")


if __name__ == "__main__":
    main()
