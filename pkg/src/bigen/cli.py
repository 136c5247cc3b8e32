"""Command-line surface.

Commands: gen-data, build-vocab, train-scorer, train, generate, evaluate,
ablate. Every command writes its artifacts under a run directory with the
effective configuration copied in, so a run is reproducible from its
directory alone.

Configuration values resolve in order: built-in defaults, then a config file
(flat ``key=value`` lines, ``#`` comments), then BIGEN_<KEY> environment
variables, then ``--set key=value`` flags. Unknown keys are an error naming
the key. Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, data, evaluate, metrics, pipeline, sampling, scorer, toyworld, training, viscodec
from .seeding import derive_seed

ENV_PREFIX = "BIGEN_"

CONFIG_KEYS = {f.name: f.type for f in dataclasses.fields(training.TrainConfig)}
MODEL_KEYS = ("d_model", "layers", "heads", "ff")


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    raw = raw.strip()
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if "," in raw:
        return tuple(_parse_value(p) for p in raw.split(","))
    return raw


def read_config_file(path: Path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def resolve_overrides(config_file: Path | None, sets: list[str]) -> dict:
    """defaults < config file < environment < --set."""
    out: dict = {}
    if config_file is not None:
        out.update(read_config_file(config_file))
    for key in list(CONFIG_KEYS) + list(MODEL_KEYS):
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            out[key] = _parse_value(env)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    unknown = [k for k in out if k not in CONFIG_KEYS and k not in MODEL_KEYS]
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return out


def _split_overrides(overrides: dict) -> tuple[dict, dict]:
    train = {k: v for k, v in overrides.items() if k in CONFIG_KEYS}
    model = {k: v for k, v in overrides.items() if k in MODEL_KEYS}
    return train, model


def _write_run_stamp(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    (out_dir / "run.json").write_text(text)
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    (out_dir / "run.hash").write_text(digest + "\n")


def _require_paths(args, *names) -> None:
    """Validate every referenced input path before any work starts."""
    for name in names:
        value = getattr(args, name, None)
        if value is None:
            continue
        path = Path(value)
        if not path.exists():
            raise ConfigError(f"--{name.replace('_', '-')}: no such path: {path}")


def _load_world(args):
    ds = toyworld.load_dataset(Path(args.data))
    vvocab = viscodec.load_vocabulary(Path(args.visual_vocab))
    return ds, vvocab


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    if args.scorer_pool:
        counts["scorer"] = args.scorer_pool
    ds = toyworld.generate_dataset(args.seed, counts,
                                   captions_per_image=args.captions_per_image)
    out = Path(args.out)
    toyworld.write_dataset(ds, out)
    _write_run_stamp(out, {"command": "gen-data", "seed": args.seed,
                           "counts": counts,
                           "captions_per_image": args.captions_per_image})
    total = sum(len(v) for v in ds.examples.values())
    print(f"wrote {total} examples to {out}")
    return 0


def cmd_build_vocab(args) -> int:
    _require_paths(args, "data")
    ds = toyworld.load_dataset(Path(args.data))
    examples = ds.split("train")[: args.sample] if args.sample else ds.split("train")
    feats = np.concatenate(
        [viscodec.extract_grid_features(e.image).features for e in examples], axis=0)
    vocab = viscodec.build_vocabulary(feats, k=args.k, seed=args.seed)
    viscodec.save_vocabulary(vocab, Path(args.out))
    print(f"built visual vocabulary K={args.k} from {len(feats)} patches "
          f"({len(vocab.objective_history)} iterations, "
          f"objective {vocab.objective_history[-1]:.2f}) -> {args.out}")
    return 0


def cmd_train_scorer(args) -> int:
    _require_paths(args, "data", "visual_vocab")
    ds, vvocab = _load_world(args)
    corpus = ds.split("train") + ds.examples.get("scorer", [])
    train_t = data.split_tensors(corpus, ds.vocab, vvocab)
    val_t = data.split_tensors(ds.split("val"), ds.vocab, vvocab)
    result = scorer.train_scorer(train_t.scorer_view(), val_t.scorer_view(),
                                 seed=args.seed, steps=args.steps,
                                 retrieval_threshold=args.threshold)
    checkpoint.save_checkpoint(Path(args.out), result.scorer, "scorer",
                               result.scorer.config,
                               {"retrieval_top1": result.final_retrieval,
                                "steps": args.steps, "seed": args.seed})
    print(f"scorer val retrieval top-1 {result.final_retrieval:.3f} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    _require_paths(args, "data", "visual_vocab", "scorer", "config")
    ds, vvocab = _load_world(args)
    scorer_model = None
    if args.scorer:
        scorer_model, _ = checkpoint.load_scorer(Path(args.scorer))
    train_over, model_kw = _split_overrides(
        resolve_overrides(Path(args.config) if args.config else None, args.set))
    out = Path(args.out)
    run = pipeline.run_preset(args.preset, ds, vvocab, scorer_model, out,
                              seed=args.seed, train_overrides=train_over,
                              model_kw={**pipeline.BATTERY_MODEL, **model_kw})
    _write_run_stamp(out, {"command": "train", "preset": args.preset,
                           "seed": args.seed, "overrides": train_over,
                           "model": model_kw})
    for name, rep in sorted(run.reports.items()):
        print(f"[{name}] " + " ".join(f"{k}={v:.4f}" for k, v in sorted(rep.values.items())))
    return 0


def cmd_generate(args) -> int:
    _require_paths(args, "data", "visual_vocab", "checkpoint")
    ds, vvocab = _load_world(args)
    model, meta = checkpoint.load_model(Path(args.checkpoint))
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schedule = sampling.MaskPredictSchedule(k=args.k)
    manifest = []
    if args.direction == "image":
        captions = ([args.caption.split()] if args.caption else
                    [ex.caption for ex in ds.split(args.split)[: args.limit]])
        for i, words in enumerate(captions):
            try:
                raster, tokens = sampling.generate_image(
                    model, words, ds.vocab, vvocab, schedule,
                    seed=derive_seed(args.seed, f"gen-{i}"))
            except KeyError as exc:
                raise ConfigError(str(exc)) from exc
            from PIL import Image
            path = out / f"gen-{i:05d}.png"
            Image.fromarray(np.round(raster * 255).astype(np.uint8), "RGB").save(path)
            np.savetxt(out / f"gen-{i:05d}.tokens", tokens[None], fmt="%d")
            manifest.append({"caption": " ".join(words), "seed": args.seed,
                             "k": args.k, "output": path.name})
    else:
        import torch
        examples = ds.split(args.split)[: args.limit]
        split_t = data.split_tensors(examples, ds.vocab, vvocab)
        ids = sampling.decode_caption(model, split_t.dense, split_t.boxes,
                                      mode="greedy", bos=ds.vocab.bos_id,
                                      eos=ds.vocab.eos_id, pad=ds.vocab.pad_id)
        for ex, row in zip(examples, ids):
            manifest.append({"id": ex.id, "caption": " ".join(ds.vocab.decode(row.tolist()))})
    (out / "manifest.jsonl").write_text(
        "\n".join(json.dumps(m, sort_keys=True) for m in manifest) + "\n")
    print(f"wrote {len(manifest)} generations to {out}")
    return 0


def cmd_evaluate(args) -> int:
    _require_paths(args, "data", "visual_vocab", "checkpoint", "scorer")
    ds, vvocab = _load_world(args)
    model, meta = checkpoint.load_model(Path(args.checkpoint))
    model.eval()
    scorer_model, _ = checkpoint.load_scorer(Path(args.scorer))
    split_t = data.split_tensors(ds.split(args.split), ds.vocab, vvocab)
    report = evaluate.evaluate_model(
        model, scorer_model, split_t, ds.vocab, vvocab, k=args.k, seed=args.seed,
        provenance={"checkpoint": str(args.checkpoint),
                    "config_hash": meta.get("config_hash"), "split": args.split})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.jsonl").write_text(report.to_json_lines())
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    _require_paths(args, "data", "visual_vocab", "scorer")
    ds, vvocab = _load_world(args)
    scorer_model, _ = checkpoint.load_scorer(Path(args.scorer))
    results = {}
    for seed in args.seeds:
        run = pipeline.run_preset(args.preset, ds, vvocab, scorer_model,
                                  Path(args.workdir) / f"seed{seed}", seed=seed)
        last = sorted(run.reports)[-1]
        results[seed] = run.reports[last].values
        print(f"seed {seed} [{last}] " +
              " ".join(f"{k}={v:.4f}" for k, v in sorted(results[seed].items())))
    medians = {k: float(np.median([r[k] for r in results.values()]))
               for k in next(iter(results.values()))}
    (Path(args.workdir) / "summary.json").write_text(
        json.dumps({"preset": args.preset, "seeds": list(args.seeds),
                    "per_seed": {str(k): v for k, v in results.items()},
                    "median": medians}, indent=2, sort_keys=True))
    print("median: " + " ".join(f"{k}={v:.4f}" for k, v in sorted(medians.items())))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bigen",
                                description="bi-directional image/text generation "
                                            "on a synthetic shapes world")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=200)
    g.add_argument("--test", type=int, default=200)
    g.add_argument("--scorer-pool", type=int, default=4000,
                   help="extra disjoint examples for scorer training (0 to skip)")
    g.add_argument("--captions-per-image", type=int, default=1, choices=(1, 5))
    g.set_defaults(fn=cmd_gen_data)

    b = sub.add_parser("build-vocab", help="K-means visual vocabulary")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--k", type=int, default=viscodec.DEFAULT_K)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--sample", type=int, default=0,
                   help="use only the first N train images (0 = all)")
    b.set_defaults(fn=cmd_build_vocab)

    s = sub.add_parser("train-scorer", help="train the consistency dual-encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--visual-vocab", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=6000)
    s.add_argument("--threshold", type=float, default=0.9)
    s.set_defaults(fn=cmd_train_scorer)

    t = sub.add_parser("train", help="two-stage training (preset selectable)")
    t.add_argument("--data", required=True)
    t.add_argument("--visual-vocab", required=True)
    t.add_argument("--scorer", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", default="full", choices=pipeline.PRESETS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(fn=cmd_train)

    gen = sub.add_parser("generate", help="generate captions or images")
    gen.add_argument("--data", required=True)
    gen.add_argument("--visual-vocab", required=True)
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--direction", choices=("image", "caption"), default="image")
    gen.add_argument("--caption", default=None, help="caption text (image direction)")
    gen.add_argument("--split", default="val")
    gen.add_argument("--limit", type=int, default=8)
    gen.add_argument("--k", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=cmd_generate)

    e = sub.add_parser("evaluate", help="full metric battery on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--visual-vocab", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scorer", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--k", type=int, default=4)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("ablate", help="run one ablation preset over seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--visual-vocab", required=True)
    a.add_argument("--scorer", required=True)
    a.add_argument("--preset", required=True, choices=pipeline.PRESETS)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--workdir", required=True)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, toyworld.SceneError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: missing file: {exc}", file=sys.stderr)
        return 2
    except (checkpoint.CheckpointError, scorer.ScorerTrainingError,
            training.TrainingDivergedError, viscodec.CodecError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
