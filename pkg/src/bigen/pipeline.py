"""Run orchestration: presets, staged training, checkpointing, evaluation.

A preset names one switch away from the full configuration (mirroring the
ablation battery): feature routing (dense_only / discrete_only), sequence
stage (no_stage2 / no_clip_loss), or architecture (separate_models). The
effective config is grouped by those switches so presets can be diffed.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, data, evaluate, toyworld, training, viscodec
from .model import ModelConfig, UnifiedModel, parameter_census, separate_models_param_count
from .seeding import derive_seed

PRESETS = ("full", "dense_only", "discrete_only", "no_stage2",
           "no_clip_loss", "separate_models")

# desk-scale training settings used by `ablate` and the acceptance battery;
# TrainConfig defaults keep the reference large-scale rates
BATTERY_OVERRIDES = {
    "lr_base": 3e-4,
    "stage2_lr": 3e-5,
    "batch_stage1": 16,
    "batch_stage2": 16,
    "steps_stage1": 1600,
    "steps_stage2": 500,
}
BATTERY_MODEL = {"d_model": 64, "layers": 2, "heads": 4, "ff": 256}


def preset_effective_config(preset: str, base_train: training.TrainConfig | None = None,
                            model_kw: dict | None = None) -> dict:
    """Grouped view of what a preset runs; presets differ from `full` in
    exactly one group."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    cfg = dataclasses.replace(base_train or training.TrainConfig())
    groups = {
        "feature_routing": {"caption_features": "dense", "synthesis_features": "discrete"},
        "stage2": {"enabled": True, "text_objective": "scst",
                   "image_objective": "grid_ce+clip"},
        "architecture": {"unified": True},
        "optimization": {k: getattr(cfg, k) for k in
                         ("lr_base", "warmup_frac", "stage2_lr", "weight_decay",
                          "label_smoothing", "grad_clip", "batch_stage1",
                          "batch_stage2", "steps_stage1", "steps_stage2",
                          "gumbel_tau")},
        "model": dict(BATTERY_MODEL if model_kw is None else model_kw),
    }
    if preset == "dense_only":
        groups["feature_routing"] = {"caption_features": "dense",
                                     "synthesis_features": "dense"}
    elif preset == "discrete_only":
        groups["feature_routing"] = {"caption_features": "discrete",
                                     "synthesis_features": "discrete"}
    elif preset == "no_stage2":
        groups["stage2"] = {"enabled": False, "text_objective": None,
                            "image_objective": None}
    elif preset == "no_clip_loss":
        groups["stage2"] = {"enabled": True, "text_objective": "scst",
                            "image_objective": "grid_ce"}
    elif preset == "separate_models":
        groups["architecture"] = {"unified": False}
    return groups


def train_config_for_preset(preset: str, seed: int,
                            overrides: dict | None = None) -> training.TrainConfig:
    kw = dict(BATTERY_OVERRIDES)
    kw.update(overrides or {})
    kw["seed"] = seed
    cfg = training.TrainConfig(**kw)
    if preset == "dense_only":
        cfg.caption_features = "dense"
        cfg.synthesis_features = "dense"
    elif preset == "discrete_only":
        cfg.caption_features = "discrete"
        cfg.synthesis_features = "discrete"
    elif preset == "no_stage2":
        cfg.stage2_text = False
        cfg.stage2_image = False
    elif preset == "no_clip_loss":
        cfg.use_clip_loss = False
    cfg.validate()
    return cfg


@dataclass
class PresetRun:
    preset: str
    seed: int
    census: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)   # name -> path
    reports: dict = field(default_factory=dict)       # name -> MetricReport
    timings: dict = field(default_factory=dict)


def _new_model(model_kw: dict, vocab_size: int, image_vocab: int, seed: int,
               **head_kw) -> UnifiedModel:
    torch.manual_seed(derive_seed(seed, "init"))
    cfg = ModelConfig(text_vocab=vocab_size, image_vocab=image_vocab,
                      **model_kw, **head_kw)
    return UnifiedModel(cfg)


def run_preset(preset: str, ds: toyworld.Dataset, visual_vocab, scorer,
               workdir: Path, seed: int = 0, train_overrides: dict | None = None,
               model_kw: dict | None = None, eval_split: str = "val",
               k: int = 4, log_to_disk: bool = True,
               stage1_init: Path | None = None,
               tensor_cache: dict | None = None) -> PresetRun:
    """Train a preset end to end and evaluate at each stage boundary.

    `stage1_init` loads an existing stage-1 checkpoint instead of training
    stage 1 (valid when the preset shares the full stage-1 configuration,
    e.g. no_clip_loss). `tensor_cache` shares SplitTensors across runs.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    model_kw = dict(BATTERY_MODEL if model_kw is None else model_kw)
    cfg = train_config_for_preset(preset, seed, train_overrides)
    vocab = ds.vocab
    if tensor_cache is None:
        tensor_cache = {}
    for split in ("train", eval_split):
        if split not in tensor_cache:
            tensor_cache[split] = data.split_tensors(ds.split(split), vocab,
                                                     visual_vocab)
    tensors = tensor_cache
    centroids = torch.as_tensor(visual_vocab.centroids, dtype=torch.float32)
    run = PresetRun(preset=preset, seed=seed)
    (workdir / "config.json").write_text(json.dumps({
        "preset": preset, "seed": seed, "model": model_kw,
        "train": dataclasses.asdict(cfg),
        "effective": preset_effective_config(preset, cfg, model_kw),
    }, indent=2, sort_keys=True, default=str))

    def log(name):
        return training.TrainLog(path=workdir / f"{name}.log.jsonl") \
            if log_to_disk else training.TrainLog()

    def ckpt(model, name, stage, extra=None):
        path = workdir / f"{name}.npz"
        checkpoint.save_checkpoint(path, model, "unified_model", model.config,
                                   {"stage": stage, "preset": preset, "seed": seed,
                                    **(extra or {})})
        run.checkpoints[name] = path

    def report(model, name, caption_model=None):
        rep = evaluate.evaluate_model(
            caption_model or model, scorer, tensors[eval_split], vocab, visual_vocab,
            caption_features=cfg.caption_features, k=k,
            seed=derive_seed(seed, "eval"),
            provenance={"preset": preset, "stage": name, "split": eval_split})
        run.reports[name] = rep
        if log_to_disk:
            (workdir / f"report_{name}.jsonl").write_text(rep.to_json_lines())
            (workdir / f"report_{name}.txt").write_text(rep.to_text())
        return rep

    t0 = time.time()
    if preset == "separate_models":
        text_model = _new_model(model_kw, len(vocab), visual_vocab.size, seed,
                                with_image_head=False)
        image_model = _new_model(model_kw, len(vocab), visual_vocab.size, seed + 1,
                                 with_text_head=False)
        training.train_stage1(text_model, tensors["train"], cfg, log("stage1_text"),
                              directions=("text",))
        training.train_stage1(image_model, tensors["train"], cfg, log("stage1_image"),
                              directions=("image",))
        run.timings["stage1"] = time.time() - t0
        t0 = time.time()
        training.train_stage2(text_model, tensors["train"], cfg, scorer=scorer,
                              centroids=centroids, vocab=vocab,
                              log=log("stage2_text"), directions=("text",))
        training.train_stage2(image_model, tensors["train"], cfg, scorer=scorer,
                              centroids=centroids, vocab=vocab,
                              log=log("stage2_image"), directions=("image",))
        run.timings["stage2"] = time.time() - t0
        ckpt(text_model, "stage2_text_model", 2)
        ckpt(image_model, "stage2_image_model", 2)
        run.census = {
            "total": (parameter_census(text_model)["total"]
                      + parameter_census(image_model)["total"]),
            "text_model": parameter_census(text_model),
            "image_model": parameter_census(image_model),
        }
        # captions come from the text model, images from the image model
        rep = evaluate.evaluate_model(image_model, scorer, tensors[eval_split],
                                      vocab, visual_vocab,
                                      caption_features=cfg.caption_features,
                                      k=k, seed=derive_seed(seed, "eval"),
                                      caption_model=text_model,
                                      provenance={"preset": preset, "stage": "stage2",
                                                  "split": eval_split})
        run.reports["stage2"] = rep
        if log_to_disk:
            (workdir / "report_stage2.jsonl").write_text(rep.to_json_lines())
        return run

    if stage1_init is not None:
        model, _ = checkpoint.load_model(stage1_init)
        run.census = parameter_census(model)
        run.census["separate_reference"] = separate_models_param_count(model.config)
        run.checkpoints["stage1"] = Path(stage1_init)
    else:
        model = _new_model(model_kw, len(vocab), visual_vocab.size, seed)
        run.census = parameter_census(model)
        run.census["separate_reference"] = separate_models_param_count(model.config)
        training.train_stage1(model, tensors["train"], cfg, log("stage1"))
        run.timings["stage1"] = time.time() - t0
        ckpt(model, "stage1", 1)
        report(model, "stage1")
    if cfg.stage2_text or cfg.stage2_image:
        t0 = time.time()
        training.train_stage2(model, tensors["train"], cfg, scorer=scorer,
                              centroids=centroids, vocab=vocab, log=log("stage2"))
        run.timings["stage2"] = time.time() - t0
        ckpt(model, "stage2", 2)
        report(model, "stage2")
    return run
