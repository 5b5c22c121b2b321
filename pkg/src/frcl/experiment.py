"""Experiment runner: configuration, metrics streams, and summary scoring.

A run executes one engine configuration over `repetitions` seeds, writes an
append-only JSONL metrics stream per seed, and aggregates a flat JSON
summary (mean and standard deviation of the final per-task-mean accuracy,
plus boundary precision/recall/F1 in detected mode).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import datasets
from .boundary import DetectorState
from .engine import Engine, EngineConfig
from .selection import SelectionConfig

BOUNDARY_MATCH_TOLERANCE = 10
VALIDATION_SIZE = 10_000


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str  # split_mnist | permuted_mnist | blobs
    engine: EngineConfig
    repetitions: int = 1
    output: str = "out"
    data: dict = field(default_factory=dict)  # IDX paths for the MNIST datasets
    permuted_task_count: int = 10
    blobs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dataset not in ("split_mnist", "permuted_mnist", "blobs"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed JSON (field names match 1:1)."""
    engine_raw = dict(raw.get("engine", {}))
    if "selection" in engine_raw:
        engine_raw["selection"] = SelectionConfig(**engine_raw["selection"])
    if "detector" in engine_raw:
        engine_raw["detector"] = DetectorState(**engine_raw["detector"])
    if "hidden_sizes" in engine_raw:
        engine_raw["hidden_sizes"] = tuple(engine_raw["hidden_sizes"])
    return ExperimentConfig(
        dataset=raw["dataset"],
        engine=EngineConfig(**engine_raw),
        repetitions=raw.get("repetitions", 1),
        output=raw.get("output", "out"),
        data=raw.get("data", {}),
        permuted_task_count=raw.get("permuted_task_count", 10),
        blobs=raw.get("blobs", {}),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


class MetricsWriter:
    """Append-only JSONL sink; one object per record."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def match_boundaries(detections, truths, tolerance=BOUNDARY_MATCH_TOLERANCE) -> int:
    """Size of a maximum matching between detections and true boundaries.

    A detection may claim a truth at most `tolerance` steps away; each
    truth is matched at most once (augmenting-path bipartite matching).
    """
    detections = list(detections)
    truths = list(truths)
    owner = [-1] * len(truths)  # truth index -> detection index

    def try_assign(d: int, seen: list[bool]) -> bool:
        for t, truth in enumerate(truths):
            if abs(detections[d] - truth) <= tolerance and not seen[t]:
                seen[t] = True
                if owner[t] < 0 or try_assign(owner[t], seen):
                    owner[t] = d
                    return True
        return False

    matched = 0
    for d in range(len(detections)):
        if try_assign(d, [False] * len(truths)):
            matched += 1
    return matched


def score_boundaries(detections, truths, tolerance=BOUNDARY_MATCH_TOLERANCE) -> dict:
    """Precision/recall/F1 of detected steps against true boundary steps."""
    tp = match_boundaries(detections, truths, tolerance)
    fp = len(detections) - tp
    fn = len(truths) - tp
    precision = tp / max(tp + fp, 1)
    recall = tp / max(tp + fn, 1)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1,
            "true_positives": tp, "false_positives": fp, "false_negatives": fn}


def _load_mnist_tasks(cfg: ExperimentConfig, final: bool, rep_seed: int) -> datasets.TaskStream:
    train_X, train_y = datasets.load_idx(cfg.data["train_images"], cfg.data["train_labels"])
    if final:
        test_X, test_y = datasets.load_idx(cfg.data["test_images"], cfg.data["test_labels"])
    else:
        # hold out the tail of the training files as the validation split
        cut = train_X.shape[0] - VALIDATION_SIZE
        train_X, test_X = train_X[:cut], train_X[cut:]
        train_y, test_y = train_y[:cut], train_y[cut:]
    if cfg.dataset == "split_mnist":
        return datasets.make_split_mnist(train_X, train_y, test_X, test_y)
    return datasets.make_permuted_mnist(
        train_X, train_y, test_X, test_y,
        task_count=cfg.permuted_task_count, seed=rep_seed,
    )


def build_tasks(cfg: ExperimentConfig, final: bool, rep_seed: int) -> datasets.TaskStream:
    if cfg.dataset == "blobs":
        return datasets.make_blobs(seed=rep_seed, **cfg.blobs)
    return _load_mnist_tasks(cfg, final, rep_seed)


def run_single(cfg: ExperimentConfig, seed: int, metrics_path, final: bool = False) -> dict:
    """One seeded repetition; returns the final record (also written last)."""
    stream = build_tasks(cfg, final, rep_seed=seed)
    engine_cfg = replace(cfg.engine, seed=seed)
    writer = MetricsWriter(metrics_path)
    try:
        engine = Engine(engine_cfg, input_dim=stream.tasks[0].train_X.shape[1], metrics=writer)
        true_boundaries: list[int] = []
        detections: list[int] = []
        if engine_cfg.boundary_mode == "detected":
            batches, true_boundaries = datasets.minibatch_stream(
                stream, engine_cfg.train_steps_per_task, engine_cfg.batch_size, seed=seed
            )
            seen: list[int] = []
            inner = writer

            def tap(record):
                if record["kind"] == "detection":
                    seen.append(record["step"])
                inner(record)

            engine.metrics = tap
            engine.run_stream_detected(batches, stream.tasks[0].likelihood)
            detections = seen
        else:
            for task in stream.tasks:
                engine.run_task(task.train_X, task.train_y, task.likelihood)
        eval_count = min(len(stream.tasks), engine.task_count)
        per_task, mean_acc = engine.evaluate(stream.eval_sets()[:eval_count])
        final_record = {
            "kind": "final",
            "step": engine.step_count,
            "task_id": engine.task_count,
            "seed": seed,
            "per_task_accuracy": per_task,
            "mean_accuracy": mean_acc,
            "true_boundaries": true_boundaries,
            "detections": detections,
        }
        if engine_cfg.boundary_mode == "detected":
            final_record["boundary_score"] = score_boundaries(detections, true_boundaries)
        writer(final_record)
    finally:
        writer.close()
    return final_record


def run_experiment(cfg: ExperimentConfig, final: bool = False) -> dict:
    """Run all repetitions, write metrics and the aggregate summary."""
    os.makedirs(cfg.output, exist_ok=True)
    finals = []
    for rep in range(cfg.repetitions):
        seed = cfg.engine.seed + rep
        metrics_path = os.path.join(cfg.output, f"metrics_seed{seed}.jsonl")
        finals.append(run_single(cfg, seed, metrics_path, final=final))
    accuracies = np.array([f["mean_accuracy"] for f in finals])
    summary = {
        "dataset": cfg.dataset,
        "mode": cfg.engine.mode,
        "boundary_mode": cfg.engine.boundary_mode,
        "criterion": cfg.engine.selection.criterion,
        "points_per_task": cfg.engine.selection.M,
        "repetitions": cfg.repetitions,
        "seeds": [f["seed"] for f in finals],
        "mean_accuracy": float(accuracies.mean()),
        "std_accuracy": float(accuracies.std()),
        "per_seed_accuracy": accuracies.tolist(),
    }
    if cfg.engine.boundary_mode == "detected":
        scores = [f["boundary_score"] for f in finals]
        for key in ("precision", "recall", "f1"):
            summary[f"boundary_{key}"] = float(np.mean([s[key] for s in scores]))
    with open(os.path.join(cfg.output, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary
