"""Angular-error metric, evaluation harness, ablation rules, K-sweep."""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ContractError, ConfigError, LeakageError
from .model import WEIGHTING_RULES, predict_direction
from .retrieval import TaskSynonymTable, cosine_topk, filter_by_task

DEGENERATE_ERROR_DEG = 180.0


def mae(a, b):
    """Angular error in degrees between two unit 2D vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ContractError(f"mae expects unit vectors, got norm "
                                f"{np.linalg.norm(v)!r}")
    return float(np.degrees(np.arccos(np.clip(a @ b, -1.0, 1.0))))


def ablation(variant):
    """Validate a Table-style weighting-rule name and return it."""
    if variant not in WEIGHTING_RULES:
        raise ConfigError(f"unknown ablation variant {variant!r}; "
                          f"choose from {WEIGHTING_RULES}")
    return variant


@dataclass
class SampleRecord:
    query_id: str
    task: str
    predicted: tuple  # unit vector, or None if degenerate
    ground_truth: tuple
    error_deg: float
    degenerate: bool = False


@dataclass
class EvalReport:
    per_task: dict = field(default_factory=dict)  # task -> mean degrees
    overall: float = 0.0
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        payload = asdict(self)
        payload["records"] = [asdict(r) for r in self.records]
        return json.dumps(payload, indent=2)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def evaluate(params, cfg, test_scenes, memory, k, synonyms=None,
             weighting="full", metadata=None):
    """Per-query retrieval + direction prediction + MAE.

    Raises LeakageError if any test scene id appears in the memory.
    Degenerate (near-zero raw) predictions score 180 degrees.
    """
    ablation(weighting)
    synonyms = synonyms or TaskSynonymTable()
    memory_ids = {e.source_id for e in memory.entries if e.source_id}
    leaked = memory_ids & {s.scene_id for s in test_scenes}
    if leaked:
        raise LeakageError(f"test scenes present in memory: {sorted(leaked)[:5]}")

    records = []
    for scene in sorted(test_scenes, key=lambda s: s.scene_id):
        refs = []
        sims = []
        if k > 0:
            subset = filter_by_task(memory, scene.task, synonyms)
            result = cosine_topk(scene.embedding, memory, subset, k=k)
            refs = [(e.image, e.affordance.direction, s)
                    for _, e, s in result.entries]
            sims = result.similarities
        _, unit = predict_direction(params, cfg, scene.image, refs,
                                    weighting=weighting)
        if unit is None:
            err = DEGENERATE_ERROR_DEG
            records.append(SampleRecord(scene.scene_id, scene.task, None,
                                        scene.direction, err, degenerate=True))
        else:
            err = mae(unit, scene.direction)
            records.append(SampleRecord(scene.scene_id, scene.task,
                                        tuple(unit), scene.direction, err))

    per_task = {}
    for rec in records:
        per_task.setdefault(rec.task, []).append(rec.error_deg)
    report = EvalReport(
        per_task={t: float(np.mean(v)) for t, v in sorted(per_task.items())},
        overall=float(np.mean([r.error_deg for r in records])),
        records=records,
        metadata=dict(metadata or {}, k=k, weighting=weighting,
                      n_queries=len(records)))
    return report


def k_sweep(models, test_scenes, memory, synonyms=None, weighting="full"):
    """MAE per K for a family of (K -> (params, cfg)) trained models.

    Returns rows of (k, overall MAE); plot-ready via save_sweep.
    """
    rows = []
    for k in sorted(models):
        params, cfg = models[k]
        report = evaluate(params, cfg, test_scenes, memory, k,
                          synonyms=synonyms, weighting=weighting)
        rows.append((k, report.overall))
    return rows


def save_sweep(rows, path):
    with open(path, "w") as fh:
        fh.write("k\tmae_deg\n")
        for k, value in rows:
            fh.write(f"{k}\t{value!r}\n")
