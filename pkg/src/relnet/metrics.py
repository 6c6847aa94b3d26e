"""Few-shot and zero-shot evaluation metrics and reports."""

from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from relnet.data.episodes import EpisodeSpec, sample_episode
from relnet.model import ScoreMatrix, classify

# evaluation episodes draw from their own seed domain so they never share a
# stream with training
EVAL_DOMAIN = 0x45564C


def confidence_interval(samples) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * sd / sqrt(n)`` with the n-1 standard deviation."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("confidence interval of an empty sample")
    mean = float(np.mean(x))
    if x.size < 2:
        return mean, 0.0
    return mean, float(1.96 * np.std(x, ddof=1) / math.sqrt(x.size))


def harmonic_mean(u: float, s: float) -> float:
    if u < 0 or s < 0:
        raise ValueError(f"harmonic mean of negative accuracies ({u}, {s})")
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


@dataclass
class EvalReport:
    """Accuracy vector (per episode, per class or per item) with its mean and 95% CI."""

    mode: str
    accuracies: list
    mean: float
    ci_half_width: float
    runtime: float
    config: dict = field(default_factory=dict)
    units: list | None = None

    @property
    def n_episodes(self) -> int:
        return len(self.accuracies)

    CSV_FIELDS = ("mode", "n", "mean", "ci_half_width", "runtime")

    def csv_header(self) -> str:
        return ",".join(self.CSV_FIELDS)

    def csv_row(self) -> str:
        values = (self.mode, self.n_episodes, self.mean, self.ci_half_width, self.runtime)
        return ",".join(_fmt(v) for v in values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_episodes"] = self.n_episodes
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class GzslReport:
    """Generalised zero-shot result: unseen accuracy u, seen accuracy s and their harmonic mean."""

    t1_unseen: float
    t1_seen: float
    harmonic: float
    per_class: dict
    runtime: float
    config: dict = field(default_factory=dict)
    mode: str = "gzsl"

    CSV_FIELDS = ("mode", "t1_unseen", "t1_seen", "harmonic", "runtime")

    def csv_header(self) -> str:
        return ",".join(self.CSV_FIELDS)

    def csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, f)) for f in self.CSV_FIELDS)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _score_array(result) -> np.ndarray:
    return result.scores if isinstance(result, ScoreMatrix) else np.asarray(result)


def episode_accuracy(model, episode) -> float:
    scores = _score_array(model.score_episode(episode, mode="eval"))
    preds = classify(scores, episode.class_ids)
    return float(np.mean([p == t for p, t in zip(preds, episode.query_labels)]))


def evaluate_fewshot(model, ds, spec: EpisodeSpec, n_episodes: int, seed: int = 0, threads: int = 1,
                     config: dict | None = None) -> EvalReport:
    """Mean query accuracy over ``n_episodes`` random episodes with a 95% CI.

    Episode ``i`` is drawn from its own generator seeded by ``(domain, seed,
    i)``, so results do not depend on ``threads`` and the accuracy vector is
    always assembled in episode order.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    start = time.perf_counter()

    def run(i: int) -> float:
        rng = np.random.default_rng([EVAL_DOMAIN, seed, i])
        return episode_accuracy(model, sample_episode(ds, spec, rng))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(run, range(n_episodes)))
    else:
        accs = [run(i) for i in range(n_episodes)]
    mean, half = confidence_interval(accs)
    echo = {"ways": spec.ways, "shots": spec.shots, "queries": spec.queries, "seed": seed, **(config or {})}
    return EvalReport("fewshot", accs, mean, half, time.perf_counter() - start, echo)


def _zsl_predictions(model, table, candidates: list, class_filter: list, batch_size: int):
    rows, labels = table.rows_for(class_filter)
    attrs = table.attributes_for(candidates)
    preds = []
    for lo in range(0, len(rows), batch_size):
        scores = _score_array(model.scores(attrs, rows[lo:lo + batch_size], candidates))
        preds.extend(classify(scores, candidates))
    return labels, preds


def _per_class(labels, preds, classes) -> dict:
    acc = {}
    for c in classes:
        hits = [p == c for p, t in zip(preds, labels) if t == c]
        if not hits:
            warnings.warn(f"class {c!r} has no test items and is excluded from the average", stacklevel=3)
            continue
        acc[c] = float(np.mean(hits))
    return acc


def evaluate_zsl(model, table, mode: str = "conventional", per_sample: bool = False,
                 batch_size: int = 256, config: dict | None = None):
    """Zero-shot top-1 accuracy.

    ``conventional`` scores unseen-class test items against unseen classes
    only and returns an :class:`EvalReport` whose mean is T1.  ``gzsl``
    scores every test item against all classes and returns a
    :class:`GzslReport`.  Accuracies are averaged per class unless
    ``per_sample`` is set, which averages over items instead.
    """
    start = time.perf_counter()
    unseen = table.ordered("unseen")
    seen = table.ordered("seen")
    echo = {"mode": mode, "per_sample": per_sample, **(config or {})}
    if mode == "conventional":
        labels, preds = _zsl_predictions(model, table, unseen, unseen, batch_size)
        if per_sample:
            accs = [float(p == t) for p, t in zip(preds, labels)]
            units = list(labels)
        else:
            per = _per_class(labels, preds, unseen)
            accs, units = list(per.values()), list(per)
        if not accs:
            raise ValueError("no unseen-class test items to evaluate")
        mean, half = confidence_interval(accs)
        return EvalReport("zsl", accs, mean, half, time.perf_counter() - start, echo, units)
    if mode != "gzsl":
        raise ValueError(f"unknown ZSL mode {mode!r}")
    candidates = table.ordered("all")
    labels, preds = _zsl_predictions(model, table, candidates, candidates, batch_size)
    per = _per_class(labels, preds, candidates)

    def side(classes):
        if per_sample:
            hits = [p == t for p, t in zip(preds, labels) if t in classes]
            return float(np.mean(hits)) if hits else 0.0
        vals = [per[c] for c in classes if c in per]
        return float(np.mean(vals)) if vals else 0.0

    u, s = side(set(unseen)), side(set(seen))
    return GzslReport(u, s, harmonic_mean(u, s), per, time.perf_counter() - start, echo)
