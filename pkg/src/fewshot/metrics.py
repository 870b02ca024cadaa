"""Running statistics and episodic classification reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "RunningStats",
    "PredictionRecord",
    "classification_report",
    "format_report",
]


class RunningStats:
    """Streaming mean/variance (Welford's update; sample variance)."""

    __slots__ = ("n", "mean", "_m2")

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self._m2 = 0.0

    def push(self, x: float) -> None:
        x = float(x)
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self._m2 += delta * (x - self.mean)

    @property
    def var(self) -> float:
        return self._m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.var)


@dataclass(frozen=True)
class PredictionRecord:
    episode: int
    true_class: str
    predicted_class: str


def classification_report(records: list[PredictionRecord]) -> dict:
    """Aggregate episodic predictions into per-class and overall metrics.

    Returns per-class precision/recall/F1/support, micro accuracy over
    all predictions, macro and support-weighted averages, and the
    episodic accuracy: the mean of per-episode accuracies, the figure
    conventionally quoted for few-shot models.
    """
    if not records:
        raise ValueError("classification_report: no records")

    class_ids = sorted({r.true_class for r in records} | {r.predicted_class for r in records})
    tp = {c: 0 for c in class_ids}
    fp = {c: 0 for c in class_ids}
    fn = {c: 0 for c in class_ids}
    support = {c: 0 for c in class_ids}
    per_episode: dict[int, list[bool]] = {}
    correct = 0
    for r in records:
        hit = r.true_class == r.predicted_class
        per_episode.setdefault(r.episode, []).append(hit)
        support[r.true_class] += 1
        if hit:
            tp[r.true_class] += 1
            correct += 1
        else:
            fn[r.true_class] += 1
            fp[r.predicted_class] += 1

    classes = {}
    for c in class_ids:
        p_den = tp[c] + fp[c]
        r_den = tp[c] + fn[c]
        precision = tp[c] / p_den if p_den else 0.0
        recall = tp[c] / r_den if r_den else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        classes[c] = {"precision": precision, "recall": recall, "f1": f1, "support": support[c]}

    total = len(records)
    n_cls = len(class_ids)
    macro = {
        "precision": sum(v["precision"] for v in classes.values()) / n_cls,
        "recall": sum(v["recall"] for v in classes.values()) / n_cls,
        "f1": sum(v["f1"] for v in classes.values()) / n_cls,
        "support": total,
    }
    weighted = {
        "precision": sum(v["precision"] * v["support"] for v in classes.values()) / total,
        "recall": sum(v["recall"] * v["support"] for v in classes.values()) / total,
        "f1": sum(v["f1"] * v["support"] for v in classes.values()) / total,
        "support": total,
    }
    episode_accs = [sum(hits) / len(hits) for hits in per_episode.values()]
    return {
        "classes": classes,
        "accuracy": correct / total,
        "episodic_accuracy": sum(episode_accs) / len(episode_accs),
        "macro": macro,
        "weighted": weighted,
        "episodes": len(per_episode),
        "total": total,
    }


def format_report(report: dict) -> str:
    """Render a report dict as a fixed-width text table."""
    name_w = max([len(c) for c in report["classes"]] + [len("weighted avg")])
    header = f"{'':<{name_w}}  {'precision':>9}  {'recall':>9}  {'f1':>9}  {'support':>8}"
    lines = [header, ""]
    for c, v in report["classes"].items():
        lines.append(
            f"{c:<{name_w}}  {v['precision']:>9.4f}  {v['recall']:>9.4f}  "
            f"{v['f1']:>9.4f}  {v['support']:>8d}"
        )
    lines.append("")
    lines.append(f"{'accuracy':<{name_w}}  {'':>9}  {'':>9}  {report['accuracy']:>9.4f}  {report['total']:>8d}")
    for label, key in (("macro avg", "macro"), ("weighted avg", "weighted")):
        v = report[key]
        lines.append(
            f"{label:<{name_w}}  {v['precision']:>9.4f}  {v['recall']:>9.4f}  "
            f"{v['f1']:>9.4f}  {v['support']:>8d}"
        )
    lines.append("")
    lines.append(
        f"episodic accuracy: {report['episodic_accuracy']:.4f} over {report['episodes']} episodes"
    )
    return "\n".join(lines)
