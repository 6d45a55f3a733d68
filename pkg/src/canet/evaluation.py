"""Task metrics and dataset-level prediction collection.

Sentiment decisions are scored per aspect mention (accuracy plus macro-F1
over the mode's classes); category detection is scored micro-averaged over
every (sentence, category) decision at a fixed threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EncodedInstance, polarity_classes
from .network import ForwardOutput, Network


class EvaluationError(ValueError):
    """Evaluation requested on unusable inputs."""


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    mode: str
    accuracy: float
    macro_f1: float
    per_class: dict[str, ClassMetrics]
    count: int


@dataclass(frozen=True)
class ACDReport:
    precision: float
    recall: float
    f1: float
    threshold: float
    count: int


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def alsc_metrics(predictions: list[int], golds: list[int], mode: str) -> MetricsReport:
    """Accuracy and per-class precision/recall/F1 over aspect-level decisions.

    A class with no gold and no predicted occurrences still contributes
    F1 = 0 to the macro average.
    """
    classes = polarity_classes(mode)
    if not golds:
        raise EvaluationError("empty evaluation set")
    if len(predictions) != len(golds):
        raise EvaluationError("predictions and golds differ in length")
    for y in golds:
        if not 0 <= y < len(classes):
            raise EvaluationError(f"gold class {y} outside {mode} classes")

    correct = sum(1 for p, g in zip(predictions, golds) if p == g)
    per_class = {}
    f1_sum = 0.0
    for idx, name in enumerate(classes):
        tp = sum(1 for p, g in zip(predictions, golds) if p == idx and g == idx)
        fp = sum(1 for p, g in zip(predictions, golds) if p == idx and g != idx)
        fn = sum(1 for p, g in zip(predictions, golds) if p != idx and g == idx)
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        per_class[name] = ClassMetrics(precision, recall, f1, tp + fn)
        f1_sum += f1

    return MetricsReport(mode=mode, accuracy=correct / len(golds),
                         macro_f1=f1_sum / len(classes),
                         per_class=per_class, count=len(golds))


def acd_metrics(score_rows: list[np.ndarray], label_rows: list[np.ndarray],
                threshold: float = 0.5) -> ACDReport:
    """Micro-averaged detection metrics: predict a category when its score
    reaches the threshold."""
    if not 0.0 < threshold < 1.0:
        raise EvaluationError(f"threshold must be in (0,1), got {threshold}")
    if len(score_rows) != len(label_rows):
        raise EvaluationError("scores and labels differ in length")
    tp = fp = fn = 0
    decisions = 0
    for scores, labels in zip(score_rows, label_rows):
        if len(scores) != len(labels):
            raise EvaluationError("score/label rows differ in width")
        for s, y in zip(scores, labels):
            decisions += 1
            predicted = s >= threshold
            if predicted and y == 1.0:
                tp += 1
            elif predicted:
                fp += 1
            elif y == 1.0:
                fn += 1
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return ACDReport(precision, recall, f1, threshold, decisions)


def predict_dataset(net: Network, encoded: list[EncodedInstance],
                    ) -> list[tuple[EncodedInstance, ForwardOutput]]:
    return [(inst, net.predict(inst)) for inst in encoded]


def evaluate_model(net: Network, encoded: list[EncodedInstance],
                   mode: str) -> tuple[MetricsReport, ACDReport | None]:
    """Score a model on a dataset; detection metrics only in multi-task mode."""
    predictions, golds = [], []
    score_rows, label_rows = [], []
    for inst, out in predict_dataset(net, encoded):
        for j, gold in enumerate(inst.mention_pols):
            predictions.append(int(np.argmax(out.alsc_probs[j])))
            golds.append(gold)
        if net.config.multi_task:
            score_rows.append(out.acd_scores)
            label_rows.append(inst.acd_labels)
    report = alsc_metrics(predictions, golds, mode)
    acd = acd_metrics(score_rows, label_rows) if net.config.multi_task else None
    return report, acd
