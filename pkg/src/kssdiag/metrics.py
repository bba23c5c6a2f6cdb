"""Diagnosis metrics and report export.

Accuracy is macro-averaged: each class contributes its own accuracy with
equal weight, and the seen/unseen aggregates average over their class
groups. The harmonic mean of the two aggregates is the headline figure.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import AttributeMatrix
from .gate import COARSE, FINE_SEEN, FINE_UNSEEN

PATH_TAGS = (COARSE, FINE_SEEN, FINE_UNSEEN)


@dataclass(eq=False)
class DiagnosisReport:
    class_ids: tuple
    acc_per_class: Dict[int, float]
    acc_s: float
    acc_u: float
    har: float
    confusion: np.ndarray
    path_counts: Dict[str, int]
    config_hash: Optional[str] = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiagnosisReport):
            return NotImplemented
        return (
            self.class_ids == other.class_ids
            and self.acc_per_class == other.acc_per_class
            and self.acc_s == other.acc_s
            and self.acc_u == other.acc_u
            and self.har == other.har
            and np.array_equal(self.confusion, other.confusion)
            and self.path_counts == other.path_counts
            and self.config_hash == other.config_hash
        )


def per_class_accuracy(true: np.ndarray, predicted: np.ndarray,
                       class_ids: Sequence[int]) -> Dict[int, float]:
    """Fraction correct per class; classes without test samples are omitted."""
    true = np.asarray(true)
    predicted = np.asarray(predicted)
    if true.shape != predicted.shape:
        raise ValueError(
            f"label vectors disagree in length: {true.shape} vs {predicted.shape}")
    out: Dict[int, float] = {}
    for cid in class_ids:
        mask = true == cid
        if mask.any():
            out[int(cid)] = float((predicted[mask] == cid).mean())
    return out


def harmonic_mean(acc_s: float, acc_u: float) -> float:
    """2ab/(a+b), the balance of seen and unseen accuracy; 0 when either is 0."""
    if acc_s == 0.0 or acc_u == 0.0:
        return 0.0
    return 2.0 * acc_s * acc_u / (acc_s + acc_u)


def confusion_matrix(true: np.ndarray, predicted: np.ndarray,
                     class_ids: Sequence[int]) -> np.ndarray:
    """Counts with true classes as rows and predicted classes as columns,
    both in the given class order."""
    index = {int(c): i for i, c in enumerate(class_ids)}
    out = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)
    for t, p in zip(np.asarray(true), np.asarray(predicted)):
        if int(t) not in index or int(p) not in index:
            raise ValueError(f"label outside the class set: true={t} predicted={p}")
        out[index[int(t)], index[int(p)]] += 1
    return out


def _macro(acc: Dict[int, float], ids: Sequence[int]) -> float:
    values = [acc[c] for c in ids if c in acc]
    return float(np.mean(values)) if values else 0.0


def build_report(true: np.ndarray, predicted: np.ndarray,
                 matrix: AttributeMatrix, paths: Sequence[str],
                 config_hash: Optional[str] = None) -> DiagnosisReport:
    true = np.asarray(true)
    predicted = np.asarray(predicted)
    if len(paths) != true.shape[0]:
        raise ValueError("one path tag per sample is required")
    unknown = set(paths) - set(PATH_TAGS)
    if unknown:
        raise ValueError(f"unknown path tag(s): {sorted(unknown)}")
    acc = per_class_accuracy(true, predicted, matrix.class_ids)
    acc_s = _macro(acc, matrix.seen_ids)
    acc_u = _macro(acc, matrix.unseen_ids)
    return DiagnosisReport(
        class_ids=tuple(int(c) for c in matrix.class_ids),
        acc_per_class=acc,
        acc_s=acc_s,
        acc_u=acc_u,
        har=harmonic_mean(acc_s, acc_u),
        confusion=confusion_matrix(true, predicted, matrix.class_ids),
        path_counts={tag: int(sum(p == tag for p in paths)) for tag in PATH_TAGS},
        config_hash=config_hash,
    )


def report_to_dict(report: DiagnosisReport) -> dict:
    return {
        "class_ids": list(report.class_ids),
        "acc_per_class": {str(c): v for c, v in sorted(report.acc_per_class.items())},
        "acc_s": report.acc_s,
        "acc_u": report.acc_u,
        "har": report.har,
        "percent": {
            "acc_s": 100.0 * report.acc_s,
            "acc_u": 100.0 * report.acc_u,
            "har": 100.0 * report.har,
        },
        "confusion": report.confusion.tolist(),
        "path_counts": dict(sorted(report.path_counts.items())),
        "config_hash": report.config_hash,
    }


def report_from_dict(payload: dict) -> DiagnosisReport:
    return DiagnosisReport(
        class_ids=tuple(int(c) for c in payload["class_ids"]),
        acc_per_class={int(c): v for c, v in payload["acc_per_class"].items()},
        acc_s=payload["acc_s"],
        acc_u=payload["acc_u"],
        har=payload["har"],
        confusion=np.array(payload["confusion"], dtype=np.int64),
        path_counts=dict(payload["path_counts"]),
        config_hash=payload.get("config_hash"),
    )


def export_report(report: DiagnosisReport, path: str, format: str = "json") -> None:
    """Deterministic serialization: same report, same bytes."""
    if format == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif format == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            writer.writerow(["acc_s", repr(report.acc_s)])
            writer.writerow(["acc_u", repr(report.acc_u)])
            writer.writerow(["har", repr(report.har)])
            for tag in PATH_TAGS:
                writer.writerow([f"path_{tag}", report.path_counts.get(tag, 0)])
            for cid in sorted(report.acc_per_class):
                writer.writerow([f"acc_class_{cid}", repr(report.acc_per_class[cid])])
            writer.writerow([])
            writer.writerow(["confusion"] + [str(c) for c in report.class_ids])
            for cid, row in zip(report.class_ids, report.confusion):
                writer.writerow([str(cid)] + [str(int(v)) for v in row])
    else:
        raise ValueError(f"unsupported report format {format!r}")


def export_projections(projector, samples: np.ndarray, labels: np.ndarray,
                       path: str) -> None:
    """Write the knowledge-space coordinates of each sample with its label,
    for external plotting."""
    z = projector.predict(np.atleast_2d(samples)) if samples.shape[0] else \
        np.zeros((0, projector.n_attributes))
    labels = np.asarray(labels)
    if z.shape[0] != labels.shape[0]:
        raise ValueError("one label per sample is required")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"z_{k + 1}" for k in range(z.shape[1])] + ["label"])
        for row, label in zip(z, labels):
            writer.writerow([repr(float(v)) for v in row] + [str(int(label))])
