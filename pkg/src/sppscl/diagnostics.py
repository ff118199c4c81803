"""Sentiment-distance statistics, classification metrics, and embedding export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norm >= 1e-12, x / np.where(norm >= 1e-12, norm, 1.0), 0.0)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


@dataclass
class DistanceReport:
    """Mean same-label Euclidean distances: image-image, text-text, image-text.

    A statistic with no contributing pairs is ``None`` (absent), never 0.
    """

    iid: float | None
    ttd: float | None
    itd: float | None
    iid_pairs: int
    ttd_pairs: int
    itd_pairs: int
    per_class: dict = field(default_factory=dict)

    @property
    def spread(self) -> float | None:
        """(max - min) / mean over the three overall averages."""
        vals = [self.iid, self.ttd, self.itd]
        if any(v is None for v in vals):
            return None
        mu = float(np.mean(vals))
        return float((max(vals) - min(vals)) / mu) if mu > 0 else 0.0

    @property
    def itd_gap(self) -> float | None:
        """|ITD - (IID + TTD) / 2|."""
        if None in (self.iid, self.ttd, self.itd):
            return None
        return abs(self.itd - 0.5 * (self.iid + self.ttd))

    def as_dict(self) -> dict:
        return {"iid": self.iid, "ttd": self.ttd, "itd": self.itd,
                "iid_pairs": self.iid_pairs, "ttd_pairs": self.ttd_pairs,
                "itd_pairs": self.itd_pairs, "spread": self.spread,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def modal_distances(image: np.ndarray, text: np.ndarray, labels, normalize: bool = True) -> DistanceReport:
    image = np.asarray(image, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if image.shape != text.shape or image.ndim != 2 or image.shape[0] != y.size:
        raise ValueError(f"embedding shapes {image.shape} / {text.shape} vs {y.size} labels")
    if normalize:
        image, text = _normalize_rows(image), _normalize_rows(text)

    sums = {"iid": 0.0, "ttd": 0.0, "itd": 0.0}
    counts = {"iid": 0, "ttd": 0, "itd": 0}
    per_class = {}
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        n = idx.size
        upper = np.triu_indices(n, 1)
        stats = {
            "iid": _pairwise(image[idx], image[idx])[upper],
            "ttd": _pairwise(text[idx], text[idx])[upper],
            "itd": _pairwise(image[idx], text[idx]).reshape(-1),
        }
        entry = {}
        for key, vals in stats.items():
            sums[key] += float(vals.sum())
            counts[key] += int(vals.size)
            entry[key] = float(vals.mean()) if vals.size else None
            entry[key + "_pairs"] = int(vals.size)
        per_class[int(cls)] = entry

    def avg(key):
        return sums[key] / counts[key] if counts[key] else None

    return DistanceReport(avg("iid"), avg("ttd"), avg("itd"),
                          counts["iid"], counts["ttd"], counts["itd"], per_class)


@dataclass
class ClassificationMetrics:
    accuracy: float
    weighted_f1: float
    macro_f1: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "weighted_f1": self.weighted_f1,
                "macro_f1": self.macro_f1, "confusion": self.confusion.tolist()}


def classification_metrics(predictions, labels, num_classes: int | None = None) -> ClassificationMetrics:
    """Accuracy plus support-weighted and unweighted mean per-class F1.

    Classes absent from both predictions and labels are left out of the
    macro average; 0/0 precision or recall counts as 0.
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.size != true.size:
        raise ValueError(f"{pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction set")
    k = int(max(pred.max(), true.max()) + 1)
    if num_classes is not None:
        k = max(k, num_classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    present = (support > 0) | (predicted > 0)
    return ClassificationMetrics(
        accuracy=float(tp.sum() / true.size),
        weighted_f1=float((f1 * support).sum() / support.sum()),
        macro_f1=float(f1[present].mean()),
        confusion=confusion,
    )


EXPORT_HEADER = ("sample_id", "modality", "label")


def export_embeddings(image: np.ndarray, text: np.ndarray, labels, path) -> Path:
    """Write one tab-separated row per (sample, modality), 9 significant digits."""
    image = np.asarray(image)
    text = np.asarray(text)
    y = np.asarray(labels).reshape(-1)
    if image.shape != text.shape or image.ndim != 2 or image.shape[0] != y.size:
        raise ValueError(f"embedding shapes {image.shape} / {text.shape} vs {y.size} labels")
    path = Path(path)
    dim = image.shape[1]
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(list(EXPORT_HEADER) + [f"e{j}" for j in range(dim)])
            for i in range(y.size):
                for tag, emb in (("image", image), ("text", text)):
                    writer.writerow([i, tag, int(y[i])] + [f"{v:.9g}" for v in emb[i]])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc.strerror or exc}") from exc
    return path


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_embeddings`: (image, text, labels)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    dim = len(rows[0]) - len(EXPORT_HEADER)
    body = rows[1:]
    image = [r for r in body if r[1] == "image"]
    text = [r for r in body if r[1] == "text"]

    def block(rs):
        return np.array([[float(v) for v in r[3:]] for r in rs], dtype=np.float64).reshape(len(rs), dim)

    labels = np.array([int(r[2]) for r in image], dtype=np.int64)
    return block(image), block(text), labels
