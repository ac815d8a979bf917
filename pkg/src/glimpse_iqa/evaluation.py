"""Correlation metrics, confusion matrices and the split-median protocol."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import permutation_test, rankdata

from .imgproc import loc_to_pixel
from .net import ModelConfig, forward_episode, predict_class


class DegenerateInputError(ValueError):
    """Correlation is undefined because an input vector is constant."""


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size < 2:
        raise ValueError("need at least two values")
    return p, t


def lcc(pred, truth) -> float:
    """Pearson linear correlation."""
    p, t = _check_pair(pred, truth)
    dp, dt = p - p.mean(), t - t.mean()
    vp, vt = dp @ dp, dt @ dt
    if vp == 0 or vt == 0:
        raise DegenerateInputError("correlation of a constant vector is undefined")
    # one square root of the product keeps identical inputs at exactly 1
    return float(np.clip((dp @ dt) / np.sqrt(vp * vt), -1.0, 1.0))


def srocc(pred, truth) -> float:
    """Spearman rank correlation; ties get average ranks."""
    p, t = _check_pair(pred, truth)
    return lcc(rankdata(p), rankdata(t))


@dataclass
class MetricReport:
    srocc: float | None
    lcc: float | None
    accuracy: float
    confusion: np.ndarray  # rows: true class, cols: predicted
    per_type_srocc: dict[int, float | None] = field(default_factory=dict)
    class_names: list[str] = field(default_factory=list)
    predicted_scores: np.ndarray | None = field(default=None, repr=False)
    predicted_classes: np.ndarray | None = field(default=None, repr=False)

    @property
    def degenerate(self) -> bool:
        return self.srocc is None or self.lcc is None

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def scalars(self) -> dict[str, float | None]:
        return {"srocc": self.srocc, "lcc": self.lcc, "accuracy": self.accuracy}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.scalars().items():
            w.writerow([k, _fmt(v)])
        w.writerow(["n", self.n])
        for k, v in sorted(self.per_type_srocc.items()):
            w.writerow([f"srocc[{self._name(k)}]", _fmt(v)])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.confusion.shape[0]
        w.writerow(["true\\pred"] + [self._name(j) for j in range(k)])
        for i in range(k):
            w.writerow([self._name(i)] + [int(c) for c in self.confusion[i]])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"images      {self.n}",
            f"SROCC       {_fmt(self.srocc)}",
            f"LCC         {_fmt(self.lcc)}",
            f"accuracy    {self.accuracy:.4f}",
        ]
        if self.degenerate:
            lines.append("warning: constant predictions, correlation undefined")
        for k, v in sorted(self.per_type_srocc.items()):
            lines.append(f"  SROCC {self._name(k):<40s} {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def _name(self, k: int) -> str:
        return self.class_names[k] if k < len(self.class_names) else str(k)


def _fmt(v) -> str:
    return "undefined" if v is None else repr(float(v))


def _safe(fn, p, t):
    try:
        return fn(p, t)
    except DegenerateInputError:
        return None


def confusion_matrix(true_labels, pred_labels, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_labels), np.asarray(pred_labels)), 1)
    return cm


def build_report(pred_scores, true_scores, pred_classes, true_classes, n_classes: int,
                 class_names: Sequence[str] = ()) -> MetricReport:
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    true_scores = np.asarray(true_scores, dtype=np.float64)
    pred_classes = np.asarray(pred_classes)
    true_classes = np.asarray(true_classes)
    if pred_scores.size == 0:
        raise ValueError("cannot evaluate an empty split")
    cm = confusion_matrix(true_classes, pred_classes, n_classes)
    per_type = {}
    for k in np.unique(true_classes):
        m = true_classes == k
        per_type[int(k)] = _safe(srocc, pred_scores[m], true_scores[m]) if m.sum() >= 2 else None
    return MetricReport(
        srocc=_safe(srocc, pred_scores, true_scores) if pred_scores.size >= 2 else None,
        lcc=_safe(lcc, pred_scores, true_scores) if pred_scores.size >= 2 else None,
        accuracy=float(np.trace(cm) / cm.sum()),
        confusion=cm,
        per_type_srocc=per_type,
        class_names=list(class_names),
        predicted_scores=pred_scores,
        predicted_classes=pred_classes,
    )


def predict(params, config: ModelConfig, images: np.ndarray, batch_size: int = 64):
    """Deterministic episodes from the image centre; returns scores, classes
    and the fixation sequences ``(N, T, 2)``."""
    scores, classes, locs = [], [], []
    for i in range(0, images.shape[0], batch_size):
        chunk = images[i:i + batch_size]
        trace = forward_episode(params, chunk, np.zeros(2), None, config=config)
        scores.append(trace.score.data)
        classes.append(predict_class(trace.logits))
        locs.append(trace.locations.transpose(1, 0, 2))
    return np.concatenate(scores), np.concatenate(classes), np.concatenate(locs)


def evaluate(params, config: ModelConfig, split, class_names: Sequence[str] = (),
             batch_size: int = 64) -> MetricReport:
    """Evaluate on an :class:`~glimpse_iqa.data.ArraySplit`."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    scores, classes, _ = predict(params, config, split.images, batch_size)
    return build_report(scores, split.mos, classes, split.labels, config.n_classes, class_names)


class SplitFailure(RuntimeError):
    pass


def median_over_splits(run: Callable[[int], MetricReport], n_splits: int = 5,
                       seeds: Sequence[int] | None = None) -> MetricReport:
    """Run the full pipeline once per split seed and take scalar medians.

    A failing split aborts the protocol; a median over fewer splits is never
    reported. The returned report keeps the confusion matrix of the split
    whose SROCC is the median.
    """
    if n_splits % 2 == 0:
        raise ValueError("n_splits must be odd")
    seeds = list(range(n_splits)) if seeds is None else list(seeds)
    if len(seeds) != n_splits:
        raise ValueError(f"{len(seeds)} seeds for {n_splits} splits")
    reports = []
    for seed in seeds:
        try:
            reports.append(run(seed))
        except Exception as exc:
            raise SplitFailure(f"split seed {seed} failed: {exc}") from exc

    def med(values):
        if any(v is None for v in values):
            return None
        return float(np.median(values))

    s = [r.srocc for r in reports]
    order = sorted(range(n_splits), key=lambda i: -np.inf if s[i] is None else s[i])
    middle = reports[order[n_splits // 2]]
    return replace(middle, srocc=med(s), lcc=med([r.lcc for r in reports]),
                   accuracy=med([r.accuracy for r in reports]))


# --------------------------------------------------------------------------
# attention analysis


def block_centers(blocks) -> np.ndarray:
    """Continuous ``(row, col)`` centres of ``(top, left, size)`` blocks."""
    b = np.asarray(blocks, dtype=np.float64).reshape(-1, 3)
    return np.stack([b[:, 0] + (b[:, 2] - 1) / 2, b[:, 1] + (b[:, 2] - 1) / 2], axis=1)


def distance_to_blocks(loc, blocks, shape) -> float:
    """Pixel distance from a normalized fixation to the nearest block centre."""
    if len(blocks) == 0:
        raise ValueError("image has no corrupted blocks")
    p = np.array(loc_to_pixel(loc, *shape))
    return float(np.min(np.linalg.norm(block_centers(blocks) - p, axis=1)))


def uniform_fixation_distance(blocks, shape, n: int = 4096, rng=None) -> float:
    """Expected nearest-block distance of a uniformly random fixation."""
    rng = np.random.default_rng(0) if rng is None else rng
    locs = rng.uniform(-1.0, 1.0, size=(n, 2))
    return float(np.mean([distance_to_blocks(l, blocks, shape) for l in locs]))


@dataclass
class AttentionReport:
    model_distance: np.ndarray  # per image, final fixation
    random_distance: np.ndarray  # per image, uniform-policy expectation
    pvalue: float

    @property
    def n(self) -> int:
        return self.model_distance.size

    @property
    def informative(self) -> bool:
        return self.model_distance.mean() < self.random_distance.mean()

    def summary(self) -> str:
        return (f"images {self.n}  final-fixation distance {self.model_distance.mean():.2f}px  "
                f"uniform policy {self.random_distance.mean():.2f}px  p={self.pvalue:.4g}")


def attention_test(params, config: ModelConfig, split, step: int = -1, n_resamples: int = 9999,
                   seed: int = 0) -> AttentionReport:
    """Paired sign-flip permutation test: is the fixation at ``step`` closer
    to a corrupted block than a uniformly random fixation?

    ``split`` must carry samples with block annotations (``local_blockwise``).
    """
    if not split.samples or any(not s.blocks for s in split.samples):
        raise ValueError("every sample needs block annotations")
    _, _, locs = predict(params, config, split.images)
    shape = split.images.shape[1:]
    rng = np.random.default_rng(seed)
    model = np.array([distance_to_blocks(l[step], s.blocks, shape) for l, s in zip(locs, split.samples)])
    rand = np.array([uniform_fixation_distance(s.blocks, shape, rng=rng) for s in split.samples])
    res = permutation_test((model - rand,), np.mean, permutation_type="samples",
                           alternative="less", n_resamples=n_resamples,
                           random_state=np.random.default_rng(seed + 1))
    return AttentionReport(model, rand, float(res.pvalue))
