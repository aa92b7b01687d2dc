"""Spearman rank correlation and per-attribute evaluation reports."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .names import DISPLAY_NAMES, REFERENCE_RHO


class UndefinedCorrelationError(ValueError):
    pass


def spearman_rho(pred, truth) -> float:
    """Pearson correlation of average ranks.

    Raises UndefinedCorrelationError when fewer than two values are given or
    either input is constant (zero rank variance).
    """
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(truth, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise UndefinedCorrelationError(f"need at least 2 values, got {a.size}")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    ssa, ssb = np.sum(ra * ra), np.sum(rb * rb)
    if ssa == 0 or ssb == 0:
        raise UndefinedCorrelationError("all values tied")
    # elementwise products commute exactly, so rho(a, b) == rho(b, a)
    rho = np.sum(ra * rb) / np.sqrt(ssa * ssb)
    return float(np.clip(rho, -1.0, 1.0))


@dataclass
class EvalRow:
    attribute: str
    rho: float | None          # None when undefined
    n: int
    note: str = ""


@dataclass
class EvalReport:
    rows: list
    predictions: np.ndarray    # N x A, input order

    def rho(self, attribute: str):
        for r in self.rows:
            if r.attribute == attribute:
                return r.rho
        raise KeyError(attribute)

    def mean_rho(self) -> float:
        defined = [r.rho for r in self.rows if r.rho is not None]
        return float(np.mean(defined)) if defined else float("nan")

    def to_text(self, reference: bool = True) -> str:
        width = max(len(DISPLAY_NAMES.get(r.attribute, r.attribute)) for r in self.rows)
        lines = [f"{'Attribute':<{width}}  {'rho':>7}  {'n':>6}"]
        for r in self.rows:
            name = DISPLAY_NAMES.get(r.attribute, r.attribute)
            value = f"{r.rho:7.3f}" if r.rho is not None else f"{'undef':>7}"
            lines.append(f"{name:<{width}}  {value}  {r.n:>6}" + (f"  ({r.note})" if r.note else ""))
        if reference:
            refs = ", ".join(f"{DISPLAY_NAMES[k]} {v:.3f}" for k, v in REFERENCE_RHO.items()
                             if k in {r.attribute for r in self.rows})
            lines.append("")
            lines.append("reference rho of the full-scale ResNet50 model on AADB (n=1000): " + refs)
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("attribute,rho,n\n")
        for r in self.rows:
            out.write(f"{r.attribute},{'nan' if r.rho is None else repr(r.rho)},{r.n}\n")
        return out.getvalue()


def predict(net, images, batch_size: int = 32) -> np.ndarray:
    """Infer-mode predictions for N x 3 x H x H images, in input order."""
    images = np.asarray(images)
    out = np.empty((len(images), net.config.num_outputs), dtype=np.float32)
    for start in range(0, len(images), batch_size):
        out[start:start + batch_size] = net.forward(images[start:start + batch_size]).predictions
    return out


def report_from_predictions(predictions, labels, names) -> EvalReport:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    rows = []
    for a, name in enumerate(names):
        try:
            rows.append(EvalRow(name, spearman_rho(predictions[:, a], labels[:, a]), len(labels)))
        except UndefinedCorrelationError as exc:
            rows.append(EvalRow(name, None, len(labels), str(exc)))
    return EvalReport(rows, predictions)


def evaluate(net, samples, batch_size: int = 32) -> EvalReport:
    """Per-output Spearman rho of ``net`` over ``samples``, rows in head order."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to evaluate")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.stack([s.labels for s in samples])
    return report_from_predictions(predict(net, images, batch_size), labels, net.config.attribute_names)
