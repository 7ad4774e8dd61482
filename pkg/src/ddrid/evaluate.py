"""ROC/AUC, the multi-round one-vs-rest protocol and ROC plots."""

from __future__ import annotations

import csv
import json
import logging
import time
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import RawImageSet, SplitConfig, one_vs_rest_split
from .errors import ArgumentError, DegenerateInputError, add_note
from .nn.layers import standard_specs
from .score import SCORE_KINDS, choose_kind, scores_for, validation_means
from .train import TrainConfig, TrainedModel, train_model

log = logging.getLogger(__name__)

KIND_POLICIES = ("algorithm2", "latent", "reconstruction", "sum")


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[0] is +inf, the (0, 0) corner

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, anomaly_labels) -> RocCurve:
    """ROC with anomalous as the positive class; higher score means more anomalous.

    Tied scores share one threshold step.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(anomaly_labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ArgumentError("scores and labels must be 1-D and of equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("ROC needs both normal and anomalous labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = ends + 1 - tps
    return RocCurve(
        fpr=np.r_[0.0, fps / n_neg],
        tpr=np.r_[0.0, tps / n_pos],
        thresholds=np.r_[np.inf, s[ends]],
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    f, t = curve.fpr, curve.tpr
    return float(np.sum((f[1:] - f[:-1]) * (t[1:] + t[:-1])) / 2)


def auc_score(scores, anomaly_labels) -> float:
    return auc(roc_curve(scores, anomaly_labels))


@dataclass
class RoundResult:
    round_index: int
    seed: int
    auc: float
    score_kind: str
    validation_means: dict[str, float]
    ablation_auc: dict[str, float]
    train_seconds: float


@dataclass
class EvalReport:
    dataset: str
    normal_class: int
    rounds: int
    kind_policy: str
    per_round_auc: list[float] = field(default_factory=list)
    score_kind_chosen: list[str] = field(default_factory=list)
    round_details: list[RoundResult] = field(default_factory=list)

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.per_round_auc)) if self.per_round_auc else float("nan")

    def ablation_means(self) -> dict[str, float]:
        out = {}
        for kind in (*SCORE_KINDS, "algorithm2"):
            vals = [r.ablation_auc[kind] for r in self.round_details if kind in r.ablation_auc]
            if vals:
                out[kind] = float(np.mean(vals))
        return out

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "normal_class": self.normal_class,
            "rounds": self.rounds,
            "kind_policy": self.kind_policy,
            "per_round_auc": self.per_round_auc,
            "mean_auc": self.mean_auc,
            "score_kind_chosen": self.score_kind_chosen,
            "ablation_mean_auc": self.ablation_means(),
            "round_details": [asdict(r) for r in self.round_details],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rep = cls(d["dataset"], d["normal_class"], d["rounds"], d["kind_policy"],
                  list(d["per_round_auc"]), list(d["score_kind_chosen"]))
        rep.round_details = [RoundResult(**r) for r in d.get("round_details", [])]
        return rep


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("threshold", "false_positive_rate", "true_positive_rate"))
        for th, fp, tp in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow((repr(float(th)), repr(float(fp)), repr(float(tp))))


def read_roc_csv(path) -> RocCurve:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return RocCurve(fpr=rows[:, 1], tpr=rows[:, 2], thresholds=rows[:, 0])


@dataclass
class RoundArtifacts:
    model: TrainedModel
    test_scores: dict[str, np.ndarray]
    curve: RocCurve
    test_labels: np.ndarray
    test_class_ids: np.ndarray


def run_experiment(
    datasets: tuple[RawImageSet, RawImageSet],
    normal_class: int,
    rounds: int,
    cfg: TrainConfig,
    kind_policy: str = "algorithm2",
    dataset_kind: str = "mnist",
    test_subset_size: int | None = None,
    train_fraction: float = 0.9,
    preprocessed=None,
    specs=None,
    on_round: Callable[[RoundResult, RoundArtifacts], None] | None = None,
) -> EvalReport:
    """Train and score ``rounds`` independent one-vs-rest runs.

    Round ``r`` reseeds both the split and training with ``cfg.seed + r``.
    """
    if rounds < 1:
        raise ArgumentError("rounds must be >= 1")
    if kind_policy not in KIND_POLICIES:
        raise ArgumentError(f"unknown kind policy {kind_policy!r}")
    all_train, all_test = datasets
    specs = specs or standard_specs(dataset_kind)
    report = EvalReport(dataset_kind, normal_class, rounds, kind_policy)
    for r in range(rounds):
        seed = cfg.seed + r
        try:
            train, val, test = one_vs_rest_split(
                all_train, all_test, normal_class, SplitConfig(train_fraction, seed),
                test_subset_size=test_subset_size, preprocessed=preprocessed,
            )
            t0 = time.perf_counter()
            model = train_model(train, replace(cfg, seed=seed), specs)
            elapsed = time.perf_counter() - t0
        except Exception as exc:
            add_note(exc, f"while running round {r} (seed {seed})")
            raise
        means = validation_means(model, val)
        selected = choose_kind(means["latent"], means["reconstruction"])
        model.score_kind = selected
        kind = selected if kind_policy == "algorithm2" else kind_policy

        anomalous = ~test.normal_flags
        lat = scores_for(model, "latent", test)
        rec = scores_for(model, "reconstruction", test)
        scores = {"latent": lat, "reconstruction": rec, "sum": lat + rec}
        ablation = {k: auc_score(v, anomalous) for k, v in scores.items()}
        ablation["algorithm2"] = ablation[selected]
        curve = roc_curve(scores[kind], anomalous)
        result = RoundResult(r, seed, auc(curve), kind, means, ablation, elapsed)
        report.per_round_auc.append(result.auc)
        report.score_kind_chosen.append(kind)
        report.round_details.append(result)
        log.info("round %d: AUC %.4f with %s score (val means %s)", r, result.auc, kind, means)
        if on_round:
            on_round(result, RoundArtifacts(model, scores, curve, anomalous, test.class_ids))
    return report


# --- plotting ----------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def emit_roc_plot(curves: list[RocCurve], labels: list[str], path, size: int = 400) -> Path:
    """Write the curves as a standalone SVG over the unit square.

    Each curve becomes one ``<polyline>`` whose ``data-points`` attribute
    keeps the untransformed (fpr, tpr) pairs.
    """
    if not curves:
        raise ArgumentError("no curves to plot")
    if len(labels) != len(curves):
        raise ArgumentError("need one label per curve")
    margin = 50
    total = size + 2 * margin + 150
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(total),
                     height=str(size + 2 * margin), viewBox=f"0 0 {total} {size + 2 * margin}")

    def xy(f, t):
        return margin + f * size, margin + (1 - t) * size

    ET.SubElement(svg, "rect", x=str(margin), y=str(margin), width=str(size), height=str(size),
                  fill="none", stroke="black")
    ET.SubElement(svg, "line", x1=str(margin), y1=str(margin + size), x2=str(margin + size), y2=str(margin),
                  stroke="#999999", **{"stroke-dasharray": "4 4"})
    for v in (0.0, 0.5, 1.0):
        x, y = xy(v, 0)
        ET.SubElement(svg, "text", x=f"{x:.1f}", y=f"{y + 18:.1f}", **{"text-anchor": "middle", "font-size": "12"}).text = f"{v:g}"
        x, y = xy(0, v)
        ET.SubElement(svg, "text", x=f"{x - 8:.1f}", y=f"{y + 4:.1f}", **{"text-anchor": "end", "font-size": "12"}).text = f"{v:g}"
    ET.SubElement(svg, "text", x=str(margin + size / 2), y=str(margin + size + 38),
                  **{"text-anchor": "middle", "font-size": "13"}).text = "false positive rate"
    ET.SubElement(svg, "text", x="14", y=str(margin + size / 2),
                  transform=f"rotate(-90 14 {margin + size / 2})",
                  **{"text-anchor": "middle", "font-size": "13"}).text = "true positive rate"

    legend = ET.SubElement(svg, "g", id="legend")
    for i, (curve, label) in enumerate(zip(curves, labels)):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join("{:.3f},{:.3f}".format(*xy(f, t)) for f, t in zip(curve.fpr, curve.tpr))
        raw = " ".join(f"{f!r},{t!r}" for f, t in zip(curve.fpr.tolist(), curve.tpr.tolist()))
        ET.SubElement(svg, "polyline", points=pts, fill="none", stroke=color,
                      **{"stroke-width": "1.5", "data-label": label, "data-points": raw})
        ly = margin + 10 + 20 * i
        ET.SubElement(legend, "line", x1=str(margin + size + 15), y1=str(ly), x2=str(margin + size + 35),
                      y2=str(ly), stroke=color, **{"stroke-width": "2"})
        ET.SubElement(legend, "text", x=str(margin + size + 40), y=str(ly + 4),
                      **{"font-size": "12"}).text = label
    path = Path(path)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    return path
