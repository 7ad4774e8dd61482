"""Anomaly scores, validation-driven score selection and thresholding."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import ImageDataset
from .errors import ArgumentError, ShapeError, StateError
from .nn.layers import Network
from .train import TrainedModel

SCORE_KINDS = ("latent", "reconstruction", "sum")
NORMAL, ANOMALOUS = "normal", "anomalous"
SCORE_CSV_COLUMNS = ("image_index", "class_id", "normal_flag", "score_kind", "score")


def _images(images) -> np.ndarray:
    if isinstance(images, ImageDataset):
        return images.images
    x = np.asarray(images)
    return x[None] if x.ndim == 3 else x


def _check_shape(model: TrainedModel, x: np.ndarray) -> None:
    want = model.specs[0].input_shape
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise ShapeError(f"expected images of shape {want}, got {x.shape[1:]}")


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a.astype(np.float64) - b).reshape(len(a), -1)
    return np.einsum("ij,ij->i", d, d)


def latent_scores(model: TrainedModel, images, batch_size: int = 512) -> np.ndarray:
    """Squared latent distance to the centroid for every image (inference mode)."""
    x = _images(images)
    _check_shape(model, x)
    enc = Network(model.specs[0], model.encoder_c)
    out = [
        _sq_dist(enc.forward(x[s : s + batch_size], "inference"), model.centroid.z_c)
        for s in range(0, len(x), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros(0)


def reconstruction_scores(model: TrainedModel, images, batch_size: int = 512) -> np.ndarray:
    """Squared pixel distance from the class-specific reconstruction to the decoded template."""
    template = model.centroid.decoded_template
    if template is None:
        raise StateError("model has no decoded template; finetuning has not completed")
    x = _images(images)
    _check_shape(model, x)
    enc = Network(model.specs[0], model.encoder_c)
    dec = Network(model.specs[1], model.decoder_c)
    out = []
    for s in range(0, len(x), batch_size):
        recon = dec.forward(enc.forward(x[s : s + batch_size], "inference"), "inference")
        out.append(_sq_dist(recon, template[None].astype(np.float64)))
    return np.concatenate(out) if out else np.zeros(0)


def latent_score(model: TrainedModel, image) -> float:
    return float(latent_scores(model, image)[0])


def reconstruction_score(model: TrainedModel, image) -> float:
    return float(reconstruction_scores(model, image)[0])


def scores_for(model: TrainedModel, kind: str, images) -> np.ndarray:
    if kind == "latent":
        return latent_scores(model, images)
    if kind == "reconstruction":
        return reconstruction_scores(model, images)
    if kind == "sum":
        return latent_scores(model, images) + reconstruction_scores(model, images)
    raise ArgumentError(f"unknown score kind {kind!r}")


def validation_means(model: TrainedModel, validation) -> dict[str, float]:
    x = _images(validation)
    if len(x) == 0:
        raise ArgumentError("validation subset is empty")
    return {
        "latent": float(latent_scores(model, x).mean()),
        "reconstruction": float(reconstruction_scores(model, x).mean()),
    }


def choose_kind(mean_latent: float, mean_reconstruction: float) -> str:
    """Latent wins only when strictly lower; ties go to reconstruction."""
    return "latent" if mean_latent < mean_reconstruction else "reconstruction"


def select_score_kind(model: TrainedModel, validation) -> str:
    means = validation_means(model, validation)
    return choose_kind(means["latent"], means["reconstruction"])


@dataclass
class AnomalyScorer:
    model: TrainedModel
    kind: str
    threshold: float | None = None

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ArgumentError(f"unknown score kind {self.kind!r}")
        if self.kind != "latent" and self.model.centroid.decoded_template is None:
            raise StateError(f"score kind {self.kind!r} needs the decoded template")

    def scores(self, images) -> np.ndarray:
        return scores_for(self.model, self.kind, images)

    def score(self, image) -> float:
        return float(self.scores(image)[0])

    def calibrate(self, validation, target_fpr: float = 0.05) -> float:
        """Set the threshold so about ``target_fpr`` of validation images are flagged."""
        if not 0 < target_fpr < 1:
            raise ArgumentError("target_fpr must lie in (0, 1)")
        s = self.scores(validation)
        if len(s) == 0:
            raise ArgumentError("validation subset is empty")
        self.threshold = float(np.quantile(s, 1 - target_fpr, method="higher"))
        return self.threshold


def classify_score(score: float, threshold: float) -> str:
    return NORMAL if score < threshold else ANOMALOUS


def classify(scorer: AnomalyScorer, image) -> str:
    if scorer.threshold is None:
        raise StateError("scorer threshold is not set")
    return classify_score(scorer.score(image), scorer.threshold)


def batch_score(scorer: AnomalyScorer, dataset) -> np.ndarray:
    """Scores in dataset order."""
    if len(_images(dataset)) == 0:
        raise ArgumentError("empty dataset")
    return scorer.scores(dataset)


def write_score_csv(path, scores, kind: str, class_ids=None, normal_flags=None) -> None:
    n = len(scores)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_CSV_COLUMNS)
        for i in range(n):
            cid = "" if class_ids is None or class_ids[i] < 0 else int(class_ids[i])
            flag = "" if normal_flags is None else int(bool(normal_flags[i]))
            w.writerow([i, cid, flag, kind, repr(float(scores[i]))])


def read_score_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
