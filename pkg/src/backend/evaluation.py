"""
Downstream protocols and metrics: retrieval, zero-shot and few-shot
classification, convex-combination inference, calibration, MSP
out-of-distribution detection and prediction-difference tables.

Argmax ties resolve to the lowest index everywhere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from sklearn.linear_model import Ridge
from sklearn.metrics import average_precision_score, roc_auc_score, roc_curve

from src.backend.config import ECE_BINS, NORM_TOLERANCE, PROBABILITY_TOLERANCE, REPORT_FIELDS, RIDGE_LAMBDA
from src.backend.errors import (
    AlphaOutOfRange,
    ConfigError,
    EmptyDataset,
    EmptyScores,
    InsufficientShots,
    LengthMismatch,
    NotAProbability,
    ShapeMismatch,
)
from src.backend.numerics import (
    Matrix,
    RngStream,
    as_matrix,
    l2_normalize_rows,
    rows_are_normalized,
    similarity_matrix,
    softmax_rows,
)

if TYPE_CHECKING:
    from src.backend.data.dataset import SyntheticDataset
    from src.backend.model.towers import Model

logger = logging.getLogger(__name__)

TPR_TARGET = 0.95


# ---------------------------------------------------------------------------
# Report types
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    variant: str
    recall1_img2txt: float
    recall1_txt2img: float
    zeroshot_acc: float
    fewshot_acc: float
    nll: float
    brier: float
    ece: float
    auroc: float | None = None
    aupr: float | None = None
    fpr95: float | None = None
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    predictions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    def __post_init__(self) -> None:
        for name in ("recall1_img2txt", "recall1_txt2img", "zeroshot_acc", "fewshot_acc", "ece", "auroc", "aupr", "fpr95"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
        for name in ("nll", "brier"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")

    def metrics(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in REPORT_FIELDS}


@dataclass(frozen=True)
class PredictionDiffTable:
    a_correct_not_b: float
    b_correct_not_a: float
    c_ne_a: float | None
    c_ne_b: float | None
    c_ne_a_and_c_ne_b: float | None
    roles: tuple[str, str, str | None] = ("a", "b", "c")

    def as_row(self) -> dict[str, object]:
        a, b, c = self.roles
        return {
            "a": a,
            "b": b,
            "c": c,
            "a_correct_not_b": self.a_correct_not_b,
            "b_correct_not_a": self.b_correct_not_a,
            "c_ne_a": self.c_ne_a,
            "c_ne_b": self.c_ne_b,
            "c_ne_a_and_c_ne_b": self.c_ne_a_and_c_ne_b,
        }


@dataclass(frozen=True)
class RerunSummary:
    mean: float
    std: float
    n: int


# ---------------------------------------------------------------------------
# Retrieval and classification
# ---------------------------------------------------------------------------

def recall_at_1(F: Matrix, G: Matrix) -> tuple[float, float]:
    F = as_matrix(F)
    G = as_matrix(G)
    if F.shape != G.shape:
        raise ShapeMismatch(f"paired embeddings differ in shape: {F.shape} vs {G.shape}")
    n = F.shape[0]
    if n == 0:
        raise EmptyDataset("recall needs at least one pair")
    S = similarity_matrix(F, G)
    target = np.arange(n)
    img2txt = float(np.mean(np.argmax(S, axis=1) == target))
    txt2img = float(np.mean(np.argmax(S, axis=0) == target))
    return img2txt, txt2img


def zero_shot_classify(image_embeds: Matrix, label_embeds: Matrix, tau: float) -> tuple[np.ndarray, Matrix]:
    image_embeds = as_matrix(image_embeds)
    label_embeds = as_matrix(label_embeds)
    if image_embeds.shape[1] != label_embeds.shape[1]:
        raise ShapeMismatch(
            f"image embeddings have {image_embeds.shape[1]} columns, label embeddings {label_embeds.shape[1]}"
        )
    S = similarity_matrix(image_embeds, label_embeds)
    return np.argmax(S, axis=1), softmax_rows(S, tau)


def _ridge_predict(train_reps: Matrix, train_labels: np.ndarray, eval_reps: Matrix) -> np.ndarray:
    classes = np.unique(train_labels)
    targets = (train_labels[:, None] == classes[None, :]).astype(np.float64)
    probe = Ridge(alpha=RIDGE_LAMBDA, solver="cholesky", fit_intercept=True)
    probe.fit(train_reps, targets)
    scores = np.asarray(probe.predict(eval_reps)).reshape(eval_reps.shape[0], -1)
    return classes[np.argmax(scores, axis=1)]


def linear_probe(train_reps: Matrix, train_labels, eval_reps: Matrix, eval_labels) -> float:
    """Accuracy of a one-vs-all ridge probe fit on all training rows."""
    train_reps = as_matrix(train_reps)
    eval_reps = as_matrix(eval_reps)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    eval_labels = np.asarray(eval_labels, dtype=np.int64)
    if train_reps.shape[0] != train_labels.size or eval_reps.shape[0] != eval_labels.size:
        raise LengthMismatch("representations and labels differ in length")
    if train_labels.size == 0 or eval_labels.size == 0:
        raise EmptyDataset("a linear probe needs training and evaluation examples")
    predictions = _ridge_predict(train_reps, train_labels, eval_reps)
    return float(np.mean(predictions == eval_labels))


def few_shot_probe(
    representations: Matrix,
    labels,
    shots: int = 10,
    seeds: int = 3,
    *,
    eval_representations: Matrix | None = None,
    eval_labels=None,
) -> float:
    """
    Mean accuracy over ``seeds`` draws of ``shots`` examples per class.

    Without explicit eval rows, the examples not drawn for a seed are scored.
    """
    reps = as_matrix(representations)
    labels = np.asarray(labels, dtype=np.int64)
    if reps.shape[0] != labels.size:
        raise LengthMismatch(f"{reps.shape[0]} representations but {labels.size} labels")
    if (eval_representations is None) != (eval_labels is None):
        raise ConfigError("eval_representations and eval_labels must be given together")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size == 0:
        raise EmptyDataset("few-shot probe needs labelled examples")
    if np.any(counts < shots):
        short = int(classes[np.argmin(counts)])
        raise InsufficientShots(f"class {short} has {int(counts.min())} examples, fewer than {shots} shots")

    accuracies = []
    for seed in range(seeds):
        rng = RngStream(seed)
        chosen = []
        for c in classes:
            members = np.flatnonzero(labels == c)
            chosen.append(members[rng.permutation(members.size)[:shots]])
        train_idx = np.sort(np.concatenate(chosen))
        if eval_representations is None:
            held_out = np.setdiff1d(np.arange(labels.size), train_idx)
            if held_out.size == 0:
                raise InsufficientShots("no examples are left to evaluate the probe on")
            eval_reps, eval_y = reps[held_out], labels[held_out]
        else:
            eval_reps, eval_y = as_matrix(eval_representations), np.asarray(eval_labels, dtype=np.int64)
        accuracies.append(linear_probe(reps[train_idx], labels[train_idx], eval_reps, eval_y))
    return float(np.mean(accuracies))


def _unit_rows(M: Matrix) -> Matrix:
    if rows_are_normalized(M, NORM_TOLERANCE):
        return M.copy()
    return l2_normalize_rows(M)


def convex_combine(f_e: Matrix, h_e: Matrix, alpha: float) -> Matrix:
    """
    Rows of alpha * h + (1 - alpha) * f, renormalised. The endpoints return
    the matching input itself (normalised if it was not already).
    """
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha!r}")
    f_e = as_matrix(f_e)
    h_e = as_matrix(h_e)
    if f_e.shape != h_e.shape:
        raise ShapeMismatch(f"embeddings differ in shape: {f_e.shape} vs {h_e.shape}")
    if alpha == 0.0:
        return _unit_rows(f_e)
    if alpha == 1.0:
        return _unit_rows(h_e)
    return l2_normalize_rows(alpha * h_e + (1.0 - alpha) * f_e)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def _check_probabilities(prob_rows: Matrix, labels) -> tuple[Matrix, np.ndarray]:
    P = as_matrix(prob_rows)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if P.shape[0] != y.size:
        raise LengthMismatch(f"{P.shape[0]} probability rows but {y.size} labels")
    if y.size == 0:
        raise EmptyDataset("calibration metrics need at least one example")
    if np.any(P < -PROBABILITY_TOLERANCE) or np.any(np.abs(P.sum(axis=1) - 1.0) > PROBABILITY_TOLERANCE):
        raise NotAProbability("every probability row must be non-negative and sum to 1")
    if y.min() < 0 or y.max() >= P.shape[1]:
        raise LengthMismatch(f"labels must index one of {P.shape[1]} classes")
    return P, y


def nll(prob_rows: Matrix, labels) -> float:
    P, y = _check_probabilities(prob_rows, labels)
    p_true = np.maximum(P[np.arange(y.size), y], np.finfo(np.float64).tiny)
    return float(-np.mean(np.log(p_true)))


def brier(prob_rows: Matrix, labels) -> float:
    P, y = _check_probabilities(prob_rows, labels)
    onehot = np.zeros_like(P)
    onehot[np.arange(y.size), y] = 1.0
    return float(np.mean(np.sum((P - onehot) ** 2, axis=1)))


def ece(prob_rows: Matrix, labels, bins: int = ECE_BINS) -> float:
    P, y = _check_probabilities(prob_rows, labels)
    confidence = np.max(P, axis=1)
    correct = (np.argmax(P, axis=1) == y).astype(np.float64)
    index = np.minimum(np.floor(confidence * bins).astype(np.int64), bins - 1)
    total = 0.0
    for b in range(bins):
        members = index == b
        count = int(np.sum(members))
        if count == 0:
            continue
        gap = abs(float(np.mean(correct[members])) - float(np.mean(confidence[members])))
        total += (count / y.size) * gap
    return total


# ---------------------------------------------------------------------------
# OOD detection
# ---------------------------------------------------------------------------

def msp_ood_metrics(in_scores, out_scores) -> tuple[float, float, float]:
    """AUROC, AUPR and FPR@95%TPR with in-distribution as the positive class."""
    in_scores = np.asarray(in_scores, dtype=np.float64).reshape(-1)
    out_scores = np.asarray(out_scores, dtype=np.float64).reshape(-1)
    if in_scores.size == 0 or out_scores.size == 0:
        raise EmptyScores("both in- and out-of-distribution scores are required")
    truth = np.concatenate([np.ones(in_scores.size), np.zeros(out_scores.size)])
    scores = np.concatenate([in_scores, out_scores])
    auroc = float(roc_auc_score(truth, scores))
    aupr = float(average_precision_score(truth, scores))
    fpr, tpr, _ = roc_curve(truth, scores, drop_intermediate=False)
    # Thresholds run high to low, so the first hit is the strictest threshold.
    first = int(np.argmax(tpr >= TPR_TARGET - 1e-12))
    return auroc, aupr, float(fpr[first])


# ---------------------------------------------------------------------------
# Prediction differences
# ---------------------------------------------------------------------------

def prediction_difference(
    preds_a,
    preds_b,
    preds_c,
    labels,
    roles: tuple[str, str, str | None] = ("baseline", "lit", "3t"),
) -> PredictionDiffTable:
    """Fractions of disagreement between up to three models (``preds_c`` may be None)."""
    a = np.asarray(preds_a, dtype=np.int64)
    b = np.asarray(preds_b, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    c = None if preds_c is None else np.asarray(preds_c, dtype=np.int64)
    lengths = {a.size, b.size, y.size} | ({c.size} if c is not None else set())
    if len(lengths) != 1:
        raise LengthMismatch(f"prediction lists differ in length: {sorted(lengths)}")
    if y.size == 0:
        raise EmptyDataset("no predictions to compare")
    a_ok, b_ok = a == y, b == y
    table = {
        "a_correct_not_b": float(np.mean(a_ok & ~b_ok)),
        "b_correct_not_a": float(np.mean(b_ok & ~a_ok)),
        "c_ne_a": None,
        "c_ne_b": None,
        "c_ne_a_and_c_ne_b": None,
    }
    if c is not None:
        table["c_ne_a"] = float(np.mean(c != a))
        table["c_ne_b"] = float(np.mean(c != b))
        table["c_ne_a_and_c_ne_b"] = float(np.mean((c != a) & (c != b)))
    else:
        roles = (roles[0], roles[1], None)
    return PredictionDiffTable(roles=roles, **table)


# ---------------------------------------------------------------------------
# Whole-model evaluation
# ---------------------------------------------------------------------------

def _require_headless(model: "Model", what: str) -> None:
    if model.mode.mode != "three_towers" or model.heads.variant != "headless":
        raise ConfigError(
            f"{what} needs a headless three_towers checkpoint, got mode={model.mode.mode!r} heads={model.heads.variant!r}"
        )


def _image_side(
    model: "Model",
    dataset: "SyntheticDataset",
    ids: np.ndarray,
    alpha: float | None,
    tower: str,
) -> tuple[Matrix, Matrix]:
    """(normalised embeddings, few-shot representations) for the image side."""
    X = dataset.image[ids]
    if tower == "third":
        h_raw, h_emb = model.third_tower_embeddings(ids)
        return h_emb, h_raw
    if alpha is None:
        return model.embed_images(ids, X), model.image_prelogits(ids, X)
    f_raw = model.image_prelogits(ids, X)
    f_emb = model.embed_images(ids, X)
    h_raw, h_emb = model.third_tower_embeddings(ids)
    embeds = convex_combine(f_emb, h_emb, alpha)
    if alpha == 0.0:
        reps = f_raw
    elif alpha == 1.0:
        reps = h_raw
    else:
        reps = alpha * h_raw + (1.0 - alpha) * f_raw
    return embeds, reps


def evaluate_model(
    model: "Model",
    dataset: "SyntheticDataset",
    alpha: float | None = None,
    ood_split: str = "ood",
    *,
    tower: str = "main",
    shots: int = 10,
    probe_seeds: int = 3,
    ece_bins: int = ECE_BINS,
    variant: str | None = None,
) -> EvalReport:
    """
    Score ``model`` on the eval split.

    ``alpha`` mixes the main and third image towers (headless 3T only);
    ``tower="third"`` scores the third tower alone.
    """
    if tower not in ("main", "third"):
        raise ConfigError(f"tower must be 'main' or 'third', got {tower!r}")
    if alpha is not None:
        if not 0.0 <= alpha <= 1.0:
            raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha!r}")
        _require_headless(model, "--alpha")
    if tower == "third":
        _require_headless(model, "third-tower evaluation")

    eval_ids = dataset.split_ids("eval")
    train_ids = dataset.split_ids("train")
    if eval_ids.size == 0:
        raise EmptyDataset("the dataset has no eval examples")
    y = dataset.labels[eval_ids]

    image_emb, image_reps = _image_side(model, dataset, eval_ids, alpha, tower)
    text_emb = model.embed_texts(eval_ids, dataset.text[eval_ids])
    r_i2t, r_t2i = recall_at_1(image_emb, text_emb)

    tau = model.main_tau
    labels_emb = model.label_embeddings(dataset.class_text)
    predictions, probs = zero_shot_classify(image_emb, labels_emb, tau)

    _, train_reps = _image_side(model, dataset, train_ids, alpha, tower)
    fewshot = few_shot_probe(
        train_reps,
        dataset.labels[train_ids],
        shots,
        probe_seeds,
        eval_representations=image_reps,
        eval_labels=y,
    )

    auroc = aupr = fpr95 = None
    ood_ids = dataset.split_ids(ood_split)
    if ood_ids.size:
        ood_emb, _ = _image_side(model, dataset, ood_ids, alpha, tower)
        _, ood_probs = zero_shot_classify(ood_emb, labels_emb, tau)
        auroc, aupr, fpr95 = msp_ood_metrics(probs.max(axis=1), ood_probs.max(axis=1))
    else:
        logger.info("Split %r is empty; OOD metrics left blank", ood_split)

    if variant is None:
        variant = tower if alpha is None else f"alpha={alpha:g}"
    report = EvalReport(
        variant=variant,
        recall1_img2txt=r_i2t,
        recall1_txt2img=r_t2i,
        zeroshot_acc=float(np.mean(predictions == y)),
        fewshot_acc=fewshot,
        nll=nll(probs, y),
        brier=brier(probs, y),
        ece=ece(probs, y, ece_bins),
        auroc=auroc,
        aupr=aupr,
        fpr95=fpr95,
        ids=eval_ids,
        labels=y,
        predictions=predictions,
    )
    logger.info(
        "%s: R@1 i2t=%.3f t2i=%.3f zero-shot=%.3f few-shot=%.3f",
        variant,
        r_i2t,
        r_t2i,
        report.zeroshot_acc,
        fewshot,
    )
    return report


def summarize_reruns(reports: Sequence[EvalReport] | Iterable[EvalReport]) -> dict[str, RerunSummary]:
    """Mean and sample standard deviation of every metric across reruns."""
    reports = list(reports)
    summary = {}
    for name in REPORT_FIELDS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            continue
        arr = np.asarray(values, dtype=np.float64)
        std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
        summary[name] = RerunSummary(mean=float(np.mean(arr)), std=std, n=int(arr.size))
    return summary
