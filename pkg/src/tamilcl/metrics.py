"""Accuracy matrices, forgetting, task-recency probabilities, calibration, TAM diagnostics."""

from __future__ import annotations

import warnings

import numpy as np


def _final_column(acc: np.ndarray) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1] or acc.shape[0] == 0:
        raise ValueError(f"accuracy matrix must be square and non-empty, got {acc.shape}")
    last = acc[:, -1]
    if np.any(np.isnan(last)):
        raise ValueError("accuracy matrix has no complete final column")
    return last


def final_average_accuracy(acc) -> float:
    """Mean accuracy over all tasks, measured after the last task.

    ``acc[i, j]`` is the accuracy on task ``i`` after training task ``j``;
    entries that were never measured are NaN.
    """
    return float(np.mean(_final_column(acc)))


def forgetting(acc) -> tuple[list[float], float]:
    """Best-ever minus final accuracy for every task but the last.

    Returns ``(per_task, mean)``; with a single task the list is empty and the
    mean is 0.
    """
    acc = np.asarray(acc, dtype=np.float64)
    last = _final_column(acc)
    n = acc.shape[0]
    per_task = []
    for i in range(n - 1):
        history = acc[i, i:]
        best = np.nanmax(history)
        per_task.append(float(best - last[i]))
    return per_task, float(np.mean(per_task)) if per_task else 0.0


def task_probabilities(probs: np.ndarray, class_to_task: np.ndarray, n_tasks: int | None = None) -> np.ndarray:
    """Average the softmax vectors, then sum each task's class entries."""
    probs = np.asarray(probs, dtype=np.float64)
    class_to_task = np.asarray(class_to_task)
    if probs.ndim != 2 or probs.shape[1] != class_to_task.shape[0]:
        raise ValueError(f"probabilities {probs.shape} do not match {class_to_task.shape[0]} classes")
    n_tasks = int(class_to_task.max()) + 1 if n_tasks is None else n_tasks
    avg = probs.mean(axis=0)
    return np.bincount(class_to_task, weights=avg, minlength=n_tasks)


def reliability_bins(confidence, correct, n_bins: int = 10) -> list[dict]:
    """Equal-width bins ``(lo, hi]`` over (0, 1] with count, mean confidence and accuracy."""
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    corr = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.size == 0:
        raise ValueError("no predictions to bin")
    if conf.shape != corr.shape:
        raise ValueError("confidence and correctness must have the same length")
    if np.any(conf <= 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in (0, 1]")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        bins.append(
            {
                "lower": float(edges[b]),
                "upper": float(edges[b + 1]),
                "count": count,
                "confidence": float(conf[sel].mean()) if count else 0.0,
                "accuracy": float(corr[sel].mean()) if count else 0.0,
            }
        )
    return bins


def ece(confidence, correct, n_bins: int = 10) -> float:
    """Expected calibration error: count-weighted |accuracy - confidence| over bins."""
    bins = reliability_bins(confidence, correct, n_bins)
    n = sum(b["count"] for b in bins)
    return float(sum(b["count"] / n * abs(b["accuracy"] - b["confidence"]) for b in bins))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        warnings.warn("zero-norm TAM weights; cosine similarity set to 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return float(a @ b / (na * nb))


def tam_similarity(model) -> dict[str, list[list[float]]]:
    """Pairwise cosine similarity of flattened extractor and selector weights."""
    tams = model.tams
    if not tams:
        raise ValueError("model has no TAMs")
    out = {}
    for part in ("encoder", "selector"):
        mats = [getattr(t, part) for t in tams]
        if any(m is None for m in mats):
            continue
        flat = [m.weight.data.reshape(-1) for m in mats]
        n = len(flat)
        sim = [[1.0 if i == j else _cosine(flat[i], flat[j]) for j in range(n)] for i in range(n)]
        out["extractor" if part == "encoder" else "selector"] = sim
    return out


def tam_mean_activation(model, task_inputs: list[np.ndarray]) -> list[list[float]]:
    """Mean post-activation extractor output of TAM ``k`` over ``task_inputs[k]``."""
    from .numerics import tensor

    out = []
    for tam, x in zip(model.tams, task_inputs):
        if tam.encoder is None or len(x) == 0:
            out.append([])
            continue
        r = model.representation(tensor(x))
        out.append(tam.encode(r).data.mean(axis=0).tolist())
    return out


def routing_accuracy(predicted_tasks, true_tasks) -> float:
    predicted_tasks = np.asarray(predicted_tasks)
    true_tasks = np.asarray(true_tasks)
    if predicted_tasks.size == 0:
        raise ValueError("no samples")
    return float(np.mean(predicted_tasks == true_tasks))
