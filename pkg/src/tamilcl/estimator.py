"""scikit-learn style wrapper around the continual-learning engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import engine
from .buffer import ReservoirBuffer
from .engine import EvalMode, TrainConfig
from .model import TamilModel
from .seeding import child_rng
from .taskdata import TaskSpec


def _check_tasks(task_ids, n: int) -> np.ndarray:
    task_ids = np.asarray(task_ids).reshape(-1)
    if task_ids.shape[0] != n:
        raise ValueError(f"{task_ids.shape[0]} task ids for {n} samples")
    return task_ids


class TamilClassifier(ClassifierMixin, BaseEstimator):
    """Sequential learner over tasks with disjoint label sets.

    ``fit(X, y, task_ids)`` trains on the tasks in order of first appearance;
    ``partial_fit`` adds one more task to an already fitted model. Labels may
    be arbitrary hashables; they are mapped to contiguous ids task by task.

    ``predict`` routes each sample to a task attention module by the matching
    criterion (class-incremental inference). Passing ``task_ids`` switches to
    oracle routing, and ``mask_to_task=True`` additionally restricts the
    prediction to that task's classes.
    """

    def __init__(
        self,
        method="tamil",
        use_tams=None,
        epochs_per_task=5,
        batch_size=32,
        learning_rate=0.05,
        buffer_capacity=200,
        alpha=0.5,
        beta=0.2,
        lam=0.1,
        ema_decay=0.95,
        ema_rate=0.9,
        hidden=(128,),
        rep_dim=64,
        latent_dim=8,
        tam_variant="autoencoder",
        random_state=0,
    ):
        self.method = method
        self.use_tams = use_tams
        self.epochs_per_task = epochs_per_task
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.buffer_capacity = buffer_capacity
        self.alpha = alpha
        self.beta = beta
        self.lam = lam
        self.ema_decay = ema_decay
        self.ema_rate = ema_rate
        self.hidden = hidden
        self.rep_dim = rep_dim
        self.latent_dim = latent_dim
        self.tam_variant = tam_variant
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            method=self.method,
            use_tams=self.use_tams,
            epochs_per_task=self.epochs_per_task,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            buffer_capacity=self.buffer_capacity,
            alpha=self.alpha,
            beta=self.beta,
            lam=self.lam,
            ema_decay=self.ema_decay,
            ema_rate=self.ema_rate,
            hidden=tuple(self.hidden),
            rep_dim=self.rep_dim,
            latent_dim=self.latent_dim,
            tam_variant=self.tam_variant,
            seed=int(self.random_state),
        )

    def fit(self, X, y, task_ids):
        X, y = check_X_y(X, y, dtype=np.float64)
        task_ids = _check_tasks(task_ids, X.shape[0])
        cfg = self._train_config()
        if cfg.method == "joint":
            raise ValueError("the joint upper bound is run through engine.run_stream, not the estimator")
        self.config_ = cfg
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.zeros(0, dtype=y.dtype)
        self.task_classes_: list[list[int]] = []
        self.model_ = TamilModel(cfg.model_config(X.shape[1]), seed=cfg.seed)
        self.buffer_ = None
        if cfg.method in engine.REHEARSAL_METHODS:
            self.buffer_ = ReservoirBuffer(cfg.buffer_capacity, X.shape[1], child_rng(cfg.seed, "buffer"))
        self._data_rng = child_rng(cfg.seed, "data")
        _, first = np.unique(task_ids, return_index=True)
        self.tasks_ = task_ids[np.sort(first)]
        for t in self.tasks_:
            sel = task_ids == t
            self._learn_task(X[sel], y[sel])
        return self

    def partial_fit(self, X, y, task_id=None):
        """Learn one additional task from ``(X, y)``."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        if task_id is None:
            task_id = len(self.tasks_)
        if task_id in self.tasks_.tolist():
            raise ValueError(f"task {task_id!r} was already learned")
        self._learn_task(X, y)
        self.tasks_ = np.append(self.tasks_, task_id)
        return self

    def _learn_task(self, X: np.ndarray, y: np.ndarray) -> None:
        labels = np.unique(y)
        clash = np.intersect1d(labels, self.classes_)
        if clash.size:
            raise ValueError(f"labels {clash.tolist()} already belong to an earlier task")
        start = len(self.classes_)
        self.classes_ = np.concatenate([self.classes_, labels])
        ids = list(range(start, start + len(labels)))
        self.task_classes_.append(ids)
        t = len(self.task_classes_) - 1
        encoded = start + np.searchsorted(labels, y)
        spec = TaskSpec(t, tuple(ids), X, encoded, X[:0], encoded[:0])
        self.model_.add_task(len(labels))
        engine.train_task(self.model_, spec, self.buffer_, self.config_, t, self._data_rng)

    def _predictions(self, X, task_ids=None, mask_to_task=False):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        if task_ids is None:
            if mask_to_task:
                raise ValueError("mask_to_task needs task_ids")
            mode = EvalMode.CLASS_IL
        else:
            task_ids = self._task_index(_check_tasks(task_ids, X.shape[0]))
            mode = EvalMode.TASK_IL if mask_to_task else EvalMode.ORACLE
        return engine.predict(self.model_, X, mode, task_ids, self.task_classes_)

    def _task_index(self, task_ids: np.ndarray) -> np.ndarray:
        known = {t: i for i, t in enumerate(self.tasks_.tolist())}
        try:
            return np.array([known[t] for t in task_ids.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown task id {exc.args[0]!r}") from None

    def predict(self, X, task_ids=None, mask_to_task=False):
        pred = self._predictions(X, task_ids, mask_to_task).predicted
        return self.classes_[pred]

    def predict_proba(self, X, task_ids=None):
        z = self._predictions(X, task_ids).logits
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def route(self, X) -> np.ndarray:
        """Task index chosen by the matching criterion for each row of ``X``."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        r = self.model_.representation(X).data
        return self.model_.infer_tasks(r)
