"""Sequential training over a task stream and the three evaluation protocols."""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import metrics
from . import numerics as nx
from .buffer import ReservoirBuffer
from .losses import (
    LossBreakdown,
    LossConfig,
    loss_consistency,
    loss_der_logit_replay,
    loss_pairwise_discrepancy,
    loss_task,
    loss_total,
)
from .model import ModelConfig, TamilModel
from .seeding import child_rng
from .taskdata import TaskSpec, TaskStream, minibatches

logger = logging.getLogger(__name__)

METHODS = ("sgd", "joint", "er", "derpp", "tamil")
REHEARSAL_METHODS = ("er", "derpp", "tamil")


class EvalMode(str, enum.Enum):
    CLASS_IL = "class_il"
    TASK_IL = "task_il"
    ORACLE = "oracle"


@dataclass(frozen=True)
class TrainConfig:
    method: str = "tamil"
    use_tams: bool | None = None
    epochs_per_task: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    buffer_capacity: int = 200
    alpha: float = 0.5
    beta: float = 0.2
    lam: float = 0.1
    pd_temperature: float = 1.0
    ema_enabled: bool | None = None
    ema_decay: float = 0.95
    ema_rate: float = 0.9
    hidden: tuple[int, ...] = (128,)
    rep_dim: int = 64
    latent_dim: int = 8
    tam_variant: str = "autoencoder"
    tam_encoder_activation: str = "relu"
    tam_output_activation: str = "sigmoid"
    classifier_bias: bool = True
    classifier_init: str = "zero"
    n_bins: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.use_tams is None:
            object.__setattr__(self, "use_tams", self.method == "tamil")
        if self.ema_enabled is None:
            object.__setattr__(self, "ema_enabled", self.method == "tamil")
        if self.method == "tamil" and not self.use_tams:
            raise ValueError("method 'tamil' requires use_tams")
        if self.method in ("sgd", "joint") and self.use_tams:
            raise ValueError(f"method {self.method!r} does not use TAMs")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs_per_task < 0 or self.batch_size < 1 or self.buffer_capacity < 0:
            raise ValueError("epochs_per_task >= 0, batch_size >= 1 and buffer_capacity >= 0 required")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta, self.lam, self.pd_temperature)

    def model_config(self, n_features: int) -> ModelConfig:
        return ModelConfig(
            n_features=n_features,
            hidden=self.hidden,
            rep_dim=self.rep_dim,
            latent_dim=self.latent_dim,
            use_tams=self.use_tams,
            tam_variant=self.tam_variant,
            tam_encoder_activation=self.tam_encoder_activation,
            tam_output_activation=self.tam_output_activation,
            classifier_bias=self.classifier_bias,
            classifier_init=self.classifier_init,
            ema_enabled=self.ema_enabled,
            ema_decay=self.ema_decay,
            ema_rate=self.ema_rate,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(d["hidden"])
        return d


def infer_tam(model: TamilModel, r) -> int | np.ndarray:
    """Route by the lowest ``||tam_k(r) - r||^2``; a single vector gives a single index."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 1:
        return int(model.infer_tasks(r[None, :])[0])
    return model.infer_tasks(r)


def _logits_for(model: TamilModel, r: nx.Tensor, route) -> nx.Tensor:
    if not model.config.use_tams:
        return model.head(r)
    if np.isscalar(route):
        return model.head(r, int(route))
    return model.head_routed(r, route)


@dataclass
class TaskLog:
    steps: int = 0
    last: LossBreakdown | None = None
    mean_total: float = 0.0


def train_task(
    model: TamilModel,
    task: TaskSpec,
    buf: ReservoirBuffer | None,
    cfg: TrainConfig,
    task_index: int,
    rng: np.random.Generator,
) -> TaskLog:
    """Train on one task; ``model.add_task`` must already have been called for it."""
    lcfg = cfg.loss_config()
    rehearse = cfg.method in REHEARSAL_METHODS and buf is not None and buf.capacity > 0
    use_tams = model.config.use_tams
    store_logits = cfg.method == "derpp" or (cfg.method == "tamil" and model.ema is None)
    opt = nx.SgdOptimizer(model.trainable_parameters(), cfg.learning_rate)
    log = TaskLog()
    total_sum = 0.0
    for _ in range(cfg.epochs_per_task):
        for x, y in minibatches(task, cfg.batch_size, rng):
            opt.zero_grad()
            r = model.representation(x)
            logits = _logits_for(model, r, task_index)
            l_task = loss_task(logits, y)
            l_pd = None
            if use_tams and lcfg.lam != 0 and task_index > 0:
                l_pd = loss_pairwise_discrepancy(model.tams, r, task_index, lcfg.pd_temperature)
            l_reh = l_cr = None
            if rehearse and not buf.is_empty():
                idx = buf.sample_indices(cfg.batch_size)
                xb = buf.features[idx]
                rb = model.representation(xb)
                route = model.infer_tasks(rb.data) if use_tams else None
                lb = _logits_for(model, rb, route)
                if lcfg.alpha != 0:
                    if cfg.method == "derpp":
                        idx2 = buf.sample_indices(cfg.batch_size)
                        r2 = model.representation(buf.features[idx2])
                        route2 = model.infer_tasks(r2.data) if use_tams else None
                        l_reh = loss_task(_logits_for(model, r2, route2), buf.labels[idx2])
                    else:
                        l_reh = loss_task(lb, buf.labels[idx])
                if lcfg.beta != 0 and cfg.method in ("derpp", "tamil"):
                    if cfg.method == "tamil" and model.ema is not None:
                        er = model.ema.representation(xb)
                        z = _logits_for(model.ema, er, route).data
                        l_cr = loss_consistency(z, lb)
                    else:
                        z, mask = buf.padded_logits(idx, lb.shape[1])
                        if cfg.method == "derpp":
                            l_cr = loss_der_logit_replay(z, lb, mask)
                        else:
                            l_cr = loss_consistency(z, lb, mask)
            total, br = loss_total(l_task, lcfg, l_reh, l_cr, l_pd)
            nx.backward(total)
            opt.step()
            if model.ema is not None:
                model.ema_update()
            if rehearse:
                buf.offer_batch(x, y, task_index, logits.data if store_logits else None)
            log.steps += 1
            log.last = br
            total_sum += br.total
    log.mean_total = total_sum / log.steps if log.steps else 0.0
    return log


@dataclass
class Predictions:
    """Per-sample evaluation output for one mode."""

    logits: np.ndarray
    predicted: np.ndarray
    route: np.ndarray | None


def predict(model: TamilModel, x: np.ndarray, mode: EvalMode, true_tasks=None, task_classes=None) -> Predictions:
    """Logits and predicted labels under ``mode``.

    ``true_tasks`` is required for TASK_IL and ORACLE; ``task_classes`` (one
    class-id list per task) is required for TASK_IL masking.
    """
    mode = EvalMode(mode)
    r = model.representation(nx.tensor(x))
    route = None
    if model.config.use_tams:
        if mode is EvalMode.CLASS_IL:
            route = model.infer_tasks(r.data)
        else:
            if true_tasks is None:
                raise ValueError(f"{mode.value} evaluation needs task identities")
            route = np.asarray(true_tasks, dtype=np.int64)
        logits = model.head_routed(r, route).data
    else:
        logits = model.head(r).data
    if mode is EvalMode.TASK_IL:
        if true_tasks is None or task_classes is None:
            raise ValueError("task_il evaluation needs task identities and class lists")
        masked = np.full_like(logits, -np.inf)
        for t in np.unique(true_tasks):
            rows = np.asarray(true_tasks) == t
            cols = list(task_classes[int(t)])
            masked[np.ix_(rows, cols)] = logits[np.ix_(rows, cols)]
        predicted = masked.argmax(axis=1)
    else:
        predicted = logits.argmax(axis=1)
    return Predictions(logits, predicted, route)


def evaluate(model: TamilModel, stream: TaskStream, upto_task: int, mode: EvalMode) -> list[float]:
    """Test accuracy on each of tasks ``0..upto_task``."""
    task_classes = [s.class_ids for s in stream.tasks]
    accs = []
    for t in range(upto_task + 1):
        spec = stream.tasks[t]
        if len(spec.test_y) == 0:
            accs.append(float("nan"))
            continue
        p = predict(model, spec.test_x, mode, np.full(len(spec.test_y), t), task_classes)
        accs.append(float(np.mean(p.predicted == spec.test_y)))
    return accs


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _nan_to_none(a: np.ndarray) -> list:
    return [[None if np.isnan(v) else float(v) for v in row] for row in a]


def diagnostics(model: TamilModel, stream: TaskStream, n_bins: int = 10) -> dict:
    """Post-training analyses on the full test set under Class-IL inference."""
    xs = np.concatenate([s.test_x for s in stream.tasks])
    ys = np.concatenate([s.test_y for s in stream.tasks])
    ts = np.concatenate([np.full(len(s.test_y), i) for i, s in enumerate(stream.tasks)])
    out: dict = {}
    if len(ys) == 0:
        return out
    p = predict(model, xs, EvalMode.CLASS_IL)
    probs = _softmax(p.logits)
    owner = stream.task_of_class()[: probs.shape[1]]
    out["task_probabilities"] = metrics.task_probabilities(probs, owner, len(stream)).tolist()
    conf = probs.max(axis=1)
    correct = p.predicted == ys
    out["reliability"] = metrics.reliability_bins(conf, correct, n_bins)
    out["ece"] = metrics.ece(conf, correct, n_bins)
    if model.tams:
        out["routing_accuracy"] = metrics.routing_accuracy(p.route, ts)
        out["tam_similarity"] = metrics.tam_similarity(model)
        out["tam_mean_activation"] = metrics.tam_mean_activation(model, [s.test_x for s in stream.tasks])
    else:
        out["routing_accuracy"] = None
    return out


TaskHook = Callable[[int, TamilModel, ReservoirBuffer | None], None]


def run_stream(
    stream: TaskStream,
    cfg: TrainConfig,
    on_task_start: TaskHook | None = None,
    on_task_end: TaskHook | None = None,
) -> tuple[TamilModel, dict]:
    """Train over every task in order, evaluating all seen tasks after each one."""
    model = TamilModel(cfg.model_config(stream.n_features), seed=cfg.seed)
    n = len(stream)
    data_rng = child_rng(cfg.seed, "data")
    buf = None
    if cfg.method in REHEARSAL_METHODS:
        buf = ReservoirBuffer(cfg.buffer_capacity, stream.n_features, child_rng(cfg.seed, "buffer"))
    modes = list(EvalMode)
    acc = {m: np.full((n, n), np.nan) for m in modes}
    logs = []

    if cfg.method == "joint":
        for spec in stream.tasks:
            model.add_task(spec.n_classes)
        log = train_task(model, stream.joint(), None, cfg, 0, data_rng)
        logs.append(log.mean_total)
        for m in modes:
            acc[m][:, n - 1] = evaluate(model, stream, n - 1, m)
    else:
        for t, spec in enumerate(stream.tasks):
            model.add_task(spec.n_classes)
            if on_task_start is not None:
                on_task_start(t, model, buf)
            log = train_task(model, spec, buf, cfg, t, data_rng)
            logs.append(log.mean_total)
            for m in modes:
                acc[m][: t + 1, t] = evaluate(model, stream, t, m)
            logger.info("task %d done: class-il %s", t, acc[EvalMode.CLASS_IL][: t + 1, t].round(4))
            if on_task_end is not None:
                on_task_end(t, model, buf)

    report: dict = {"config": cfg.to_dict(), "seed": cfg.seed, "n_tasks": n, "accuracy": {}}
    for m in modes:
        has_final = not np.any(np.isnan(acc[m][:, -1]))
        per, mean = metrics.forgetting(acc[m]) if has_final else ([], None)
        report["accuracy"][m.value] = {
            "matrix": _nan_to_none(acc[m]),
            "final_average": metrics.final_average_accuracy(acc[m]) if has_final else None,
            "forgetting": per,
            "forgetting_mean": mean,
        }
    report["mean_train_loss"] = logs
    report["parameters"] = model.count_parameters()
    report["buffer_seen"] = None if buf is None else buf.seen_count
    report.update(diagnostics(model, stream, cfg.n_bins))
    return model, report
