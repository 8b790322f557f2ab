"""Backbone, task attention modules, expanding classifier and EMA shadow."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

TAM_VARIANTS = ("autoencoder", "mlp", "linear", "gate_only")
_ACTIVATIONS = {
    "relu": nx.relu,
    "sigmoid": nx.sigmoid,
    "tanh": nx.tanh,
    "none": lambda t: t,
}
CHECKPOINT_VERSION = 1


def _activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(_ACTIVATIONS)}") from None


class Linear:
    """Affine map with (in, out) weight and a bias row, fan-in uniform init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        if zero or rng is None:
            w, b = np.zeros((n_in, n_out)), np.zeros(n_out)
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = nx.parameter(w)
        self.bias = nx.parameter(b)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add(nx.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Backbone:
    """ReLU MLP ``F -> hidden... -> D``; the output is the common representation."""

    def __init__(self, n_features: int, hidden: tuple[int, ...], rep_dim: int, rng: np.random.Generator):
        dims = (n_features, *hidden, rep_dim)
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.rep_dim = rep_dim

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers:
            h = nx.relu(layer(h))
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class Tam:
    """Task attention module: maps a representation to per-feature coefficients.

    ``autoencoder``: out_act(W2 . enc_act(W1 r + b1) + b2) with a bottleneck d < D.
    ``mlp``: the same two-layer shape without the bottleneck (hidden width D).
    ``linear``: a single D -> D affine layer.
    ``gate_only``: no parameters, out_act(r).
    """

    def __init__(
        self,
        rep_dim: int,
        latent_dim: int,
        rng: np.random.Generator | None,
        variant: str = "autoencoder",
        encoder_activation: str = "relu",
        output_activation: str = "sigmoid",
    ):
        if variant not in TAM_VARIANTS:
            raise ValueError(f"unknown TAM variant {variant!r}; expected one of {TAM_VARIANTS}")
        if variant == "autoencoder" and not 0 < latent_dim < rep_dim:
            raise ValueError(
                f"autoencoder TAM must be undercomplete: latent {latent_dim} vs representation {rep_dim}"
            )
        if variant == "linear":
            output_activation = "none"
        self.variant = variant
        self.rep_dim = rep_dim
        self.latent_dim = latent_dim if variant == "autoencoder" else rep_dim
        self.encoder_activation = encoder_activation
        self.output_activation = output_activation
        self._enc_act = _activation(encoder_activation)
        self._out_act = _activation(output_activation)
        self.encoder: Linear | None = None
        self.selector: Linear | None = None
        if variant in ("autoencoder", "mlp"):
            self.encoder = Linear(rep_dim, self.latent_dim, rng)
            self.selector = Linear(self.latent_dim, rep_dim, rng)
        elif variant == "linear":
            self.selector = Linear(rep_dim, rep_dim, rng)

    def encode(self, r: Tensor) -> Tensor:
        if self.encoder is None:
            raise ValueError(f"{self.variant} TAM has no feature extractor")
        return self._enc_act(self.encoder(r))

    def __call__(self, r: Tensor) -> Tensor:
        if r.shape[-1] != self.rep_dim:
            raise ValueError(f"TAM expects representation width {self.rep_dim}, got {r.shape}")
        if self.variant == "gate_only":
            return self._out_act(r)
        h = self.encode(r) if self.encoder is not None else r
        return self._out_act(self.selector(h))

    def parameters(self) -> list[Tensor]:
        return [p for m in (self.encoder, self.selector) if m is not None for p in m.parameters()]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


def tam_parameter_count(rep_dim: int, latent_dim: int) -> int:
    """Autoencoder TAM size: two weight matrices and two biases."""
    return 2 * rep_dim * latent_dim + latent_dim + rep_dim


class ExpandingClassifier:
    """Single linear head whose class columns grow as tasks arrive."""

    def __init__(self, rep_dim: int, bias: bool = True, init: str = "zero"):
        if init not in ("zero", "uniform"):
            raise ValueError(f"classifier init must be 'zero' or 'uniform', got {init!r}")
        self.rep_dim = rep_dim
        self.use_bias = bias
        self.init = init
        self.weight = nx.parameter(np.zeros((rep_dim, 0)))
        self.bias = nx.parameter(np.zeros(0)) if bias else None

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def expand(self, n_new: int, rng: np.random.Generator | None = None) -> None:
        if self.init == "uniform" and rng is not None:
            bound = 1.0 / np.sqrt(self.rep_dim)
            w_new = rng.uniform(-bound, bound, size=(self.rep_dim, n_new))
            b_new = rng.uniform(-bound, bound, size=n_new)
        else:
            w_new, b_new = np.zeros((self.rep_dim, n_new)), np.zeros(n_new)
        self.weight.data = np.concatenate([self.weight.data, w_new], axis=1)
        self.weight.grad = None
        if self.bias is not None:
            self.bias.data = np.concatenate([self.bias.data, b_new])
            self.bias.grad = None

    def __call__(self, h: Tensor) -> Tensor:
        out = nx.matmul(h, self.weight)
        return nx.add(out, self.bias) if self.bias is not None else out

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = 32
    hidden: tuple[int, ...] = (128,)
    rep_dim: int = 64
    latent_dim: int = 8
    use_tams: bool = True
    tam_variant: str = "autoencoder"
    tam_encoder_activation: str = "relu"
    tam_output_activation: str = "sigmoid"
    classifier_bias: bool = True
    classifier_init: str = "zero"
    ema_enabled: bool = False
    ema_decay: float = 0.95
    ema_rate: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.tam_variant == "autoencoder" and self.use_tams and not 0 < self.latent_dim < self.rep_dim:
            raise ValueError(f"latent_dim {self.latent_dim} must be in (0, rep_dim={self.rep_dim})")
        for name in ("ema_decay", "ema_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


class TamilModel:
    """Backbone f, TAM list, expanding classifier g, and an optional EMA copy.

    ``self.ema`` is itself a ``TamilModel`` (without its own shadow) whose
    parameters never require gradients.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, *, _shadow: bool = False):
        from .seeding import child_rng

        self.config = config
        self.seed = seed
        self.init_rng = child_rng(seed, "init")
        self.ema_rng = child_rng(seed, "ema")
        self.backbone = Backbone(config.n_features, config.hidden, config.rep_dim, self.init_rng)
        self.tams: list[Tam] = []
        self.classifier = ExpandingClassifier(config.rep_dim, config.classifier_bias, config.classifier_init)
        self.task_classes: list[int] = []
        self.ema: TamilModel | None = None
        if config.ema_enabled and not _shadow:
            self.ema = self._make_shadow()

    def _make_shadow(self) -> "TamilModel":
        shadow = copy.copy(self)
        shadow.ema = None
        shadow.backbone = copy.deepcopy(self.backbone)
        shadow.tams = copy.deepcopy(self.tams)
        shadow.classifier = copy.deepcopy(self.classifier)
        shadow.task_classes = list(self.task_classes)
        for p in shadow.parameters():
            p.requires_grad = False
            p.grad = None
        return shadow

    # structure -----------------------------------------------------------
    @property
    def n_tasks(self) -> int:
        return len(self.task_classes)

    @property
    def n_classes(self) -> int:
        return self.classifier.n_classes

    def parameters(self) -> list[Tensor]:
        params = list(self.backbone.parameters())
        for tam in self.tams:
            params += tam.parameters()
        return params + self.classifier.parameters()

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def add_task(self, n_classes: int) -> None:
        """Append a fresh TAM (freezing the earlier ones) and widen the classifier."""
        cfg = self.config
        if cfg.use_tams:
            for tam in self.tams:
                tam.set_trainable(False)
            self.tams.append(
                Tam(
                    cfg.rep_dim,
                    cfg.latent_dim,
                    self.init_rng,
                    cfg.tam_variant,
                    cfg.tam_encoder_activation,
                    cfg.tam_output_activation,
                )
            )
        self.classifier.expand(n_classes, self.init_rng)
        self.task_classes.append(n_classes)
        if self.ema is not None:
            ema = self.ema
            if cfg.use_tams:
                new_tam = copy.deepcopy(self.tams[-1])
                new_tam.set_trainable(False)
                ema.tams.append(new_tam)
            k = n_classes
            ema.classifier.weight.data = np.concatenate(
                [ema.classifier.weight.data, self.classifier.weight.data[:, -k:]], axis=1
            )
            if ema.classifier.bias is not None:
                ema.classifier.bias.data = np.concatenate(
                    [ema.classifier.bias.data, self.classifier.bias.data[-k:]]
                )
            ema.task_classes.append(n_classes)

    # forward ---------------------------------------------------------------
    def representation(self, x) -> Tensor:
        return self.backbone(x if isinstance(x, Tensor) else nx.tensor(x))

    def gate(self, r: Tensor, k: int) -> Tensor:
        if not 0 <= k < len(self.tams):
            raise IndexError(f"TAM index {k} outside [0, {len(self.tams)})")
        return self.tams[k](r)

    def head(self, r: Tensor, k: int | None = None) -> Tensor:
        """Classifier logits for representation ``r`` gated by TAM ``k`` (ungated if None)."""
        if k is None:
            return self.classifier(r)
        return self.classifier(nx.mul(self.gate(r, k), r))

    def head_routed(self, r: Tensor, route: np.ndarray) -> Tensor:
        """Per-sample TAM choice: row i is gated by TAM ``route[i]``."""
        route = np.asarray(route)
        used = np.unique(route)
        if len(used) == 1:
            return self.head(r, int(used[0]))
        gate = None
        for k in used:
            mask = np.zeros(r.shape)
            mask[route == k] = 1.0
            part = nx.mul(self.gate(r, int(k)), nx.tensor(mask))
            gate = part if gate is None else nx.add(gate, part)
        return self.classifier(nx.mul(gate, r))

    def forward(self, x, k: int | None = None) -> Tensor:
        """Logits through TAM ``k``; plain ``g(f(x))`` when the model has no TAMs."""
        r = self.representation(x)
        if not self.config.use_tams:
            return self.head(r, None)
        if k is None or not 0 <= k < len(self.tams):
            raise IndexError(f"TAM index {k} outside [0, {len(self.tams)})")
        return self.head(r, k)

    def match_scores(self, r: np.ndarray) -> np.ndarray:
        """Squared distance ``||tam_k(r) - r||^2`` for every sample (rows) and TAM (cols)."""
        rt = nx.tensor(r)
        return np.stack(
            [((tam(rt).data - r) ** 2).sum(axis=1) for tam in self.tams], axis=1
        ) if self.tams else np.zeros((r.shape[0], 0))

    def infer_tasks(self, r: np.ndarray) -> np.ndarray:
        """Lowest matching criterion per sample; ties go to the lowest index."""
        if not self.tams:
            raise ValueError("no TAMs to route to")
        return np.argmin(self.match_scores(r), axis=1)

    # EMA -------------------------------------------------------------------
    def ema_update(self) -> bool:
        """Stochastic EMA step; returns True when the shadow moved."""
        if self.ema is None:
            raise ValueError("EMA is not enabled for this model")
        u = self.ema_rng.random()
        if self.config.ema_rate <= u:
            return False
        eta = self.config.ema_decay
        for s, w in zip(self.ema.parameters(), self.parameters()):
            s.data = eta * s.data + (1.0 - eta) * w.data
        return True

    def ema_forward(self, x, k: int | None = None) -> Tensor:
        if self.ema is None:
            raise ValueError("EMA is not enabled for this model")
        return self.ema.forward(x, k)

    # bookkeeping -----------------------------------------------------------
    def count_parameters(self) -> dict:
        backbone = sum(p.data.size for p in self.backbone.parameters())
        per_tam = [tam.n_parameters() for tam in self.tams]
        classifier = sum(p.data.size for p in self.classifier.parameters())
        working = backbone + sum(per_tam) + classifier
        ema = working if self.ema is not None else 0
        return {
            "backbone": backbone,
            "per_tam": per_tam,
            "classifier": classifier,
            "ema": ema,
            "total": working + ema,
        }

    def state_dict(self) -> dict:
        def arrays(m: "TamilModel") -> list:
            return [p.data.tolist() for p in m.parameters()]

        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        return {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "config": cfg,
            "task_classes": list(self.task_classes),
            "n_classes": self.n_classes,
            "shapes": [list(p.shape) for p in self.parameters()],
            "parameters": arrays(self),
            "trainable": [p.requires_grad for p in self.parameters()],
            "ema": None if self.ema is None else {"parameters": arrays(self.ema), "rng_state": self.ema_rng.bit_generator.state},
            "init_rng_state": self.init_rng.bit_generator.state,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "TamilModel":
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')}")
        cfg = dict(state["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        model = cls(ModelConfig(**cfg), seed=state["seed"])
        for n in state["task_classes"]:
            model.add_task(n)
        for p, arr, flag in zip(model.parameters(), state["parameters"], state["trainable"]):
            p.data = np.array(arr, dtype=np.float64).reshape(p.shape)
            p.requires_grad = flag
        if state["ema"] is not None:
            for p, arr in zip(model.ema.parameters(), state["ema"]["parameters"]):
                p.data = np.array(arr, dtype=np.float64).reshape(p.shape)
            model.ema_rng.bit_generator.state = state["ema"]["rng_state"]
        model.init_rng.bit_generator.state = state["init_rng_state"]
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.state_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TamilModel":
        return cls.from_state_dict(json.loads(Path(path).read_text(encoding="utf-8")))
