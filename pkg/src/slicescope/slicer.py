"""Slicing function: a small classifier that scores slice membership.

Trained on validation embeddings with the discovered slice as the positive
class, then used to rank unseen (test) samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

ARCHITECTURES = ("logistic", "mlp_1hidden")


class SlicerError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    architecture: str = "logistic"
    hidden_dim: int = 64
    epochs: int = 200
    learning_rate: float = 0.05
    l2: float = 1e-4
    class_weighting: str = "balanced"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise SlicerError(f"unknown architecture {self.architecture!r}")
        if self.class_weighting not in ("balanced", "none"):
            raise SlicerError(f"unknown class weighting {self.class_weighting!r}")
        if self.epochs < 1 or self.learning_rate <= 0 or self.hidden_dim < 1 or self.l2 < 0:
            raise SlicerError("invalid training configuration")


@dataclass(frozen=True, eq=False)
class SlicerModel:
    architecture: str
    input_dim: int
    mean: np.ndarray
    scale: np.ndarray
    params: dict[str, np.ndarray]
    hidden_dim: int | None = None
    training_meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        # repr-based float encoding is shortest round-trip, so loading is bit-exact
        doc = {
            "architecture": self.architecture,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "standardization": {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
            "parameters": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in self.params.items()},
            "training_meta": self.training_meta,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> SlicerModel:
        doc = json.loads(text)
        if doc.get("architecture") not in ARCHITECTURES:
            raise SlicerError(f"unknown architecture {doc.get('architecture')!r}")
        params = {
            k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["parameters"].items()
        }
        return cls(
            architecture=doc["architecture"],
            input_dim=int(doc["input_dim"]),
            hidden_dim=doc.get("hidden_dim"),
            mean=np.array(doc["standardization"]["mean"], dtype=np.float64),
            scale=np.array(doc["standardization"]["scale"], dtype=np.float64),
            params=params,
            training_meta=doc.get("training_meta", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> SlicerModel:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _logits(arch: str, params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    if arch == "logistic":
        return (x @ params["w"])[:, 0] + params["b"][0]
    h = np.maximum(x @ params["w1"] + params["b1"], 0.0)
    return (h @ params["w2"])[:, 0] + params["b2"][0]


def _loss_and_grad(arch, params, x, y, c, l2):
    """Class-weighted mean BCE (+ L2 on weight matrices) and its gradient."""
    z = _logits(arch, params, x)
    nll = -(y * log_expit(z) + (1 - y) * log_expit(-z))
    loss = float(c @ nll) + 0.5 * l2 * sum(float(np.sum(v * v)) for k, v in params.items() if k.startswith("w"))
    dz = c * (expit(z) - y)
    grads: dict[str, np.ndarray] = {}
    if arch == "logistic":
        grads["w"] = x.T @ dz[:, None] + l2 * params["w"]
        grads["b"] = np.array([dz.sum()])
    else:
        pre = x @ params["w1"] + params["b1"]
        h = np.maximum(pre, 0.0)
        grads["w2"] = h.T @ dz[:, None] + l2 * params["w2"]
        grads["b2"] = np.array([dz.sum()])
        dh = dz[:, None] * params["w2"][:, 0][None, :] * (pre > 0)
        grads["w1"] = x.T @ dh + l2 * params["w1"]
        grads["b1"] = dh.sum(axis=0)
    return loss, grads


def train_slicer(embeddings: np.ndarray, mask, config: TrainConfig | None = None) -> SlicerModel:
    """Full-batch gradient descent on class-weighted binary cross-entropy.

    Inputs are standardised with training-row statistics (stored in the
    model). If a step would raise the loss, the step size is halved for that
    epoch until it does not, so the training loss never increases.
    """
    config = config or TrainConfig()
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(mask).astype(bool).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise SlicerError(f"embeddings {x.shape} and mask ({y.shape[0]},) disagree")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SlicerError("single-class mask: need at least one positive and one negative sample")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - mean) / scale
    yf = y.astype(np.float64)
    pos_weight = n_neg / n_pos if config.class_weighting == "balanced" else 1.0
    c = np.where(y, pos_weight, 1.0)
    c /= c.sum()

    d = x.shape[1]
    rng = np.random.default_rng(config.seed)
    if config.architecture == "logistic":
        params = {"w": _glorot(rng, d, 1), "b": np.zeros(1)}
    else:
        h = config.hidden_dim
        params = {"w1": _glorot(rng, d, h), "b1": np.zeros(h), "w2": _glorot(rng, h, 1), "b2": np.zeros(1)}

    loss, grads = _loss_and_grad(config.architecture, params, xs, yf, c, config.l2)
    halvings = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate
        while True:
            trial = {k: v - lr * grads[k] for k, v in params.items()}
            new_loss, new_grads = _loss_and_grad(config.architecture, trial, xs, yf, c, config.l2)
            if not math.isfinite(new_loss):
                raise SlicerError(f"training diverged (non-finite loss) at epoch {epoch}")
            if new_loss <= loss:
                break
            lr *= 0.5
            halvings += 1
            if lr < 1e-12:
                trial, new_loss, new_grads = params, loss, grads
                break
        params, loss, grads = trial, new_loss, new_grads

    return SlicerModel(
        architecture=config.architecture,
        input_dim=d,
        hidden_dim=config.hidden_dim if config.architecture == "mlp_1hidden" else None,
        mean=mean,
        scale=scale,
        params=params,
        training_meta={
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "l2": config.l2,
            "class_weighting": config.class_weighting,
            "positive_weight": pos_weight,
            "seed": config.seed,
            "step_halvings": halvings,
            "final_loss": loss,
        },
    )


def predict_proba(model: SlicerModel, embeddings: np.ndarray) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise SlicerError(f"expected embeddings with {model.input_dim} columns, got shape {x.shape}")
    return expit(_logits(model.architecture, model.params, (x - model.mean) / model.scale))


def select_test_slice(probabilities, alpha: float) -> np.ndarray:
    """Mask of the ``floor(alpha * n)`` highest-probability samples (ties: lower index)."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    m = int(math.floor(alpha * p.size + 1e-9))
    if m < 1:
        raise SlicerError(f"alpha={alpha} selects no samples out of {p.size}")
    order = np.argsort(-p, kind="stable")
    mask = np.zeros(p.size, dtype=bool)
    mask[order[:m]] = True
    return mask
