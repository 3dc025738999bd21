"""Non-transformer comparison methods: ratio score and two small MLPs.

The ratio score flips FEV1/FVC so larger values mean higher risk, matching
the orientation of every learned method (the clinical convention flags a
ratio below 0.7). The two MLP baselines share one architecture, two hidden
layers 32 -> 16 with GELU, and the same loss/optimizer stack as the
transformer: Adam on binary cross-entropy with best-validation-AUC model
selection. They differ only in the input slice: [fev1, fvc, ratio] for the
summary-stats variant, [age, sex, smoking, height] for the demographic one.
Inputs are z-scored with training-split statistics stored on the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, DataError, ShapeError
from .evaluation import roc_auc
from .model import split_indices
from .preproc import SpiroSummary
from .tensorcore import Tensor

INPUT_KINDS = ("summary_stats", "demographic")
HIDDEN = (32, 16)


def ratio_score(summary: SpiroSummary) -> float:
    """Risk orientation of the clinical ratio: score = 1 - FEV1/FVC."""
    if summary.fvc_l <= 0 or not math.isfinite(summary.ratio):
        raise DataError(
            f"degenerate summary: fvc={summary.fvc_l}, ratio={summary.ratio}"
        )
    if not (0.0 <= summary.ratio <= 1.0):
        raise DataError(f"ratio {summary.ratio} outside [0, 1]")
    return 1.0 - summary.ratio


def summary_features(summary: SpiroSummary) -> np.ndarray:
    """Baseline input slice in documented order [FEV1, FVC, ratio]."""
    return np.array([summary.fev1_l, summary.fvc_l, summary.ratio])


def demographic_features(demographics) -> np.ndarray:
    """Baseline input slice in documented order [age, sex, smoking, height]."""
    if hasattr(demographics, "height_cm"):
        return np.array(
            [demographics.age, demographics.sex, demographics.smoking,
             demographics.height_cm],
            dtype=np.float64,
        )
    vec = np.asarray(demographics, dtype=np.float64)
    if vec.shape != (4,):
        raise ShapeError(f"expected 4 demographic values, got shape {vec.shape}")
    return vec


@dataclass(frozen=True)
class MlpConfig:
    lr: float = 1e-2
    epochs: int = 40
    batch_size: int = 64
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 1

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 \
                or min(self.split) <= 0:
            raise ConfigError(f"split {self.split} must be three positive shares of 1")


@dataclass
class MlpBaseline:
    input_kind: str
    tensors: dict  # w1,b1,w2,b2,w3,b3
    input_mean: np.ndarray
    input_sd: np.ndarray
    config: MlpConfig

    def to_obj(self) -> dict:
        return {
            "input_kind": self.input_kind,
            "input_mean": self.input_mean.tolist(),
            "input_sd": self.input_sd.tolist(),
        }


@dataclass
class MlpHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    best_epoch: int = -1


def _init_mlp(input_dim: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, 17])
    dims = [input_dim, HIDDEN[0], HIDDEN[1], 1]
    tensors = {}
    for i in range(3):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"w{i+1}"] = Tensor(
            rng.uniform(-limit, limit, size=(fan_out, fan_in)), requires_grad=True
        )
        tensors[f"b{i+1}"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return tensors


def _mlp_logits(tensors: dict, x: np.ndarray) -> Tensor:
    h = tc.gelu(tc.linear(Tensor(x), tensors["w1"], tensors["b1"]))
    h = tc.gelu(tc.linear(h, tensors["w2"], tensors["b2"]))
    out = tc.linear(h, tensors["w3"], tensors["b3"])
    return tc.reshape(out, (x.shape[0],))


def _standardize(x: np.ndarray, mean: np.ndarray, sd: np.ndarray) -> np.ndarray:
    return (x - mean) / sd


def mlp_baseline_train(
    inputs: np.ndarray,
    labels: np.ndarray,
    config: MlpConfig | None = None,
    input_kind: str = "summary_stats",
) -> tuple[MlpBaseline, MlpHistory]:
    """Train an MLP baseline; selection at the best validation ROC-AUC epoch."""
    cfg = config or MlpConfig()
    cfg.validate()
    if input_kind not in INPUT_KINDS:
        raise ConfigError(f"input_kind {input_kind!r} not one of {INPUT_KINDS}")
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError(f"inputs {x.shape} and labels {y.shape} do not align")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite baseline inputs")

    tr, va, _ = split_indices(x.shape[0], cfg.split, cfg.seed)
    mean = x[tr].mean(axis=0)
    sd = np.maximum(x[tr].std(axis=0, ddof=0), 1e-6)
    x_tr, y_tr = _standardize(x[tr], mean, sd), y[tr]
    x_va, y_va = _standardize(x[va], mean, sd), y[va]

    tensors = _init_mlp(x.shape[1], cfg.seed)
    names = list(tensors)
    state = tc.init_adam_state([tensors[k] for k in names])
    shuffle_rng = np.random.default_rng([cfg.seed, 53])
    history = MlpHistory()
    best = {"auc": -1.0, "data": {k: t.data.copy() for k, t in tensors.items()},
            "epoch": -1}

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(tr.size)
        epoch_loss = 0.0
        for start in range(0, tr.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = _mlp_logits(tensors, x_tr[idx])
            loss = tc.binary_cross_entropy_with_logits(logits, y_tr[idx])
            loss.backward()
            epoch_loss += float(loss.data) * idx.size
            params = [tensors[k] for k in names]
            grads = [p.grad for p in params]
            new_values, state = tc.adam_step(params, grads, state, cfg.lr)
            tensors = dict(zip(names, new_values))
        history.train_loss.append(epoch_loss / tr.size)

        val_logits = _mlp_logits(tensors, x_va).data
        history.val_loss.append(
            float(np.mean(np.maximum(val_logits, 0) - val_logits * y_va
                          + np.log1p(np.exp(-np.abs(val_logits)))))
        )
        try:
            auc = roc_auc(val_logits, y_va.astype(int))
        except Exception:
            auc = 0.5
        history.val_auc.append(auc)
        # ties go to the later epoch: among equal-AUC snapshots the most
        # trained one has the sharpest decision boundary
        if auc >= best["auc"]:
            best = {"auc": auc, "data": {k: t.data.copy() for k, t in tensors.items()},
                    "epoch": epoch}

    history.best_epoch = best["epoch"]
    final = {k: Tensor(v, requires_grad=True) for k, v in best["data"].items()}
    model = MlpBaseline(
        input_kind=input_kind, tensors=final, input_mean=mean, input_sd=sd,
        config=cfg,
    )
    return model, history


def mlp_baseline_predict(model: MlpBaseline, inputs: np.ndarray) -> np.ndarray:
    """Probabilities for one input row or a [n, d] matrix."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.input_mean.size:
        raise ShapeError(
            f"input width {x.shape[1]} does not match trained width "
            f"{model.input_mean.size}"
        )
    z = _mlp_logits(model.tensors, _standardize(x, model.input_mean, model.input_sd)).data
    ez = np.exp(-np.abs(z))
    probs = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return float(probs[0]) if single else probs
