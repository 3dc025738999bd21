"""Patchified flow-volume transformer: embedding, masked encoder, MLP head.

Architecture: each curve is cut into N patches of length P, linearly
projected to d_embed, prefixed with a learnable CLS token, summed with
learned positional encodings, and passed through a post-layer-norm encoder
stack (multi-head attention with key-padding masks, then a 4x GELU
feed-forward). The CLS output row feeds a small MLP producing one logit;
sigmoid of that logit is the endpoint probability.

Positional encodings are sized to the largest patch count the model was
built for; shorter sequences slice the leading rows, so appending pure-pad
patches never changes the logit.

Training follows the reference protocol: Adam, binary cross-entropy on the
logit, an 80/10/10 train/val/test split derived from the config seed, and
model selection at the best validation ROC-AUC epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, NumericsError, ShapeError
from .evaluation import roc_auc
from .preproc import FlowVolumeCurve, PatchSequence, patchify
from .tensorcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    patch_len: int = 30
    d_embed: int = 200
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    dropout: float = 0.1
    lr: float = 1e-5
    epochs: int = 30
    batch_size: int = 64
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 1

    def validate(self) -> None:
        if self.d_embed % self.heads != 0:
            raise ConfigError(
                f"d_embed {self.d_embed} not divisible by heads {self.heads}"
            )
        if min(self.patch_len, self.d_embed, self.layers, self.heads,
               self.ffn_mult, self.epochs, self.batch_size) < 1:
            raise ConfigError("all structural config values must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 \
                or min(self.split) <= 0:
            raise ConfigError(f"split {self.split} must be three positive shares of 1")

    def to_obj(self) -> dict:
        return {
            "patch_len": self.patch_len, "d_embed": self.d_embed,
            "layers": self.layers, "heads": self.heads,
            "ffn_mult": self.ffn_mult, "dropout": self.dropout,
            "lr": self.lr, "epochs": self.epochs,
            "batch_size": self.batch_size, "split": list(self.split),
            "seed": self.seed,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ModelConfig":
        known = {f: obj[f] for f in cls.__dataclass_fields__ if f in obj}
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "split" in known:
            known["split"] = tuple(known["split"])
        cfg = cls(**known)
        cfg.validate()
        return cfg


HEAD_HIDDEN = 64  # MLP head: d_embed -> 64 -> 1


@dataclass
class ModelParams:
    """Named parameter tensors plus the geometry they were built for."""

    tensors: dict  # name -> Tensor
    n_patches_max: int
    config: ModelConfig

    def names(self) -> list[str]:
        return list(self.tensors)

    def as_list(self) -> list[Tensor]:
        return [self.tensors[k] for k in self.tensors]

    def replace_values(self, values: list[Tensor]) -> "ModelParams":
        return ModelParams(
            tensors=dict(zip(self.tensors.keys(), values)),
            n_patches_max=self.n_patches_max,
            config=self.config,
        )

    def copy_data(self) -> dict:
        return {k: t.data.copy() for k, t in self.tensors.items()}


def parameter_shapes(config: ModelConfig, n_patches_max: int) -> dict:
    d, p = config.d_embed, config.patch_len
    f = config.ffn_mult * d
    shapes = {
        "w_proj": (d, p), "b_proj": (d,),
        "cls": (1, d), "pos": (n_patches_max + 1, d),
    }
    for l in range(config.layers):
        pre = f"enc{l}."
        for name in ("wq", "wk", "wv", "wo"):
            shapes[pre + name] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[pre + name] = (d,)
        shapes[pre + "ln1_g"] = (d,)
        shapes[pre + "ln1_b"] = (d,)
        shapes[pre + "ffn_w1"] = (f, d)
        shapes[pre + "ffn_b1"] = (f,)
        shapes[pre + "ffn_w2"] = (d, f)
        shapes[pre + "ffn_b2"] = (d,)
        shapes[pre + "ln2_g"] = (d,)
        shapes[pre + "ln2_b"] = (d,)
    shapes["head_w1"] = (HEAD_HIDDEN, d)
    shapes["head_b1"] = (HEAD_HIDDEN,)
    shapes["head_w2"] = (1, HEAD_HIDDEN)
    shapes["head_b2"] = (1,)
    return shapes


def init_params(config: ModelConfig, n_patches_max: int, seed: int | None = None) -> ModelParams:
    """Xavier-uniform weight matrices; CLS and positions N(0, 0.02); zero biases."""
    config.validate()
    rng = np.random.default_rng([config.seed if seed is None else seed, 11])
    tensors: dict = {}
    for name, shape in parameter_shapes(config, n_patches_max).items():
        base = name.split(".")[-1]
        if base in ("cls", "pos"):
            data = rng.normal(0.0, 0.02, size=shape)
        elif base.startswith("w") or base.startswith("ffn_w") or base.startswith("head_w"):
            fan_out, fan_in = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        elif base.endswith("_g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors=tensors, n_patches_max=n_patches_max, config=config)


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the interpretability path needs from one forward pass."""

    h: np.ndarray  # [N+1, d_embed]
    cls_embedding: np.ndarray  # [d_embed]
    logit: float
    probability: float
    attention: np.ndarray  # [layers, heads, N+1, N+1]
    mask: np.ndarray  # [N+1] bool


def embed_patches(seq: PatchSequence, params: ModelParams) -> Tensor:
    """Project patches and prepend the CLS token, adding positions.

    Row 0 is cls + pos[0]; row i >= 1 is w_proj @ p_i + b_proj + pos[i].
    """
    t = params.tensors
    n = seq.n_patches
    if n > params.n_patches_max:
        raise ShapeError(
            f"{n} patches exceed the positional table ({params.n_patches_max})"
        )
    z = tc.linear(Tensor(seq.patches), t["w_proj"], t["b_proj"])  # [N, d]
    rows = tc.concat([t["cls"], z], axis=0)  # [N+1, d]
    return tc.add(rows, t["pos"][: n + 1])


def forward_batch(
    params: ModelParams,
    patches: np.ndarray,
    mask: np.ndarray,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor], Tensor]:
    """Run the encoder on a batch.

    patches: [B, N, P] standardized patch values; mask: [B, N+1] with True at
    padding patches (slot 0 is the CLS and must be False).
    Returns (logits [B], per-layer attention tensors [B, heads, N+1, N+1],
    encoder output H [B, N+1, d]).
    """
    cfg = params.config
    t = params.tensors
    patches = np.asarray(patches, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if patches.ndim != 3 or patches.shape[2] != cfg.patch_len:
        raise ShapeError(
            f"patches {patches.shape} do not match [B, N, P={cfg.patch_len}]"
        )
    b, n = patches.shape[0], patches.shape[1]
    if mask.shape != (b, n + 1):
        raise ShapeError(f"mask {mask.shape} does not match patches {patches.shape}")
    if n > params.n_patches_max:
        raise ShapeError(
            f"{n} patches exceed the positional table ({params.n_patches_max})"
        )
    rng = dropout_rng if training else None

    z = tc.linear(Tensor(patches), t["w_proj"], t["b_proj"])  # [B, N, d]
    cls_row = tc.reshape(t["cls"], (1, 1, cfg.d_embed))
    cls_tiled = tc.add(cls_row, Tensor(np.zeros((b, 1, cfg.d_embed))))
    h = tc.concat([cls_tiled, z], axis=1)  # [B, N+1, d]
    h = tc.add(h, t["pos"][: n + 1])
    h = tc.dropout(h, cfg.dropout, rng)

    attns: list[Tensor] = []
    for l in range(cfg.layers):
        pre = f"enc{l}."
        q = tc.linear(h, t[pre + "wq"], t[pre + "bq"])
        k = tc.linear(h, t[pre + "wk"], t[pre + "bk"])
        v = tc.linear(h, t[pre + "wv"], t[pre + "bv"])
        mixed, attn = tc.masked_multi_head_attention(q, k, v, mask, cfg.heads)
        attns.append(attn)
        mixed = tc.linear(mixed, t[pre + "wo"], t[pre + "bo"])
        h = tc.layer_norm(tc.add(h, tc.dropout(mixed, cfg.dropout, rng)),
                          t[pre + "ln1_g"], t[pre + "ln1_b"])
        ff = tc.linear(tc.gelu(tc.linear(h, t[pre + "ffn_w1"], t[pre + "ffn_b1"])),
                       t[pre + "ffn_w2"], t[pre + "ffn_b2"])
        h = tc.layer_norm(tc.add(h, tc.dropout(ff, cfg.dropout, rng)),
                          t[pre + "ln2_g"], t[pre + "ln2_b"])
        if not np.all(np.isfinite(h.data)):
            raise NumericsError(f"non-finite activations after encoder layer {l}")

    cls_h = h[:, 0, :]  # [B, d]
    hidden = tc.gelu(tc.linear(cls_h, t["head_w1"], t["head_b1"]))
    logits = tc.reshape(tc.linear(hidden, t["head_w2"], t["head_b2"]), (b,))
    if not np.all(np.isfinite(logits.data)):
        raise NumericsError("non-finite logits after the MLP head")
    return logits, attns, h


def forward(curve: FlowVolumeCurve, params: ModelParams,
            config: ModelConfig | None = None) -> ForwardTrace:
    """Single standardized curve -> trace (dropout off)."""
    cfg = config or params.config
    seq = patchify(curve, cfg.patch_len)
    logits, attns, h = forward_batch(
        params, seq.patches[None, :, :], seq.mask[None, :], training=False
    )
    logit = float(logits.data[0])
    attention = np.stack([a.data[0] for a in attns])  # [layers, heads, L, L]
    return ForwardTrace(
        h=h.data[0],
        cls_embedding=h.data[0, 0].copy(),
        logit=logit,
        probability=float(1.0 / (1.0 + np.exp(-logit))),
        attention=attention,
        mask=seq.mask.copy(),
    )


def predict(params: ModelParams, curve: FlowVolumeCurve) -> tuple[float, np.ndarray]:
    trace = forward(curve, params)
    return trace.probability, trace.cls_embedding


def predict_batch(
    params: ModelParams, patches: np.ndarray, mask: np.ndarray,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and CLS embeddings for [B, N, P] inputs, dropout off."""
    probs = []
    embs = []
    for i in range(0, patches.shape[0], batch_size):
        logits, _, h = forward_batch(
            params, patches[i : i + batch_size], mask[i : i + batch_size]
        )
        z = logits.data
        probs.append(np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                              np.exp(z) / (1.0 + np.exp(z))))
        embs.append(h.data[:, 0, :])
    return np.concatenate(probs), np.concatenate(embs)


# ---------------------------------------------------------------------------
# training protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingBundle:
    """Patchified, standardized model inputs for one endpoint."""

    patches: np.ndarray  # [n, N, P]
    mask: np.ndarray  # [n, N+1] bool
    labels: np.ndarray  # [n] in {0,1}


def split_indices(n: int, split: tuple, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic train/val/test index split shared by every method."""
    if n < 3:
        raise ConfigError(f"cannot split {n} examples three ways")
    rng = np.random.default_rng([seed, 20260101])
    perm = rng.permutation(n)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train : n_train + n_val])
    test = np.sort(perm[n_train + n_val :])
    if min(train.size, val.size, test.size) == 0:
        raise ConfigError(f"empty split for n={n} with shares {split}")
    return train, val, test


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    best_epoch: int = -1


def _bce_loss_and_grads(params: ModelParams, xb, mb, yb, training, rng):
    logits, _, _ = forward_batch(params, xb, mb, training=training, dropout_rng=rng)
    loss = tc.binary_cross_entropy_with_logits(logits, yb)
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
             for p in params.as_list()]
    return float(loss.data), grads


def _mean_bce(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def train(bundle: TrainingBundle, config: ModelConfig) -> tuple[ModelParams, TrainHistory]:
    """Train on the bundle's train split; select the best-val-AUC epoch.

    The split is derived from config.seed, so callers using split_indices with
    the same seed see the same partition.
    """
    config.validate()
    n = bundle.patches.shape[0]
    if bundle.labels.shape != (n,) or bundle.mask.shape[0] != n:
        raise ShapeError(
            f"bundle arrays disagree: {bundle.patches.shape} patches, "
            f"{bundle.mask.shape} mask, {bundle.labels.shape} labels"
        )
    tr, va, _ = split_indices(n, config.split, config.seed)
    x_tr, m_tr, y_tr = bundle.patches[tr], bundle.mask[tr], bundle.labels[tr].astype(float)
    x_va, m_va, y_va = bundle.patches[va], bundle.mask[va], bundle.labels[va].astype(float)

    params = init_params(config, n_patches_max=bundle.patches.shape[1])
    state = tc.init_adam_state(params.as_list())
    shuffle_rng = np.random.default_rng([config.seed, 31])
    dropout_rng = np.random.default_rng([config.seed, 47])
    history = TrainHistory()
    best = {"auc": -1.0, "data": params.copy_data(), "epoch": -1}

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(tr.size)
        epoch_loss = 0.0
        for start in range(0, tr.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = _bce_loss_and_grads(
                params, x_tr[idx], m_tr[idx], y_tr[idx],
                training=True, rng=dropout_rng,
            )
            epoch_loss += loss * idx.size
            new_values, state = tc.adam_step(params.as_list(), grads, state, config.lr)
            params = params.replace_values(new_values)
        history.train_loss.append(epoch_loss / tr.size)

        val_probs, _ = predict_batch(params, x_va, m_va)
        clipped = np.clip(val_probs, 1e-12, 1.0 - 1e-12)
        val_logits = np.log(clipped) - np.log1p(-clipped)
        history.val_loss.append(_mean_bce(val_logits, y_va))
        try:
            auc = roc_auc(val_probs, y_va.astype(int))
        except Exception:
            auc = 0.5  # degenerate validation split (single class)
        history.val_auc.append(auc)
        # ties go to the later epoch (sharper boundary at equal ranking skill)
        if auc >= best["auc"]:
            best = {"auc": auc, "data": params.copy_data(), "epoch": epoch}

    history.best_epoch = best["epoch"]
    final = {k: Tensor(v, requires_grad=True) for k, v in best["data"].items()}
    return (
        ModelParams(tensors=final, n_patches_max=params.n_patches_max, config=config),
        history,
    )
