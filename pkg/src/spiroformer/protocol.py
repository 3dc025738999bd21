"""Per-seed trial orchestration: train the full stack, evaluate five methods.

One trial = one seed: split the dataset 80/10/10, train the transformer on
the train split with validation-AUC model selection, compute CLS embeddings,
train the fused boosted-tree classifier on the train split's embeddings plus
demographics, and package everything into a single checkpoint. Evaluation
reloads checkpoints, scores the test split with the transformer, the fused
classifier, both MLP baselines (trained inline, they take seconds), and the
clinical ratio score, then aggregates across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import (
    MlpConfig,
    mlp_baseline_predict,
    mlp_baseline_train,
    ratio_score,
)
from .checkpoint import Checkpoint
from .dataset import SpiroDataset
from .errors import DataError
from .evaluation import TrialResult, brier, roc_auc
from .fusion import GbdtConfig, GbdtEnsemble, gbdt_predict_batch, gbdt_train
from .model import (
    ModelConfig,
    ModelParams,
    TrainHistory,
    TrainingBundle,
    predict_batch,
    split_indices,
    train,
)

METHODS = ("transformer", "fused", "mlp_summary", "mlp_demographic", "ratio")


@dataclass
class TrialArtifacts:
    params: ModelParams
    history: TrainHistory
    fusion: GbdtEnsemble
    seed: int
    endpoint: str


def _fused_matrix(embeddings: np.ndarray, demographics: np.ndarray) -> np.ndarray:
    return np.concatenate([embeddings, demographics], axis=1)


def train_trial(
    ds: SpiroDataset,
    endpoint: str,
    config: ModelConfig,
    gbdt_config: GbdtConfig | None = None,
) -> TrialArtifacts:
    """Train transformer + fused classifier for one seed."""
    labels = ds.labels(endpoint)
    patches, mask = ds.model_inputs()
    bundle = TrainingBundle(patches=patches, mask=mask, labels=labels)
    params, history = train(bundle, config)

    tr, _, _ = split_indices(ds.n_records, config.split, config.seed)
    _, embeddings = predict_batch(params, patches, mask)
    fused = _fused_matrix(embeddings, ds.demographics_matrix())
    ensemble = gbdt_train(fused[tr], labels[tr], gbdt_config or GbdtConfig())
    return TrialArtifacts(
        params=params, history=history, fusion=ensemble,
        seed=config.seed, endpoint=endpoint,
    )


def evaluate_trial(
    ds: SpiroDataset,
    endpoint: str,
    checkpoint: Checkpoint,
    mlp_config: MlpConfig | None = None,
) -> list:
    """Score the seed's held-out test split with all five methods."""
    seed = checkpoint.seed
    if seed is None:
        raise DataError("checkpoint does not record its training seed")
    config = checkpoint.params.config
    labels = ds.labels(endpoint)
    patches, mask = ds.model_inputs()
    tr, _, te = split_indices(ds.n_records, config.split, seed)
    y_te = labels[te]

    results = []

    def add(method: str, scores: np.ndarray) -> None:
        results.append(TrialResult(
            endpoint=endpoint, method=method, seed=seed,
            auc=roc_auc(scores, y_te), brier=brier(scores, y_te),
        ))

    probs, embeddings = predict_batch(checkpoint.params, patches, mask)
    add("transformer", probs[te])

    if checkpoint.fusion is None:
        raise DataError("checkpoint has no fused classifier section")
    fused = _fused_matrix(embeddings, ds.demographics_matrix())
    add("fused", gbdt_predict_batch(checkpoint.fusion, fused[te]))

    base_cfg = mlp_config or MlpConfig()
    cfg = MlpConfig(lr=base_cfg.lr, epochs=base_cfg.epochs,
                    batch_size=base_cfg.batch_size, split=config.split, seed=seed)
    summary_x = ds.summary_matrix()
    m_sum, _ = mlp_baseline_train(summary_x, labels, cfg, input_kind="summary_stats")
    add("mlp_summary", mlp_baseline_predict(m_sum, summary_x[te]))

    demo_x = ds.demographics_matrix()
    m_demo, _ = mlp_baseline_train(demo_x, labels, cfg, input_kind="demographic")
    add("mlp_demographic", mlp_baseline_predict(m_demo, demo_x[te]))

    ratio_scores = np.array([ratio_score(s) for s in ds.summaries()])
    add("ratio", ratio_scores[te])
    return results
