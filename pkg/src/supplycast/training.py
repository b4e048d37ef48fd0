"""Log-score rewards, group-relative advantages and the toy-policy trainer.

For a deterministic logistic policy p = sigmoid(w.x), gradient ascent on the
mean log-score reward is exactly logistic-regression maximum likelihood, so
the trainer below is plain (optionally L2-regularized) gradient ascent on the
clamped log likelihood.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import ForecastingQuestion
from .errors import AnswerParseError, Diverged, GroupTooSmall, InputError, MissingRollouts
from .forecasters import FeatureConfig, ToyPolicy, featurize, sigmoid
from .promptkit import parse_answer

log = logging.getLogger(__name__)

DEFAULT_CLAMP = 1e-4
DEFAULT_EPSILON_STD = 1e-8
FALLBACK_PROBABILITY = 0.5


@dataclass(frozen=True)
class Reward:
    question_id: str
    rollout_index: int
    probability: float
    outcome: int
    value: float


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 200
    batch_size: int = 256
    clamp_epsilon: float = DEFAULT_CLAMP
    l2: float = 0.0
    seed: int = 0
    validation_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.clamp_epsilon < 0.5:
            raise InputError(f"clamp_epsilon must be in (0, 0.5), got {self.clamp_epsilon}")
        if not self.learning_rate > 0:
            raise InputError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise InputError("validation_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**d)


def log_score_reward(p, y, epsilon: float = DEFAULT_CLAMP):
    """y*ln(p) + (1-y)*ln(1-p) with p clamped to [epsilon, 1-epsilon].

    Works elementwise on arrays; returns a float for scalar input.
    """
    if not 0.0 < epsilon < 0.5:
        raise InputError(f"epsilon must be in (0, 0.5), got {epsilon}")
    p = np.clip(np.asarray(p, dtype=float), epsilon, 1.0 - epsilon)
    y = np.asarray(y, dtype=float)
    r = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    return float(r) if r.ndim == 0 else r


def group_advantages(rewards, epsilon_std: float = DEFAULT_EPSILON_STD) -> np.ndarray:
    """(r - mean(r)) / (population std(r) + epsilon_std)."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"advantage group needs at least 2 rewards, got {r.size}")
    centered = r - r.mean()
    return centered / (r.std(ddof=0) + epsilon_std)


# ---------------------------------------------------------------- objective


def mean_reward(w, X, y, epsilon: float = DEFAULT_CLAMP, l2: float = 0.0) -> float:
    p = sigmoid(X @ w)
    return float(np.mean(log_score_reward(p, y, epsilon))) - 0.5 * l2 * float(w @ w)


def reward_gradient(w, X, y, epsilon: float = DEFAULT_CLAMP, l2: float = 0.0) -> np.ndarray:
    """Analytic gradient of :func:`mean_reward`.

    Inside the clamp band d/dw of the log score is (y - p) x; where the clamp
    is active the reward is flat and contributes nothing.
    """
    p = sigmoid(X @ w)
    active = (p > epsilon) & (p < 1.0 - epsilon)
    resid = np.where(active, y - p, 0.0)
    return X.T @ resid / len(y) - l2 * w


def brier_of(w, X, y) -> float:
    return float(np.mean((sigmoid(X @ w) - y) ** 2))


def fit_logistic(X, y, config: TrainConfig, X_val=None, y_val=None, w0=None):
    """Mini-batch gradient ascent on mean clamped log score.

    Returns ``(weights, curve)``; ``curve`` holds one row per epoch with the
    full-training-set mean reward and validation Brier (None without a
    validation set). Deterministic given ``config.seed``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(y):
        raise InputError("training data must be a non-empty (n, d) matrix with n labels")
    if not np.all(np.isfinite(X)):
        raise InputError("features contain non-finite values")
    rng = np.random.default_rng(config.seed)
    w = np.zeros(X.shape[1]) if w0 is None else np.array(w0, dtype=float)
    n = len(X)
    bs = min(config.batch_size, n)
    curve = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                w = w + config.learning_rate * reward_gradient(w, X[idx], y[idx], config.clamp_epsilon, config.l2)
                if not np.all(np.isfinite(w)):
                    raise Diverged(f"non-finite weights at epoch {epoch}; lower the learning rate")
            val = None if X_val is None or len(X_val) == 0 else brier_of(w, np.asarray(X_val, float), np.asarray(y_val, float))
            curve.append(
                {"epoch": epoch, "mean_reward": mean_reward(w, X, y, config.clamp_epsilon), "brier_on_validation": val}
            )
    return w, curve


def chronological_holdout(questions: Sequence[ForecastingQuestion], fraction: float):
    """Split labeled questions so the latest ``fraction`` of months is held out."""
    if fraction <= 0:
        return list(questions), []
    months = sorted({q.t for q in questions})
    n_hold = max(1, int(round(fraction * len(months))))
    if n_hold >= len(months):
        raise InputError("validation_fraction leaves no training months")
    cut = months[-n_hold]
    return [q for q in questions if q.t < cut], [q for q in questions if q.t >= cut]


def design_matrix(questions: Sequence[ForecastingQuestion], feature_config: FeatureConfig):
    X = np.array([featurize(q, feature_config).as_array() for q in questions], dtype=float)
    y = np.array([q.label for q in questions], dtype=float)
    return X, y


def train_toy(
    dataset: Sequence[ForecastingQuestion],
    config: TrainConfig,
    feature_config: FeatureConfig = FeatureConfig(),
):
    """Train a :class:`ToyPolicy` on labeled questions. Returns ``(policy, curve)``."""
    labeled = [q for q in dataset if q.label is not None]
    if not labeled:
        raise InputError("no labeled questions to train on")
    train, val = chronological_holdout(labeled, config.validation_fraction)
    X, y = design_matrix(train, feature_config)
    if val:
        Xv, yv = design_matrix(val, feature_config)
    else:
        Xv = yv = None
    # Fit in standardized coordinates, then fold the affine map back into
    # weights over raw features. The last column is the constant bias.
    mu = X[:, :-1].mean(axis=0)
    sd = X[:, :-1].std(axis=0)
    sd[sd == 0] = 1.0
    Z = _standardize(X, mu, sd)
    Zv = None if Xv is None else _standardize(Xv, mu, sd)
    v, curve = fit_logistic(Z, y, config, Zv, yv)
    w = np.empty_like(v)
    w[:-1] = v[:-1] / sd
    w[-1] = v[-1] - float(np.sum(v[:-1] * mu / sd))
    return ToyPolicy(w, feature_config.names, feature_config), curve


def _standardize(X, mu, sd):
    Z = X.copy()
    Z[:, :-1] = (X[:, :-1] - mu) / sd
    return Z


def write_curve_csv(curve: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_reward", "brier_on_validation"])
        for row in curve:
            v = row["brier_on_validation"]
            w.writerow([row["epoch"], repr(row["mean_reward"]), "" if v is None else repr(v)])


# ---------------------------------------------------------------- rollouts


@dataclass(frozen=True)
class Rollout:
    question_id: str
    rollout_index: int
    output: str

    @classmethod
    def from_dict(cls, d: Mapping) -> "Rollout":
        return cls(d["question_id"], int(d["rollout_index"]), d.get("output", ""))


def export_advantage_batch(
    rollouts: Sequence[Rollout],
    labels: Mapping[str, int],
    epsilon: float = DEFAULT_CLAMP,
    epsilon_std: float = DEFAULT_EPSILON_STD,
) -> list[dict]:
    """Score rollouts with the log score and normalize within each question.

    Unparseable outputs are scored at p=0.5 and flagged, keeping group sizes
    fixed. Rollouts for questions without a label are skipped.
    """
    if not rollouts:
        raise MissingRollouts("no rollouts supplied")
    groups: dict[str, list[Rollout]] = defaultdict(list)
    for r in rollouts:
        groups[r.question_id].append(r)
    rows = []
    for qid in sorted(groups):
        if qid not in labels or labels[qid] is None:
            log.warning("skipping rollouts for unresolved question %s", qid)
            continue
        group = sorted(groups[qid], key=lambda r: r.rollout_index)
        if len(group) < 2:
            raise MissingRollouts(f"{qid}: {len(group)} rollout(s), need at least 2")
        y = int(labels[qid])
        probs, reasons, flags = [], [], []
        for r in group:
            try:
                parsed = parse_answer(r.output)
                probs.append(parsed.probability)
                reasons.append(parsed.reasoning)
                flags.append(False)
            except AnswerParseError:
                probs.append(FALLBACK_PROBABILITY)
                reasons.append(r.output)
                flags.append(True)
        rewards = log_score_reward(np.array(probs), np.full(len(probs), y), epsilon)
        adv = group_advantages(rewards, epsilon_std)
        for r, p, rew, a, reason, flag in zip(group, probs, rewards, adv, reasons, flags):
            rows.append(
                {
                    "question_id": qid,
                    "rollout_index": r.rollout_index,
                    "probability": p,
                    "reward": float(rew),
                    "advantage": float(a),
                    "reasoning": reason,
                    "unparseable": flag,
                }
            )
    return rows


def write_jsonl(rows: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def reward_record(question_id: str, rollout_index: int, p: float, y: int, epsilon: float = DEFAULT_CLAMP) -> Reward:
    return Reward(question_id, rollout_index, p, y, log_score_reward(p, y, epsilon))

