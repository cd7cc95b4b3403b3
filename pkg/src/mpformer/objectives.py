"""Multi-task InfoNCE with shared in-batch negatives, adaptive objective
weights and the quota-weight regression head."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .model import (ItemBatch, ModelConfig, ModelParams, UserBatch, item_features, item_tower,
                    quota_forward, user_tower)
from .numerics import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "TrainingBatch", "LossBreakdown", "InfoNCE", "infonce_loss", "alpha_weights", "quota_loss",
    "quota_forward", "total_loss", "QuotaInputs", "Adam", "align_pscore",
]


@dataclass
class TrainingBatch:
    users: UserBatch
    items: ItemBatch
    labels: np.ndarray  # [N, K] in {0, 1}
    pscore: np.ndarray  # [N]

    def __post_init__(self):
        if self.labels.shape[0] < 2:
            raise ValueError("a training batch needs N >= 2 pairs")
        if not np.all(self.labels.sum(axis=1) >= 1):
            raise ValueError("every pair must be positive for at least one objective")

    @property
    def size(self) -> int:
        return self.labels.shape[0]


class InfoNCE(NamedTuple):
    loss: Tensor
    present: bool  # False when the objective had no positives in the batch


def infonce_loss(user_embs: Tensor, item_embs: Tensor, labels, tau: float) -> InfoNCE:
    """Temperature-scaled softmax loss over the N in-batch items.

    Row i's positive is item i; the other N-1 items are its negatives. Rows
    with label 0 contribute nothing and the sum is averaged over positives.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[0]
    if n < 2:
        raise ValueError("infonce_loss needs N >= 2")
    n_pos = labels.sum()
    if n_pos == 0:
        return InfoNCE(Tensor(0.0), False)
    logits = nx.matmul(user_embs, nx.swap_last(item_embs))
    logp = nx.log_softmax(logits, temperature=tau)
    diag = logp[np.arange(n), np.arange(n)]
    return InfoNCE(nx.mul(nx.tsum(nx.mul(diag, labels)), -1.0 / n_pos), True)


def alpha_weights(positive_counts, gamma: float) -> np.ndarray:
    """Skewness-adaptive objective weights; rarer objectives weigh more."""
    counts = np.asarray(positive_counts, dtype=np.float64)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if np.any(counts < 1):
        raise ValueError(f"positive counts must be >= 1, got {counts.tolist()}")
    if np.all(counts == counts[0]):
        # x / (K * x) need not round to 1/K
        return np.full(counts.shape[0], 1.0 / counts.shape[0])
    raw = np.log1p(gamma / counts)
    return raw / raw.sum()


def quota_loss(pscore, scores, weights: Tensor) -> tuple[Tensor, bool]:
    """Mean squared error between pscore and the weight-mixed objective scores.

    ``scores`` are treated as constants (stop-gradient); returns ``(loss,
    nonempty)``.
    """
    pscore = np.asarray(pscore, dtype=np.float64)
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if pscore.size == 0:
        return Tensor(0.0), False
    mixed = nx.tsum(nx.mul(weights, scores), axis=-1)
    resid = nx.sub(mixed, pscore)
    return nx.tmean(nx.square(resid)), True


def align_pscore(pscore, scores) -> np.ndarray:
    """Affine map of pscore onto the batch mean/std of the mean objective score.

    pscore lives on an arbitrary scale, the cosine scores on their own; the
    regression is only meaningful once both share location and spread.
    """
    pscore = np.asarray(pscore, dtype=np.float64)
    ref = np.asarray(scores, dtype=np.float64).mean(axis=-1)
    if pscore.size == 0:
        return pscore
    sd = pscore.std()
    if pscore.size < 2 or sd < 1e-12:
        return np.full_like(pscore, ref.mean())
    return (pscore - pscore.mean()) / sd * ref.std() + ref.mean()


@dataclass
class LossBreakdown:
    total: Tensor
    per_objective: list[float]
    alpha: np.ndarray
    quota: Tensor
    absent: list[int] = field(default_factory=list)
    quota_inputs: QuotaInputs | None = None

    def training_loss(self, quota_weight: float = 1.0) -> Tensor:
        return nx.add(self.total, nx.mul(self.quota, quota_weight))

    def record(self, step: int, objectives) -> dict:
        rec = {"step": step, "loss": float(self.total.data), "quota_loss": float(self.quota.data)}
        for k, name in enumerate(objectives):
            rec[f"loss_{name}"] = self.per_objective[k]
            rec[f"alpha_{name}"] = float(self.alpha[k])
        return rec


def batch_alpha(labels: np.ndarray, gamma: float) -> np.ndarray:
    counts = labels.sum(axis=0).astype(np.float64)
    if np.any(counts < 1):
        log.warning("objective(s) %s have no positives in batch; counting them as 1",
                    np.flatnonzero(counts < 1).tolist())
        counts = np.maximum(counts, 1.0)
    return alpha_weights(counts, gamma)


@dataclass
class QuotaInputs:
    """Stop-gradient inputs of the quota term: s_k(u, i) and item features."""

    scores: np.ndarray
    features: np.ndarray


def total_loss(params: ModelParams, cfg: ModelConfig, batch: TrainingBatch,
               frozen: QuotaInputs | None = None) -> LossBreakdown:
    """Weighted multi-objective InfoNCE plus the (separately reported) quota loss.

    ``frozen`` pins the quota term's stop-gradient inputs. Finite-difference
    checks need it, since the analytic gradient treats them as constants.
    """
    u = user_tower(params, cfg, batch.users)
    v = item_tower(params, cfg, batch.items)
    alpha = batch_alpha(batch.labels, cfg.gamma)
    total = None
    per_obj, absent = [], []
    for k in range(cfg.K):
        res = infonce_loss(u[:, k, :], v[:, k, :], batch.labels[:, k], cfg.tau)
        per_obj.append(float(res.loss.data))
        if not res.present:
            absent.append(k)
            continue
        term = nx.mul(res.loss, float(alpha[k]))
        total = term if total is None else nx.add(total, term)
    if total is None:
        total = Tensor(0.0)
    # stop-gradient scores: s_k(u, i) on the positive pair
    if frozen is None:
        frozen = QuotaInputs(np.einsum("nkd,nkd->nk", u.data, v.data),
                             item_features(params, cfg, batch.items).data)
    w = quota_forward(params, cfg, batch.items, features=frozen.features)
    target = align_pscore(batch.pscore, frozen.scores) if cfg.quota_align else batch.pscore
    q, _ = quota_loss(target, frozen.scores, w)
    return LossBreakdown(total, per_obj, alpha, q, absent, frozen)


class Adam:
    """Adam with bias correction; state is exported for checkpoints."""

    def __init__(self, params: ModelParams, lr: float = 3e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{n}": a for n, a in self.m.items()}
        out.update({f"opt.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for n in self.params:
            if f"opt.m.{n}" in arrays:
                self.m[n] = arrays[f"opt.m.{n}"].copy()
                self.v[n] = arrays[f"opt.v.{n}"].copy()
