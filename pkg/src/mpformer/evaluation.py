"""Offline metrics, the attention cost model and the ID-homogenisation probe."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import SECONDS_PER_DAY, Dataset
from .model import ModelConfig, ModelParams, encode_items, user_tower

RECALL_KS = (10, 50, 100)
NDCG_KS = (1, 10, 100)


def recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """|top-k ∩ relevant| / min(|relevant|, k); 0.0 for an empty relevant set."""
    rel = set(relevant)
    if not rel or k <= 0:
        return 0.0
    hits = sum(1 for item in list(ranked)[:k] if item in rel)
    return hits / min(len(rel), k)


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """Binary-relevance NDCG with 1/log2(position + 1) gains."""
    rel = set(relevant)
    if not rel or k <= 0:
        return 0.0
    dcg = sum(1.0 / math.log2(p + 2) for p, item in enumerate(list(ranked)[:k]) if item in rel)
    ideal = sum(1.0 / math.log2(p + 2) for p in range(min(len(rel), k)))
    return dcg / ideal


def rank_items(scores: np.ndarray, item_ids: np.ndarray, k: int) -> np.ndarray:
    """Top-k item ids by descending score, ties to the smaller id."""
    order = np.lexsort((item_ids, -scores))
    return item_ids[order[:k]]


@dataclass
class EvalReport:
    metrics: dict[tuple[str, str, int], float] = field(default_factory=dict)
    random_recall: dict[tuple[str, int], float] = field(default_factory=dict)
    users_evaluated: dict[str, int] = field(default_factory=dict)
    users_skipped_no_history: int = 0
    mode: str = "catalog"

    def get(self, objective: str, metric: str, k: int) -> float:
        return self.metrics[(objective, metric, k)]

    def lines(self) -> list[str]:
        out = [f"{o} {m} {k} {v:.6f}" for (o, m, k), v in sorted(self.metrics.items())]
        out += [f"{o} random_recall {k} {v:.6f}" for (o, k), v in sorted(self.random_recall.items())]
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")

    def table(self) -> str:
        objectives = sorted({o for o, _, _ in self.metrics}, key=lambda o: o)
        cols = [("recall", k) for k in RECALL_KS] + [("ndcg", k) for k in NDCG_KS]
        head = "objective  " + "  ".join(f"{m}@{k:<4}" for m, k in cols)
        rows = [head]
        for o in objectives:
            vals = "  ".join(f"{self.metrics.get((o, m, k), float('nan')):>10.4f}" for m, k in cols)
            rows.append(f"{o:<10} {vals}")
        return "\n".join(rows)


def user_embeddings(params: ModelParams, cfg: ModelConfig, ds: Dataset, users, before_ts,
                    chunk: int = 512) -> np.ndarray:
    """[U, K, d] embeddings from each user's last n_max events before ``before_ts``."""
    users = np.asarray(users, dtype=np.int64)
    out = []
    with nx.no_grad():
        for lo in range(0, users.shape[0], chunk):
            batch = ds.user_history_batch(users[lo:lo + chunk], before_ts, cfg.n_max)
            out.append(user_tower(params, cfg, batch).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.K, cfg.d))


def item_embeddings(params: ModelParams, cfg: ModelConfig, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    with nx.no_grad():
        return encode_items(params, cfg, np.arange(ds.n_items), ds.item_tag, ds.item_author, ds.item_popularity)


def evaluate(params: ModelParams, cfg: ModelConfig, ds: Dataset, mode: str = "catalog",
             index_members: Sequence[np.ndarray] | None = None) -> EvalReport:
    """Recall/NDCG per objective on the last-day holdout.

    ``mode="catalog"`` ranks the whole catalog; ``mode="index"`` ranks only
    the items of objective k's index (``index_members[k]``).
    """
    if mode not in ("catalog", "index"):
        raise ValueError(f"unknown eval mode {mode!r}")
    if mode == "index" and index_members is None:
        raise ValueError("index mode needs index_members")
    cutoff = ds.test_day * SECONDS_PER_DAY
    test = ds.test_mask()
    users_with_test = np.unique(ds.events.user[test])
    has_history = np.array([np.any(ds.events.ts[ds.events.stream(u)] < cutoff) for u in users_with_test],
                           dtype=bool)
    report = EvalReport(mode=mode, users_skipped_no_history=int((~has_history).sum()))
    users = users_with_test[has_history]
    U = user_embeddings(params, cfg, ds, users, cutoff)
    V, _ = item_embeddings(params, cfg, ds)
    all_items = np.arange(ds.n_items)
    max_k = max(RECALL_KS + NDCG_KS)
    for k, name in enumerate(cfg.objectives):
        cand = all_items if mode == "catalog" else np.sort(np.asarray(index_members[k], dtype=np.int64))
        sums = {("recall", kk): 0.0 for kk in RECALL_KS} | {("ndcg", kk): 0.0 for kk in NDCG_KS}
        rand = {kk: 0.0 for kk in RECALL_KS}
        count = 0
        if cand.size:
            scores = U[:, k, :] @ V[cand, k, :].T
        for row, u in enumerate(users):
            s = ds.events.stream(u)
            held = s.start + np.flatnonzero(test[s] & (ds.labels[s, k] == 1))
            relevant = set(ds.events.item[held].tolist())
            if not relevant:
                continue
            count += 1
            ranked = rank_items(scores[row], cand, max_k) if cand.size else np.zeros(0, dtype=np.int64)
            ranked = ranked.tolist()
            for kk in RECALL_KS:
                sums[("recall", kk)] += recall_at_k(ranked, relevant, kk)
                rand[kk] += random_recall(len(relevant), cand.size or 1, kk)
            for kk in NDCG_KS:
                sums[("ndcg", kk)] += ndcg_at_k(ranked, relevant, kk)
        report.users_evaluated[name] = count
        for (metric, kk), total in sums.items():
            report.metrics[(name, metric, kk)] = total / count if count else 0.0
        for kk, total in rand.items():
            report.random_recall[(name, kk)] = total / count if count else 0.0
    return report


def random_recall(n_relevant: int, n_candidates: int, k: int) -> float:
    """Expected recall@k of a uniformly random ranking (hypergeometric mean)."""
    if n_relevant == 0:
        return 0.0
    k_eff = min(k, n_candidates)
    return (k_eff * n_relevant / n_candidates) / min(n_relevant, k)


# -- cost model -------------------------------------------------------------------------

def qkv_cost(n: int, d: int, K: int, mode: str, layers: int = 1) -> int:
    """Attention-block operation count with independent or shared QKV."""
    if min(n, d, K, layers) < 1:
        raise ValueError("n, d, K and layers must all be >= 1")
    if mode == "independent":
        return layers * K * ((n + 1) * d * d + (n + 1) ** 2 * d)
    if mode == "shared":
        return layers * ((n + K) * d * d + (n + K) ** 2 * d)
    raise ValueError(f"unknown mode {mode!r}")


def cost_table(n: int, d: int, Ks: Iterable[int], layers: int = 1) -> list[dict]:
    rows = []
    for K in Ks:
        ind, sh = qkv_cost(n, d, K, "independent", layers), qkv_cost(n, d, K, "shared", layers)
        rows.append({"n": n, "d": d, "K": K, "independent": ind, "shared": sh, "ratio": ind / sh})
    return rows


# -- similarity probe -----------------------------------------------------------------

@dataclass
class ProbeStats:
    mean: float
    std: float
    cosines: np.ndarray
    pairs: list[tuple[int, int]]

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.cosines, bins=bins, range=(-1.0, 1.0))

    def write_csv(self, path: str | Path, bins: int = 20) -> None:
        counts, edges = self.histogram(bins)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([f"{lo:.4f}", f"{hi:.4f}", int(c)])


def cross_objective_cosines(embs: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Cosine between Emb_u^j and Emb_u^k for all j < k, flattened over users."""
    unit = embs / np.maximum(np.linalg.norm(embs, axis=-1, keepdims=True), 1e-12)
    K = embs.shape[1]
    pairs = [(j, k) for j in range(K) for k in range(j + 1, K)]
    if not pairs:
        return np.zeros(0), pairs
    cos = np.stack([np.einsum("ud,ud->u", unit[:, j], unit[:, k]) for j, k in pairs], axis=1)
    return cos.reshape(-1), pairs


def similarity_probe(params: ModelParams, cfg: ModelConfig, ds: Dataset, users=None) -> ProbeStats:
    users = np.arange(ds.n_users) if users is None else np.asarray(users)
    embs = user_embeddings(params, cfg, ds, users, ds.test_day * SECONDS_PER_DAY)
    cos, pairs = cross_objective_cosines(embs)
    return ProbeStats(float(cos.mean()) if cos.size else 0.0, float(cos.std()) if cos.size else 0.0, cos, pairs)
