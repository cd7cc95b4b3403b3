"""Per-objective indices, dynamic quota allocation and result fusion."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import ModelConfig, ModelParams, UserBatch, user_tower

log = logging.getLogger(__name__)

INDEX_VERSION = 1


# -- indices -----------------------------------------------------------------------------

@dataclass
class IVFStructure:
    """Inverted lists over spherical k-means centroids."""

    centroids: np.ndarray  # [C, d]
    lists: list[np.ndarray]  # row positions per centroid
    nprobe: int


def spherical_kmeans(x: np.ndarray, n_lists: int, seed: int, iters: int = 20) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n_lists = max(1, min(n_lists, x.shape[0]))
    cent = x[rng.choice(x.shape[0], size=n_lists, replace=False)].copy()
    for _ in range(iters):
        assign = np.argmax(x @ cent.T, axis=1)
        sums = np.zeros_like(cent)
        np.add.at(sums, assign, x)
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        empty = norms[:, 0] < 1e-12
        cent = np.where(empty[:, None], cent, sums / np.maximum(norms, 1e-12))
    return cent


def _ivf_lists(x: np.ndarray, centroids: np.ndarray) -> list[np.ndarray]:
    assign = np.argmax(x @ centroids.T, axis=1)
    return [np.flatnonzero(assign == c) for c in range(centroids.shape[0])]


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray
    truncated: bool = False  # Q exceeded the index size
    fallback: bool = False  # approximate search fell back to exact


def _top(scores: np.ndarray, ids: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    if q >= scores.shape[0]:
        order = np.lexsort((ids, -scores))
    else:
        # partition first, then a total order on (score desc, id asc) among survivors
        kth = np.partition(-scores, q - 1)[q - 1]
        cand = np.flatnonzero(-scores <= kth)
        order = cand[np.lexsort((ids[cand], -scores[cand]))][:q]
    return ids[order], scores[order]


@dataclass
class ObjectiveIndex:
    objective: int
    ids: np.ndarray  # ascending, unique
    embeddings: np.ndarray  # [n, d], unit rows
    checkpoint_hash: str = ""
    name: str = ""
    ivf: IVFStructure | None = None
    build_seed: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.ids.shape[0] != self.embeddings.shape[0]:
            raise ValueError("ids and embeddings disagree in length")
        if np.unique(self.ids).shape[0] != self.ids.shape[0]:
            raise ValueError("index item ids must be unique")
        order = np.argsort(self.ids, kind="stable")
        self.ids, self.embeddings = self.ids[order], self.embeddings[order]
        self.ids.setflags(write=False)
        self.embeddings.setflags(write=False)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1] if self.embeddings.ndim == 2 else 0

    def build_ivf(self, n_lists: int | None = None, nprobe: int | None = None, seed: int = 0) -> None:
        if len(self) == 0:
            return
        n_lists = n_lists or max(1, int(round(np.sqrt(len(self)))))
        cent = spherical_kmeans(self.embeddings, n_lists, seed)
        nprobe = nprobe or default_nprobe(cent.shape[0])
        self.ivf = IVFStructure(cent, _ivf_lists(self.embeddings, cent), min(nprobe, cent.shape[0]))
        self.build_seed = seed


def default_nprobe(n_lists: int) -> int:
    return max(1, int(np.ceil(0.6 * n_lists)))


def search_exact(index: ObjectiveIndex, query: np.ndarray, q: int) -> SearchResult:
    """Top-q by inner product, ties broken by ascending item id."""
    if q < 0:
        raise ValueError("Q must be >= 0")
    if q == 0 or len(index) == 0:
        return SearchResult(np.zeros(0, dtype=np.int64), np.zeros(0), truncated=q > len(index))
    scores = index.embeddings @ np.asarray(query, dtype=np.float64)
    ids, sc = _top(scores, index.ids, q)
    return SearchResult(ids, sc, truncated=q > len(index))


def search_approx(index: ObjectiveIndex, query: np.ndarray, q: int, nprobe: int | None = None) -> SearchResult:
    """IVF search over the ``nprobe`` closest lists; exact when no structure exists."""
    if index.ivf is None:
        res = search_exact(index, query, q)
        return SearchResult(res.ids, res.scores, res.truncated, fallback=True)
    if q < 0:
        raise ValueError("Q must be >= 0")
    if q >= len(index):
        return search_exact(index, query, q)
    if q == 0:
        return SearchResult(np.zeros(0, dtype=np.int64), np.zeros(0))
    query = np.asarray(query, dtype=np.float64)
    ivf = index.ivf
    probe = nprobe or ivf.nprobe
    cscore = ivf.centroids @ query
    lists = np.lexsort((np.arange(cscore.shape[0]), -cscore))[:probe]
    rows = np.concatenate([ivf.lists[c] for c in lists])
    scores = index.embeddings[rows] @ query
    ids, sc = _top(scores, index.ids[rows], q)
    return SearchResult(ids, sc)


# -- weights and quotas ----------------------------------------------------------------------

@dataclass
class ItemWeightStore:
    ids: np.ndarray
    weights: np.ndarray  # [n, K], rows on the simplex

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("item weight rows must sum to 1")
        self._pos = {int(i): r for r, i in enumerate(self.ids)}

    @property
    def K(self) -> int:
        return self.weights.shape[1]

    def get(self, item: int) -> np.ndarray | None:
        r = self._pos.get(int(item))
        return None if r is None else self.weights[r]

    def __contains__(self, item) -> bool:
        return int(item) in self._pos


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def aggregate_user_weights(history_items: Sequence[int], store: ItemWeightStore, n: int | None = None,
                           temperature: float = 1.0) -> np.ndarray:
    """softmax of the summed weights of the last ``n`` history items found in the store."""
    items = list(history_items)
    if n is not None:
        items = items[-n:] if n > 0 else []
    total = np.zeros(store.K)
    for it in items:
        w = store.get(it)
        if w is not None:
            total += w
    return _softmax(total / temperature)


def allocate_quota(weights: Sequence[float], q_total: int) -> np.ndarray:
    """Floor of w_k * Q_total, leftover units to the largest fractional parts (ties: lower k)."""
    w = np.asarray(weights, dtype=np.float64)
    if q_total < 0:
        raise ValueError("Q_total must be >= 0")
    if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be a probability vector")
    raw = w * q_total
    base = np.floor(raw).astype(np.int64)
    left = int(q_total - base.sum())
    if left > 0:
        frac = raw - base
        order = np.lexsort((np.arange(w.shape[0]), -frac))
        base[order[:left]] += 1
    elif left < 0:
        # floating error in w*Q can overshoot by a unit; take back from the smallest fractions
        frac = raw - base
        order = np.lexsort((-np.arange(w.shape[0]), frac))
        for k in order:
            if left == 0:
                break
            if base[k] > 0:
                base[k] -= 1
                left += 1
    return base


def allocate_with_capacity(weights: np.ndarray, q_total: int, capacity: Sequence[int]) -> np.ndarray:
    """Quota allocation that re-floors over objectives still under capacity."""
    weights = np.asarray(weights, dtype=np.float64)
    cap = np.asarray(capacity, dtype=np.int64)
    quota = np.zeros(weights.shape[0], dtype=np.int64)
    active = cap > 0
    remaining = int(q_total)
    while remaining > 0 and active.any():
        w = np.where(active, weights, 0.0)
        w = w / w.sum() if w.sum() > 0 else active / active.sum()
        alloc = allocate_quota(w, remaining)
        over = active & (quota + alloc > cap)
        if not over.any():
            quota += alloc
            break
        for k in np.flatnonzero(over):
            remaining -= int(cap[k] - quota[k])
            quota[k] = cap[k]
            active[k] = False
    return quota


# -- serving pipeline -------------------------------------------------------------------------

@dataclass
class Candidate:
    item: int
    score: float
    objectives: list[int]


@dataclass
class FusedResult:
    candidates: list[Candidate]
    quota: list[int]
    weights: list[float]
    planned_quota: list[int] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def item_ids(self) -> list[int]:
        return [c.item for c in self.candidates]


def fuse(results: Sequence[SearchResult]) -> list[Candidate]:
    """Merge per-objective lists; one row per item with its best score and all sources."""
    best: dict[int, Candidate] = {}
    for k, res in enumerate(results):
        for item, score in zip(res.ids.tolist(), res.scores.tolist()):
            c = best.get(item)
            if c is None:
                best[item] = Candidate(item, score, [k])
            else:
                c.objectives.append(k)
                if score > c.score:
                    c.score = score
    return sorted(best.values(), key=lambda c: (-c.score, c.item))


def retrieve(user_embs: np.ndarray, history_items: Sequence[int], q_total: int,
             indices: Sequence[ObjectiveIndex], store: ItemWeightStore, mode: str = "exact",
             history_window: int | None = None, pool: ThreadPoolExecutor | None = None) -> FusedResult:
    """Weight calculation, per-index search under quotas, fusion.

    ``user_embs`` is the K x d output of the user tower, computed once per request.
    """
    K = len(indices)
    if q_total < K:
        raise ValueError(f"q_total={q_total} must be >= K={K}")
    if mode not in ("exact", "approx"):
        raise ValueError(f"unknown search mode {mode!r}")
    weights = aggregate_user_weights(history_items, store, history_window)
    planned = allocate_quota(weights, q_total)
    flags = []
    sizes = [len(ix) for ix in indices]
    if any(planned[k] > sizes[k] for k in range(K)):
        flags.append("quota_redistributed")
        quota = allocate_with_capacity(weights, q_total, sizes)
    else:
        quota = planned
    search = search_exact if mode == "exact" else search_approx

    def run(k: int) -> SearchResult:
        return search(indices[k], user_embs[k], int(quota[k]))

    if pool is not None:
        results = list(pool.map(run, range(K)))
    else:
        results = [run(k) for k in range(K)]
    if any(r.fallback for r in results):
        flags.append("approx_fallback")
    return FusedResult(fuse(results), quota.tolist(), weights.tolist(), planned.tolist(), flags)


def encode_request_user(params: ModelParams, cfg: ModelConfig, batch: UserBatch) -> np.ndarray:
    with nx.no_grad():
        return user_tower(params, cfg, batch).data


# -- build + files -----------------------------------------------------------------------------

@dataclass
class IndexBundle:
    indices: list[ObjectiveIndex]
    store: ItemWeightStore
    checkpoint_hash: str
    item_author: np.ndarray
    item_tag: np.ndarray
    objectives: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return len(self.indices)


def positive_items(items: np.ndarray, labels: np.ndarray) -> list[np.ndarray]:
    """Per objective, sorted unique items with at least one positive label."""
    return [np.unique(items[labels[:, k] == 1]) for k in range(labels.shape[1])]


def build_indices(item_embs: np.ndarray, item_weights: np.ndarray, members: Sequence[np.ndarray],
                  checkpoint_hash: str = "", objectives: Sequence[str] = (), approx: bool = True,
                  n_lists: int | None = None, nprobe: int | None = None, seed: int = 0,
                  item_author: np.ndarray | None = None, item_tag: np.ndarray | None = None) -> IndexBundle:
    """One index per objective over its positive items; weights for the full catalog.

    ``item_embs`` is [n_items, K, d] and ``item_weights`` [n_items, K], both
    indexed by item id.
    """
    K = item_embs.shape[1]
    indices = []
    for k in range(K):
        ids = np.asarray(members[k], dtype=np.int64)
        if ids.size == 0:
            log.warning("objective %d has no positive items; its index is empty", k)
        ix = ObjectiveIndex(k, ids, item_embs[ids, k, :].reshape(ids.size, item_embs.shape[2]), checkpoint_hash,
                            objectives[k] if k < len(objectives) else str(k))
        if approx:
            ix.build_ivf(n_lists, nprobe, seed + k)
        indices.append(ix)
    n_items = item_embs.shape[0]
    store = ItemWeightStore(np.arange(n_items), item_weights)
    return IndexBundle(indices, store, checkpoint_hash,
                       np.zeros(n_items, np.int64) if item_author is None else np.asarray(item_author, np.int64),
                       np.zeros(n_items, np.int64) if item_tag is None else np.asarray(item_tag, np.int64),
                       tuple(objectives))


def _write(path: Path, arr: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read(path: Path, dtype: str, shape) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype=dtype).reshape(shape).astype(dtype.replace("<", "="))


def save_indices(bundle: IndexBundle, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for ix in bundle.indices:
        stem = f"index_{ix.objective}"
        _write(out / f"{stem}.emb.bin", ix.embeddings, "<f8")
        _write(out / f"{stem}.ids.bin", ix.ids, "<i8")
        entry = {"objective": ix.objective, "name": ix.name, "count": len(ix), "dim": ix.dim,
                 "checkpoint_hash": ix.checkpoint_hash, "embeddings": f"{stem}.emb.bin", "ids": f"{stem}.ids.bin",
                 "ivf": None}
        if ix.ivf is not None:
            _write(out / f"{stem}.centroids.bin", ix.ivf.centroids, "<f8")
            entry["ivf"] = {"centroids": f"{stem}.centroids.bin", "n_lists": int(ix.ivf.centroids.shape[0]),
                            "nprobe": ix.ivf.nprobe, "seed": ix.build_seed}
        entries.append(entry)
    _write(out / "weights.bin", bundle.store.weights, "<f8")
    _write(out / "weights.ids.bin", bundle.store.ids, "<i8")
    _write(out / "catalog.author.bin", bundle.item_author, "<i8")
    _write(out / "catalog.tag.bin", bundle.item_tag, "<i8")
    manifest = {
        "version": INDEX_VERSION,
        "checkpoint_hash": bundle.checkpoint_hash,
        "K": bundle.K,
        "objectives": list(bundle.objectives),
        "dim": bundle.indices[0].dim if bundle.indices else 0,
        "indices": entries,
        "weights": {"file": "weights.bin", "ids": "weights.ids.bin", "count": int(bundle.store.ids.size)},
        "catalog": {"author": "catalog.author.bin", "tag": "catalog.tag.bin", "count": int(bundle.item_author.size)},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_indices(path: str | Path) -> IndexBundle:
    src = Path(path)
    with open(src / "manifest.json", encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("version") != INDEX_VERSION:
        raise ValueError(f"unsupported index version {m.get('version')!r}")
    indices = []
    for e in m["indices"]:
        ids = _read(src / e["ids"], "<i8", (e["count"],))
        emb = _read(src / e["embeddings"], "<f8", (e["count"], e["dim"]))
        ix = ObjectiveIndex(e["objective"], ids, emb, e["checkpoint_hash"], e.get("name", ""))
        if e.get("ivf"):
            iv = e["ivf"]
            cent = _read(src / iv["centroids"], "<f8", (iv["n_lists"], e["dim"]))
            ix.ivf = IVFStructure(cent, _ivf_lists(ix.embeddings, cent), iv["nprobe"])
            ix.build_seed = iv["seed"]
        indices.append(ix)
    w = m["weights"]
    store = ItemWeightStore(_read(src / w["ids"], "<i8", (w["count"],)),
                            _read(src / w["file"], "<f8", (w["count"], m["K"])))
    c = m["catalog"]
    return IndexBundle(indices, store, m["checkpoint_hash"], _read(src / c["author"], "<i8", (c["count"],)),
                       _read(src / c["tag"], "<i8", (c["count"],)), tuple(m.get("objectives", ())))
