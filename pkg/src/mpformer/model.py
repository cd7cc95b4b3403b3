"""MPFormer user and item towers.

All forward functions operate on batches; the single-example helpers at the
bottom wrap them for convenience and tests.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

OBJECTIVES = ("pro_lvr", "max_time", "vtr")


@dataclass
class ModelConfig:
    d: int = 32
    n_max: int = 32
    K: int = 3
    L: int = 4
    pformer_layer: int = 3
    n_experts: int = 4
    expert_cut: int = 2
    ffn_hidden: int | None = None
    head_count: int = 1
    include_user_ids_in_query: bool = False
    tau: float = 0.1
    gamma: float = 100.0
    normalize: bool = True
    item_shared_mlp: bool = False
    mutually_masked_objectives: bool = False
    positional: bool = False
    rms_eps: float = 1e-6
    quota_hidden: int = 16
    quota_align: bool = True
    long_view_threshold: float = 0.4
    emb_init_std: float = 0.1
    # vocabulary sizes; index 0 of every table is the reserved OOV row
    n_items: int = 2000
    n_authors: int = 200
    n_tags: int = 40
    n_users: int = 500
    n_devices: int = 500
    n_age: int = 8
    n_gender: int = 3
    n_region: int = 16
    objectives: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.objectives is None:
            self.objectives = OBJECTIVES[:self.K] if self.K <= len(OBJECTIVES) else \
                tuple(f"objective_{k}" for k in range(self.K))
        self.objectives = tuple(self.objectives)
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.d
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.K < 1:
            problems.append("K")
        if not 1 <= self.pformer_layer <= self.L:
            problems.append("pformer_layer")
        if not 1 <= self.expert_cut <= self.n_experts:
            problems.append("expert_cut")
        if self.head_count < 1 or self.d % self.head_count:
            problems.append("head_count")
        if self.tau <= 0:
            problems.append("tau")
        if self.gamma <= 0:
            problems.append("gamma")
        if len(self.objectives) != self.K:
            problems.append("objectives")
        if problems:
            raise ValueError(f"invalid ModelConfig field(s): {', '.join(problems)}")

    @property
    def d_user_id(self) -> int:
        return self.d - self.d // 2

    @property
    def d_device_id(self) -> int:
        return self.d // 2

    @property
    def query_in(self) -> int:
        extra = self.d_user_id + self.d_device_id if self.include_user_ids_in_query else 0
        return 4 * self.d + extra

    @property
    def item_feat_in(self) -> int:
        return 3 * self.d + 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["objectives"] = list(self.objectives)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**raw)


# -- inputs -------------------------------------------------------------------------

@dataclass
class UserProfile:
    age: int = 0
    gender: int = 0
    region: int = 0
    user_id: int = 0
    device_id: int = 0


@dataclass
class BehaviorEvent:
    item_id: int
    watch_ratio: float = 0.0
    like: int = 0
    comment: int = 0
    share: int = 0
    author_id: int = 0
    tag_id: int = 0
    timestamp: int = 0

    def __post_init__(self):
        if not 0.0 <= self.watch_ratio <= 1.0:
            raise ValueError(f"watch_ratio out of [0,1]: {self.watch_ratio}")


@dataclass
class UserBatch:
    """Left-padded user inputs; ``valid[b, j]`` marks real history slots."""

    items: np.ndarray  # [B, n] raw item ids
    watch: np.ndarray  # [B, n]
    flags: np.ndarray  # [B, n, 3]
    authors: np.ndarray  # [B, n]
    tags: np.ndarray  # [B, n]
    valid: np.ndarray  # [B, n] bool
    age: np.ndarray
    gender: np.ndarray
    region: np.ndarray
    user_id: np.ndarray
    device_id: np.ndarray
    rs_mask: np.ndarray | None = None
    click_mask: np.ndarray | None = None
    long_view_mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.items.shape[0]

    def pool_masks(self, long_view_threshold: float):
        rs = self.valid if self.rs_mask is None else self.rs_mask
        click = (self.valid & (self.flags.sum(-1) > 0)) if self.click_mask is None else self.click_mask
        lv = (self.valid & (self.watch >= long_view_threshold)) if self.long_view_mask is None \
            else self.long_view_mask
        return rs, click, lv


@dataclass
class ItemBatch:
    items: np.ndarray
    tags: np.ndarray
    authors: np.ndarray
    popularity: np.ndarray

    @property
    def size(self) -> int:
        return self.items.shape[0]


def vocab_index(ids, size: int) -> np.ndarray:
    """Map raw ids to table rows; anything outside ``[0, size)`` hits row 0."""
    ids = np.asarray(ids, dtype=np.int64)
    return np.where((ids >= 0) & (ids < size), ids + 1, 0)


# -- parameters ---------------------------------------------------------------------

class ModelParams(dict):
    """Ordered name -> Tensor map covering both towers and the quota head."""

    def tower_names(self) -> list[str]:
        return [n for n in self if not n.startswith("quota.")]

    def quota_names(self) -> list[str]:
        return [n for n in self if n.startswith("quota.")]

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.items()})

    def num_scalars(self) -> int:
        return int(sum(p.data.size for p in self.values()))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    d, h = cfg.d, cfg.ffn_hidden

    def emb(name, rows, dim):
        params[name] = rng.normal(0.0, cfg.emb_init_std, size=(rows + 1, dim))

    def dense(name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
        params[name + ".w"] = w
        params[name + ".b"] = np.zeros(fan_out)

    def mlp(name, fan_in, hidden, fan_out, zero_out=False):
        dense(name + ".l1", fan_in, hidden)
        dense(name + ".l2", hidden, fan_out, zero=zero_out)

    # user tower
    emb("user.item_emb", cfg.n_items, d)
    emb("user.author_emb", cfg.n_authors, d)
    emb("user.tag_emb", cfg.n_tags, d)
    emb("user.age_emb", cfg.n_age, d)
    emb("user.gender_emb", cfg.n_gender, d)
    emb("user.region_emb", cfg.n_region, d)
    emb("user.user_id_emb", cfg.n_users, cfg.d_user_id)
    emb("user.device_id_emb", cfg.n_devices, cfg.d_device_id)
    for k in range(cfg.K):
        mlp(f"user.query_mlp.{k}", cfg.query_in, d, d)
    mlp("user.behavior_mlp", 3 * d + 4, d, d)
    if cfg.positional:
        params["user.pos_emb"] = rng.normal(0.0, cfg.emb_init_std, size=(cfg.n_max + cfg.K, d))
    for layer in range(1, cfg.L + 1):
        pre = f"user.decoder.{layer}"
        params[pre + ".attn_norm"] = np.ones(d)
        for proj in ("w_q", "w_k", "w_v"):
            params[f"{pre}.{proj}"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        params[pre + ".ffn_norm"] = np.ones(d)
        if layer == cfg.pformer_layer:
            mlp(pre + ".gate_ffn", d, h, d)
            dense(pre + ".gate", cfg.d_user_id + cfg.d_device_id + d, cfg.n_experts)
            for e in range(cfg.n_experts):
                mlp(f"{pre}.expert.{e}", d, h, d)
        else:
            mlp(pre + ".ffn", d, h, d)
    for k in range(cfg.K):
        mlp(f"user.readout_mlp.{k}", d, d, d)

    # item tower
    emb("item.id_emb", cfg.n_items, d)
    emb("item.tag_emb", cfg.n_tags, d)
    emb("item.author_emb", cfg.n_authors, d)
    for k in range(1 if cfg.item_shared_mlp else cfg.K):
        mlp(f"item.mlp.{k}", cfg.item_feat_in, d, d)

    # quota head, zero output layer so that initial weights are exactly 1/K
    mlp("quota.mlp", cfg.item_feat_in, cfg.quota_hidden, cfg.K, zero_out=True)

    return ModelParams({n: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=n)
                        for n, v in params.items()})


# -- building blocks ----------------------------------------------------------------

def _mlp(p: ModelParams, name: str, x: Tensor) -> Tensor:
    hidden = nx.gelu(nx.linear(x, p[name + ".l1.w"], p[name + ".l1.b"]))
    return nx.linear(hidden, p[name + ".l2.w"], p[name + ".l2.b"])


def _masked_sum(emb: Tensor, mask: np.ndarray) -> Tensor:
    return nx.tsum(nx.mul(emb, mask[..., None].astype(emb.data.dtype)), axis=-2)


def user_gate_features(p: ModelParams, cfg: ModelConfig, batch: UserBatch) -> Tensor:
    """E_u: concatenated user-id and device-id embeddings."""
    uid = nx.embedding(p["user.user_id_emb"], vocab_index(batch.user_id, cfg.n_users))
    dev = nx.embedding(p["user.device_id_emb"], vocab_index(batch.device_id, cfg.n_devices))
    return nx.concat([uid, dev], axis=-1)


def query_tokens(p: ModelParams, cfg: ModelConfig, batch: UserBatch) -> Tensor:
    """Objective tokens O_k of shape [B, K, d]."""
    demo = nx.add(nx.add(nx.embedding(p["user.age_emb"], vocab_index(batch.age, cfg.n_age)),
                         nx.embedding(p["user.gender_emb"], vocab_index(batch.gender, cfg.n_gender))),
                  nx.embedding(p["user.region_emb"], vocab_index(batch.region, cfg.n_region)))
    rs, click, lv = batch.pool_masks(cfg.long_view_threshold)
    item_emb = nx.embedding(p["user.item_emb"], vocab_index(batch.items, cfg.n_items))
    parts = [demo, _masked_sum(item_emb, rs), _masked_sum(item_emb, click), _masked_sum(item_emb, lv)]
    if cfg.include_user_ids_in_query:
        parts.append(user_gate_features(p, cfg, batch))
    U = nx.concat(parts, axis=-1)
    return nx.stack([_mlp(p, f"user.query_mlp.{k}", U) for k in range(cfg.K)], axis=1)


def behavior_tokens(p: ModelParams, cfg: ModelConfig, batch: UserBatch) -> Tensor:
    """Per-event tokens t_j = MLP([E_item(x_j); f_j]) of shape [B, n, d]."""
    feats = np.concatenate([batch.watch[..., None], batch.flags], axis=-1)
    x = nx.concat([
        nx.embedding(p["user.item_emb"], vocab_index(batch.items, cfg.n_items)),
        Tensor(feats),
        nx.embedding(p["user.author_emb"], vocab_index(batch.authors, cfg.n_authors)),
        nx.embedding(p["user.tag_emb"], vocab_index(batch.tags, cfg.n_tags)),
    ], axis=-1)
    return _mlp(p, "user.behavior_mlp", x)


def attention_mask(valid: np.ndarray, K: int, mutually_masked: bool = False) -> np.ndarray:
    """Boolean [B, T, T] mask (True = may attend) over n history slots + K objective slots."""
    B, n = valid.shape
    T = n + K
    key_ok = np.concatenate([valid, np.ones((B, K), dtype=bool)], axis=1)
    causal = np.tril(np.ones((T, T), dtype=bool))
    if mutually_masked and K > 1:
        causal[n:, n:] = np.eye(K, dtype=bool)
    mask = causal[None] & key_ok[:, None, :]
    mask |= np.eye(T, dtype=bool)[None]
    return mask


def _attention(p: ModelParams, cfg: ModelConfig, pre: str, x: Tensor, mask: np.ndarray,
               query_from: int = 0) -> Tensor:
    q = nx.matmul(x if query_from == 0 else x[:, query_from:, :], p[pre + ".w_q"])
    k = nx.matmul(x, p[pre + ".w_k"])
    v = nx.matmul(x, p[pre + ".w_v"])
    hc = cfg.head_count
    B, T, d = x.shape
    Tq = q.shape[1]
    dh = d // hc
    if hc > 1:
        q = nx.transpose(nx.reshape(q, (B, Tq, hc, dh)), (0, 2, 1, 3))
        k, v = (nx.transpose(nx.reshape(t, (B, T, hc, dh)), (0, 2, 1, 3)) for t in (k, v))
        mask = mask[:, None]
    scores = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(dh))
    attn = nx.softmax(scores, mask=mask)
    out = nx.matmul(attn, v)
    if hc > 1:
        out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, Tq, d))
    return out


def gate_scores(p: ModelParams, cfg: ModelConfig, pre: str, x: Tensor, e_u: Tensor) -> Tensor:
    """Expert weights after top-``expert_cut`` selection and renormalisation."""
    B, T, _ = x.shape
    e_u_seq = nx.mul(nx.reshape(e_u, (B, 1, e_u.shape[-1])), np.ones((1, T, 1)))
    gate_in = nx.concat([e_u_seq, _mlp(p, pre + ".gate_ffn", x)], axis=-1)
    probs = nx.softmax(nx.linear(gate_in, p[pre + ".gate.w"], p[pre + ".gate.b"]))
    if cfg.expert_cut >= cfg.n_experts:
        return probs
    order = np.argsort(-probs.data, axis=-1, kind="stable")
    keep = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(keep, order[..., : cfg.expert_cut], True, axis=-1)
    kept = nx.mul(probs, keep.astype(probs.data.dtype))
    return nx.div(kept, nx.tsum(kept, axis=-1, keepdims=True))


def pformer_ffn(p: ModelParams, cfg: ModelConfig, pre: str, x: Tensor, e_u: Tensor) -> Tensor:
    """Gated mixture of expert FFNs.

    Every expert runs on every token and unrouted tokens get a zero gate.
    Running experts only on their routed rows would change the matmul shapes
    with the routing, and BLAS results for one row can then differ in the
    last bit depending on which other rows are present, which breaks the
    bitwise causality contract.
    """
    scores = gate_scores(p, cfg, pre, x, e_u)
    out = None
    for e in range(cfg.n_experts):
        term = nx.mul(_mlp(p, f"{pre}.expert.{e}", x), scores[..., e:e + 1])
        out = term if out is None else nx.add(out, term)
    return out


def decoder_forward(p: ModelParams, cfg: ModelConfig, tokens: Tensor, valid: np.ndarray,
                    e_u: Tensor, objectives_only: bool = False) -> Tensor:
    """Run the L-layer causal decoder over ``tokens`` [B, n+K, d].

    With ``objectives_only`` the last layer is evaluated only at the K
    objective positions (the only ones the readout uses) and the result is
    [B, K, d]; otherwise all positions are returned.
    """
    B, T, _ = tokens.shape
    n = T - cfg.K
    if n > cfg.n_max:
        raise ValueError(f"sequence length {n} exceeds n_max={cfg.n_max}")
    mask = attention_mask(valid, cfg.K, cfg.mutually_masked_objectives)
    h = tokens
    if cfg.positional:
        pos = p["user.pos_emb"]
        h = nx.add(h, pos[pos.shape[0] - T:])
    for layer in range(1, cfg.L + 1):
        pre = f"user.decoder.{layer}"
        normed = nx.rmsnorm(h, p[pre + ".attn_norm"], cfg.rms_eps)
        if objectives_only and layer == cfg.L:
            a = _attention(p, cfg, pre, normed, mask[:, n:, :], query_from=n)
            h = h[:, n:, :]
        else:
            a = _attention(p, cfg, pre, normed, mask)
        h = nx.add(h, a)
        x = nx.rmsnorm(h, p[pre + ".ffn_norm"], cfg.rms_eps)
        f = pformer_ffn(p, cfg, pre, x, e_u) if layer == cfg.pformer_layer else _mlp(p, pre + ".ffn", x)
        h = nx.add(h, f)
    return h


def user_tower(p: ModelParams, cfg: ModelConfig, batch: UserBatch,
               return_hidden: bool = False, gate_features: Tensor | None = None):
    """User embeddings [B, K, d]; optionally also the final hidden states."""
    if batch.items.shape[1] > cfg.n_max:
        raise ValueError(f"history window {batch.items.shape[1]} exceeds n_max={cfg.n_max}")
    e_u = user_gate_features(p, cfg, batch) if gate_features is None else gate_features
    tokens = nx.concat([behavior_tokens(p, cfg, batch), query_tokens(p, cfg, batch)], axis=1)
    hidden = decoder_forward(p, cfg, tokens, batch.valid, e_u, objectives_only=not return_hidden)
    n = batch.items.shape[1] if return_hidden else 0
    embs = []
    for k in range(cfg.K):
        e = _mlp(p, f"user.readout_mlp.{k}", hidden[:, n + k, :])
        embs.append(nx.l2_normalize(e) if cfg.normalize else e)
    out = nx.stack(embs, axis=1)
    return (out, hidden) if return_hidden else out


def item_features(p: ModelParams, cfg: ModelConfig, batch: ItemBatch) -> Tensor:
    """Shared pre-objective item features [e_id; tag; author; popularity]."""
    return nx.concat([
        nx.embedding(p["item.id_emb"], vocab_index(batch.items, cfg.n_items)),
        nx.embedding(p["item.tag_emb"], vocab_index(batch.tags, cfg.n_tags)),
        nx.embedding(p["item.author_emb"], vocab_index(batch.authors, cfg.n_authors)),
        Tensor(np.asarray(batch.popularity, dtype=np.float64)[:, None]),
    ], axis=-1)


def item_tower(p: ModelParams, cfg: ModelConfig, batch: ItemBatch) -> Tensor:
    """Item embeddings [N, K, d]."""
    feats = item_features(p, cfg, batch)
    embs = []
    for k in range(cfg.K):
        e = _mlp(p, f"item.mlp.{0 if cfg.item_shared_mlp else k}", feats)
        embs.append(nx.l2_normalize(e) if cfg.normalize else e)
    return nx.stack(embs, axis=1)


def quota_forward(p: ModelParams, cfg: ModelConfig, batch: ItemBatch,
                  features: np.ndarray | None = None) -> Tensor:
    """Per-item objective weights w_i on the simplex, [N, K].

    Item features enter detached, so only ``quota.*`` parameters see gradient.
    """
    feats = item_features(p, cfg, batch).detach() if features is None else Tensor(features)
    return nx.softmax(_mlp(p, "quota.mlp", feats))


# -- single-example helpers --------------------------------------------------------

def user_batch(profiles: Sequence[UserProfile], histories: Sequence[Sequence[BehaviorEvent]],
               n_max: int) -> UserBatch:
    """Pack profiles and chronologically ordered histories (last ``n_max`` kept)."""
    B = len(profiles)
    width = max([min(len(h), n_max) for h in histories] + [0])
    items = np.zeros((B, width), dtype=np.int64)
    watch = np.zeros((B, width))
    flags = np.zeros((B, width, 3))
    authors = np.zeros((B, width), dtype=np.int64)
    tags = np.zeros((B, width), dtype=np.int64)
    valid = np.zeros((B, width), dtype=bool)
    for b, hist in enumerate(histories):
        hist = list(hist)[-n_max:] if n_max > 0 else []
        off = width - len(hist)
        for j, e in enumerate(hist):
            items[b, off + j] = e.item_id
            watch[b, off + j] = e.watch_ratio
            flags[b, off + j] = (e.like, e.comment, e.share)
            authors[b, off + j] = e.author_id
            tags[b, off + j] = e.tag_id
            valid[b, off + j] = True
    col = lambda attr: np.array([getattr(pr, attr) for pr in profiles], dtype=np.int64)  # noqa: E731
    return UserBatch(items, watch, flags, authors, tags, valid,
                     col("age"), col("gender"), col("region"), col("user_id"), col("device_id"))


def build_query_tokens(p: ModelParams, cfg: ModelConfig, profile: UserProfile,
                       rs_seq: Sequence[BehaviorEvent], click_seq: Sequence[BehaviorEvent],
                       long_view_seq: Sequence[BehaviorEvent]) -> np.ndarray:
    """O_k for one user from three explicit sequences; returns [K, d]."""
    seqs = [list(rs_seq), list(click_seq), list(long_view_seq)]
    events = [e for s in seqs for e in s]
    batch = user_batch([profile], [events], max(len(events), 1))
    width = batch.items.shape[1]
    masks = []
    start = width - len(events)
    for s_idx, s in enumerate(seqs):
        m = np.zeros((1, width), dtype=bool)
        lo = start + sum(len(x) for x in seqs[:s_idx])
        m[0, lo:lo + len(s)] = True
        masks.append(m)
    batch.rs_mask, batch.click_mask, batch.long_view_mask = masks
    return query_tokens(p, cfg, batch).data[0]


def encode_behavior(p: ModelParams, cfg: ModelConfig, event: BehaviorEvent) -> np.ndarray:
    batch = user_batch([UserProfile()], [[event]], 1)
    return behavior_tokens(p, cfg, batch).data[0, 0]


def encode_user(p: ModelParams, cfg: ModelConfig, profile: UserProfile,
                history: Sequence[BehaviorEvent]) -> np.ndarray:
    """K x d user embeddings for one user."""
    return user_tower(p, cfg, user_batch([profile], [history], cfg.n_max)).data[0]


def encode_items(p: ModelParams, cfg: ModelConfig, items, tags, authors, popularity,
                 chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Item embeddings [N, K, d] and quota weights [N, K] without building a tape."""
    items = np.asarray(items)
    embs, weights = [], []
    for lo in range(0, len(items), chunk):
        sl = slice(lo, lo + chunk)
        b = ItemBatch(items[sl], np.asarray(tags)[sl], np.asarray(authors)[sl], np.asarray(popularity)[sl])
        embs.append(item_tower(p, cfg, b).data)
        weights.append(quota_forward(p, cfg, b).data)
    if not embs:
        return np.zeros((0, cfg.K, cfg.d)), np.zeros((0, cfg.K))
    return np.concatenate(embs), np.concatenate(weights)
