"""Synthetic short-video world, objective labels and training batches."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import ItemBatch, UserBatch
from .objectives import TrainingBatch

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400
EVENT_FIELDS = ("user", "item", "ts", "watch_ratio", "like", "comment", "share", "author", "tag")
EXAMPLE_FIELDS = EVENT_FIELDS + ("l_pro_lvr", "l_max_time", "l_vtr", "pscore")


@dataclass
class WorldConfig:
    n_users: int = 500
    n_items: int = 2000
    n_authors: int = 200
    n_tags: int = 40
    latent_dim: int = 8
    events_per_user: int = 120
    n_days: int = 6
    seed: int = 0
    n_age: int = 8
    n_gender: int = 3
    n_region: int = 16
    # label rules
    percentile: float = 0.75
    window: int = 100
    max_time_lookback: int = 10
    max_time_multiplier: float = 2.0
    vtr_threshold: float = 0.4
    # generator shape
    exposure_sharpness: float = 6.0
    popularity_weight: float = 0.3
    affinity_gain: float = 3.0
    length_penalty: float = 0.8
    watch_concentration: float = 5.0
    watch_offset: float = -1.8
    length_sigma: float = 0.7
    tags_per_user: int = 2
    pscore_coef: tuple[float, float, float] = (0.4, 0.2, 0.4)
    pscore_noise: float = 0.01

    def __post_init__(self):
        self.pscore_coef = tuple(float(c) for c in self.pscore_coef)
        self.validate()

    def validate(self) -> None:
        bad = [f for f in ("n_users", "n_items", "n_authors", "n_tags", "latent_dim", "events_per_user",
                           "n_days", "n_age", "n_gender", "n_region", "window", "max_time_lookback")
               if getattr(self, f) < 1]
        if not 0 < self.percentile < 1:
            bad.append("percentile")
        if not self.max_time_multiplier > 1:
            bad.append("max_time_multiplier")
        if not 0 < self.vtr_threshold < 1:
            bad.append("vtr_threshold")
        if len(self.pscore_coef) != 3:
            bad.append("pscore_coef")
        if self.pscore_noise < 0:
            bad.append("pscore_noise")
        if bad:
            raise ValueError(f"invalid WorldConfig field(s): {', '.join(bad)}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pscore_coef"] = list(self.pscore_coef)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "WorldConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown WorldConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**raw)


@dataclass
class SyntheticWorld:
    user_latent: np.ndarray  # [U, D] unit rows
    item_latent: np.ndarray  # [I, D] unit rows
    user_bias: np.ndarray  # [U]
    item_author: np.ndarray
    item_tag: np.ndarray
    item_popularity: np.ndarray  # standardised
    item_length: np.ndarray  # seconds
    user_age: np.ndarray
    user_gender: np.ndarray
    user_region: np.ndarray

    def affinity(self, users, items) -> np.ndarray:
        return np.einsum("...d,...d->...", self.user_latent[users], self.item_latent[items])


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_world(cfg: WorldConfig) -> SyntheticWorld:
    """Latent tastes clustered by tag; deterministic for a given seed."""
    rng = np.random.default_rng(cfg.seed)
    D = cfg.latent_dim
    tag_center = _unit(rng.normal(size=(cfg.n_tags, D)))
    author_vec = rng.normal(size=(cfg.n_authors, D)) / np.sqrt(D)
    item_tag = rng.integers(0, cfg.n_tags, cfg.n_items)
    item_author = rng.integers(0, cfg.n_authors, cfg.n_items)
    item_latent = _unit(tag_center[item_tag] + 0.5 * author_vec[item_author]
                        + 0.5 * rng.normal(size=(cfg.n_items, D)) / np.sqrt(D))
    fav = np.stack([rng.choice(cfg.n_tags, size=min(cfg.tags_per_user, cfg.n_tags), replace=False)
                    for _ in range(cfg.n_users)])
    user_latent = _unit(tag_center[fav].sum(axis=1) + 0.5 * rng.normal(size=(cfg.n_users, D)) / np.sqrt(D))
    # demographics carry a coarse, noisy view of taste
    age_proj = rng.normal(size=(D, cfg.n_age))
    region_proj = rng.normal(size=(D, cfg.n_region))
    user_age = np.argmax(user_latent @ age_proj + 0.5 * rng.normal(size=(cfg.n_users, cfg.n_age)), axis=1)
    user_region = np.argmax(user_latent @ region_proj + 0.5 * rng.normal(size=(cfg.n_users, cfg.n_region)),
                            axis=1)
    user_gender = rng.integers(0, cfg.n_gender, cfg.n_users)
    popularity = rng.normal(size=cfg.n_items)
    length = np.clip(np.exp(rng.normal(np.log(30.0), cfg.length_sigma, cfg.n_items)), 5.0, 300.0)
    user_bias = rng.normal(0.0, 0.5, cfg.n_users)
    return SyntheticWorld(user_latent, item_latent, user_bias, item_author, item_tag, popularity, length,
                          user_age, user_gender, user_region)


@dataclass
class EventLog:
    """Flat event arrays sorted by (user, ts); ``offsets[u]:offsets[u+1]`` is user u."""

    user: np.ndarray
    item: np.ndarray
    ts: np.ndarray
    watch_ratio: np.ndarray
    like: np.ndarray
    comment: np.ndarray
    share: np.ndarray
    author: np.ndarray
    tag: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return self.user.shape[0]

    def stream(self, u: int) -> slice:
        return slice(int(self.offsets[u]), int(self.offsets[u + 1]))

    @property
    def flags(self) -> np.ndarray:
        return np.stack([self.like, self.comment, self.share], axis=-1).astype(np.float64)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def expected_watch_ratio(world: SyntheticWorld, cfg: WorldConfig, users, items) -> np.ndarray:
    logit = (cfg.affinity_gain * world.affinity(users, items) + world.user_bias[users]
             - cfg.length_penalty * np.log(world.item_length[items] / 30.0) + cfg.watch_offset)
    return _sigmoid(logit)


def simulate_events(world: SyntheticWorld, cfg: WorldConfig) -> EventLog:
    """Exposure, watch and interaction streams; one RNG stream per user."""
    n_users, n_items, T = world.user_latent.shape[0], world.item_latent.shape[0], cfg.events_per_user
    horizon = cfg.n_days * SECONDS_PER_DAY
    cols = {k: [] for k in ("user", "item", "ts", "watch_ratio", "like", "comment", "share")}
    for u in range(n_users):
        rng = np.random.default_rng([cfg.seed, 1, u])
        logits = cfg.exposure_sharpness * world.affinity(u, np.arange(n_items)) \
            + cfg.popularity_weight * world.item_popularity
        prob = np.exp(logits - logits.max())
        prob /= prob.sum()
        items = rng.choice(n_items, size=T, p=prob)
        mu = expected_watch_ratio(world, cfg, np.full(T, u), items)
        kappa = cfg.watch_concentration
        wr = np.clip(rng.beta(mu * kappa, (1.0 - mu) * kappa), 0.0, 1.0)
        like = rng.random(T) < 0.4 * _sigmoid(8.0 * (wr - 0.7))
        comment = rng.random(T) < 0.15 * _sigmoid(8.0 * (wr - 0.8))
        share = rng.random(T) < 0.1 * _sigmoid(8.0 * (wr - 0.8))
        ts = np.sort(rng.choice(horizon - T, size=T, replace=False)) + np.arange(T)
        cols["user"].append(np.full(T, u))
        cols["item"].append(items)
        cols["ts"].append(ts)
        cols["watch_ratio"].append(wr)
        cols["like"].append(like)
        cols["comment"].append(comment)
        cols["share"].append(share)
    arr = {k: np.concatenate(v) if v else np.zeros(0) for k, v in cols.items()}
    item = arr["item"].astype(np.int64)
    return EventLog(
        user=arr["user"].astype(np.int64), item=item, ts=arr["ts"].astype(np.int64),
        watch_ratio=arr["watch_ratio"].astype(np.float64),
        like=arr["like"].astype(np.int64), comment=arr["comment"].astype(np.int64),
        share=arr["share"].astype(np.int64),
        author=world.item_author[item].astype(np.int64), tag=world.item_tag[item].astype(np.int64),
        offsets=np.arange(n_users + 1, dtype=np.int64) * T,
    )


# -- labels ---------------------------------------------------------------------------

def derive_pro_lvr(durations: Sequence[float], p: float = 0.75, w: int = 100) -> np.ndarray:
    """1 iff duration strictly exceeds the linear-interpolated p-quantile of
    the previous ``min(w, available)`` durations; 0 with no history."""
    d = np.asarray(durations, dtype=np.float64)
    out = np.zeros(d.shape[0], dtype=np.int64)
    for t in range(1, d.shape[0]):
        window = d[max(0, t - w):t]
        out[t] = int(d[t] > np.quantile(window, p, method="linear"))
    return out


def derive_max_time(durations: Sequence[float], k: int = 10, m: float = 2.0) -> np.ndarray:
    """1 iff duration > m x mean of the previous k durations; needs k prior events."""
    d = np.asarray(durations, dtype=np.float64)
    out = np.zeros(d.shape[0], dtype=np.int64)
    if d.shape[0] <= k:
        return out
    csum = np.concatenate([[0.0], np.cumsum(d)])
    t = np.arange(k, d.shape[0])
    prev_mean = (csum[t] - csum[t - k]) / k
    out[k:] = (d[k:] > m * prev_mean).astype(np.int64)
    return out


def derive_vtr(watch_ratios: Sequence[float], theta: float = 0.4) -> np.ndarray:
    return (np.asarray(watch_ratios, dtype=np.float64) >= theta).astype(np.int64)


def label_events(log_: EventLog, world: SyntheticWorld, cfg: WorldConfig) -> np.ndarray:
    """Per-event labels [E, 3] in (pro_lvr, max_time, vtr) order, per user stream."""
    labels = np.zeros((len(log_), 3), dtype=np.int64)
    durations = log_.watch_ratio * world.item_length[log_.item]
    for u in range(log_.offsets.shape[0] - 1):
        s = log_.stream(u)
        labels[s, 0] = derive_pro_lvr(durations[s], cfg.percentile, cfg.window)
        labels[s, 1] = derive_max_time(durations[s], cfg.max_time_lookback, cfg.max_time_multiplier)
    labels[:, 2] = derive_vtr(log_.watch_ratio, cfg.vtr_threshold)
    return labels


def true_affinities(log_: EventLog, world: SyntheticWorld, cfg: WorldConfig) -> np.ndarray:
    """Noise-free per-objective signals behind the labels, z-scored, [E, 3].

    pro_lvr: expected watch duration; max_time: expected duration relative to
    the user's recent mean; vtr: expected watch ratio.
    """
    mu = expected_watch_ratio(world, cfg, log_.user, log_.item)
    exp_dur = mu * world.item_length[log_.item]
    durations = log_.watch_ratio * world.item_length[log_.item]
    k = cfg.max_time_lookback
    surprise = np.empty_like(exp_dur)
    for u in range(log_.offsets.shape[0] - 1):
        s = log_.stream(u)
        d = durations[s]
        csum = np.concatenate([[0.0], np.cumsum(d)])
        t = np.arange(d.shape[0])
        lo = np.maximum(0, t - k)
        cnt = t - lo
        prev = np.where(cnt > 0, (csum[t] - csum[lo]) / np.maximum(cnt, 1), np.mean(world.item_length) * 0.5)
        surprise[s] = exp_dur[s] / prev
    raw = np.stack([exp_dur, np.log(surprise), mu], axis=-1)
    return (raw - raw.mean(axis=0)) / np.maximum(raw.std(axis=0), 1e-12)


def make_pscore(affinity: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    """Convex mix of true affinities plus noise, min-max scaled to [-1, 1]."""
    rng = np.random.default_rng([cfg.seed, 2])
    raw = affinity @ np.asarray(cfg.pscore_coef) + cfg.pscore_noise * rng.normal(size=affinity.shape[0])
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        return np.zeros_like(raw)
    return 2.0 * (raw - lo) / (hi - lo) - 1.0


# -- dataset ---------------------------------------------------------------------------

@dataclass
class LabeledExample:
    user: int
    item: int
    ts: int
    watch_ratio: float
    like: int
    comment: int
    share: int
    author: int
    tag: int
    l_pro_lvr: int
    l_max_time: int
    l_vtr: int
    pscore: float

    @property
    def labels(self) -> tuple[int, int, int]:
        return (self.l_pro_lvr, self.l_max_time, self.l_vtr)


@dataclass
class Dataset:
    """Everything derived from one world: users, catalog, events, labels."""

    cfg: WorldConfig
    events: EventLog
    labels: np.ndarray  # [E, 3]
    pscore: np.ndarray  # [E]
    user_age: np.ndarray
    user_gender: np.ndarray
    user_region: np.ndarray
    user_device: np.ndarray
    item_author: np.ndarray
    item_tag: np.ndarray
    item_popularity: np.ndarray
    item_length: np.ndarray

    @property
    def n_users(self) -> int:
        return self.user_age.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_author.shape[0]

    @property
    def day(self) -> np.ndarray:
        return self.events.ts // SECONDS_PER_DAY

    @property
    def test_day(self) -> int:
        return self.cfg.n_days - 1

    def train_mask(self) -> np.ndarray:
        return self.day < self.test_day

    def test_mask(self) -> np.ndarray:
        return self.day >= self.test_day

    def training_examples(self) -> np.ndarray:
        """Global indices of training-window events with at least one positive label."""
        return np.flatnonzero(self.train_mask() & (self.labels.sum(axis=1) > 0))

    def label_shares(self, mask: np.ndarray | None = None) -> np.ndarray:
        lab = self.labels if mask is None else self.labels[mask]
        return lab.mean(axis=0)

    def example(self, e: int) -> LabeledExample:
        ev = self.events
        return LabeledExample(int(ev.user[e]), int(ev.item[e]), int(ev.ts[e]), float(ev.watch_ratio[e]),
                              int(ev.like[e]), int(ev.comment[e]), int(ev.share[e]), int(ev.author[e]),
                              int(ev.tag[e]), int(self.labels[e, 0]), int(self.labels[e, 1]),
                              int(self.labels[e, 2]), float(self.pscore[e]))

    def records(self) -> Iterator[LabeledExample]:
        for e in range(len(self.events)):
            yield self.example(e)

    # -- model inputs --------------------------------------------------------------------
    def item_batch(self, items) -> ItemBatch:
        items = np.asarray(items, dtype=np.int64)
        return ItemBatch(items, self.item_tag[items], self.item_author[items], self.item_popularity[items])

    def catalog_batch(self) -> ItemBatch:
        return self.item_batch(np.arange(self.n_items))

    def history_batch(self, event_idx, n_max: int) -> UserBatch:
        """Users of the given events with their previous ``n_max`` events (left padded)."""
        event_idx = np.asarray(event_idx, dtype=np.int64)
        users = self.events.user[event_idx]
        start = self.events.offsets[users]
        pos = event_idx[:, None] + np.arange(-n_max, 0)[None, :]
        valid = pos >= start[:, None]
        pos = np.where(valid, pos, 0)
        return self._user_batch(users, pos, valid)

    def user_history_batch(self, users, before_ts, n_max: int) -> UserBatch:
        """For each user, the last ``n_max`` events with ts < before_ts."""
        users = np.asarray(users, dtype=np.int64)
        ends = np.array([self.events.offsets[u] + np.searchsorted(self.events.ts[self.events.stream(u)], t)
                         for u, t in zip(users, np.broadcast_to(before_ts, users.shape))], dtype=np.int64)
        pos = ends[:, None] + np.arange(-n_max, 0)[None, :]
        valid = pos >= self.events.offsets[users][:, None]
        pos = np.where(valid, pos, 0)
        return self._user_batch(users, pos, valid)

    def _user_batch(self, users, pos, valid) -> UserBatch:
        ev = self.events
        vf = valid.astype(np.float64)
        return UserBatch(
            items=np.where(valid, ev.item[pos], 0),
            watch=ev.watch_ratio[pos] * vf,
            flags=ev.flags[pos] * vf[..., None],
            authors=np.where(valid, ev.author[pos], 0),
            tags=np.where(valid, ev.tag[pos], 0),
            valid=valid,
            age=self.user_age[users], gender=self.user_gender[users], region=self.user_region[users],
            user_id=users, device_id=self.user_device[users],
        )

    def training_batch(self, event_idx, n_max: int) -> TrainingBatch:
        event_idx = np.asarray(event_idx, dtype=np.int64)
        return TrainingBatch(self.history_batch(event_idx, n_max), self.item_batch(self.events.item[event_idx]),
                             self.labels[event_idx].astype(np.float64), self.pscore[event_idx])


def build_dataset(cfg: WorldConfig) -> Dataset:
    world = generate_world(cfg)
    events = simulate_events(world, cfg)
    labels = label_events(events, world, cfg)
    pscore = make_pscore(true_affinities(events, world, cfg), cfg)
    return Dataset(cfg, events, labels, pscore, world.user_age, world.user_gender, world.user_region,
                   np.arange(cfg.n_users, dtype=np.int64), world.item_author, world.item_tag,
                   world.item_popularity, world.item_length)


def make_batches(examples: np.ndarray, N: int, seed: int) -> Iterator[np.ndarray]:
    """Shuffle example indices with ``seed`` and yield full batches of N.

    The final partial batch is dropped.
    """
    if N < 2:
        raise ValueError("batch size N must be >= 2")
    order = np.random.default_rng(seed).permutation(np.asarray(examples))
    for lo in range(0, order.shape[0] - N + 1, N):
        yield order[lo:lo + N]


# -- files -------------------------------------------------------------------------------

def _dump_jsonl(path: Path, rows: Iterator[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")))
            fh.write("\n")


def _load_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "world.json", "w", encoding="utf-8") as fh:
        json.dump({"version": 1, "world": ds.cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _dump_jsonl(out / "users.jsonl", ({"user": u, "age": int(ds.user_age[u]), "gender": int(ds.user_gender[u]),
                                       "region": int(ds.user_region[u]), "device": int(ds.user_device[u])}
                                      for u in range(ds.n_users)))
    _dump_jsonl(out / "items.jsonl", ({"item": i, "author": int(ds.item_author[i]), "tag": int(ds.item_tag[i]),
                                       "popularity": float(ds.item_popularity[i]),
                                       "length": float(ds.item_length[i])} for i in range(ds.n_items)))
    records = [asdict(r) for r in ds.records()]
    _dump_jsonl(out / "events.jsonl", ({k: r[k] for k in EVENT_FIELDS} for r in records))
    _dump_jsonl(out / "examples.jsonl", iter(records))


def read_dataset(path: str | Path) -> Dataset:
    src = Path(path)
    with open(src / "world.json", encoding="utf-8") as fh:
        cfg = WorldConfig.from_dict(json.load(fh)["world"])
    users = _load_jsonl(src / "users.jsonl")
    items = _load_jsonl(src / "items.jsonl")
    rows = _load_jsonl(src / "examples.jsonl")
    col = lambda rs, k, dt: np.array([r[k] for r in rs], dtype=dt)  # noqa: E731
    user = col(rows, "user", np.int64)
    counts = np.bincount(user, minlength=len(users)) if rows else np.zeros(len(users), dtype=np.int64)
    events = EventLog(
        user=user, item=col(rows, "item", np.int64), ts=col(rows, "ts", np.int64),
        watch_ratio=col(rows, "watch_ratio", np.float64), like=col(rows, "like", np.int64),
        comment=col(rows, "comment", np.int64), share=col(rows, "share", np.int64),
        author=col(rows, "author", np.int64), tag=col(rows, "tag", np.int64),
        offsets=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
    )
    labels = np.stack([col(rows, "l_pro_lvr", np.int64), col(rows, "l_max_time", np.int64),
                       col(rows, "l_vtr", np.int64)], axis=-1).reshape(-1, 3)
    return Dataset(cfg, events, labels, col(rows, "pscore", np.float64),
                   col(users, "age", np.int64), col(users, "gender", np.int64), col(users, "region", np.int64),
                   col(users, "device", np.int64), col(items, "author", np.int64), col(items, "tag", np.int64),
                   col(items, "popularity", np.float64), col(items, "length", np.float64))
