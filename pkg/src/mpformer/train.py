"""Training loop: Adam over the weighted InfoNCE loss plus the quota loss."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import IO, Callable

import numpy as np

from . import numerics as nx
from .data import Dataset, make_batches
from .model import ItemBatch, ModelConfig, ModelParams, UserBatch, init_params
from .objectives import Adam, TrainingBatch, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 5
    max_steps: int | None = None
    lr: float = 3e-3
    quota_weight: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    init_seed: int = 0
    log_every: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**raw)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Adam
    step: int = 0
    epoch: int = 0


def new_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    params = init_params(model_cfg, train_cfg.init_seed)
    return TrainState(params, Adam(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay))


def train_step(state: TrainState, cfg: ModelConfig, batch, quota_weight: float = 1.0) -> dict:
    state.params.zero_grad()
    parts = total_loss(state.params, cfg, batch)
    loss = parts.training_loss(quota_weight)
    if not math.isfinite(loss.item()):
        raise NonFiniteLoss(f"non-finite loss at step {state.step + 1}: "
                            f"per-objective={parts.per_objective} quota={parts.quota.item()}")
    nx.backward(loss)
    state.optimizer.step()
    state.step += 1
    return parts.record(state.step, cfg.objectives)


def train(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, state: TrainState | None = None,
          log_fh: IO[str] | None = None, on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Run ``train_cfg.epochs`` epochs (or until ``max_steps`` total steps).

    Resuming from ``state`` continues both the step and epoch counters.
    """
    state = state or new_state(model_cfg, train_cfg)
    examples = ds.training_examples()
    if examples.size < train_cfg.batch_size:
        raise ValueError(f"only {examples.size} training examples for batch size {train_cfg.batch_size}")
    per_epoch = examples.size // train_cfg.batch_size
    while state.epoch < train_cfg.epochs:
        # a run stopped by max_steps resumes at the next unseen batch of its epoch
        skip = max(0, state.step - state.epoch * per_epoch)
        batches = make_batches(examples, train_cfg.batch_size, seed=train_cfg.seed * 1000 + state.epoch)
        for idx in itertools.islice(batches, skip, None):
            if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
                return state
            rec = train_step(state, model_cfg, ds.training_batch(idx, model_cfg.n_max), train_cfg.quota_weight)
            rec["epoch"] = state.epoch
            if log_fh is not None and state.step % train_cfg.log_every == 0:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_step is not None:
                on_step(rec)
        state.epoch += 1
    return state


def model_config_for(ds: Dataset, **overrides) -> ModelConfig:
    """Model config with vocabulary sizes taken from the dataset."""
    c = ds.cfg
    base = dict(n_items=c.n_items, n_authors=c.n_authors, n_tags=c.n_tags, n_users=c.n_users,
                n_devices=int(ds.user_device.max()) + 1 if ds.n_users else 1, n_age=c.n_age,
                n_gender=c.n_gender, n_region=c.n_region, long_view_threshold=c.vtr_threshold)
    base.update(overrides)
    return ModelConfig(**base)


def optimizer_arrays(state: TrainState) -> dict[str, np.ndarray]:
    return state.optimizer.state()


# -- finite-difference suite -----------------------------------------------------------

def grad_check_setup(seed: int = 0, N: int = 4) -> tuple[ModelParams, ModelConfig, TrainingBatch]:
    """A tiny model (d=8, n=6, K=3, L=4, two experts) and a random batch.

    The quota head's zero-initialised output layer is randomised so that its
    gradient is not trivially zero.
    """
    n = 6
    cfg = ModelConfig(d=8, n_max=n, K=3, L=4, n_experts=2, expert_cut=2, quota_hidden=4, n_items=10,
                      n_authors=4, n_tags=3, n_users=5, n_devices=5, n_age=2, n_gender=2, n_region=2)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 7])
    w = params["quota.mlp.l2.w"]
    w.data[:] = rng.normal(0.0, 0.3, w.shape)
    valid = np.ones((N, n), dtype=bool)
    valid[0, :3] = False  # one left-padded row
    users = UserBatch(rng.integers(0, 10, (N, n)), rng.random((N, n)), rng.integers(0, 2, (N, n, 3)).astype(float),
                      rng.integers(0, 4, (N, n)), rng.integers(0, 3, (N, n)), valid, rng.integers(0, 2, N),
                      rng.integers(0, 2, N), rng.integers(0, 2, N), rng.integers(0, 5, N), rng.integers(0, 5, N))
    items = ItemBatch(rng.integers(0, 10, N), rng.integers(0, 3, N), rng.integers(0, 4, N), rng.random(N))
    labels = rng.integers(0, 2, (N, 3))
    labels[:, 0] = 1
    return params, cfg, TrainingBatch(users, items, labels.astype(np.float64), rng.uniform(-1.0, 1.0, N))


def run_grad_check(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> nx.GradCheckResult:
    """Central differences of the full training loss over every parameter."""
    params, cfg, batch = grad_check_setup(seed)
    frozen = total_loss(params, cfg, batch).quota_inputs
    return nx.grad_check(lambda: total_loss(params, cfg, batch, frozen=frozen).training_loss(), dict(params),
                         h=h, tol=tol)
