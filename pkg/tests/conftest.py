import json
from dataclasses import dataclass
from pathlib import Path

import pytest

from mpformer.cli import main

TINY_CONFIG = """\
seed: 7
world:
  n_users: 40
  n_items: 160
  n_authors: 16
  n_tags: 6
  events_per_user: 40
model:
  d: 8
  n_max: 8
  n_experts: 2
  quota_hidden: 8
train:
  batch_size: 32
  epochs: 1
  max_steps: 4
serve:
  q_total: 30
"""


@dataclass
class Pipeline:
    root: Path
    config: Path
    data: Path
    ckpt: Path
    index: Path


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> Pipeline:
    """gen-data -> train (4 steps) -> build-index on a tiny world, shared by CLI and service tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "run.yaml"
    cfg.write_text(TINY_CONFIG)
    p = Pipeline(root, cfg, root / "data", root / "ckpt", root / "index")
    assert main(["gen-data", "--config", str(cfg), "--out", str(p.data)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(p.data), "--out", str(p.ckpt)]) == 0
    assert main(["build-index", "--checkpoint", str(p.ckpt), "--data", str(p.data), "--out", str(p.index)]) == 0
    return p


def last_json(text: str) -> dict:
    return json.loads(text.strip().splitlines()[-1])


# -- default-world training, shared by the loss-trend test and the acceptance suite ----------------

DEFAULT_EPOCHS = 5


@dataclass
class TrainedRun:
    ds: object
    cfg: object
    state: object
    losses: list
    seconds: float


@pytest.fixture(scope="session")
def default_world():
    from mpformer.data import WorldConfig, build_dataset

    return build_dataset(WorldConfig(seed=0))


def train_default(ds, seed: int, epochs: int = DEFAULT_EPOCHS) -> TrainedRun:
    import time

    from mpformer.train import TrainConfig, model_config_for, train

    cfg = model_config_for(ds)
    losses = []
    t0 = time.process_time()
    state = train(ds, cfg, TrainConfig(epochs=epochs, seed=seed, init_seed=seed),
                  on_step=lambda rec: losses.append(rec["loss"]))
    return TrainedRun(ds, cfg, state, losses, time.process_time() - t0)


@pytest.fixture(scope="session")
def default_run(default_world) -> TrainedRun:
    return train_default(default_world, seed=0)


# -- acceptance lines ------------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
