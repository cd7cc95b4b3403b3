"""``mpformer`` command line: gen-data, train, build-index, serve, query, eval, bench.

Every command exits 0 on success. Failures print a single JSON line on
stderr, ``{"error": kind, "message": ..., "field": ...}``, and exit nonzero.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_run_config, load_raw
from .data import SECONDS_PER_DAY, build_dataset, read_dataset, write_dataset
from .evaluation import cost_table, evaluate, similarity_probe
from .model import encode_items
from .objectives import Adam
from .retrieval import build_indices, load_indices, positive_items, save_indices
from .service import LineServer, RetrieveRequest, ServingEngine, create_app, dump, serve_stdio
from .train import NonFiniteLoss, TrainState, model_config_for, new_state, run_grad_check, train

log = logging.getLogger("mpformer")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1
EXIT_NONFINITE = 3


class CommandError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_RUNTIME, field: str | None = None):
        super().__init__(message)
        self.kind, self.message, self.code, self.field = kind, message, code, field


def _config_options(f):
    f = click.option("--set", "overrides", multiple=True, metavar="SECTION.FIELD=VALUE",
                     help="Override one config field; repeatable.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON or YAML RunConfig file.")(f)
    return f


def _run_config(config_path, overrides, base: dict | None = None) -> RunConfig:
    raw = dict(base or {})
    raw.update(load_raw(config_path))
    return build_run_config(raw, list(overrides))


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Multi-objective sequential retrieval: data, training, indices and serving."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


# -- gen-data ---------------------------------------------------------------------------------

@cli.command("gen-data")
@_config_options
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Dataset directory.")
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
def gen_data(config_path, overrides, out_dir, force):
    """Generate the synthetic world and write its JSONL files."""
    rc = _run_config(config_path, overrides)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError("exists", f"{out} is not empty; pass --force to overwrite")
    ds = build_dataset(rc.world)
    write_dataset(ds, out)
    (out / "run_config.json").write_text(json.dumps(rc.to_dict(), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    shares = ds.label_shares()
    _echo_json({"events": len(ds.events), "users": ds.n_users, "items": ds.n_items, "out": str(out),
                "label_shares": dict(zip(("pro_lvr", "max_time", "vtr"), [round(float(s), 6) for s in shares]))})


# -- train -------------------------------------------------------------------------------------

@cli.command("train")
@_config_options
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), help="Dataset directory.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Checkpoint directory.")
@click.option("--resume", "resume_dir", type=click.Path(exists=True, file_okay=False),
              help="Continue from this checkpoint (step and epoch counters carry over).")
@click.option("--max-steps", type=int, default=None, help="Stop after this many total steps.")
@click.option("--grad-check", is_flag=True, help="Run the finite-difference suite and exit.")
def train_cmd(config_path, overrides, data_dir, out_dir, resume_dir, max_steps, grad_check):
    """Train the towers and the quota head; writes a checkpoint and train_log.jsonl."""
    if grad_check:
        rc = _run_config(config_path, overrides, {"seed": 0})
        res = run_grad_check(seed=rc.seed)
        worst = res.worst()
        _echo_json({"grad_check": "pass" if res.passed else "fail", "max_rel_error": res.max_rel_error,
                    "worst": worst.name if worst else None, "params": len(res.reports)})
        if not res.passed:
            raise CommandError("grad_check", f"max relative error {res.max_rel_error:.3e} exceeds tolerance")
        return
    if data_dir is None or out_dir is None:
        raise CommandError("usage", "train needs --data and --out (or --grad-check)", EXIT_CONFIG)
    base = {}
    if resume_dir is not None:
        base = load_checkpoint(resume_dir)[2].get("run_config", {})
    rc = _run_config(config_path, overrides, base)
    if max_steps is not None:
        rc.train.max_steps = max_steps
    ds = read_dataset(data_dir)
    rc.world = ds.cfg
    if resume_dir is not None:
        params, mcfg, manifest, extra = load_checkpoint(resume_dir)
        opt = Adam(params, lr=rc.train.lr, weight_decay=rc.train.weight_decay)
        opt.load_state(extra, manifest["step"])
        state = TrainState(params, opt, manifest["step"], manifest.get("meta", {}).get("epoch", 0))
    else:
        mcfg = model_config_for(ds, **rc.model_overrides())
        state = new_state(mcfg, rc.train)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = "a" if resume_dir is not None and Path(resume_dir).resolve() == out.resolve() else "w"
    if resume_dir is not None and mode == "w" and (Path(resume_dir) / "train_log.jsonl").exists():
        (out / "train_log.jsonl").write_bytes((Path(resume_dir) / "train_log.jsonl").read_bytes())
        mode = "a"
    with open(out / "train_log.jsonl", mode, encoding="utf-8") as fh:
        try:
            state = train(ds, mcfg, rc.train, state, log_fh=fh)
        except NonFiniteLoss as exc:
            raise CommandError("nonfinite_loss", str(exc), EXIT_NONFINITE) from exc
    digest = save_checkpoint(out, state.params, mcfg, step=state.step, extra_arrays=state.optimizer.state(),
                             run_config=rc.to_dict(), meta={"epoch": state.epoch})
    _echo_json({"checkpoint": str(out), "step": state.step, "epoch": state.epoch, "hash": digest})


# -- build-index --------------------------------------------------------------------------------

@cli.command("build-index")
@_config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def build_index_cmd(config_path, overrides, checkpoint, data_dir, out_dir):
    """Build one index per objective over its training-window positives, plus the weight store."""
    params, mcfg, manifest, _ = load_checkpoint(checkpoint)
    rc = _run_config(config_path, overrides, manifest.get("run_config") or {"seed": 0})
    ds = read_dataset(data_dir)
    embs, weights = encode_items(params, mcfg, np.arange(ds.n_items), ds.item_tag, ds.item_author,
                                 ds.item_popularity)
    in_train = ds.train_mask()
    members = positive_items(ds.events.item[in_train], ds.labels[in_train])
    bundle = build_indices(embs, weights, members, manifest["hash"], mcfg.objectives, approx=rc.index.approx,
                           n_lists=rc.index.n_lists, nprobe=rc.index.nprobe, seed=rc.index.seed,
                           item_author=ds.item_author, item_tag=ds.item_tag)
    save_indices(bundle, out_dir)
    _echo_json({"index": str(out_dir), "sizes": [len(ix) for ix in bundle.indices], "hash": manifest["hash"]})


# -- serve / query ----------------------------------------------------------------------------------

def _engine(checkpoint, index, rc: RunConfig) -> ServingEngine:
    return ServingEngine.from_paths(checkpoint, index, history_window=rc.serve.history_window,
                                    workers=rc.serve.workers)


@cli.command("serve")
@_config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--index", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--transport", type=click.Choice(["stdio", "tcp", "http"]), default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
def serve_cmd(config_path, overrides, checkpoint, index, transport, host, port):
    """Serve retrieval requests: line JSON on stdin/stdout or TCP, or HTTP."""
    rc = _run_config(config_path, overrides, {"seed": 0})
    transport = transport or rc.serve.transport
    host = host or rc.serve.host
    port = rc.serve.port if port is None else port
    engine = _engine(checkpoint, index, rc)
    if transport == "stdio":
        serve_stdio(engine)
    elif transport == "tcp":
        server = LineServer(engine, host, port)
        click.echo(json.dumps({"listening": f"{host}:{server.port}"}), err=True)
        try:
            server.serve_forever()
        finally:
            server.server_close()
    else:
        import uvicorn

        uvicorn.run(create_app(engine), host=host, port=port, log_level="warning")
    engine.close()


def _read_request(text: str) -> str:
    if text == "-":
        return sys.stdin.read()
    if text.startswith("@"):
        return Path(text[1:]).read_text(encoding="utf-8")
    return text


def _request_from_dataset(data_dir: str, user: int, q_total: int, mode: str, n: int) -> RetrieveRequest:
    ds = read_dataset(data_dir)
    if not 0 <= user < ds.n_users:
        raise CommandError("invalid_request", f"user {user} not in dataset", field="user")
    s = ds.events.stream(user)
    ts = ds.events.ts[s]
    rows = np.arange(s.start, s.stop)[ts < ds.test_day * SECONDS_PER_DAY][-n:]
    ev = ds.events
    history = [{"item": int(ev.item[r]), "watch_ratio": float(ev.watch_ratio[r]), "like": int(ev.like[r]),
                "comment": int(ev.comment[r]), "share": int(ev.share[r]), "author": int(ev.author[r]),
                "tag": int(ev.tag[r]), "ts": int(ev.ts[r])} for r in rows]
    profile = {"age": int(ds.user_age[user]), "gender": int(ds.user_gender[user]),
               "region": int(ds.user_region[user]), "user_id": user, "device_id": int(ds.user_device[user])}
    return RetrieveRequest.model_validate({"user": profile, "history": history, "q_total": q_total, "mode": mode})


@cli.command("query")
@_config_options
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False))
@click.option("--index", type=click.Path(exists=True, file_okay=False))
@click.option("--url", help="Send the request to a running HTTP service instead of loading the model.")
@click.option("--request", "request_text", help="Request JSON, @file, or - for stdin.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              help="With --user, build the request from this dataset's pre-holdout history.")
@click.option("--user", type=int, default=None)
@click.option("--q-total", type=int, default=None)
@click.option("--mode", type=click.Choice(["exact", "approx"]), default=None)
def query_cmd(config_path, overrides, checkpoint, index, url, request_text, data_dir, user, q_total, mode):
    """Answer a single retrieval request and print the response line."""
    rc = _run_config(config_path, overrides, {"seed": 0})
    q_total = rc.serve.q_total if q_total is None else q_total
    mode = mode or rc.serve.mode
    if request_text is not None:
        req = RetrieveRequest.model_validate_json(_read_request(request_text))
    elif data_dir is not None and user is not None:
        n = load_checkpoint(checkpoint)[1].n_max if checkpoint else 32
        req = _request_from_dataset(data_dir, user, q_total, mode, n)
    else:
        raise CommandError("usage", "query needs --request, or --data with --user", EXIT_CONFIG)
    if url:
        import httpx

        resp = httpx.post(url.rstrip("/") + "/retrieve", json=req.model_dump(), timeout=60.0)
        if resp.status_code != 200:
            raise CommandError("http", f"{resp.status_code}: {resp.text}")
        click.echo(json.dumps(resp.json(), separators=(",", ":")))
        return
    if checkpoint is None or index is None:
        raise CommandError("usage", "local query needs --checkpoint and --index (or --url)", EXIT_CONFIG)
    engine = _engine(checkpoint, index, rc)
    try:
        click.echo(dump(engine.retrieve(req)))
    finally:
        engine.close()


# -- eval / bench ----------------------------------------------------------------------------------

@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mode", type=click.Choice(["catalog", "index", "both"]), default="catalog")
@click.option("--index", type=click.Path(exists=True, file_okay=False), help="Needed for index mode.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Write report.txt, report.json, probe.csv.")
@click.option("--probe/--no-probe", default=True, help="Cross-objective cosine statistics.")
def eval_cmd(checkpoint, data_dir, mode, index, out_dir, probe):
    """Recall/NDCG on the last-day holdout, plus the similarity probe."""
    params, mcfg, manifest, _ = load_checkpoint(checkpoint)
    ds = read_dataset(data_dir)
    modes = ["catalog", "index"] if mode == "both" else [mode]
    members = None
    if "index" in modes:
        if index is None:
            raise CommandError("usage", "index mode needs --index", EXIT_CONFIG)
        bundle = load_indices(index)
        if bundle.checkpoint_hash != manifest["hash"]:
            raise CommandError("hash_mismatch", "index was built from a different checkpoint")
        members = [ix.ids for ix in bundle.indices]
    reports = {m: evaluate(params, mcfg, ds, mode=m, index_members=members) for m in modes}
    stats = similarity_probe(params, mcfg, ds) if probe else None
    for m, rep in reports.items():
        click.echo(f"[{m}]")
        click.echo(rep.table())
    if stats is not None:
        click.echo(f"cross-objective cosine mean={stats.mean:.4f} std={stats.std:.4f}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        for m, rep in reports.items():
            lines += [f"{m} {line}" if len(reports) > 1 else line for line in rep.lines()]
        (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        summary = {
            "checkpoint_hash": manifest["hash"],
            "run_config": manifest.get("run_config", {}),
            "metrics": {m: {f"{o}/{name}@{k}": v for (o, name, k), v in sorted(rep.metrics.items())}
                        for m, rep in reports.items()},
            "users_evaluated": {m: rep.users_evaluated for m, rep in reports.items()},
            "cost_model": cost_table(mcfg.n_max, mcfg.d, [mcfg.K], layers=mcfg.L),
        }
        if stats is not None:
            summary["similarity_probe"] = {"mean": stats.mean, "std": stats.std}
            stats.write_csv(out / "probe.csv")
        (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")


@cli.command("bench")
@click.option("--n", "n", type=int, default=64, show_default=True, help="History length.")
@click.option("--d", "d", type=int, default=32, show_default=True, help="Embedding width.")
@click.option("--K", "ks", type=int, multiple=True, help="Objective count; repeatable (default 3).")
@click.option("--layers", type=int, default=1, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="One JSON object per K.")
def bench_cmd(n, d, ks, layers, as_json):
    """Attention-block operation counts for independent vs shared QKV."""
    try:
        rows = cost_table(n, d, ks or (3,), layers)
    except ValueError as exc:
        raise CommandError("invalid_input", str(exc), EXIT_CONFIG) from exc
    for r in rows:
        if as_json:
            _echo_json(r)
        else:
            click.echo(f"n={r['n']} d={r['d']} K={r['K']} independent={r['independent']} "
                       f"shared={r['shared']} ratio={r['ratio']:.6f}")


# -- entry point ---------------------------------------------------------------------------------

def _fail(kind: str, message: str, code: int, field: str | None = None) -> int:
    payload = {"error": kind, "message": " ".join(str(message).split())}
    if field:
        payload["field"] = field
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    """Run the CLI with single-threaded BLAS; returns the process exit code."""
    with threadpool_limits(limits=1):
        try:
            cli.main(args=argv, prog_name="mpformer", standalone_mode=False)
        except click.exceptions.Exit as exc:
            return exc.exit_code
        except click.exceptions.Abort:
            return _fail("aborted", "aborted", EXIT_RUNTIME)
        except click.UsageError as exc:
            return _fail("usage", exc.format_message(), EXIT_CONFIG)
        except ConfigError as exc:
            return _fail("config", exc.message, EXIT_CONFIG, exc.field)
        except CommandError as exc:
            return _fail(exc.kind, exc.message, exc.code, exc.field)
        except click.ClickException as exc:
            return _fail("usage", exc.format_message(), EXIT_CONFIG)
        except Exception as exc:  # noqa: BLE001 - the contract is one parsable line
            from pydantic import ValidationError

            from .service import HashMismatch

            if isinstance(exc, HashMismatch):
                return _fail("hash_mismatch", str(exc), EXIT_RUNTIME)
            if isinstance(exc, ValidationError):
                first = exc.errors()[0]
                return _fail("invalid_request", first["msg"], EXIT_CONFIG, ".".join(map(str, first["loc"])))
            log.debug("unhandled error", exc_info=True)
            return _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
