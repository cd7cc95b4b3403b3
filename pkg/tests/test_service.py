"""HTTP app, stdio and TCP line protocol, engine guards."""
import io
import json
import socket
import threading

import pytest
from fastapi.testclient import TestClient

from mpformer.checkpoint import load_checkpoint
from mpformer.retrieval import load_indices
from mpformer.service import HashMismatch, LineServer, ServingEngine, create_app, serve_stdio

REQUEST = {"user": {"age": 2, "gender": 1, "region": 3, "user_id": 4, "device_id": 4},
           "history": [{"item": 3, "watch_ratio": 0.8, "like": 1}, {"item": 17, "watch_ratio": 0.2}],
           "q_total": 20}


@pytest.fixture(scope="module")
def engine(pipeline):
    eng = ServingEngine.from_paths(pipeline.ckpt, pipeline.index, workers=3)
    yield eng
    eng.close()


def check_response(body, q_total):
    items = [c["item"] for c in body["candidates"]]
    assert len(items) == len(set(items)) <= q_total
    assert sum(body["quota"]) == q_total
    assert abs(sum(body["weights"]) - 1.0) < 1e-9
    scores = [c["score"] for c in body["candidates"]]
    assert scores == sorted(scores, reverse=True)
    assert all(set(c["objectives"]) <= {"pro_lvr", "max_time", "vtr"} for c in body["candidates"])


def test_http_health_and_retrieve(engine):
    client = TestClient(create_app(engine))
    health = client.get("/health").json()
    assert health["status"] == "ok" and health["objectives"] == ["pro_lvr", "max_time", "vtr"]
    r = client.post("/retrieve", json=REQUEST)
    assert r.status_code == 200
    check_response(r.json(), 20)
    assert client.post("/retrieve", json={**REQUEST, "q_total": 2}).status_code == 422
    assert client.post("/retrieve", json={**REQUEST, "bogus": 1}).status_code == 422


def test_stdio_one_line_per_request(engine):
    lines = [json.dumps(REQUEST), "", json.dumps({**REQUEST, "mode": "approx"}), "not json",
             json.dumps({"q_total": 5, "history": [{"item": 1, "watch_ratio": 3.0}]})]
    out = io.StringIO()
    assert serve_stdio(engine, io.StringIO("\n".join(lines) + "\n"), out) == 4
    replies = [json.loads(x) for x in out.getvalue().splitlines()]
    check_response(replies[0], 20)
    check_response(replies[1], 20)
    assert replies[2]["error"]["type"] == "invalid_request"
    assert replies[3]["error"]["field"] == "history.0.watch_ratio"


def test_exact_and_approx_agree_on_a_small_index(engine):
    a = json.loads(engine.handle_line(json.dumps(REQUEST)))
    b = json.loads(engine.handle_line(json.dumps({**REQUEST, "mode": "approx"})))
    assert len({c["item"] for c in a["candidates"]} & {c["item"] for c in b["candidates"]}) >= 0.9 * len(a["candidates"])


def test_tcp_round_trip_and_concurrent_clients(engine):
    server = LineServer(engine, port=0)
    server.start_background()
    expected = engine.handle_line(json.dumps(REQUEST))
    got = []

    def client():
        with socket.create_connection(("127.0.0.1", server.port), timeout=30) as s:
            f = s.makefile("rw", encoding="utf-8")
            for _ in range(3):
                f.write(json.dumps(REQUEST) + "\n")
                f.flush()
                got.append(f.readline().strip())

    threads = [threading.Thread(target=client) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    server.shutdown()
    server.server_close()
    assert got == [expected] * 12


def test_engine_refuses_mismatched_index(pipeline):
    params, cfg, manifest, _ = load_checkpoint(pipeline.ckpt)
    bundle = load_indices(pipeline.index)
    with pytest.raises(HashMismatch):
        ServingEngine(params, cfg, bundle, "0" * 64)
    bundle.indices = bundle.indices[:2]
    with pytest.raises(HashMismatch):
        ServingEngine(params, cfg, bundle, manifest["hash"])


def test_author_and_tag_filled_from_catalog(engine):
    from mpformer.service import RetrieveRequest

    req = RetrieveRequest.model_validate(REQUEST)
    ev = engine.events(req)
    assert ev[0].author_id == int(engine.bundle.item_author[3])
    assert ev[1].tag_id == int(engine.bundle.item_tag[17])
