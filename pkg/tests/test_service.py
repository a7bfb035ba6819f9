import io
import os

import pytest
from fastapi.testclient import TestClient
from PIL import Image

from ppegate.classes import PpeClass
from ppegate.config import AppConfig
from ppegate.gate import GatePolicy, SimulatedClock, StaticIdentity
from ppegate.pipeline import Backends, Pipeline, PipelineConfig
from ppegate.service import GateService, create_app
from tests.conftest import fixture_backend, pattern_image, person_with

SIGNATURES = (b"\x89PNG\r\n\x1a\n", b"\xff\xd8\xff")


def encode(fmt, seed=0):
    buf = io.BytesIO()
    Image.fromarray(pattern_image(476, 476, seed)).save(buf, format=fmt)
    return buf.getvalue()


@pytest.fixture
def service(tmp_path):
    frames = {f"f{i}": person_with(list(PpeClass)) for i in range(20)}
    frames["partial"] = person_with([PpeClass.HARDHAT])
    fx = fixture_backend(frames)
    pipe = Pipeline(Backends(fx, fx), PipelineConfig(ppe_backend="x"))
    clock = SimulatedClock()
    svc = GateService(
        AppConfig(policy=GatePolicy(check_timeout=10, cooldown=2)),
        pipeline=pipe,
        identity=StaticIdentity("alice"),
        clock=clock,
        data_dir=tmp_path / "data",
    )
    return svc, clock


@pytest.fixture
def client(service):
    return TestClient(create_app(service[0]))


def new_session(client):
    r = client.post("/v1/sessions")
    assert r.status_code == 200
    return r.json()["session_id"]


def test_grant_flow(client):
    sid = new_session(client)
    r = client.post(f"/v1/sessions/{sid}/frames", params={"frame_id": "f0"}, content=encode("PNG"))
    assert r.status_code == 200
    body = r.json()
    assert body["state"] == "Granted" and body["missing"] == []
    assert body["identity"] == {"subject_id": "alice", "authorized": True}
    r = client.post(f"/v1/sessions/{sid}/events", json={"type": "InnerDoorClosed"})
    assert r.json() == {"state": "Cooldown"}
    r = client.get(f"/v1/sessions/{sid}")
    hist = r.json()["history"]
    assert r.json()["state"] == "Cooldown"
    assert [h["name"] for h in hist] == ["PersonDetected", "FrameAssessed", "Granted", "InnerDoorClosed"]


def test_missing_ppe_and_timeout(client, service):
    _, clock = service
    sid = new_session(client)
    r = client.post(f"/v1/sessions/{sid}/frames", params={"frame_id": "partial"}, content=encode("JPEG"))
    body = r.json()
    assert body["state"] == "Checking"
    assert "safety_gloves" in body["missing"] and body["per_class_present"]["hardhat"]
    clock.advance(11)
    assert client.get(f"/v1/sessions/{sid}").json()["state"] == "Denied"


def test_reset_event(client):
    sid = new_session(client)
    client.post(f"/v1/sessions/{sid}/frames", params={"frame_id": "partial"}, content=encode("PNG"))
    assert client.post(f"/v1/sessions/{sid}/events", json={"type": "Reset"}).json() == {"state": "Idle"}


def test_errors(client):
    assert client.get("/v1/sessions/nope").status_code == 404
    assert client.post("/v1/sessions/nope/frames", content=encode("PNG")).status_code == 404
    sid = new_session(client)
    assert client.post(f"/v1/sessions/{sid}/frames", content=b"").status_code == 400
    assert client.post(f"/v1/sessions/{sid}/frames", content=b"garbage").status_code == 422
    assert client.post(f"/v1/sessions/{sid}/events", json={"type": "Explode"}).status_code == 400
    assert client.post(f"/v1/sessions/{sid}/events", json=[1]).status_code == 400


def test_sessions_are_independent(client):
    a, b = new_session(client), new_session(client)
    client.post(f"/v1/sessions/{a}/frames", params={"frame_id": "f1"}, content=encode("PNG"))
    assert client.get(f"/v1/sessions/{a}").json()["state"] == "Granted"
    assert client.get(f"/v1/sessions/{b}").json()["state"] == "Idle"


def scan_for_images(root):
    hits = []
    for dirpath, _, files in os.walk(root):
        for name in files:
            data = open(os.path.join(dirpath, name), "rb").read()
            hits += [(name, sig) for sig in SIGNATURES if sig in data]
    return hits


def test_no_image_bytes_persisted(client, tmp_path):
    for i in range(12):
        sid = new_session(client)
        fmt = "PNG" if i % 2 else "JPEG"
        r = client.post(f"/v1/sessions/{sid}/frames", params={"frame_id": f"f{i}"}, content=encode(fmt, i))
        assert r.status_code == 200
    written = list((tmp_path / "data").iterdir())
    assert [p.name for p in written] == ["audit.jsonl"]
    assert len((tmp_path / "data" / "audit.jsonl").read_text().splitlines()) >= 36
    assert scan_for_images(tmp_path) == []
