import pytest
from fastapi.testclient import TestClient

from main import app

TINY_NN = {
    "kind": "nn",
    "nn": {
        "n_neurons": 4,
        "step_size": 0.1,
        "burn_in": 5,
        "iterations": 10,
        "train_size": 16,
        "test_size": 16,
        "movers": 2,
        "batch_size": 2,
        "prediction_points": 5,
    },
}


@pytest.fixture
def client(ledger):
    with TestClient(app) as client:
        yield client


def test_health(client):
    body = client.get("/api/health").json()
    assert body["status"] == "ok"
    assert body["presets"] >= 10
    assert body["runs"]["total"] == 0


def test_presets(client):
    assert "pb3d_full" in client.get("/api/presets").json()
    preset = client.get("/api/presets/pb1d_full").json()
    assert preset["kind"] == "pb1d"
    assert preset["pb"]["n_plus"] == 1024
    assert client.get("/api/presets/nope").status_code == 404


def test_keys(client):
    assert any(line.startswith("[pb] epsilon") for line in client.get("/api/keys").json())


def test_missing_run(client):
    assert client.get("/api/runs/999").status_code == 404


def test_rejects_invalid_configs(client):
    assert client.post("/api/runs", json={}).status_code == 422
    assert client.post("/api/runs", json={"config": {"kind": "nn", "nn": {"n_neurons": 0}}}).status_code == 422
    assert client.post("/api/runs", json={"preset": "nope"}).status_code == 422


def test_run_round_trip(client, out_dir):
    response = client.post("/api/runs", json={"config": TINY_NN, "seed": 2, "output_dir": str(out_dir)})
    assert response.status_code == 201
    body = response.json()
    assert body["manifest"]["seed"] == 2
    assert (out_dir / "manifest.json").is_file()

    run = client.get(f"/api/runs/{body['id']}").json()
    assert run["status"] == "finished"
    assert run["output_dir"] == str(out_dir)
    assert run["metrics"]["sampled_neurons"] == 4 * 10

    assert [r["id"] for r in client.get("/api/runs", params={"kind": "nn"}).json()] == [body["id"]]
    assert client.get("/api/runs", params={"kind": "pb1d"}).json() == []
    assert client.get("/api/health").json()["runs"]["finished"] == 1


def test_failed_run_is_recorded(client, out_dir):
    config = {
        "kind": "pb3d",
        "pb": {"epsilon": 1.0, "Q_f": 0.5, "Q_plus": 2.0, "n_plus": 4},
        "domain": {"kind": "box", "dim": 1},
        "sampler": {"beta": 1.0, "tau": 0.01},
        "oracle": {"nodes": 16},
    }
    response = client.post("/api/runs", json={"config": config, "output_dir": str(out_dir)})
    assert response.status_code == 500
    runs = client.get("/api/runs", params={"status": "failed"}).json()
    assert len(runs) == 1
    assert runs[0]["error"].startswith("ParameterError")
