from fastapi.testclient import TestClient

from app.main import app

client = TestClient(app)


def test_health():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_default_plan():
    response = client.get("/api/plan")
    assert response.status_code == 200
    body = response.json()
    assert body["lora_timesteps"] == [761, 501, 261, 1]
    assert body["shortcut_spans"] == [[741, 501], [481, 261], [241, 1]]


def test_small_plan():
    body = client.get("/api/plan", params={"T": 100, "step_count": 10, "k": 2}).json()
    assert body["boundaries"] == [50, 0]
    assert body["lora_timesteps"] == [51, 1]


def test_impossible_plan_is_a_bad_request():
    response = client.get("/api/plan", params={"T": 100, "step_count": 10, "k": 20})
    assert response.status_code == 400


def test_shortft_chain_summary():
    body = client.get("/api/chain").json()
    assert body["chain"]["stage"] == 1
    assert body["nodes_grad_enabled"] == 7
    assert body["jumps"] == 3
    assert body["nodes_total"] == 18


def test_vanilla_chain_summary():
    body = client.get("/api/chain", params={"strategy": "vanilla"}).json()
    assert body["nodes_grad_enabled"] == 50
    assert body["jumps"] == 0


def test_stage_out_of_range():
    response = client.get("/api/chain", params={"strategy": "shortft", "stage": 9})
    assert response.status_code == 400


def test_unknown_strategy_is_rejected():
    response = client.get("/api/chain", params={"strategy": "ppo"})
    assert response.status_code == 422
