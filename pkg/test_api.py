"""
Tests for the Flask inference service.
"""

import numpy as np
import pytest

from api import create_app
from cardioformer_model import Checkpoint, ModelConfig, init_parameters, predict_proba, save_checkpoint


CONFIG = ModelConfig(patch_lens=(2, 4), d_model=8, n_layers=1, n_heads=2, d_ff=16,
                     n_classes=3, timestamps=16, channels=2)


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, Checkpoint(CONFIG, init_parameters(CONFIG), epoch=2, best_val_f1=0.75))
    return path


@pytest.fixture
def client(checkpoint):
    return create_app(str(checkpoint)).test_client()


def test_health(client):
    body = client.get("/health").get_json()
    assert body["status"] == "healthy"
    assert body["model_ready"] is True


def test_model_info(client):
    response = client.get("/model-info")
    assert response.status_code == 200
    body = response.get_json()
    assert body["config"]["n_classes"] == 3
    assert body["epoch"] == 2
    assert body["parameters"] == init_parameters(CONFIG).num_parameters()


def test_predict_matches_library(client, checkpoint):
    window = np.random.default_rng(0).normal(size=(16, 2)).astype(np.float32)
    response = client.post("/predict", json={"window": window.tolist()})
    assert response.status_code == 200
    body = response.get_json()
    expected = predict_proba(init_parameters(CONFIG), CONFIG, window)[0]
    np.testing.assert_allclose(body["probabilities"], expected, atol=1e-6)
    assert body["label"] == int(np.argmax(expected))


def test_predict_batch(client):
    windows = np.zeros((3, 16, 2)).tolist()
    body = client.post("/predict-batch", json={"windows": windows}).get_json()
    assert body["status"] == "success"
    assert body["batch_size"] == 3
    assert all(len(r["probabilities"]) == 3 for r in body["results"])


@pytest.mark.parametrize("payload", [{}, {"window": [[1.0, 2.0]]}, {"window": "abc"}])
def test_bad_input_is_a_client_error(client, payload):
    response = client.post("/predict", json=payload)
    assert response.status_code == 400
    assert response.get_json()["status"] == "error"


def test_missing_checkpoint_reports_not_ready(tmp_path):
    client = create_app(str(tmp_path / "missing.ckpt")).test_client()
    assert client.get("/health").get_json()["model_ready"] is False
    assert client.post("/predict", json={"window": []}).status_code == 500
