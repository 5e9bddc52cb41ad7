"""
Flask inference service for a trained checkpoint
REST endpoints for scoring single ECG windows or batches

    python api.py --checkpoint runs/run-.../checkpoint_seed41.ckpt --port 5000
"""

import argparse
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
from flask import Flask, jsonify, request

from cardioformer_model import Checkpoint, __version__, load_checkpoint, predict_proba


def _as_windows(payload, config, key: str) -> np.ndarray:
    if payload is None or key not in payload:
        raise ValueError(f"Missing required field: {key}")
    try:
        windows = np.asarray(payload[key], dtype=np.float64)
    except (TypeError, ValueError):
        raise ValueError(f"'{key}' must be a nested list of numbers") from None
    expected = (config.timestamps, config.channels)
    if windows.shape[-2:] != expected:
        raise ValueError(f"'{key}' must have windows of shape {expected}, got {windows.shape}")
    if not np.all(np.isfinite(windows)):
        raise ValueError(f"'{key}' contains non-finite values")
    return windows


def _prediction(probs: np.ndarray, label_names: Optional[List[str]]) -> Dict:
    label = int(np.argmax(probs))
    out = {"label": label, "probabilities": [float(p) for p in probs]}
    if label_names:
        out["label_name"] = label_names[label]
    return out


def create_app(checkpoint_path: str, label_names: Optional[List[str]] = None) -> Flask:
    app = Flask(__name__)

    # Load the model at startup; a broken checkpoint leaves the service up but not ready
    try:
        ckpt: Optional[Checkpoint] = load_checkpoint(checkpoint_path)
        print(f"[OK] Checkpoint loaded from {checkpoint_path}")
    except Exception as e:
        print(f"[ERROR] Could not load checkpoint: {e}")
        ckpt = None

    def not_ready():
        return jsonify({"status": "error", "message": "Model not loaded"}), 500

    @app.route("/health", methods=["GET"])
    def health():
        """Health check endpoint"""
        return jsonify({
            "status": "healthy",
            "timestamp": datetime.now().isoformat(),
            "model_ready": ckpt is not None,
        })

    @app.route("/model-info", methods=["GET"])
    def model_info():
        """Configuration and training metadata of the loaded checkpoint"""
        if ckpt is None:
            return not_ready()
        return jsonify({
            "status": "success",
            "code_version": __version__,
            "config": ckpt.config.to_dict(),
            "epoch": ckpt.epoch,
            "best_val_f1": ckpt.best_val_f1,
            "parameters": ckpt.store.num_parameters(),
        }), 200

    @app.route("/predict", methods=["POST"])
    def predict():
        """
        POST /predict

        Request body:
        {"window": [[c_0, ..., c_{C-1}], ...]}   (T rows)

        Response:
        {"status": "success", "label": 1, "probabilities": [0.1, 0.9]}
        """
        if ckpt is None:
            return not_ready()
        try:
            window = _as_windows(request.get_json(silent=True), ckpt.config, "window")
            if window.ndim != 2:
                raise ValueError(f"'window' must be a single (T, C) window, got shape {window.shape}")
            probs = predict_proba(ckpt.store, ckpt.config, window)[0]
            return jsonify({"status": "success", **_prediction(probs, label_names)}), 200
        except ValueError as ve:
            return jsonify({"status": "error", "message": f"Invalid input: {ve}"}), 400
        except Exception as e:
            return jsonify({"status": "error", "message": f"Internal error: {e}"}), 500

    @app.route("/predict-batch", methods=["POST"])
    def predict_batch():
        """
        POST /predict-batch

        Request body:
        {"windows": [window_1, window_2, ...]}
        """
        if ckpt is None:
            return not_ready()
        try:
            windows = _as_windows(request.get_json(silent=True), ckpt.config, "windows")
            if windows.ndim != 3 or len(windows) == 0:
                raise ValueError(f"'windows' must be a non-empty list of (T, C) windows, got shape {windows.shape}")
            probs = predict_proba(ckpt.store, ckpt.config, windows)
            return jsonify({
                "status": "success",
                "timestamp": datetime.now().isoformat(),
                "batch_size": len(probs),
                "results": [_prediction(p, label_names) for p in probs],
            }), 200
        except ValueError as ve:
            return jsonify({"status": "error", "message": f"Invalid input: {ve}"}), 400
        except Exception as e:
            return jsonify({"status": "error", "message": f"Batch processing error: {e}"}), 500

    return app


def main() -> int:
    parser = argparse.ArgumentParser(description="Serve a trained checkpoint over HTTP.")
    parser.add_argument("--checkpoint", required=True, help="Checkpoint file.")
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--port", type=int, default=5000)
    parser.add_argument("--debug", action="store_true")
    args = parser.parse_args()
    create_app(args.checkpoint).run(debug=args.debug, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
