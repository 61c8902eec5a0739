"""Forecast accuracy metrics and multi-horizon evaluation."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .gp import SparseGP
from .koopman import KoopmanModel


def smape(Y_true, Y_pred) -> float:
    """Symmetric mean absolute percentage error over state vectors.

    ``100 * (3 / n) * sum_i ||y_i - yhat_i|| / (||y_i|| + ||yhat_i||)`` with
    rows as samples.  Pairs where both norms vanish contribute zero.  The
    result lies in [0, 300].
    """
    Y_true = np.asarray(Y_true, dtype=float)
    Y_pred = np.asarray(Y_pred, dtype=float)
    if Y_true.shape != Y_pred.shape:
        raise ValueError(f"shape mismatch: {Y_true.shape} vs {Y_pred.shape}")
    if Y_true.ndim == 1:
        Y_true, Y_pred = Y_true[:, None], Y_pred[:, None]
    n = Y_true.shape[0]
    if n == 0:
        raise ValueError("smape needs at least one sample")
    num = np.linalg.norm(Y_true - Y_pred, axis=1)
    den = np.linalg.norm(Y_true, axis=1) + np.linalg.norm(Y_pred, axis=1)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(300.0 * np.sum(ratio) / n)


@dataclass
class EvalReport:
    smape_per_horizon: dict
    model_id: str = ""
    n_test: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "n_test": self.n_test,
            "config_hash": self.config_hash,
            "smape_per_horizon": {str(h): v for h, v in self.smape_per_horizon.items()},
            **self.extra,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def rows(self):
        return [(self.model_id, h, v) for h, v in sorted(self.smape_per_horizon.items())]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "horizon", "smape"])
            for m, h, v in self.rows():
                w.writerow([m, h, format(v, ".17g")])


def multi_horizon_eval(forecaster, initial_states, true_rollouts, horizons,
                       model_id: str = "", config_hash: str = "") -> EvalReport:
    """SMAPE of a batched forecaster at each requested horizon.

    ``forecaster(X0, H)`` maps initial states (n, D) to predictions of shape
    (n, H, D) for steps 1..H; ``true_rollouts[:, h - 1]`` is the noise-free
    state h steps after ``initial_states``.
    """
    X0 = np.asarray(initial_states, dtype=float)
    truth = np.asarray(true_rollouts, dtype=float)
    horizons = sorted(int(h) for h in horizons)
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be positive")
    H = horizons[-1]
    if truth.shape[:2] != (X0.shape[0], truth.shape[1]) or truth.shape[1] < H:
        raise ValueError(f"true rollouts of shape {truth.shape} do not cover horizon {H}")
    pred = np.asarray(forecaster(X0, H))
    scores = {h: smape(truth[:, h - 1], pred[:, h - 1]) for h in horizons}
    return EvalReport(scores, model_id=model_id, n_test=X0.shape[0], config_hash=config_hash)


def spectral_forecaster(model: KoopmanModel):
    """Batched spectral forecaster ``x_h = Re(V_f^T Lambda^h W^T Psi(x0))``."""

    def forecast(X0, H):
        Xs = model.standardizer.transform(X0)
        W = model.right_eigvecs[:, model.retained]
        lam = model.eigenvalues[model.retained]
        phi = model.features(Xs) @ W
        out = np.empty((Xs.shape[0], H, model.dim))
        for h in range(1, H + 1):
            phi = phi * lam
            out[:, h - 1] = model.standardizer.inverse_transform((phi @ model.modes).real)
        return out

    return forecast


def gp_rollout_forecaster(gp: SparseGP, standardizer=None):
    """Batched iterated sparse-GP posterior mean."""

    def forecast(X0, H):
        X = np.asarray(X0, dtype=float)
        if standardizer is not None:
            X = standardizer.transform(X)
        out = np.empty((X.shape[0], H, X.shape[1]))
        for h in range(H):
            X = gp.predict(X)[0]
            out[:, h] = standardizer.inverse_transform(X) if standardizer is not None else X
        return out

    return forecast
