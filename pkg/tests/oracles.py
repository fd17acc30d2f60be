"""Independent reference computations used by the test-suite."""

from __future__ import annotations

import numpy as np


def grid_svm_objective(x: np.ndarray, y: np.ndarray, c: float, lo: float = -5.0, hi: float = 5.0, step: float = 0.01):
    """Exact minimum of the 2-D soft-margin objective over the grid (w1, w2, b) in [lo, hi]^3.

    For fixed w the objective is convex and piecewise linear in b with kinks
    at b = y_i - w.x_i, so the best grid b is a grid neighbour of a kink or a
    box edge. Scanning those candidates for every (w1, w2) grid point is an
    exhaustive search of the full grid.
    """
    n_steps = int(round((hi - lo) / step))
    axis = lo + step * np.arange(n_steps + 1)
    w1, w2 = np.meshgrid(axis, axis, indexing="ij")
    w1, w2 = w1.ravel(), w2.ravel()
    s = np.outer(w1, x[:, 0]) + np.outer(w2, x[:, 1])  # (G, n) scores without bias
    reg = 0.5 * (w1**2 + w2**2)
    kinks = y[None, :] - s
    cand = [np.full(len(w1), lo), np.full(len(w1), hi)]
    for j in range(x.shape[0]):
        k = (kinks[:, j] - lo) / step
        for idx in (np.floor(k), np.ceil(k)):
            cand.append(lo + step * np.clip(idx, 0, n_steps))
    best = np.full(len(w1), np.inf)
    arg_b = np.zeros(len(w1))
    for b in cand:
        hinge = np.maximum(0.0, 1.0 - y[None, :] * (s + b[:, None])).sum(axis=1)
        val = reg + c * hinge
        better = val < best
        best = np.where(better, val, best)
        arg_b = np.where(better, b, arg_b)
    i = int(np.argmin(best))
    return float(best[i]), np.array([w1[i], w2[i]]), float(arg_b[i])


def sliding_lock_indices(labels: list[bool], m: int, n: int) -> list[int]:
    """Indices at which an m-of-n rule fires; history clears after each firing."""
    out, hist = [], []
    for i, bad in enumerate(labels):
        hist = (hist + [bad])[-n:]
        if sum(hist) >= m:
            out.append(i)
            hist = []
    return out


class LockFsmOracle:
    """Hand-written model of the lock / password / PIN protocol for golden traces.

    Tracks the lock state and the summed delta for the current top set, and
    predicts the reply types the server sends for each client event.
    """

    def __init__(self, eta_incorrect: float, eta_correct: float, threshold: float):
        self.eta_i, self.eta_c, self.threshold = eta_incorrect, eta_correct, threshold
        self.state = "unlocked"
        self.delta = 0.0
        self.version = 1

    def lock(self) -> None:
        assert self.state == "unlocked"
        self.state = "locked_awaiting_password"

    def password(self, correct: bool) -> list[str]:
        assert self.state == "locked_awaiting_password"
        if not correct:
            self.delta += self.eta_i
            return ["LOCKED"]
        self.delta -= self.eta_c
        if -self.delta > self.threshold:
            self.state = "pin_challenge_pending"
            return ["AUTH_RESULT", "PIN_CHALLENGE"]
        self.state = "unlocked"
        return ["AUTH_RESULT"]

    def pin(self, ok: bool, consent: bool) -> list[str]:
        assert self.state == "pin_challenge_pending"
        self.state = "unlocked"
        self.delta = 0.0
        if ok and consent:
            self.version += 1
            return ["FEATURE_SET_UPDATE"]
        return ["AUTH_RESULT"]
