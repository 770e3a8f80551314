"""Goal-augmented history state and the shared sequence encoder.

Each history frame becomes an 8-vector [D, X, V, A]: offset to the goal,
position, velocity, acceleration. Velocities/accelerations use first
differences with the first row replicated so the row count stays t_h.
One encoder (a small LSTM plus an output projection) is shared between the
common-goal and diverse-goal features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import Dense, LSTMCell, Tensor


@dataclass
class AugmentedState:
    rows: np.ndarray  # (t_h, 8)


@dataclass
class ConditionFeature:
    vector: np.ndarray
    kind: str  # "common" or "diverse"
    goal: np.ndarray


def _diff_replicate_first(x: np.ndarray) -> np.ndarray:
    d = np.diff(x, axis=0)
    return np.vstack([d[:1], d])


def augment_state(X: np.ndarray, g: np.ndarray) -> AugmentedState:
    X = np.asarray(X, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError(f"history must have shape (t_h, 2), got {X.shape}")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 history frames to form velocities")
    V = _diff_replicate_first(X)
    A = _diff_replicate_first(V)
    D = X - g
    return AugmentedState(np.hstack([D, X, V, A]))


def augment_batch(X: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vectorized augment_state: (B, t_h, 2) histories, (B, 2) goals -> (B, t_h, 8)."""
    V = np.concatenate([X[:, 1:2] - X[:, 0:1], np.diff(X, axis=1)], axis=1)
    A = np.concatenate([V[:, 1:2] - V[:, 0:1], np.diff(V, axis=1)], axis=1)
    D = X - g[:, None, :]
    return np.concatenate([D, X, V, A], axis=2)


class SequenceEncoder:
    """LSTM over the augmented rows; final hidden state projected to d_f."""

    def __init__(self, hidden: int = 64, d_f: int = 64,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        self.d_f = d_f
        self.cell = LSTMCell(8, hidden, rng)
        self.proj = Dense(hidden, d_f, rng)

    def forward_t(self, rows: np.ndarray) -> Tensor:
        """Batched graph forward: (B, t_h, 8) -> Tensor (B, d_f)."""
        b, t_h, _ = rows.shape
        h = Tensor(np.zeros((b, self.hidden)))
        c = Tensor(np.zeros((b, self.hidden)))
        for t in range(t_h):
            h, c = self.cell(Tensor(rows[:, t]), h, c)
        return self.proj(h)

    def encode(self, a: AugmentedState, kind: str = "common",
               goal: np.ndarray | None = None) -> ConditionFeature:
        if not np.all(np.isfinite(a.rows)):
            raise ValueError("augmented state contains non-finite entries")
        out = self.forward_t(a.rows[None]).data[0]
        if not np.all(np.isfinite(out)):
            raise ValueError("encoder produced non-finite activations")
        g = goal if goal is not None else -a.rows[-1, 0:2] + a.rows[-1, 2:4]
        return ConditionFeature(out, kind, np.asarray(g, dtype=np.float64))

    def parameters(self) -> dict:
        out = {}
        for name, p in self.cell.parameters().items():
            out[f"encoder.cell.{name}"] = p
        for name, p in self.proj.parameters().items():
            out[f"encoder.proj.{name}"] = p
        return out
