"""Losses and the end-to-end training loop.

The goal head trains with mean binary cross-entropy against rasterized
future heat-maps; the trajectory head trains with the standard noise
matching objective (mean squared error between drawn and predicted noise).
Teacher forcing feeds the ground-truth goal to the trajectory side, which
together with gradient stopping fully decouples the two heads.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .condition import augment_batch
from .goal import HeatMapStack, SemanticGrid, rasterize_points
from .model import PredictionModel
from .nncore import Adam, Tensor
from .sampler import TrajectoryTensor, forward_noise
from .schedule import NoiseSchedule

BCE_CLIP = 1e-7


@dataclass
class TrainConfig:
    lam: float = 20.0  # goal-loss weight
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.99
    seed: int = 0
    teacher_forcing: bool = True
    stop_goal_gradient: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("loss weight must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def goal_loss(pred: HeatMapStack, target: HeatMapStack) -> float:
    """Mean binary cross-entropy over all pixels and channels."""
    if pred.channels.shape != target.channels.shape:
        raise ValueError("prediction/target shape mismatch")
    p = np.clip(pred.channels, BCE_CLIP, 1.0 - BCE_CLIP)
    t = target.channels
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def diffusion_loss(Y0: TrajectoryTensor, f, denoiser, s: NoiseSchedule,
                   rng: np.random.Generator) -> float:
    """Single-sample noise-matching loss: draw k and eps, noise Y0, compare."""
    k = int(rng.integers(1, s.K + 1))
    eps = rng.standard_normal(Y0.values.shape)
    yk = forward_noise(Y0, k, eps, s)
    pred = denoiser.predict_noise(k, yk.values, f)
    return float(np.mean((pred - eps) ** 2))


def combined_loss(l_traj: float, l_goal: float, lam: float) -> float:
    return l_traj + lam * l_goal


def _bce_t(logits: Tensor, target: np.ndarray) -> Tensor:
    p = logits.sigmoid().clip(BCE_CLIP, 1.0 - BCE_CLIP)
    t = Tensor(target)
    return (-(t * p.log() + (1.0 - t) * (1.0 - p).log())).mean()


class Trainer:
    """Mini-batch trainer over TrajectoryWindow lists."""

    def __init__(self, model: PredictionModel, sem: SemanticGrid,
                 schedule: NoiseSchedule, cfg: TrainConfig):
        self.model = model
        self.sem = sem
        self.schedule = schedule
        self.cfg = cfg
        self.opt = Adam(model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)

    # target maps peak at 1 so the per-pixel BCE has a meaningful positive class
    def _target_maps(self, futures: np.ndarray) -> np.ndarray:
        b, t_f, _ = futures.shape
        maps = rasterize_points(futures.reshape(-1, 2), self.model.grid,
                                self.model.cfg.sigma_px)
        maps /= maps.max(axis=(1, 2), keepdims=True)
        return maps.reshape(b, t_f, *maps.shape[1:])

    def _batch_losses(self, histories: np.ndarray, futures: np.ndarray):
        model = self.model
        mcfg = model.cfg

        # goal branch
        hist_maps = rasterize_points(histories.reshape(-1, 2), model.grid, mcfg.sigma_px)
        hist_maps = hist_maps.reshape(len(histories), mcfg.t_h, model.grid.H, model.grid.W)
        sem_b = np.broadcast_to(self.sem.channels, (len(histories),) + self.sem.channels.shape)
        x = np.concatenate([hist_maps, sem_b], axis=1)
        logits = model.goal_net.forward_t(Tensor(x))
        l_goal = _bce_t(logits, self._target_maps(futures))

        # trajectory branch
        origin = histories[:, -1] if mcfg.agent_centric else np.zeros((len(histories), 2))
        hist_c = histories - origin[:, None]
        fut_c = futures - origin[:, None]
        if self.cfg.teacher_forcing:
            goals_c = fut_c[:, -1]  # ground-truth goal = last future point
        else:
            # estimated goal: argmax of the predicted goal map. The goal enters
            # the trajectory branch as plain numpy, so no gradient flows back
            # into the goal head (gradient stopping is structural here).
            flat = logits.data[:, -1].reshape(len(histories), -1).argmax(axis=1)
            goals = np.stack([model.grid.pixel_to_world(i // model.grid.W, i % model.grid.W)
                              for i in flat])
            goals_c = goals - origin
        rows = augment_batch(hist_c, goals_c)
        f = model.encoder.forward_t(rows)

        b = len(histories)
        k = self.rng.integers(1, self.schedule.K + 1, size=b)
        eps = self.rng.standard_normal((b, mcfg.t_f, 2))
        abar = self.schedule.alpha_bars[k - 1][:, None, None]
        yk = np.sqrt(abar) * fut_c + np.sqrt(1.0 - abar) * eps
        eps_pred = model.denoiser.forward_t(k, yk.reshape(b, -1), f)
        diff = eps_pred - Tensor(eps.reshape(b, -1))
        l_traj = (diff * diff).mean()
        return l_goal, l_traj

    def train_epoch(self, windows: list) -> dict:
        if not windows:
            raise ValueError("empty training set")
        order = self.rng.permutation(len(windows))
        sums = {"l_goal": 0.0, "l_traj": 0.0}
        n_batches = 0
        for start in range(0, len(order), self.cfg.batch_size):
            batch = [windows[i] for i in order[start:start + self.cfg.batch_size]]
            histories = np.stack([w.history for w in batch])
            futures = np.stack([w.future for w in batch])
            l_goal, l_traj = self._batch_losses(histories, futures)
            total = l_traj + self.cfg.lam * l_goal
            if not np.isfinite(total.data):
                raise RuntimeError(f"non-finite loss in batch starting at index {start}")
            self.opt.zero_grad()
            total.backward()
            self.opt.step()
            sums["l_goal"] += float(l_goal.data)
            sums["l_traj"] += float(l_traj.data)
            n_batches += 1
        lr = self.opt.lr
        self.opt.lr *= self.cfg.lr_decay
        mean_goal = sums["l_goal"] / n_batches
        mean_traj = sums["l_traj"] / n_batches
        return {"l_goal": mean_goal, "l_traj": mean_traj,
                "l_total": combined_loss(mean_traj, mean_goal, self.cfg.lam), "lr": lr}

    def fit(self, windows: list, log_path=None, max_seconds: float | None = None) -> list[dict]:
        history = []
        log = open(log_path, "w") if log_path else None
        if log:
            log.write("epoch,l_goal,l_traj,l_total,lr\n")
        start_time = time.monotonic()
        try:
            for epoch in range(1, self.cfg.epochs + 1):
                metrics = self.train_epoch(windows)
                metrics["epoch"] = epoch
                history.append(metrics)
                if log:
                    log.write(f"{epoch},{metrics['l_goal']:.8f},{metrics['l_traj']:.8f},"
                              f"{metrics['l_total']:.8f},{metrics['lr']:.8g}\n")
                if max_seconds is not None and time.monotonic() - start_time > max_seconds:
                    break
        finally:
            if log:
                log.close()
        return history
