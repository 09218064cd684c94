"""TD-target computation, the masked joint-Q regression loss, and the
parameter update step shared by the learner, the AW worker, and the baseline.

The bootstrap target uses a frozen target network: per-agent greedy Q-values
over available actions at t+1, mixed by the target mixer conditioned on the
next global state. The final step of an episode bootstraps to zero (episode
records carry no post-terminal observation).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteLoss
from .nets import (
    MASK_FILL,
    NetDims,
    ParamLayout,
    agent_seq_forward,
    build_agent_inputs,
    init_params,
    mixer_forward,
    qtot_backward,
    qtot_forward,
)
from .replay import TrainingBatch
from .seeding import derive_rng

RMSPROP = "rmsprop"
SGD = "sgd"


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lr: float = 5e-4
    optimizer: str = RMSPROP
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-5
    grad_clip: float = 10.0  # global norm; <= 0 disables
    target_sync_period: int = 200  # train steps between target refreshes
    train_cost_s: float = 0.0  # injected per-step cost, for decoupling benchmarks

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.optimizer not in (RMSPROP, SGD):
            raise ConfigError(f"optimizer must be '{RMSPROP}' or '{SGD}'")
        if self.target_sync_period < 1:
            raise ConfigError("target_sync_period must be >= 1")


def greedy_mixed_q(dims: NetDims, flat: np.ndarray, batch: TrainingBatch) -> np.ndarray:
    """Q_total of the per-agent greedy (available-action) policy, per step.

    Used for bootstrap targets; runs without recording tapes.
    """
    layout = ParamLayout(dims)
    p = layout.unflatten(flat)
    b, t, n, _ = batch.obs.shape
    inputs = build_agent_inputs(dims, batch.obs, batch.actions)
    h0 = np.zeros((b * n, dims.hidden_dim))
    q_seq, _ = agent_seq_forward(p, inputs, h0, record=False)
    q_all = q_seq.reshape(b, n, t, dims.n_actions).transpose(0, 2, 1, 3)  # [B, T, N, A]
    masked = np.where(batch.avail, q_all, MASK_FILL)
    greedy = masked.max(axis=3)  # [B, T, N]; an available action's raw value
    q_total, _ = mixer_forward(
        dims, p, greedy.reshape(b * t, n), batch.state.reshape(b * t, dims.state_dim),
        record=False,
    )
    return q_total.reshape(b, t)


def compute_td_targets(
    dims: NetDims, target_flat: np.ndarray, batch: TrainingBatch, gamma: float
) -> np.ndarray:
    """y[b,t] = r[b,t] + gamma * (1 - terminal[b,t]) * Q_greedy(s[b,t+1]; target).

    Steps with no successor inside the episode (the last stored step) take
    next-Q = 0; padded steps are excluded by the batch mask downstream.
    """
    q_next_all = greedy_mixed_q(dims, target_flat, batch)  # [B, L*]
    next_q = np.zeros_like(q_next_all)
    next_q[:, :-1] = q_next_all[:, 1:] * batch.mask[:, 1:]
    return batch.rewards + gamma * (1.0 - batch.terminal) * next_q


def masked_loss_and_grad(
    dims: NetDims, flat: np.ndarray, batch: TrainingBatch, targets: np.ndarray
):
    """Masked MSE between Q_total and fixed targets, plus its flat gradient.

    loss = 1/2 * sum(mask * (y - Q_total)^2) / sum(mask)
    """
    q_total, tape = qtot_forward(dims, flat, batch.obs, batch.actions, batch.state)
    denom = batch.mask.sum()
    err = (q_total - targets) * batch.mask
    loss = 0.5 * float((err**2).sum()) / denom
    grad = qtot_backward(tape, err / denom, batch.actions)
    return loss, grad, q_total


class LearnerState:
    """Canonical parameters, the frozen target copy, and optimizer state."""

    def __init__(self, dims: NetDims, seed: int, cfg: TrainConfig = TrainConfig()):
        self.dims = dims
        self.cfg = cfg
        self.layout = ParamLayout(dims)
        self.theta = init_params(dims, seed)
        self.target = self.theta.copy()
        self.opt_v = np.zeros_like(self.theta)
        self.train_steps = 0
        self.sample_rng = derive_rng(seed, "replay-sampling")
        self.last_loss = float("nan")
        self.last_grad_norm = 0.0

    def train_step(self, batch: TrainingBatch) -> float:
        """One TD regression step; refreshes the target every sync period."""
        cfg = self.cfg
        y = compute_td_targets(self.dims, self.target, batch, cfg.gamma)
        loss, grad, _ = masked_loss_and_grad(self.dims, self.theta, batch, y)
        if not np.isfinite(loss):
            raise NonFiniteLoss(
                f"loss={loss} at train step {self.train_steps} "
                f"(grad norm {np.linalg.norm(grad):.3g})"
            )
        gnorm = float(np.linalg.norm(grad))
        if cfg.grad_clip > 0 and gnorm > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / gnorm)
        if cfg.optimizer == RMSPROP:
            self.opt_v = cfg.rmsprop_decay * self.opt_v + (1 - cfg.rmsprop_decay) * grad**2
            self.theta = self.theta - cfg.lr * grad / (np.sqrt(self.opt_v) + cfg.rmsprop_eps)
        else:
            self.theta = self.theta - cfg.lr * grad
        self.train_steps += 1
        if self.train_steps % cfg.target_sync_period == 0:
            self.target = self.theta.copy()
        self.last_loss = loss
        self.last_grad_norm = gnorm
        if cfg.train_cost_s > 0:
            time.sleep(cfg.train_cost_s)
        return loss
