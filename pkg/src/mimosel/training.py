"""Loss assembly and the three-phase unsupervised training procedure.

Phase 1 trains the beamforming network alone on randomly selected antenna
subsets.  Phase 2 freezes it and trains the selection network through the
softmax relaxation with an exponentially annealed temperature.  Phase 3
fine-tunes everything jointly at a reduced learning rate and the final
temperature.  The per-batch loss is the negated relaxed rate plus (in phases
2/3) an orthogonality penalty and an entropy penalty, plus an L2 penalty on
whatever parameters are currently trainable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, gradients, record_primitive
from .errors import ContractError, NumericalError
from .mimo import achieved_rate, logits_to_probabilities
from .nets import bfnet_forward, joint_forward

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "EpochStats",
    "loss_rate",
    "loss_pen1",
    "loss_pen2",
    "loss_pen3",
    "temperature",
    "phased_train",
    "fine_tune",
    "history_to_csv",
]

LN2 = math.log(2.0)


@dataclass
class TrainConfig:
    """Hyperparameters for the three training phases."""

    n1: int = 30
    n2: int = 15
    n3: int = 15
    mu1: float = 1e-4
    mu2: float = 1e-4
    mu3: float = 5e-5
    batch_size: int = 512
    lambda1: float = 1e-2
    lambda2: float = 1e-3
    lambda3: float = 1e-3
    tau_init: float = 1.0
    tau_final: float = 0.1
    alpha: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "seed":
                continue
            if getattr(self, f.name) <= 0:
                raise ContractError(f"{f.name} must be positive")
        if self.tau_final > self.tau_init:
            raise ContractError("tau_final must not exceed tau_init")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossBreakdown:
    rate: float
    pen1: float
    pen2: float
    pen3: float

    @property
    def total(self):
        return self.rate + self.pen1 + self.pen2 + self.pen3


@dataclass
class EpochStats:
    epoch: int
    phase: int
    train_loss: float
    test_loss: float
    tau: float


# --------------------------------------------------------------------------
# Loss terms
# --------------------------------------------------------------------------


def loss_rate(h, a_relaxed, t_rf, t_bb, cfg):
    """Negated achieved rate, averaged over any leading batch axis."""
    rates = achieved_rate(h, a_relaxed, t_rf, t_bb, cfg)
    if isinstance(rates, Tensor):
        return -rates.mean()
    return -float(np.mean(rates))


def loss_pen1(a_relaxed, lam):
    """Orthogonality penalty: sum over ordered column pairs of |a_j^T a_k|^2."""
    if isinstance(a_relaxed, Tensor):
        n_ts = a_relaxed.data.shape[-1]
        ndim = a_relaxed.data.ndim
        axes = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
        gram = a_relaxed.transpose(axes) @ a_relaxed
        mask = 1.0 - np.eye(n_ts)
        per_sample = (gram * gram * mask).sum(axis=(-2, -1))
        return per_sample.mean() * lam
    a = np.asarray(a_relaxed, dtype=np.float64)
    gram = np.swapaxes(a, -1, -2) @ a
    mask = 1.0 - np.eye(a.shape[-1])
    return lam * float(np.mean(np.sum(gram * gram * mask, axis=(-2, -1))))


def loss_pen2(logits, lam):
    """Entropy penalty (bits) of the per-slot selection distributions.

    Written as ``logsumexp(phi) - sum(p * phi)`` per row, which equals the
    natural-log entropy of ``softmax(phi)`` without ever forming ``log p``.
    """
    if isinstance(logits, Tensor):
        shift = np.max(logits.data, axis=-1, keepdims=True)
        z = logits - shift
        lse = z.exp().sum(axis=-1, keepdims=True).log() + shift
        p = logits.softmax(axis=-1)
        per_row = lse - (p * logits).sum(axis=-1, keepdims=True)
        ndim = logits.data.ndim
        per_sample = per_row.sum(axis=(ndim - 2, ndim - 1))
        return per_sample.mean() * (lam / LN2)
    p = logits_to_probabilities(logits)
    ent = np.where(p > 0.0, -p * np.log2(p, where=p > 0.0), 0.0)
    return lam * float(np.mean(np.sum(ent, axis=(-2, -1))))


def loss_pen3(param_tensors, lam):
    """L2 penalty over the currently trainable parameters."""
    total = None
    for t in param_tensors:
        if not isinstance(t, Tensor):
            t = Tensor(t)
        term = (t * t).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0) * lam
    return total * lam


def temperature(epoch, cfg):
    """Annealed softmax temperature for phase-2 epoch ``epoch`` (0-based).

    Geometric interpolation from ``tau_init`` down to ``tau_final``; a single
    phase-2 epoch uses ``tau_final`` directly.
    """
    if not 0 <= epoch < cfg.n2:
        raise ContractError(f"epoch {epoch} outside phase 2 (n2={cfg.n2})")
    if cfg.n2 == 1:
        return cfg.tau_final
    ratio = cfg.tau_final / cfg.tau_init
    return cfg.tau_init * ratio ** (epoch / (cfg.n2 - 1))


# --------------------------------------------------------------------------
# The trainer
# --------------------------------------------------------------------------


def _rng_for(seed, phase, epoch, purpose):
    return np.random.default_rng(np.random.SeedSequence((seed, phase, epoch, purpose)))


def _random_subsets(rng, count, n_t, n_ts):
    return np.argsort(rng.random((count, n_t)), axis=1)[:, :n_ts]


def _batch_loss(model, h_batch, phase, tau, cfg, pt, pen3_names, rng,
                update_as=False, update_bf=False):
    """Phase-appropriate batch loss on one tape; returns (loss, breakdown)."""
    sys_cfg = model.sys_cfg
    pen3 = loss_pen3([pt[name] for name in pen3_names], cfg.lambda3)
    if phase == 1:
        idx = _random_subsets(rng, h_batch.shape[0], sys_cfg.n_t, sys_cfg.n_ts)
        h_s = np.take_along_axis(h_batch, idx[:, None, :], axis=2)
        t_rf, t_bb, _ = bfnet_forward(
            model, h_s, "train", alpha=cfg.alpha, pt=pt, update_stats=update_bf
        )
        rate_term = loss_rate(h_s, None, t_rf, t_bb, sys_cfg)
        total = rate_term + pen3
        breakdown = LossBreakdown(float(rate_term.data), 0.0, 0.0, float(pen3.data))
    else:
        fwd = joint_forward(
            model, h_batch, "train", tau=tau, alpha=cfg.alpha, rng=rng, noise=True,
            pt=pt, update_stats=(update_as, update_bf),
        )
        rate_term = loss_rate(h_batch, fwd.a_relaxed, fwd.t_rf, fwd.t_bb, sys_cfg)
        pen1 = loss_pen1(fwd.a_relaxed, cfg.lambda1)
        pen2 = loss_pen2(fwd.logits, cfg.lambda2)
        total = rate_term + pen1 + pen2 + pen3
        breakdown = LossBreakdown(
            float(rate_term.data), float(pen1.data), float(pen2.data), float(pen3.data)
        )
    return total, breakdown


_PHASES = (1, 2, 3)


def _phase_plan(model, cfg):
    as_names = model.param_names("as")
    bf_names = model.param_names("bf")
    return {
        1: (cfg.n1, cfg.mu1, bf_names),
        2: (cfg.n2, cfg.mu2, as_names),
        3: (cfg.n3, cfg.mu3, bf_names + as_names),
    }


def _phase_tau(phase, epoch_in_phase, cfg):
    if phase == 1:
        return cfg.tau_init
    if phase == 2:
        return temperature(epoch_in_phase, cfg)
    return cfg.tau_final


def _evaluate_loss(model, samples, phase, tau, cfg, pen3_names, rng):
    if samples.shape[0] == 0:
        return math.nan
    pt = model.tensors()
    loss, _ = _batch_loss(model, samples, phase, tau, cfg, pt, pen3_names, rng)
    return float(loss.data)


def phased_train(model, train_set, test_set, cfg, log=None):
    """Run the three training phases in place on ``model``.

    Returns the per-epoch history (:class:`EpochStats`); the train loss is the
    mean over the epoch's batches, the test loss is the same phase-form loss
    evaluated on the held-out set in its relaxed (training) form.  Each phase
    gets a fresh optimizer state.  Fully deterministic for a fixed config.
    """
    if len(train_set) == 0:
        raise ContractError("training dataset is empty")
    train = train_set.samples
    test = test_set.samples if test_set is not None else train[:0]
    plan = _phase_plan(model, cfg)
    history = []
    epoch_global = 0
    for phase in _PHASES:
        n_epochs, lr, trainable = plan[phase]
        state = AdamState({name: model.params[name] for name in trainable})
        update_as = phase in (2, 3)
        update_bf = phase in (1, 3)
        for epoch in range(n_epochs):
            tau = _phase_tau(phase, epoch, cfg)
            rng = _rng_for(cfg.seed, phase, epoch, 0)
            order = rng.permutation(train.shape[0])
            batch_losses = []
            for start in range(0, train.shape[0], cfg.batch_size):
                batch = train[order[start : start + cfg.batch_size]]
                tape = Tape()
                pt = model.tensors(tape, trainable)
                loss, _ = _batch_loss(
                    model, batch, phase, tau, cfg, pt, trainable, rng,
                    update_as=update_as, update_bf=update_bf,
                )
                if not np.isfinite(loss.data):
                    raise NumericalError(
                        f"non-finite loss in phase {phase}, epoch {epoch}, "
                        f"batch starting at {start}"
                    )
                grads = gradients(loss, {name: pt[name] for name in trainable})
                adam_step(model.params, grads, state, lr)
                batch_losses.append(float(loss.data))
            test_rng = _rng_for(cfg.seed, phase, epoch, 1)
            test_loss = _evaluate_loss(model, test, phase, tau, cfg, trainable, test_rng)
            epoch_global += 1
            stats = EpochStats(epoch_global, phase, float(np.mean(batch_losses)), test_loss, tau)
            history.append(stats)
            if log is not None:
                log(stats)
    return history


def fine_tune(model, train_set, cfg, epochs, test_set=None, seed_offset=1000, log=None):
    """Extra joint-training epochs (phase-3 regime) on a new dataset."""
    if len(train_set) == 0:
        raise ContractError("fine-tune dataset is empty")
    train = train_set.samples
    test = test_set.samples if test_set is not None else train[:0]
    trainable = model.param_names()
    state = AdamState({name: model.params[name] for name in trainable})
    history = []
    for epoch in range(epochs):
        rng = _rng_for(cfg.seed + seed_offset, 3, epoch, 0)
        order = rng.permutation(train.shape[0])
        batch_losses = []
        for start in range(0, train.shape[0], cfg.batch_size):
            batch = train[order[start : start + cfg.batch_size]]
            tape = Tape()
            pt = model.tensors(tape, trainable)
            loss, _ = _batch_loss(
                model, batch, 3, cfg.tau_final, cfg, pt, trainable, rng,
                update_as=True, update_bf=True,
            )
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss in fine-tune epoch {epoch}")
            grads = gradients(loss, {name: pt[name] for name in trainable})
            adam_step(model.params, grads, state, lr=cfg.mu3)
            batch_losses.append(float(loss.data))
        test_rng = _rng_for(cfg.seed + seed_offset, 3, epoch, 1)
        test_loss = _evaluate_loss(model, test, 3, cfg.tau_final, cfg, trainable, test_rng)
        stats = EpochStats(epoch + 1, 3, float(np.mean(batch_losses)), test_loss, cfg.tau_final)
        history.append(stats)
        if log is not None:
            log(stats)
    return history


def history_to_csv(history, path):
    with open(path, "w") as fh:
        fh.write("epoch,phase,train_loss,test_loss,tau\n")
        for row in history:
            fh.write(
                f"{row.epoch},{row.phase},{row.train_loss!r},{row.test_loss!r},{row.tau!r}\n"
            )
