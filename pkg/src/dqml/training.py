"""Adam training loop for the QCNN classifiers.

Each trial draws gate parameters uniformly from [0, 2pi)^d, initializes the
interpret weights at the parity point (1, -1, -1, 1), and runs mini-batch
Adam on (theta, w) jointly; in parity-fixed mode w is frozen and only theta
trains.  Batches are drawn without replacement within an epoch and the
epoch order is reshuffled, so runs are bit-reproducible from the config
seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .circuits import ModelSpec, ModelError, _single, forward_batch, to_deferred
from .gradients import _loss_and_grad_full


@dataclass
class TrainConfig:
    step_size: float = 0.05
    iterations: int = 1000
    batch_size: int = 512
    trials: int = 10
    seed: int = 0
    interpret_mode: str = "trained"  # or "parity-fixed"
    validate_every: int = 10

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.interpret_mode not in ("trained", "parity-fixed"):
            raise ValueError(f"unknown interpret_mode {self.interpret_mode!r}")


@dataclass
class TrainRecord:
    """Per-iteration curves and final state of one trial."""

    scheme: str
    trial: int
    seed: int
    loss: np.ndarray
    train_accuracy: np.ndarray
    val_accuracy: np.ndarray
    final_params: np.ndarray
    final_weights: np.ndarray

    @property
    def final_train_acc(self) -> float:
        return float(self.train_accuracy[-1])

    @property
    def final_val_acc(self) -> float:
        return float(self.val_accuracy[-1])


def parity_weights(n_outcomes: int) -> np.ndarray:
    """(-1)**popcount weights; (1, -1, -1, 1) for two readout bits."""
    k = n_outcomes.bit_length() - 1
    return np.array([
        (-1.0) ** bin(y).count("1") for y in range(n_outcomes)
    ])


def interpret(P, w) -> float:
    """Weighted sum of outcome probabilities, w0*P[00] + w1*P[01] + ...

    ``P`` may be the dict produced by ``forward`` (keys in canonical
    bitstring order) or a plain array over outcomes.
    """
    w = np.asarray(w, dtype=float)
    if isinstance(P, dict):
        keys = sorted(P)
        p = np.array([P[k] for k in keys])
    else:
        p = np.asarray(P, dtype=float)
    if p.shape[-1] != w.shape[0]:
        raise ValueError(f"distribution over {p.shape[-1]} outcomes vs {w.shape[0]} weights")
    return p @ w


def predict(f_int):
    """Sign thresholding with the tie at 0 mapped to +1."""
    return np.where(np.asarray(f_int) >= 0.0, 1.0, -1.0)


@dataclass
class AdamState:
    """Adam with beta1=0.9, beta2=0.999, eps=1e-8 and bias correction."""

    params: np.ndarray
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    t: int = field(default=0, init=False)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float).copy()
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)


def adam_step(state: AdamState, grads, step_size: float) -> np.ndarray:
    """One Adam update; returns (and stores) the new parameters."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != state.params.shape:
        raise ValueError(f"gradient shape {grads.shape} != {state.params.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    state.params = state.params - step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return state.params


def accuracy(model: ModelSpec, params, weights, dataset_slice) -> float:
    """Fraction of instances whose thresholded interpretation matches."""
    instances, labels = dataset_slice
    labels = np.asarray(labels, dtype=float)
    if labels.size == 0:
        raise ModelError("empty dataset slice")
    probs = forward_batch(model, params, instances)
    f_int = probs @ np.asarray(weights, dtype=float)
    return float(np.mean(predict(f_int) == labels))


def _epoch_batches(n_train, batch_size, rng):
    """Yield without-replacement batches, reshuffling each epoch."""
    while True:
        order = rng.permutation(n_train)
        for start in range(0, n_train - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train(model: ModelSpec, dataset, config: TrainConfig) -> list[TrainRecord]:
    """Run ``config.trials`` independent trials; one TrainRecord each.

    Train accuracy is recorded every iteration from the batch forward
    pass already computed for the gradient; validation accuracy is
    evaluated every ``validate_every`` iterations (and carried forward in
    between) plus once before training.
    """
    dm = to_deferred(model)
    x_train, y_train = dataset.train_arrays()
    x_val, y_val = dataset.val_arrays()
    if config.batch_size > len(y_train):
        raise ValueError("batch_size exceeds the training set")
    d = dm.param_slots
    n_w = dm.n_outcomes
    w0 = parity_weights(n_w)
    trial_seeds = np.random.SeedSequence(config.seed).generate_state(config.trials)

    records = []
    for trial, trial_seed in enumerate(trial_seeds):
        ss = np.random.SeedSequence(int(trial_seed))
        init_rng, batch_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        theta = init_rng.uniform(0.0, 2.0 * np.pi, d)
        weights = w0.copy()
        joint = config.interpret_mode == "trained"
        state = AdamState(np.concatenate([theta, weights]) if joint else theta)

        losses = np.zeros(config.iterations)
        train_acc = np.zeros(config.iterations)
        val_acc = np.zeros(config.iterations)
        last_val = accuracy(dm, theta, weights, (x_val, y_val))
        batches = _epoch_batches(len(y_train), config.batch_size, batch_rng)
        for it in range(config.iterations):
            idx = next(batches)
            xb, yb = x_train[idx], y_train[idx]
            loss, dtheta, dw, probs = _loss_and_grad_full(dm, theta, weights, xb, yb)
            losses[it] = loss
            f_int = probs @ weights
            train_acc[it] = float(np.mean(predict(f_int) == yb))
            if joint:
                new = adam_step(state, np.concatenate([dtheta, dw]), config.step_size)
                theta, weights = new[:d], new[d:]
            else:
                theta = adam_step(state, dtheta, config.step_size)
            if (it + 1) % config.validate_every == 0 or it + 1 == config.iterations:
                last_val = accuracy(dm, theta, weights, (x_val, y_val))
            val_acc[it] = last_val
        records.append(
            TrainRecord(
                scheme=dm.scheme.value,
                trial=trial,
                seed=int(trial_seed),
                loss=losses,
                train_accuracy=train_acc,
                val_accuracy=val_acc,
                final_params=theta.copy(),
                final_weights=weights.copy(),
            )
        )
    return records


def record_rows(record: TrainRecord) -> list[dict]:
    """One JSON-ready dict per iteration, for JSONL streaming."""
    return [
        {
            "iteration": it + 1,
            "loss": float(record.loss[it]),
            "train_accuracy": float(record.train_accuracy[it]),
            "val_accuracy": float(record.val_accuracy[it]),
        }
        for it in range(len(record.loss))
    ]
