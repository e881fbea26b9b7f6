"""Training orchestration: Poisson batches -> per-example clip -> noise -> Adam.

The validation slice is carved out before anything else and never contributes
to a gradient or to the sampling-rate/accounting bookkeeping. Three privacy
modes exist, selected by the run config:

* target epsilon: sigma is calibrated from (epsilon, delta, q, T) up front;
* explicit sigma: DP mechanics with the given noise multiplier (sigma 0 runs
  the same clipped per-example path, noise-free; no epsilon is reported);
* non-private: plain minibatch Adam on the mean loss, no clipping or noise.

Every accounted step consumes budget, including steps whose Poisson batch
came up empty (those release a pure-noise update over the expected batch
size). The whole run is a deterministic function of the master seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from . import privacy
from .data import EncodedDataset, split_train_val
from .errors import ConfigError, NonFiniteError, TrainingError


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: float
    n_layers: int = 3
    d_model: int = 128
    n_heads: int = 4
    batch_size: int = 256
    learning_rate: float = 3e-4
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    delta: float = 1e-9
    epsilon: float | None = None
    sigma: float | None = None
    non_private: bool = False
    eval_interval: int = 50
    seed: int = 0
    val_frac: float = 0.01
    dtype: str = "float32"
    column_order: str = "given"
    init_std: float = 0.02
    micro_batch: int = 32  # vectorization width for per-example gradients

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.eval_interval < 1:
            raise ConfigError("eval interval must be >= 1")
        modes = (self.epsilon is not None) + (self.sigma is not None) + bool(self.non_private)
        if modes != 1:
            raise ConfigError(
                "exactly one of epsilon, sigma, non_private must be set", got=modes
            )
        if self.column_order not in ("given", "by-cardinality-desc", "by-cardinality-asc"):
            raise ConfigError(f"unknown column order '{self.column_order}'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got '{self.dtype}'")


@dataclass
class TrainLogRecord:
    step: int
    batch_size: int
    train_nll: float | None
    val_nll: float
    spent_epsilon: float | None
    wall_ms: float

    def to_json_line(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    final_params: model_mod.ModelParams
    best_params: model_mod.ModelParams
    best_val_nll: float
    best_step: int
    log: list[TrainLogRecord]
    steps: int
    sigma: float | None
    spent_epsilon: float | None
    n_train: int
    n_val: int


def planned_steps(epochs: float, n_train: int, batch_size: int) -> int:
    b = min(batch_size, n_train)
    return int(round(epochs * n_train / b))


def train(config: TrainRunConfig, dataset: EncodedDataset) -> TrainResult:
    """Run one training job; deterministic for a fixed dataset and config."""
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    split_seed = int(seeds[0].generate_state(1)[0])
    init_seed = int(seeds[1].generate_state(1)[0])
    batch_rng = np.random.default_rng(seeds[2])
    noise_rng = np.random.default_rng(seeds[3])

    train_set, val_set = split_train_val(dataset, seed=split_seed, frac=config.val_frac)
    n_train = len(train_set)
    steps = planned_steps(config.epochs, n_train, config.batch_size)
    vocab = dataset.vocab

    dp_cfg = privacy.DpTrainConfig(
        delta=config.delta,
        clip_norm=config.clip_norm,
        batch_size=config.batch_size,
        dataset_size=n_train,
        steps=steps,
        epsilon=config.epsilon,
        sigma=config.sigma,
        learning_rate=config.learning_rate,
        adam_beta1=config.adam_beta1,
        adam_beta2=config.adam_beta2,
        adam_eps=config.adam_eps,
    )
    q = dp_cfg.sampling_rate
    expected_batch = dp_cfg.expected_batch

    sigma: float | None
    accountant: privacy.AccountantState | None = None
    if config.non_private:
        sigma = None
    elif config.sigma is not None:
        sigma = config.sigma
        if sigma > 0:
            accountant = privacy.AccountantState(q=q, sigma=sigma)
    else:
        if steps == 0:
            raise ConfigError("cannot calibrate sigma for a zero-step run")
        sigma = privacy.calibrate_sigma(config.epsilon, config.delta, q, steps)
        accountant = privacy.AccountantState(q=q, sigma=sigma)

    model_cfg = model_mod.ModelConfig(
        n_columns=len(dataset.schema),
        n_tokens=vocab.n_tokens,
        n_layers=config.n_layers,
        d_model=config.d_model,
        n_heads=config.n_heads,
    )
    dtype = np.dtype(config.dtype)
    params = model_mod.init_params(model_cfg, seed=init_seed, dtype=dtype,
                                   init_std=config.init_std)
    adam = privacy.AdamState.zeros_like(params.arrays())

    def spent(step: int) -> float | None:
        if accountant is None:
            return None
        return privacy.epsilon_from_rdp(accountant, step, config.delta)

    log: list[TrainLogRecord] = []
    best_arrays = params.copy_arrays()
    best_val = model_mod.mean_nll(params, val_set.rows, vocab)
    best_step = 0

    rows = train_set.rows
    started = time.perf_counter()
    for step in range(1, steps + 1):
        idx = privacy.poisson_sample(n_train, q, batch_rng)
        train_nll: float | None = None
        try:
            if config.non_private:
                if len(idx):
                    losses = model_mod.batch_nll(params, rows[idx], vocab)
                    loss = ad.mean_(losses)
                    grads = ad.gradients(loss, params.tensors)
                    train_nll = float(loss.data)
                    privacy.adam_step(params.arrays(), grads, adam, config.learning_rate,
                                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            else:
                if len(idx):
                    batch_losses: list[float] = []

                    def clipped_sums():
                        # micro-batched per-example grads, clipped and summed
                        for s in range(0, len(idx), config.micro_batch):
                            part = rows[idx[s:s + config.micro_batch]]
                            losses, g = model_mod.per_example_grads(params, part, vocab)
                            batch_losses.extend(float(v) for v in losses)
                            sq = sum(
                                (a.reshape(a.shape[0], -1).astype(np.float64) ** 2).sum(axis=1)
                                for a in g.values()
                            )
                            norms = np.sqrt(sq)
                            with np.errstate(divide="ignore"):
                                scale = np.minimum(config.clip_norm / norms, 1.0)
                            scale[norms == 0.0] = 1.0
                            yield {k: np.tensordot(scale, a, axes=(0, 0)) for k, a in g.items()}

                    grads = privacy.noisy_aggregate(
                        clipped_sums(), config.clip_norm, sigma, noise_rng,
                        denom=expected_batch,
                    )
                    train_nll = float(np.mean(batch_losses))
                else:
                    shapes = {k: a.shape for k, a in params.arrays().items()}
                    grads = privacy.noise_only_update(
                        shapes, config.clip_norm, sigma, noise_rng, denom=expected_batch
                    )
                privacy.adam_step(params.arrays(), grads, adam, config.learning_rate,
                                  config.adam_beta1, config.adam_beta2, config.adam_eps)
        except NonFiniteError as exc:
            raise TrainingError(
                f"non-finite loss or gradient at step {step}: {exc}", step=step
            ) from exc
        if train_nll is not None and not np.isfinite(train_nll):
            raise TrainingError(f"training loss diverged at step {step}", step=step)

        if step % config.eval_interval == 0 or step == steps:
            val_nll = model_mod.mean_nll(params, val_set.rows, vocab)
            if not np.isfinite(val_nll):
                raise TrainingError(f"validation loss diverged at step {step}", step=step)
            if val_nll < best_val:
                best_val = val_nll
                best_step = step
                best_arrays = params.copy_arrays()
            log.append(TrainLogRecord(
                step=step,
                batch_size=int(len(idx)),
                train_nll=train_nll,
                val_nll=float(val_nll),
                spent_epsilon=spent(step),
                wall_ms=(time.perf_counter() - started) * 1000.0,
            ))

    best_params = model_mod.ModelParams(model_cfg, {
        k: ad.parameter(v, k) for k, v in best_arrays.items()
    })
    return TrainResult(
        final_params=params,
        best_params=best_params,
        best_val_nll=float(best_val),
        best_step=best_step,
        log=log,
        steps=steps,
        sigma=sigma,
        spent_epsilon=spent(steps),
        n_train=n_train,
        n_val=len(val_set),
    )


def evaluate_nll(params: model_mod.ModelParams, dataset: EncodedDataset) -> float:
    """Exact full-pass mean per-row NLL (no sampling, no noise)."""
    return model_mod.mean_nll(params, dataset.rows, dataset.vocab)
