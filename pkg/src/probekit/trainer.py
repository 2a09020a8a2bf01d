"""Shared optimization engine: Adam updates, minibatching, early stopping, seed runs.

Parameters live in an ordered ``dict[str, np.ndarray]`` (float64) that is
updated in place, so model objects holding views of the same arrays stay
current during training. Everything is deterministic given the run seed: batch
order is a pure function of (seed, epoch) and gradients are reduced in fixed
item order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, TrainingDiverged

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DEFAULT_SEEDS = (13, 42, 2019)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    precision: str = "float64"
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.precision != "float64":
            raise ConfigError(f"unsupported precision {self.precision!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def as_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seeds": list(self.seeds),
            "precision": self.precision,
            "shuffle": self.shuffle,
        }


_CONFIG_PARSERS: dict[str, Callable[[str], object]] = {
    "learning_rate": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "seeds": lambda s: tuple(int(x) for x in s.replace(",", " ").split()),
    "precision": str,
    "shuffle": lambda s: {"true": True, "1": True, "false": False, "0": False}[s.lower()],
}


def parse_config_file(path) -> dict:
    """Parse ``key = value`` lines into TrainConfig keyword arguments."""
    values: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in _CONFIG_PARSERS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _CONFIG_PARSERS[key](value.strip())
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def load_config(path=None, **overrides) -> TrainConfig:
    """Build a TrainConfig from defaults, an optional config file, then overrides."""
    values = parse_config_file(path) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to the parameter arrays in place."""
    if set(grads) != set(params):
        raise ValueError(f"gradient keys {sorted(grads)} do not mirror params {sorted(params)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not mirror parameter {name!r} {p.shape}"
            )
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


def snapshot(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def restore(params: dict[str, np.ndarray], saved: Mapping[str, np.ndarray]) -> None:
    for k, p in params.items():
        p[...] = saved[k]


def shuffle_rng(seed: int) -> np.random.Generator:
    """Batch-order RNG; a pure function of the run seed, separate from init streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1]))


def fit(
    params: dict[str, np.ndarray],
    items: list,
    grad_fn: Callable,
    dev_metric_fn: Callable[[], float],
    config: TrainConfig,
    seed: int,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Minibatch Adam with early stopping on the dev metric (higher is better).

    ``grad_fn(item) -> (loss, grads-dict)``; gradients are summed over each batch
    in fixed item order. After the last epoch the best dev snapshot is restored
    into ``params``. Ties keep the earlier snapshot. Returns the per-epoch history.
    """
    state = AdamState.for_params(params)
    rng = shuffle_rng(seed)
    best = snapshot(params)
    best_metric = -np.inf
    stale_epochs = 0
    history: list[dict] = []

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(items)) if config.shuffle else np.arange(len(items))
        epoch_loss = 0.0
        for lo in range(0, len(items), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            total = {k: np.zeros_like(p) for k, p in params.items()}
            for idx in batch:
                loss, grads = grad_fn(items[int(idx)])
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, item {int(idx)} (seed {seed})"
                    )
                epoch_loss += loss
                for k, g in grads.items():
                    total[k] += g
            adam_step(params, total, state, config.learning_rate)

        metric = float(dev_metric_fn())
        history.append({"epoch": epoch, "train_loss": epoch_loss, "dev_metric": metric})
        if metric > best_metric:
            best_metric = metric
            best = snapshot(params)
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                break

    restore(params, best)
    return params, history


@dataclass
class SeedRuns:
    """Per-seed metrics plus their arithmetic mean over numeric fields."""

    per_seed: list[dict]
    mean: dict
    models: list = field(default_factory=list)


def mean_metrics(per_seed: list[dict]) -> dict:
    keys = [k for k, v in per_seed[0].items() if isinstance(v, (int, float)) and k != "seed"]
    return {k: float(np.mean([m[k] for m in per_seed])) for k in keys}


def run_seeds(task: str, config: TrainConfig, data, store) -> SeedRuns:
    """Train one model per seed and report per-seed and mean test metrics.

    ``task`` selects the probe ("ner" or "nli"); ``data`` is the matching
    experiment bundle from ner_probe/nli_probe. Seeds run independently.
    """
    if task == "ner":
        from . import ner_probe as probe
    elif task == "nli":
        from . import nli_probe as probe
    else:
        raise ConfigError(f"unknown task {task!r}")

    per_seed = []
    models = []
    for seed in config.seeds:
        try:
            model, metrics = probe.run_experiment(data, store, config, seed)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"seed {seed}: {exc}") from exc
        per_seed.append({"seed": seed, **metrics})
        models.append(model)
    return SeedRuns(per_seed=per_seed, mean=mean_metrics(per_seed), models=models)


def single_seed_config(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seeds=(seed,))
