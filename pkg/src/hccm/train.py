"""Mini-batch training with logloss, and rank-based AUC."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import ConfigError, Sample
from .model import VARIANTS, HccmModel
from .tensor import Tensor


class UndefinedMetricError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, batch_id: int, param_norms: dict):
        super().__init__(f"{message} (batch {batch_id})")
        self.batch_id = batch_id
        self.param_norms = param_norms


LOG_EPS = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-7}


def logloss(y_hat: Tensor, y) -> Tensor:
    """Mean negative log-likelihood; predictions are clamped away from 0 and 1 first."""
    eps = LOG_EPS.get(y_hat.dtype, 1e-12)
    y = np.asarray(y, dtype=y_hat.dtype).reshape(y_hat.shape)
    p = T.clip(y_hat, eps, 1.0 - eps)
    ll = T.add(T.mul(T.log(p), y), T.mul(T.log(T.sub(1.0, p)), 1.0 - y))
    return T.mul(T.tsum(ll), -1.0 / max(y.size, 1))


def auc(scores, labels) -> float:
    """Area under ROC via the rank-sum statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks: multiples of 1/2, exact in float64
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) oracle: fraction of positive/negative pairs ordered correctly."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    twice = 0
    for start in range(0, pos.size, 512):
        p = pos[start:start + 512, None]
        twice += 2 * int((p > neg).sum()) + int((p == neg).sum())
    return float((twice / 2.0) / (pos.size * neg.size))


@dataclass
class TrainConfig:
    variant: str = "HCCM"
    batch_size: int = 256
    epochs: int = 3
    lr: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    monitor_samples: int = 4096

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError("train.variant", f"must be one of {list(VARIANTS)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("train.optimizer", "must be sgd or adam")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be non-negative")
        if self.lr < 0:
            raise ConfigError("train.lr", "must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("train.adam_beta1", "need 0 <= beta < 1 and eps > 0")
        return self


@dataclass
class MetricsReport:
    variant: str
    initial_loss: float
    epoch_losses: list
    batch_losses: list = field(repr=False)
    test_auc: Optional[float]
    wall_clock: float
    checksum: str
    n_train: int
    n_test: int

    def to_dict(self, with_trajectory: bool = False) -> dict:
        d = asdict(self)
        if not with_trajectory:
            d.pop("batch_losses")
        return d

    def to_json(self, with_trajectory: bool = False) -> str:
        return json.dumps(self.to_dict(with_trajectory), indent=2, sort_keys=True)

    def to_text(self, timing: bool = True) -> str:
        rows = [("variant", self.variant), ("initial logloss", f"{self.initial_loss:.6f}")]
        rows += [(f"epoch {i + 1} logloss", f"{v:.6f}") for i, v in enumerate(self.epoch_losses)]
        rows += [("test AUC", "n/a" if self.test_auc is None else f"{self.test_auc:.4f}")]
        if timing:
            rows += [("wall clock (s)", f"{self.wall_clock:.1f}")]
        rows += [("checksum", self.checksum)]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = list(params), lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr):
        self.params, self.lr = list(params), lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr)
    return Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def mean_logloss(model: HccmModel, samples: Sequence[Sample], batch_size: int = 1024, **sources) -> float:
    total = 0.0
    for start in range(0, len(samples), batch_size):
        b = model.batch(samples[start:start + batch_size])
        total += float(logloss(model.forward(b, **sources), b.label).data) * len(b)
    return total / max(len(samples), 1)


def evaluate(model: HccmModel, samples: Sequence[Sample], **sources) -> float:
    scores = model.predict(samples, **sources)
    return auc(scores, [s.label for s in samples])


def _param_norms(model: HccmModel) -> dict:
    return {n: float(np.linalg.norm(t.data)) for n, t in model.params.items()}


def train(train_samples: Sequence[Sample], cfg: TrainConfig, model: HccmModel,
          test_samples: Optional[Sequence[Sample]] = None, *, cache=None, catalog=None,
          log=None) -> MetricsReport:
    """Fit ``model`` in place. ``cache`` or ``catalog`` supplies images for visual variants."""
    cfg.validate()
    if cfg.variant != model.variant:
        raise ConfigError("train.variant", f"model is {model.variant}, config says {cfg.variant}")
    if not train_samples:
        raise ValueError("empty training split")
    sources = {"cache": cache, "catalog": catalog}
    start = time.perf_counter()
    params = model.trainable()
    opt = make_optimizer(cfg, params)
    monitor = list(train_samples[: cfg.monitor_samples])
    batch_id = 0

    def monitor_loss() -> float:
        try:
            value = mean_logloss(model, monitor, **sources)
        except T.NumericDomainError as exc:
            raise TrainingAborted(str(exc), batch_id, _param_norms(model)) from exc
        if not np.isfinite(value):
            raise TrainingAborted("monitor loss is not finite", batch_id, _param_norms(model))
        return value

    initial = monitor_loss()

    batch_losses, epoch_losses = [], []
    n = len(train_samples)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0xE90C, epoch]).permutation(n)
        for s in range(0, n, cfg.batch_size):
            b = model.batch([train_samples[i] for i in order[s:s + cfg.batch_size]])
            T.zero_grads(params)
            try:
                loss = logloss(model.forward(b, **sources), b.label)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise T.NumericDomainError("loss is not finite")
                T.backward(loss)
            except T.NumericDomainError as exc:
                raise TrainingAborted(str(exc), batch_id, _param_norms(model)) from exc
            opt.step()
            batch_losses.append(value)
            batch_id += 1
        epoch_losses.append(monitor_loss())
        if log:
            log(f"{model.variant} epoch {epoch + 1}: monitor logloss {epoch_losses[-1]:.5f}")
    T.zero_grads(params)

    test_auc = evaluate(model, test_samples, **sources) if test_samples else None
    return MetricsReport(
        variant=model.variant, initial_loss=initial, epoch_losses=epoch_losses,
        batch_losses=batch_losses, test_auc=test_auc, wall_clock=time.perf_counter() - start,
        checksum=f"{model.checksum():016x}", n_train=n, n_test=len(test_samples or ()),
    )
