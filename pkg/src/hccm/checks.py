"""Whole-model gradient check on a toy configuration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cache import precompute
from .data import ImageCatalog, Sample
from .model import HccmModel, ModelConfig
from .train import logloss


def toy_model_config(**overrides) -> ModelConfig:
    """8x8x3 images, two fixed stages -> 2x2x8 maps, three behaviors."""
    kw = dict(image_size=(8, 8, 3), fixed_channels=(4, 8), trainable_channels=(8, 8),
              emb_dim=4, n_context=2, n_categories=4, user_table=16, context_table=16,
              item_table=16, pic_table=16, category_table=8, hidden=(16, 8), max_behaviors=3)
    kw.update(overrides)
    return ModelConfig(**kw)


def toy_problem(seed: int = 0, n_images: int = 6, n_samples: int = 2):
    rng = np.random.default_rng(seed)
    cfg = toy_model_config()
    cats = rng.integers(cfg.n_categories, size=n_images)
    catalog = ImageCatalog(rng.random((n_images,) + cfg.image_size), cats)
    samples = []
    for i in range(n_samples):
        beh = rng.choice(n_images, size=3, replace=False)
        pic = int(rng.integers(n_images))
        samples.append(Sample(user_id=i, context_ids=[int(rng.integers(24)), int(rng.integers(4))],
                              item_id=pic, pic_id=pic, category=int(cats[pic]),
                              behaviors=[[int(p), int(cats[p])] for p in beh], label=i % 2))
    return cfg, catalog, samples


@dataclass
class GradcheckResult:
    variant: str
    max_rel_error: float
    n_parameters: int
    frozen_grad_zero: bool

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= T.GRAD_TOLERANCE[np.dtype(np.float64)] and self.frozen_grad_zero


def full_gradcheck(variant: str = "HCCM", seed: int = 0, eps: float = 1e-5) -> GradcheckResult:
    """Compare backprop against central differences for every trainable parameter."""
    cfg, catalog, samples = toy_problem(seed)
    model = HccmModel(cfg, variant, seed=seed)
    rng = np.random.default_rng([seed, 7])
    if model.prior_table is not None:
        # move off the zero init so the prior path carries gradient signal
        model.prior_table.data[...] = rng.normal(0.0, 0.5, size=model.prior_table.shape)
    sources = {"cache": precompute(catalog, model)} if variant != "DIN" else {}
    batch = model.batch(samples)

    def loss():
        return logloss(model.forward(batch, **sources), batch.label)

    params = model.trainable()
    err = T.grad_check(loss, params, eps)

    T.zero_grads(model.params.values())
    T.backward(loss())
    frozen_zero = all(p.grad is None or not np.any(p.grad) for p in model.frozen_params())
    T.zero_grads(model.params.values())
    return GradcheckResult(variant, err, int(sum(p.size for p in params)), frozen_zero)
