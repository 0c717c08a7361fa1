"""Offline precomputation and table serving.

1. The frozen CNN runs once per catalog image; training reads its maps from a cache file.
2. After training, every image's final visual vector goes into a lookup table.
3. Requests are answered from the table: no convolution runs at request time.

Run: python3 demos/cache_and_serving.py
"""
import tempfile
from pathlib import Path

import numpy as np

from hccm import tensor as T
from hccm.cache import FeatureMapCache, precompute
from hccm.data import SyntheticConfig, gen_dataset
from hccm.model import HccmModel, ModelConfig
from hccm.serving import Predictor, RepresentationTable, export_table
from hccm.train import TrainConfig, train

work = Path(tempfile.mkdtemp())
train_s, test_s, catalog = gen_dataset(SyntheticConfig(n_users=200, seed=3))
model = HccmModel(ModelConfig(), "HCCM", seed=3)

precompute(catalog, model, work / "maps.fmc")
cache = FeatureMapCache.load(work / "maps.fmc", model)  # checksum-verified against the frozen weights
print(f"cache: {len(cache)} maps of shape {cache.extent}, {(work / 'maps.fmc').stat().st_size} bytes")

report = train(train_s, TrainConfig(variant="HCCM", epochs=1, seed=3), model, test_s, cache=cache)
print(f"trained 1 epoch, test AUC {report.test_auc:.4f}")

export_table(model, catalog, work / "table.rept", cache=cache)
predictor = Predictor(model, RepresentationTable.load(work / "table.rept"))
print(f"table: {(work / 'table.rept').stat().st_size} bytes")

with T.count_ops() as counts:
    served = predictor.predict_many(test_s)
full = model.predict(test_s, cache=cache)
print(f"served {len(test_s)} requests with {counts.get('conv2d', 0)} convolutions; "
      f"max difference from the full forward pass {np.max(np.abs(served - full)):.1e}")
print("one response:", predictor.predict(test_s[0]).to_json())
