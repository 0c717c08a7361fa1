"""Train the four model variants on one small dataset and compare test AUC.

The full-size comparison is `hccm ablation --runs 5` (several minutes); this
version uses a reduced dataset so it finishes in about a minute.

Run: python3 demos/train_variants.py
"""
from hccm.cache import precompute
from hccm.data import SyntheticConfig, gen_dataset
from hccm.model import VARIANTS, HccmModel, ModelConfig
from hccm.train import TrainConfig, train

train_s, test_s, catalog = gen_dataset(SyntheticConfig(n_users=600, seed=1))
model_cfg = ModelConfig()
cache = precompute(catalog, HccmModel(model_cfg, "DIN+FixedCNN"))
print(f"{len(train_s)} train / {len(test_s)} test; feature maps cached for {len(cache)} images\n")

results = {}
for variant in VARIANTS:
    model = HccmModel(model_cfg, variant, seed=1)
    report = train(train_s, TrainConfig(variant=variant, epochs=3, seed=1), model, test_s,
                   cache=None if variant == "DIN" else cache)
    results[variant] = report.test_auc
    print(report.to_text(timing=True), "\n")

for variant, value in results.items():
    gain = "" if variant == "DIN" else f"  ({100 * (value - results['DIN']):+.2f}% vs DIN)"
    print(f"{variant:13s} AUC {value:.4f}{gain}")
