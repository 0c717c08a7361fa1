"""The planted-signal click dataset: what is in it and how strong each signal is.

Run: python3 demos/synthetic_data.py
"""
import numpy as np

from hccm.data import SyntheticConfig, category_match_share, downsample_negatives, gen_dataset, visual_similarity
from hccm.train import auc

cfg = SyntheticConfig(n_users=400, seed=0)
train, test, catalog = gen_dataset(cfg)
print(f"{len(catalog)} images ({cfg.n_categories} categories x {cfg.images_per_category}), "
      f"{len(train)} train / {len(test)} test impressions")
print(f"train CTR {np.mean([s.label for s in train]):.3f}")

s = test[0]
print("one sample:", s.to_json()[:160], "...")

# Oracles that know the generator: how far can each signal alone rank clicks?
labels = [s.label for s in test]
print(f"visual-similarity oracle AUC   {auc(visual_similarity(test, catalog), labels):.4f}")
print(f"category-match-share oracle AUC {auc(category_match_share(test), labels):.4f}")

# Users in test never appear in train.
print("disjoint users:", {s.user_id for s in train}.isdisjoint({s.user_id for s in test}))

# Keep every click and a fifth of the non-clicks.
kept = downsample_negatives(train, 0.2, seed=0)
neg = sum(1 for s in train if s.label == 0)
kept_neg = sum(1 for s in kept if s.label == 0)
print(f"downsampling at 0.2: {kept_neg} of {neg} negatives kept, "
      f"{sum(s.label for s in kept)} of {sum(s.label for s in train)} positives kept")
