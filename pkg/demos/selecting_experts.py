"""
Picking experts for an unseen domain
====================================

Experts are ranked two ways: by cosine similarity between domain embedding
centroids, and by how well each expert agrees with the majority of its peers
on a few sampled target sentences.
"""

# %%
import numpy as np

from samkit import ExpertRecord, PredictionSet, rank_by_domain_similarity, rank_by_sampling_eval
from samkit.selection import eco_combine

rng = np.random.default_rng(0)
directions = {name: rng.standard_normal(32) for name in ["news", "bio", "legal", "music"]}
experts = [ExpertRecord(name, embedding=v + 0.1 * rng.standard_normal(32)) for name, v in directions.items()]

# target sentences sit between "bio" and "news"
target = [0.7 * directions["bio"] + 0.3 * directions["news"] + 0.3 * rng.standard_normal(32) for _ in range(50)]
ds = rank_by_domain_similarity(target, experts, m=2)
for eid, score in ds.all_scores:
    print(f"{eid:<8}{score:+.3f}")

# %%
# Sampling evaluation. Each expert tags three sampled sentences; mentions that
# a strict majority agrees on become pseudo-labels.
gold = [("aspirin", "drug"), ("Reuters", "org")]
preds = {
    "news": [PredictionSet("s1", [gold[1]]), PredictionSet("s2", []), PredictionSet("s3", [("Monday", "date")])],
    "bio": [PredictionSet("s1", gold), PredictionSet("s2", [("p53", "gene")]), PredictionSet("s3", [])],
    "legal": [PredictionSet("s1", gold), PredictionSet("s2", [("p53", "gene")]), PredictionSet("s3", [])],
    "music": [PredictionSet("s1", []), PredictionSet("s2", []), PredictionSet("s3", [("Monday", "date")])],
}
# "aspirin" gets only two votes out of four, so the pseudo-labels keep just
# "Reuters" and the conservative news expert comes out on top.
se = rank_by_sampling_eval(experts, preds, m=2)
for eid, score in se.all_scores:
    print(f"{eid:<8}{score:.3f}")

# %%
# Economic mode folds both rankings into a single expert set.
for mode in (1, 2, 3):
    print(mode, eco_combine(ds, se, mode, 2).ids)
