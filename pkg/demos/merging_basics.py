"""
Merging task vectors
====================

Two toy "experts" share a base model. We build their deltas, merge them a few
different ways and look at what survives.
"""

# %%
import numpy as np

from samkit import DeltaSet, MergeRecipe, merge, merge_linear, ties_merge

a = DeltaSet({"w": np.array([2.0, -1.0, 0.3, 0.0], np.float32)})
b = DeltaSet({"w": np.array([3.0, 1.0, -0.1, 0.5], np.float32)})

print("linear mean :", merge_linear([a, b])["w"])

# %%
# TIES keeps the largest entries of each delta, picks a sign per coordinate
# and averages only the values that agree with it. Coordinate 1 has a sign
# conflict of equal size, so it is zeroed.
merged, report = ties_merge([a, b], density=1.0, scale=1.0)
print("ties (d=1)  :", merged["w"])
print("conflicts   :", report.tensors["w"].sign_conflicts)

merged, _ = ties_merge([a, b], density=0.5, scale=1.0)
print("ties (d=0.5):", merged["w"])

# %%
# DARE drops coordinates at random and rescales the survivors, so the
# expectation over seeds is the original delta.
recipe = MergeRecipe("dare_linear", drop_rate=0.5, seed=0)
samples = [merge(MergeRecipe("dare_linear", drop_rate=0.5, seed=s), [a])[0]["w"] for s in range(2000)]
print("one DARE draw    :", merge(recipe, [a])[0]["w"])
print("mean of 2000     :", np.round(np.mean(samples, axis=0), 3))
