"""
A laptop-sized domain study
===========================

Four synthetic source domains, two held-out mixtures. Each source gets a
linear tagger; we compare single experts, one model trained on pooled data,
a merge of all experts, and the selection-then-merge recipe.
Takes about 15 seconds.
"""

# %%
from samkit.toylab import StudyConfig, format_table, make_domain_family, run_domain_study

sources, targets = make_domain_family()
for spec in sources + targets:
    print(spec.domain_id, spec.entity_types)

# %%
report = run_domain_study(sources, targets, StudyConfig(seeds=[0, 1]))
mean = report["summary"]["mean"]
print("in-domain F1")
print(format_table(mean["in_domain"]))
print()
print("held-out F1")
print(format_table(mean["out_of_domain"]))

# %%
for row in report["summary"]["per_seed"]:
    print(
        f"seed {row['seed']}: single {row['mean_single_expert_ood']:.3f}  "
        f"merge-all {row['model_merging_ood']:.3f}  select+merge {row['sam_ood']:.3f}  "
        f"diagonal {row['diagonal_wins']}/{row['n_domains']}"
    )
