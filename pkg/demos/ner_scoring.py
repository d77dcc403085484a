"""
Scoring entity predictions
==========================

Raw generations are parsed into (span, type) sets, scored with pooled
micro-F1, and combined across models.
"""

# %%
from samkit.ner_eval import PredictionSet, ensemble_union, ensemble_vote, micro_f1, parse_prediction

raw = 'Sure, here you go: {"Steve Jobs": "person", "Apple": "organization"}'
pred = parse_prediction(raw, "json", "1")
print(pred.sorted_mentions())

print(parse_prediction("person: Steve Jobs\norganization: Apple, NeXT", "enumeration", "1").sorted_mentions())
print(parse_prediction("I could not find anything.", "json", "1").warnings)

# %%
gold = PredictionSet("1", [("Steve Jobs", "person"), ("NeXT", "organization")])
print(micro_f1([pred], [gold]).summary_table())

# %%
other = PredictionSet("1", [("NeXT", "organization")])
third = PredictionSet("1", [("Apple", "organization"), ("NeXT", "organization")])
print("union :", micro_f1([ensemble_union(pred, other)], [gold]).f1)
print("vote 2:", ensemble_vote([pred, other, third], 2).sorted_mentions())
