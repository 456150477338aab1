# %% [markdown]
# # Scores and costs
#
# Scores are exact fractions so the rejection gate never flips on rounding.
# Display rounds to one decimal place.

# %%
from fractions import Fraction

from grace.dataset import Metric
from grace.gateway import Usage
from grace.scoring import Score, binarize_by_quantile, rouge_l, set_f1
from grace.telemetry import DEEPSEEK_V3_R1, PricingTable, RolePrice, UsageLedger, estimate_cost

score = Score(Fraction(50, 56), 56, Metric.ACCURACY)
print(score.value, score.display())

# %% [markdown]
# Entity F1 and ROUGE-L on small inputs.

# %%
print(set_f1({"aspirin", "ibuprofen"}, {"ibuprofen", "naproxen"}))
print(rouge_l("a b c d", "a c e"))

# %% [markdown]
# For summaries the training set is split by ROUGE-L rank: the top fifth are
# treated as successes, the bottom fifth as failures, the rest are not shown
# to the optimizer.

# %%
values = [(f"s{i}", Fraction(i, 10)) for i in range(10)]
labels = binarize_by_quantile(values, Fraction(1, 5), Fraction(1, 5))
print({sid: label for sid, label in labels.items() if label != "excluded"})

# %% [markdown]
# Dollar cost from token totals. The preset table prices the base model at a
# blended input rate; a custom table can use list prices instead.

# %%
ledger = UsageLedger()
ledger.record_call("base", Usage(6_900_000, 900_000))
ledger.record_call("optimizer", Usage(300_000, 300_000))
print(estimate_cost(ledger, DEEPSEEK_V3_R1).to_dict())

list_prices = PricingTable({"base": RolePrice("0.27", "1.10"), "optimizer": RolePrice("0.55", "2.19", True)})
print(estimate_cost(ledger, list_prices).to_dict())
