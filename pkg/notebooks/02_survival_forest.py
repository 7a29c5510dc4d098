# %% [markdown]
# # Random survival forests
#
# Trees split on the feature and threshold with the largest log-rank
# statistic; leaves hold the Nelson-Aalen hazard of their bootstrap records.

# %%
import numpy as np

from fedsurf import ForestParams, fit_forest, load_gbsg2
from fedsurf.forest import dumps_forest, loads_forest, predict_survival
from fedsurf.survival import train_test_split

train, test = train_test_split(load_gbsg2(), 0.2, seed=0)
forest = fit_forest(train, ForestParams(n_trees=50, seed=0))
print(len(forest), "trees, mean depth", np.mean([t.depth for t in forest.trees]))

# %% [markdown]
# Predictions average the leaf hazards reached by a record in every tree.
# The scalar risk used for ranking is the hazard summed over the time grid.

# %%
risks = forest.risk(test.X)
hi, lo = int(np.argmax(risks)), int(np.argmin(risks))
for name, i in (("highest risk", hi), ("lowest risk", lo)):
    S = predict_survival(forest, test.X[i])
    print(f"{name}: S(3 y) = {S(3 * 365.25):.3f}")

# %% [markdown]
# Forests serialize to JSON; this is also how trees travel between clients
# and the server in the federated protocol.

# %%
text = dumps_forest(forest)
print(f"{len(text) / 1024:.0f} KiB")
assert np.array_equal(loads_forest(text).chf(test.X), forest.chf(test.X))
