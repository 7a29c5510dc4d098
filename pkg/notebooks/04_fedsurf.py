# %% [markdown]
# # One-round federated forests
#
# Ten clients hold label-skewed shards of the training split.  Each fits a
# local forest; the server asks for tree counts, hands out quotas in
# proportion to shard size, and receives one message of trees per client.

# %%
import numpy as np

from fedsurf import EvalContext, FederationConfig, ForestParams, evaluate_model, load_gbsg2
from fedsurf.federation import fedsurf_round, run_local_baselines, setup_clients
from fedsurf.survival import kaplan_meier, train_test_split

train, test = train_test_split(load_gbsg2(), 0.2, seed=0)
config = FederationConfig(split="label_skew", alpha=8.0, seed=0)
clients = setup_clients(train, config, ForestParams(n_trees=100, seed=0))
for c in clients:
    S = kaplan_meier(c.local_train)
    print(f"client {c.client_id}: n={c.dataset_size:3d}  KM(3 y)={S(3 * 365.25):.2f}")

# %% [markdown]
# Uniform tree sampling against sampling by inverse per-tree IBS on each
# client's validation split.  Quotas are the same for both.

# %%
ctx = EvalContext.from_train(train)
for sampling in ("uniform", "inverse_ibs"):
    server = fedsurf_round(clients, config, sampling)
    r = evaluate_model(server.ensemble, test, ctx, sampling)
    print(f"{sampling:12s} C {r.c_index:.3f}  IBS {r.ibs:.3f}  quotas {server.quotas}")

local = run_local_baselines(clients, test, ctx)
print(f"local models: C {np.mean([r.c_index for r in local]):.3f} on average")

# %% [markdown]
# The message log shows the single exchange of tree payloads.

# %%
log = server.log
print(len(log.of("trees")), "tree messages,", log.tree_rounds(), "round,",
      f"{log.bytes_sent('trees') / 1024:.0f} KiB")
print(log.to_jsonl().splitlines()[-1])
