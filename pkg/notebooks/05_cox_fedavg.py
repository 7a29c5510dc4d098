# %% [markdown]
# # Federated Cox baseline
#
# Clients run gradient steps on the Cox partial likelihood and the server
# averages coefficients weighted by shard size.  All clients share one
# baseline hazard built from pooled risk-set counts.

# %%
from fedsurf import EvalContext, FedAvgConfig, FederationConfig, evaluate_model, fedavg_cox, load_gbsg2
from fedsurf.federation import setup_clients
from fedsurf.forest import ForestParams
from fedsurf.survival import train_test_split

train, test = train_test_split(load_gbsg2(), 0.2, seed=0)
clients = setup_clients(train, FederationConfig(seed=0), ForestParams(), fit=False)
model = fedavg_cox(clients, FedAvgConfig(rounds=200, learning_rate=0.01))

ctx = EvalContext.from_train(train)
r = evaluate_model(model, test, ctx, "coxph")
print(f"C {r.c_index:.3f}  IBS {r.ibs:.3f}")
print("selected round:", model.trace["best_round"])
names = train.schema.feature_names
for name, b in sorted(zip(names, model.beta), key=lambda p: -abs(p[1]))[:4]:
    print(f"{name:10s} {b:+.3f}")
