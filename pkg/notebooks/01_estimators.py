# %% [markdown]
# # Survival data and nonparametric estimators
#
# The bundled GBSG2 cohort follows 686 breast cancer patients until
# recurrence or death.  Each record is a feature vector, an event flag and a
# follow-up time; a record with the flag off is censored.

# %%
from fedsurf import kaplan_meier, load_gbsg2, nelson_aalen
from fedsurf.survival import chf_to_survival

data = load_gbsg2()
print(len(data), "records,", data.n_features, "features")
print("censored share:", round(data.censored_fraction, 3))
print("features:", data.schema.feature_names)

# %% [markdown]
# Kaplan-Meier and Nelson-Aalen are step functions that jump only at event
# times.  Exponentiating the negative cumulative hazard gives a second
# survival estimate that sits slightly above Kaplan-Meier.

# %%
S = kaplan_meier(data)
H = nelson_aalen(data)
S_na = chf_to_survival(H)
for years in (1, 2, 3, 5):
    t = 365.25 * years
    print(f"{years} y: KM {S(t):.4f}   exp(-NA) {S_na(t):.4f}")

# %% [markdown]
# Censoring can itself be described by a survival curve: flip the event flag
# and run Kaplan-Meier again.  Evaluation metrics reweight records with it.

# %%
G = kaplan_meier(data.flipped())
print("P(still under follow-up at 5 y):", round(float(G(5 * 365.25)), 3))
