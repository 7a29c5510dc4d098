"""Shared builders for small survival datasets."""

import numpy as np

from fedsurf import SurvivalDataset


def make_data(time, event, X=None):
    time = np.asarray(time, dtype=float)
    if X is None:
        X = np.zeros((len(time), 1))
    return SurvivalDataset(np.asarray(X, dtype=float), time, np.asarray(event, dtype=bool))


def random_data(rng, n, d, censor=0.3, integer_times=False):
    X = rng.normal(size=(n, d))
    t = rng.exponential(1.0, size=n)
    if integer_times:
        t = np.ceil(t * 5)
    e = rng.random(n) > censor
    return make_data(t, e, X)
