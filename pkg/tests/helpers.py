"""Builders shared by several test modules."""

import numpy as np

from kroute.fusion import ExpertSet
from kroute.lora import EXPERT_ORDER, init_adapter


def random_experts(config, seed=0, rank=4, scale=4.0, b_std=0.3, zero=False):
    rng = np.random.default_rng(seed)
    adapters = {}
    for i, kind in enumerate(EXPERT_ORDER):
        ad = init_adapter(config, seed=seed * 10 + i, rank=rank, scale=scale, kind=kind.value)
        for key in ad.keys:
            ad.A[key].data[...] = rng.normal(0, 0.3, size=ad.A[key].shape)
            if not zero:
                ad.B[key].data[...] = rng.normal(0, b_std, size=ad.B[key].shape)
        ad.freeze()
        adapters[kind] = ad
    return ExpertSet(adapters)
