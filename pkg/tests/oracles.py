"""Independent reference implementations used as test oracles."""

import json
import math
from fractions import Fraction

import numpy as np


def vote_oracle(entries):
    """Winner key and count by explicit frequency table with the documented tie rules."""
    keys = sorted({json.dumps([list(b) for b in e.bundles]) for e in entries})
    table = []
    for k in keys:
        members = [e for e in entries if json.dumps([list(b) for b in e.bundles]) == k]
        mean_lp = sum(e.logprob for e in members) / len(members)
        table.append((len(members), mean_lp, -min(e.sample_index for e in members), k))
    best = max(table)
    return best[3], best[0]


def metrics_oracle(predicted, truth):
    """Enumerate every (prediction, truth) pair with exact rationals."""
    preds = sorted({tuple(sorted(set(b))) for b in predicted if len(set(b)) >= 2})
    hits, found, ratios = 0, set(), []
    for b in preds:
        best = None
        for j, g in enumerate(truth):
            if all(x in g for x in b):
                found.add(j)
                ratio = Fraction(sum(1 for x in b if x in g), len(g))
                if best is None or ratio > best:
                    best = ratio
        if best is not None:
            hits += 1
            ratios.append(best)
    p = Fraction(hits, len(preds)) if preds else Fraction(0)
    r = Fraction(len(found), len(truth))
    c = sum(ratios) / len(ratios) if ratios else None
    return p, r, c


def random_session(rng):
    """Small random (predictions, truth) pair: items < 10, <= 5 predictions, <= 3 truth bundles."""
    items = rng.permutation(10)[: int(rng.integers(4, 11))].tolist()
    n_truth = int(rng.integers(1, 4))
    truth, pos = [], 0
    for _ in range(n_truth):
        size = int(rng.integers(2, 4))
        if pos + size > len(items):
            break
        truth.append(sorted(items[pos:pos + size]))
        pos += size
    preds = []
    for _ in range(int(rng.integers(0, 6))):
        if truth and rng.random() < 0.6:
            g = truth[int(rng.integers(0, len(truth)))]
            k = int(rng.integers(2, len(g) + 1))
            b = rng.choice(g, size=k, replace=False).tolist()
            if rng.random() < 0.3:
                b.append(int(rng.choice(items)))
        else:
            b = rng.choice(items, size=int(rng.integers(2, 4)), replace=False).tolist()
        preds.append(b)
    return preds, truth


def ties_bruteforce(deltas, density):
    K = len(deltas)
    n = deltas[0].size
    keep = math.ceil(density * n)
    trimmed = []
    for d in deltas:
        flat = list(d.ravel())
        order = set(sorted(range(n), key=lambda i: (-abs(flat[i]), i))[:keep])
        trimmed.append([flat[i] if i in order else 0.0 for i in range(n)])
    out = []
    for i in range(n):
        vals = [trimmed[e][i] for e in range(K)]
        s = 1.0 if sum(vals) >= 0 else -1.0
        agree = [v for v in vals if v != 0 and (v > 0) == (s > 0)]
        out.append(sum(agree) / len(agree) if agree else 0.0)
    return np.array(out).reshape(deltas[0].shape)
