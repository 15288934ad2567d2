"""Brute-force reference implementations used only by the test-suite."""

import itertools
import math

import numpy as np


def _pair_kind(s, x, y):
    f, r = s[x, y], s[y, x]
    if f and r:
        return "bi"
    if f or r:
        return "uni"
    return None


def classify_triangle(s, a, b, c):
    """Motif label (1..7) of the connected triangle on users a, b, c, or None."""
    pairs = [(a, b), (b, c), (a, c)]
    kinds = [_pair_kind(s, x, y) for x, y in pairs]
    if None in kinds:
        return None
    n_bi = kinds.count("bi")
    if n_bi == 3:
        return 4
    if n_bi == 2:
        return 3
    nodes = (a, b, c)
    one_way = [(x, y) for x in nodes for y in nodes if x != y and s[x, y] and not s[y, x]]
    if n_bi == 0:
        out_deg = [sum(1 for e in one_way if e[0] == x) for x in nodes]
        return 1 if out_deg == [1, 1, 1] else 5
    mutual = next(p for p, k in zip(pairs, kinds) if k == "bi")
    apex = next(x for x in nodes if x not in mutual)
    out = sum(1 for e in one_way if e[0] == apex)
    # apex pointing at both ends / receiving from both / passing through
    return {2: 6, 0: 7, 1: 2}[out]


def brute_force_motifs(s, y):
    """Count, for every user pair, the motif instances containing both users.

    ``s`` is a dense binary directed matrix, ``y`` a dense binary user-item
    matrix.  Returns a dict ``{"M1": ndarray, ...}``.
    """
    s = np.asarray(s)
    y = np.asarray(y)
    m = s.shape[0]
    out = {f"M{k}": np.zeros((m, m)) for k in range(1, 11)}
    for a, b, c in itertools.combinations(range(m), 3):
        k = classify_triangle(s, a, b, c)
        if k is None:
            continue
        for x, z in ((a, b), (b, c), (a, c)):
            out[f"M{k}"][x, z] += 1
            out[f"M{k}"][z, x] += 1
    n = y.shape[1]
    for a, b in itertools.combinations(range(m), 2):
        kind = _pair_kind(s, a, b)
        shared = sum(1 for i in range(n) if y[a, i] and y[b, i])
        if not shared:
            continue
        if kind == "bi":
            out["M8"][a, b] = out["M8"][b, a] = shared
        elif kind == "uni":
            out["M9"][a, b] = out["M9"][b, a] = shared
        if shared > 5:
            out["M10"][a, b] = out["M10"][b, a] = shared
    return out


def dense_masked_product(p, q, t):
    p, q, t = (np.asarray(x, dtype=float) for x in (p, q, t))
    out = np.zeros((p.shape[0], q.shape[1]))
    for i in range(p.shape[0]):
        for j in range(q.shape[1]):
            acc = 0.0
            for k in range(p.shape[1]):
                acc += p[i, k] * q[k, j]
            out[i, j] = acc * t[i, j]
    return out


def brute_force_ranking_metrics(recommended, relevant, n):
    """Precision, recall and NDCG@n written out longhand."""
    top = list(recommended)[:n]
    hits = 0
    dcg = 0.0
    for position, item in enumerate(top):
        if item in relevant:
            hits += 1
            dcg += 1.0 / math.log2(position + 2)
    ideal = 0.0
    for position in range(min(len(relevant), n)):
        ideal += 1.0 / math.log2(position + 2)
    return hits / n, hits / len(relevant), dcg / ideal


def central_differences(f, x, eps=1e-5):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        hi = f(x)
        flat[k] = old - eps
        lo = f(x)
        flat[k] = old
        g[k] = (hi - lo) / (2 * eps)
    return grad


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def dense_discriminator(y, user_e0, item_e0, q, w1, w2, layers, neighbors, context=None, attention=True):
    """Loop-based propagation over dense arrays.

    ``neighbors`` is a list of index lists; ``context`` optionally maps each
    user to a context item for the full attention score.
    """
    y = np.asarray(y, dtype=float)
    m, n = y.shape
    du, di = y.sum(axis=1), y.sum(axis=0)
    users, items = [np.array(user_e0, float)], [np.array(item_e0, float)]
    d = users[0].shape[1]
    for layer in range(layers):
        eu, ei = users[-1], items[-1]
        nu, ni = np.zeros_like(eu), np.zeros_like(ei)
        for u in range(m):
            for i in range(n):
                if y[u, i]:
                    w = 1.0 / np.sqrt(du[u] * di[i])
                    nu[u] += w * ei[i]
                    ni[i] += w * eu[u]
            nb = list(neighbors[u])
            if not nb:
                continue
            if attention:
                scores = []
                for v in nb:
                    part = _sig(w1[layer] @ (eu[u] + eu[v]))
                    if context is None:
                        scores.append(q[layer][:d] @ part)
                    else:
                        ctx = _sig(w2[layer] @ ei[context[u]])
                        scores.append(q[layer] @ np.concatenate([part, ctx]))
                scores = np.array(scores)
                a = np.exp(scores - scores.max())
                a /= a.sum()
            else:
                a = np.full(len(nb), 1.0 / len(nb))
            for weight, v in zip(a, nb):
                nu[u] += weight * eu[v]
        users.append(nu)
        items.append(ni)
    return np.mean(users, axis=0), np.mean(items, axis=0)
