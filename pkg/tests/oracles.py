"""Independent reference implementations used as test oracles.

Everything here is plain Python over nested lists (or float64 numpy where a
loop would only obscure the formula), written without the package's code.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, dtype=np.float64).tolist(), np.asarray(b, dtype=np.float64).tolist()
    m, k, n = len(a), len(b), len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return np.array(out)


def softmax_row(row):
    exps = [math.exp(x) for x in row]
    total = sum(exps)
    return [e / total for e in exps]


def layer_norm_row(row, gain, bias, eps=1e-5):
    n = len(row)
    mu = sum(row) / n
    var = sum((x - mu) ** 2 for x in row) / n
    return [g * (x - mu) / math.sqrt(var + eps) + b for x, g, b in zip(row, gain, bias)]


def gelu_erf(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def attention_rows(q, k, v):
    """softmax(q k^T / sqrt(d)) v, one query row at a time."""
    q, k, v = (np.asarray(t, dtype=np.float64).tolist() for t in (q, k, v))
    d = len(q[0])
    out = []
    for qi in q:
        scores = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d) for kj in k]
        w = softmax_row(scores)
        out.append([sum(w[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return np.array(out)


def pearson_two_pass(series):
    x = np.asarray(series, dtype=np.float64).tolist()
    t, m = len(x), len(x[0])
    cols = [[x[i][j] for i in range(t)] for j in range(m)]
    means = [sum(c) / t for c in cols]
    out = np.empty((m, m))
    for a in range(m):
        for b in range(m):
            da = [v - means[a] for v in cols[a]]
            db = [v - means[b] for v in cols[b]]
            num = sum(p * q for p, q in zip(da, db))
            den = math.sqrt(sum(p * p for p in da) * sum(q * q for q in db))
            out[a, b] = num / den
    return out


def threshold_sort_oracle(fcn, percentile=70):
    """Edge set {(i, j): i < j, fcn[i][j] > t} with t the nearest-rank percentile."""
    m = len(fcn)
    values = sorted(fcn[i][j] for i in range(m) for j in range(i + 1, m))
    rank = max(1, math.ceil(percentile * len(values) / 100 - 1e-12))
    t = values[rank - 1]
    return {(i, j) for i in range(m) for j in range(i + 1, m) if fcn[i][j] > t}


def mlp_gelu(x, w1, b1, w2, b2):
    h = np.asarray(x, dtype=np.float64) @ w1 + b1
    h = np.vectorize(gelu_erf)(h)
    return h @ w2 + b2


def cosine(a, b) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def infonce_double_loop(u, v, head: dict, tau: float) -> float:
    """Mean over i of -log(pos_i / (pos_i + neg_i)) with both-direction in-batch negatives."""
    hu = [mlp_gelu(x, head["proj.w1"], head["proj.b1"], head["proj.w2"], head["proj.b2"]) for x in u]
    hv = [mlp_gelu(x, head["proj.w1"], head["proj.b1"], head["proj.w2"], head["proj.b2"]) for x in v]
    b = len(hu)
    total = 0.0
    for i in range(b):
        pos = math.exp(cosine(hu[i], hv[i]) / tau)
        neg = 0.0
        for k in range(b):
            if k != i:
                neg += math.exp(cosine(hu[i], hv[k]) / tau) + math.exp(cosine(hu[k], hv[i]) / tau)
        total += -math.log(pos / (pos + neg))
    return total / b
