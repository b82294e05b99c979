"""Independent brute-force retrieval enumerator used as a test oracle.

Deliberately written in plain Python loops with no reuse of the library's
ranking code. The only shared conventions are the ones the metrics are
defined by: descending cosine similarity, exact ties broken toward the
smaller gallery id, and queries without a relevant item skipped.
"""

import math

import numpy as np


def bf_normalize(vec):
    norm = math.sqrt(sum(float(x) * float(x) for x in vec))
    if norm == 0.0:
        return [0.0 for _ in vec]
    return [float(x) / norm for x in vec]


def bf_dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def bf_order(sims):
    order = []
    remaining = list(range(len(sims)))
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if sims[i] > sims[best]:
                best = i
        order.append(best)
        remaining.remove(best)
    return order


def bf_average_precision(relevance):
    hits = 0
    acc = 0.0
    for k, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            acc += hits / k
    return None if hits == 0 else acc / hits


def bf_metrics(query_feats, query_labels, gallery_feats, gallery_labels, ks=(1, 5)):
    """mAP, CMC@k, and skipped count by full enumeration."""
    gallery = [bf_normalize(g) for g in gallery_feats]
    aps = []
    first_hits = []
    skipped = 0
    for qf, ql in zip(query_feats, query_labels):
        q = bf_normalize(qf)
        sims = [bf_dot(q, g) for g in gallery]
        order = bf_order(sims)
        relevance = [gallery_labels[o] == ql for o in order]
        ap = bf_average_precision(relevance)
        if ap is None:
            skipped += 1
            continue
        aps.append(ap)
        rank = next(k for k, rel in enumerate(relevance, start=1) if rel)
        first_hits.append(rank)
    mean_ap = float(np.mean(aps)) if aps else 0.0
    cmc = {}
    for k in ks:
        if first_hits:
            cmc[k] = sum(1 for r in first_hits if r <= k) / len(first_hits)
        else:
            cmc[k] = 0.0
    return mean_ap, cmc, skipped
