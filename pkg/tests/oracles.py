"""Independent plain-Python re-derivations used as test oracles."""

import math


def reference_fh(num_points, edges, threshold, min_size, coords=None):
    """Graph segmentation with explicit member sets.

    ``edges`` is a list of (src, dst, w).  Returns a label per point,
    numbered by the first point of each component.
    """
    comp = {i: i for i in range(num_points)}
    members = {i: {i} for i in range(num_points)}
    internal = {i: 0.0 for i in range(num_points)}
    ordered = sorted(edges, key=lambda e: (e[2], e[0], e[1]))

    def merge(a, b, wt):
        if len(members[a]) < len(members[b]):
            a, b = b, a
        for p in members[b]:
            comp[p] = a
        members[a] |= members.pop(b)
        internal[a] = wt
        internal.pop(b)

    for i, j, wt in ordered:
        a, b = comp[i], comp[j]
        if a != b and wt <= min(internal[a] + threshold / len(members[a]),
                                internal[b] + threshold / len(members[b])):
            merge(a, b, wt)
    for i, j, wt in ordered:
        a, b = comp[i], comp[j]
        if a != b and (len(members[a]) < min_size or len(members[b]) < min_size):
            merge(a, b, max(internal[a], internal[b], wt))
    if coords is not None:
        while len(members) > 1:
            small = [c for c in members if len(members[c]) < min_size]
            if not small:
                break
            c = min(small, key=lambda r: (len(members[r]), min(members[r])))
            best = None
            for p in sorted(members[c]):
                for q in range(num_points):
                    if comp[q] == c:
                        continue
                    d = sum((coords[p][a] - coords[q][a]) ** 2 for a in range(len(coords[p])))
                    if best is None or d < best[0]:
                        best = (d, q)
            target = comp[best[1]]
            for p in members[c]:
                comp[p] = target
            members[target] |= members.pop(c)
    labels, seen = [], {}
    for i in range(num_points):
        seen.setdefault(comp[i], len(seen))
        labels.append(seen[comp[i]])
    return labels


def softmax(row, temp):
    top = max(row)
    e = [math.exp((v - top) / temp) for v in row]
    s = sum(e)
    return [v / s for v in e]


def entropy(row):
    return -sum(p * math.log(p) for p in row if p > 0)


def grouping_loss(Q, K, informative_aware):
    """Cross-entropy K -> Q per segment; plain mean or entropy-weighted mean."""
    P = len(Q)
    terms = [-sum(K[i][j] * math.log(max(Q[i][j], 1e-12)) for j in range(len(Q[i]))) for i in range(P)]
    if not informative_aware:
        return sum(terms) / P
    H = [entropy(r) for r in K]
    if max(H) == 0:
        return sum(terms) / P
    return sum(h * t for h, t in zip(H, terms)) / sum(H)


def contrastive_loss(vq, vk, positive, confidence, tau):
    """Double loop over positive pairs; negatives of anchor i are its non-positive k samples."""
    n = len(vq)
    dot = [[sum(a * b for a, b in zip(vq[i], vk[j])) / tau for j in range(len(vk))] for i in range(n)]
    total, count = 0.0, 0
    for i in range(n):
        neg = sum(math.exp(dot[i][m]) for m in range(len(vk)) if not positive[i][m])
        for j in range(len(vk)):
            if positive[i][j]:
                e = math.exp(dot[i][j])
                total += confidence[i][j] * -math.log(e / (e + neg))
                count += 1
    return total / count if count else 0.0


def nmi(pred, truth):
    """Arithmetic-mean normalized mutual information from a contingency dict."""
    n = len(pred)
    joint, cp, ct = {}, {}, {}
    for a, b in zip(pred, truth):
        joint[(a, b)] = joint.get((a, b), 0) + 1
        cp[a] = cp.get(a, 0) + 1
        ct[b] = ct.get(b, 0) + 1
    mi = sum(c / n * math.log(c * n / (cp[a] * ct[b])) for (a, b), c in joint.items())
    hp = -sum(c / n * math.log(c / n) for c in cp.values())
    ht = -sum(c / n * math.log(c / n) for c in ct.values())
    if hp + ht == 0:
        return 1.0
    return mi / ((hp + ht) / 2)


def purity(pred, truth):
    groups = {}
    for a, b in zip(pred, truth):
        groups.setdefault(a, {}).setdefault(b, 0)
        groups[a][b] += 1
    return sum(max(g.values()) for g in groups.values()) / len(pred)
