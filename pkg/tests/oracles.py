"""Independent slow reference implementations used by the tests."""
import math


def flat(w):
    return [[float(v) for v in f.reshape(-1).tolist()] for f in w]


def l1(w):
    return [sum(abs(v) for v in f) for f in flat(w)]


def l2(w):
    return [math.sqrt(sum(v * v for v in f)) for f in flat(w)]


def _cos_dist(a, b, exact):
    na = sum(v * v for v in a)
    nb = sum(v * v for v in b)
    if na == 0 or nb == 0:
        return 1.0
    dot = sum(x * y for x, y in zip(a, b))
    return 1.0 - dot / (na * nb if exact else math.sqrt(na) * math.sqrt(nb))


def similarity(w, kind, exact=False):
    fs = flat(w)
    n = len(fs)
    out = []
    for k in range(n):
        tot = 0.0
        for q in range(n):
            if q == k:
                continue
            if kind == "eucl":
                tot += math.sqrt(sum((x - y) ** 2 for x, y in zip(fs[k], fs[q])))
            else:
                tot += _cos_dist(fs[k], fs[q], exact)
        out.append(tot / (n - 1))
    return out


def score(w, crit, exact=False):
    if crit == "l1":
        return l1(w)
    if crit == "l2":
        return l2(w)
    return similarity(w, crit, exact)


def conv_macs(n_in, n_out, k, h_out, w_out, groups=1):
    return n_out * h_out * w_out * (n_in // groups) * k * k


def similarity_np(w, kind, exact=False):
    """Pair-by-pair numpy version of ``similarity`` for layers too big for pure Python."""
    import numpy as np
    fs = np.asarray(w, dtype=np.float64).reshape(len(w), -1)
    n = len(fs)
    out = np.zeros(n)
    for k in range(n):
        for q in range(n):
            if q == k:
                continue
            a, b = fs[k], fs[q]
            if kind == "eucl":
                out[k] += math.sqrt(float(np.dot(a - b, a - b)))
            else:
                na, nb = float(np.dot(a, a)), float(np.dot(b, b))
                if na == 0 or nb == 0:
                    out[k] += 1.0
                    continue
                den = na * nb if exact else math.sqrt(na) * math.sqrt(nb)
                out[k] += 1.0 - float(np.dot(a, b)) / den
    return (out / (n - 1)).tolist()
