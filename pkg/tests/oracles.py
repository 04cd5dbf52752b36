"""Slow, loop-based reference implementations used as test oracles."""

import math

import numpy as np


def naive_layer_norm(h, gain, bias, eps=1e-12):
    out = np.empty_like(h, dtype=float)
    for idx in np.ndindex(h.shape[:-1]):
        row = h[idx]
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        out[idx] = [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gain, bias)]
    return out


def naive_gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def naive_affine(W, b, h):
    """W h + b for one vector, by explicit sums."""
    out = [sum(W[r, c] * h[c] for c in range(W.shape[1])) for r in range(W.shape[0])]
    if b is not None:
        out = [o + bb for o, bb in zip(out, b)]
    return np.array(out)


def naive_heads(H, Wq, bq, Wk, bk, Wv, bv, n_heads, mask=None):
    """Concatenated attention heads for one sequence H (l x d_in), head i using row-block i."""
    l = H.shape[0]
    d = Wq.shape[0]
    dh = d // n_heads
    mask = np.ones(l, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    q = [naive_affine(Wq, bq, H[j]) for j in range(l)]
    k = [naive_affine(Wk, bk, H[j]) for j in range(l)]
    v = [naive_affine(Wv, bv, H[j]) for j in range(l)]
    out = np.zeros((l, d))
    for i in range(n_heads):
        sl = slice(i * dh, (i + 1) * dh)
        for j in range(l):
            scores = []
            for t in range(l):
                if mask[t]:
                    scores.append(sum(a * b for a, b in zip(q[j][sl], k[t][sl])) / math.sqrt(dh))
                else:
                    scores.append(-math.inf)
            top = max(scores)
            w = [math.exp(s - top) if s > -math.inf else 0.0 for s in scores]
            z = sum(w)
            for t in range(l):
                out[j, sl] += (w[t] / z) * v[t][sl]
    return out


def naive_mha(H, p, prefix, n_heads, mask=None):
    """W^o [head_1; ...; head_n] + b^o, reading the same parameter names as the encoder."""
    g = lambda n: p[f"{prefix}.{n}"]  # noqa: E731
    heads = naive_heads(H, g("wq"), g("bq"), g("wk"), g("bk"), g("wv"), g("bv"), n_heads, mask)
    return np.array([naive_affine(g("wo"), g("bo"), row) for row in heads])


def naive_pal(H, enc, dec, g, n_heads_s, mask=None):
    """V^D MH_s(V^E h) with no output matrix, one position at a time."""
    Z = np.array([naive_affine(enc, None, h) for h in H])
    heads = naive_heads(Z, g["wq"], g["bq"], g["wk"], g["bk"], g["wv"], g["bv"], n_heads_s, mask)
    return np.array([naive_affine(dec, None, z) for z in heads])


def naive_ffn(h, W1, b1, W2, b2):
    return naive_affine(W2, b2, naive_gelu(naive_affine(W1, b1, h)))


def naive_bert_layer(H, p, prefix, n_heads, mask=None, eps=1e-12):
    """LN2(h + FFN(LN1(h + MH(h)))) composed from the loop oracles."""
    mh = naive_mha(H, p, f"{prefix}.attn", n_heads, mask)
    a = naive_layer_norm(H + mh, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], eps)
    sa = np.array([naive_ffn(row, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"],
                             p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"]) for row in a])
    return naive_layer_norm(H + sa, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], eps)


# ---------------------------------------------------------------------------
# metrics by definition
# ---------------------------------------------------------------------------


def brute_accuracy(preds, labels):
    return sum(1 for p, y in zip(preds, labels) if p == y) / len(labels)


def brute_matthews(preds, labels):
    tp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 1)
    tn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 0)
    fp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 1)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return 0.0 if den == 0 else (tp * tn - fp * fn) / math.sqrt(den)


def brute_pearson(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
