"""Slow, definitional reference implementations used as test oracles.

None of these share code with the package: plain loops, float64, no torch.
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def ap_cmc_oracle(qf, qids, qcams, gf, gids, gcams, ranks=(1, 5, 10, 20)):
    """Exhaustive sort + textbook AP. Returns (rank_k dict, mAP, skipped)."""
    hits_at = {k: 0 for k in ranks}
    aps = []
    skipped = 0
    for i in range(len(qf)):
        scored = []
        for j in range(len(gf)):
            if gids[j] == qids[i] and gcams[j] == qcams[i]:
                continue
            d = sum((float(qf[i][t]) - float(gf[j][t])) ** 2 for t in range(len(qf[i])))
            scored.append((d, j))
        scored.sort()
        rel = [1 if gids[j] == qids[i] else 0 for _, j in scored]
        if sum(rel) == 0:
            skipped += 1
            continue
        found, precisions = 0, []
        for pos, r in enumerate(rel, 1):
            if r:
                found += 1
                precisions.append(found / pos)
        aps.append(sum(precisions) / len(precisions))
        first = rel.index(1) + 1
        for k in ranks:
            if first <= k:
                hits_at[k] += 1
    n = len(aps)
    if n == 0:
        return {k: 0.0 for k in ranks}, 0.0, skipped
    return {k: hits_at[k] / n for k in ranks}, sum(aps) / n, skipped


def misrank_oracle(emb, ids, margin, ref=None):
    emb = [list(map(float, e)) for e in emb]
    ref = emb if ref is None else [list(map(float, e)) for e in ref]
    total = 0.0
    for a in range(len(emb)):
        far_inter, near_intra = -math.inf, math.inf
        for j in range(len(ref)):
            d = sum((x - y) ** 2 for x, y in zip(emb[a], ref[j]))
            if ids[j] != ids[a]:
                far_inter = max(far_inter, d)
            elif j != a:
                near_intra = min(near_intra, d)
        total += max(0.0, far_inter - near_intra + margin)
    return total


def misclass_oracle(adv_logits, clean_logits, gt, delta):
    total = 0.0
    for b in range(len(adv_logits)):
        row = [float(v) for v in adv_logits[b]]
        mx = max(row)
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        logp = [v - lse for v in row]
        k = len(row)
        clean = [float(v) for v in clean_logits[b]]
        least = min(range(k), key=lambda c: (clean[c], c))
        loss = 0.0
        for c in range(k):
            target = (1 - delta) * (1.0 if c == least else 0.0) + delta * (0.0 if c == gt[b] else 1.0 / (k - 1))
            loss -= logp[c] * target
        total += loss
    return total / len(adv_logits)


def gaussian_window_2d(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def msssim_oracle(x, y, levels, weights, k1=0.01, k2=0.03):
    """x, y: [C, H, W] float64 in [0, 1]. Separate c_j and s_j per pixel, as written."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c1, c2 = k1 ** 2, k2 ** 2
    c3 = c2 / 2
    win = gaussian_window_2d()
    per_channel = []
    for ch in range(x.shape[0]):
        a, b = x[ch], y[ch]
        value = 1.0
        for j in range(levels):
            pa = sliding_window_view(a, win.shape)
            pb = sliding_window_view(b, win.shape)
            mu_a = np.einsum("ijkl,kl->ij", pa, win)
            mu_b = np.einsum("ijkl,kl->ij", pb, win)
            da = pa - mu_a[..., None, None]
            db = pb - mu_b[..., None, None]
            var_a = np.einsum("ijkl,kl->ij", da * da, win)
            var_b = np.einsum("ijkl,kl->ij", db * db, win)
            cov = np.einsum("ijkl,kl->ij", da * db, win)
            sa, sb = np.sqrt(var_a), np.sqrt(var_b)
            c = (2 * sa * sb + c2) / (var_a + var_b + c2)
            s = (cov + c3) / (sa * sb + c3)
            if j == levels - 1:
                lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
                term = np.mean(lum * c * s)
            else:
                term = np.mean(c * s)
            value *= max(term, 0.0) ** weights[j]
            if j < levels - 1:
                h, w = a.shape
                a = a[: h // 2 * 2, : w // 2 * 2].reshape(h // 2, 2, w // 2, 2).mean((1, 3))
                b = b[: h // 2 * 2, : w // 2 * 2].reshape(h // 2, 2, w // 2, 2).mean((1, 3))
        per_channel.append(value)
    return float(np.mean(per_channel))


def clamp_oracle(arr, bound):
    flat = np.asarray(arr, dtype=np.float64).ravel().tolist()
    out = []
    for v in flat:
        if v > bound:
            v = bound
        elif v < -bound:
            v = -bound
        out.append(v)
    return np.array(out).reshape(np.shape(arr))
