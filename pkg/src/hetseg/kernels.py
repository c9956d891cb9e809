"""Hot inner loops, each in two flavours.

``*_loop`` functions are explicit loops compiled with numba; ``*_numpy``
functions are vectorised equivalents. The public name binds to one of them
depending on :data:`hetseg._accel.USE_NUMBA`. Both paths must agree
exactly on integer outputs and to rounding on float outputs; the test-suite
checks this and ``benchmarks/bench_kernels.py`` times them.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

_NEIGHBOURS6 = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.int64
)


# --------------------------------------------------------------------------
# neighbour-vote fill (used to erase lesions from anatomy masks)
# --------------------------------------------------------------------------


@njit
def fill_by_neighbour_vote_loop(mask, fill, donor):
    out = mask.copy()
    nx, ny, nz = out.shape
    n_labels = fill.shape[0]
    counts = np.zeros(n_labels, dtype=np.int64)
    while True:
        prev = out.copy()
        changed = 0
        pending = 0
        for x in range(nx):
            for y in range(ny):
                for z in range(nz):
                    if not fill[prev[x, y, z]]:
                        continue
                    pending += 1
                    counts[:] = 0
                    for k in range(6):
                        a = x + _NEIGHBOURS6[k, 0]
                        b = y + _NEIGHBOURS6[k, 1]
                        c = z + _NEIGHBOURS6[k, 2]
                        if a < 0 or b < 0 or c < 0 or a >= nx or b >= ny or c >= nz:
                            continue
                        lab = prev[a, b, c]
                        if donor[lab]:
                            counts[lab] += 1
                    best = -1
                    best_count = 0
                    for lab in range(n_labels):
                        if counts[lab] > best_count:
                            best = lab
                            best_count = counts[lab]
                    if best >= 0:
                        out[x, y, z] = best
                        changed += 1
        if pending == 0:
            break
        if changed == 0:
            # components with no donor anywhere fall back to background
            for x in range(nx):
                for y in range(ny):
                    for z in range(nz):
                        if fill[out[x, y, z]]:
                            out[x, y, z] = 0
            break
    return out


def _shifted_equal(mask, label):
    """Count, per voxel, how many 6-neighbours carry ``label``."""
    hit = (mask == label).astype(np.int16)
    count = np.zeros(mask.shape, dtype=np.int16)
    count[1:, :, :] += hit[:-1, :, :]
    count[:-1, :, :] += hit[1:, :, :]
    count[:, 1:, :] += hit[:, :-1, :]
    count[:, :-1, :] += hit[:, 1:, :]
    count[:, :, 1:] += hit[:, :, :-1]
    count[:, :, :-1] += hit[:, :, 1:]
    return count


def fill_by_neighbour_vote_numpy(mask, fill, donor):
    out = mask.copy()
    donors = np.flatnonzero(donor)
    while True:
        pending = fill[out]
        if not pending.any():
            break
        best = np.full(out.shape, -1, dtype=np.int64)
        best_count = np.zeros(out.shape, dtype=np.int16)
        for lab in donors:
            c = _shifted_equal(out, lab)
            better = c > best_count
            best[better] = lab
            best_count[better] = c[better]
        assign = pending & (best >= 0)
        if not assign.any():
            out[pending] = 0
            break
        out[assign] = best[assign].astype(out.dtype)
    return out


# --------------------------------------------------------------------------
# exact Wilcoxon null distribution
# --------------------------------------------------------------------------


@njit
def signed_rank_counts_loop(doubled_ranks):
    total = 0
    for r in doubled_ranks:
        total += r
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        reach += r
        for t in range(reach, r - 1, -1):
            counts[t] += counts[t - r]
    return counts


def signed_rank_counts_numpy(doubled_ranks):
    doubled_ranks = np.asarray(doubled_ranks, dtype=np.int64)
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        if r == 0:
            counts = counts * 2
            continue
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    return counts


# --------------------------------------------------------------------------
# confusion matrix
# --------------------------------------------------------------------------


@njit
def confusion_counts_loop(pred, truth, n_classes):
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    p = pred.ravel()
    t = truth.ravel()
    for i in range(p.shape[0]):
        out[t[i], p[i]] += 1
    return out


def confusion_counts_numpy(pred, truth, n_classes):
    flat = truth.ravel().astype(np.int64) * n_classes + pred.ravel().astype(np.int64)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


# --------------------------------------------------------------------------
# voxel-wise adaptive cross entropy terms and logit gradients
# --------------------------------------------------------------------------


@njit
def ace_terms_loop(probs, target, complement, lesion_sourced, eps):
    n_classes, m = probs.shape
    terms = np.empty(m, dtype=np.float64)
    for i in range(m):
        y = target[i]
        if lesion_sourced and y == 0:
            s = 0.0
            for j in range(n_classes):
                if complement[j]:
                    s += probs[j, i]
        else:
            s = probs[y, i]
        s = min(max(s, eps), 1.0)
        terms[i] = -np.log(s)
    return terms


def ace_terms_numpy(probs, target, complement, lesion_sourced, eps):
    picked = np.take_along_axis(probs, target[None, :].astype(np.int64), axis=0)[0]
    if lesion_sourced:
        summed = probs[complement].sum(axis=0)
        picked = np.where(target == 0, summed, picked)
    return -np.log(np.clip(picked, eps, 1.0))


@njit
def ace_logit_grad_loop(probs, target, complement, lesion_sourced, eps):
    """d(sum of ACE terms)/d(logits) through a per-voxel softmax."""
    n_classes, m = probs.shape
    grad = np.empty((n_classes, m), dtype=np.float64)
    for i in range(m):
        y = target[i]
        bg_branch = lesion_sourced and y == 0
        if bg_branch:
            s = 0.0
            for j in range(n_classes):
                if complement[j]:
                    s += probs[j, i]
        else:
            s = probs[y, i]
        if s < eps or s > 1.0:
            for j in range(n_classes):
                grad[j, i] = 0.0
            continue
        for j in range(n_classes):
            if bg_branch:
                inside = complement[j]
            else:
                inside = j == y
            if inside:
                grad[j, i] = probs[j, i] - probs[j, i] / s
            else:
                grad[j, i] = probs[j, i]
    return grad


def ace_logit_grad_numpy(probs, target, complement, lesion_sourced, eps):
    n_classes, m = probs.shape
    target = target.astype(np.int64)
    inside = np.zeros((n_classes, m), dtype=bool)
    inside[target, np.arange(m)] = True
    if lesion_sourced:
        bg = target == 0
        inside[:, bg] = complement[:, None]
    s = np.where(inside, probs, 0.0).sum(axis=0)
    active = (s >= eps) & (s <= 1.0)
    safe = np.where(active, s, 1.0)
    grad = probs - np.where(inside, probs / safe, 0.0)
    grad[:, ~active] = 0.0
    return grad


IMPLEMENTATIONS = {
    "fill_by_neighbour_vote": (fill_by_neighbour_vote_numpy, fill_by_neighbour_vote_loop),
    "signed_rank_counts": (signed_rank_counts_numpy, signed_rank_counts_loop),
    "confusion_counts": (confusion_counts_numpy, confusion_counts_loop),
    "ace_terms": (ace_terms_numpy, ace_terms_loop),
    "ace_logit_grad": (ace_logit_grad_numpy, ace_logit_grad_loop),
}

_pick = 1 if USE_NUMBA else 0
fill_by_neighbour_vote = IMPLEMENTATIONS["fill_by_neighbour_vote"][_pick]
signed_rank_counts = IMPLEMENTATIONS["signed_rank_counts"][_pick]
confusion_counts = IMPLEMENTATIONS["confusion_counts"][_pick]
ace_terms = IMPLEMENTATIONS["ace_terms"][_pick]
ace_logit_grad = IMPLEMENTATIONS["ace_logit_grad"][_pick]
