"""Independent brute-force implementations used to cross-check the package.

Everything here is deliberately written in plain Python (sets, explicit
queues, nested loops) rather than vectorized numpy, and re-derives the
documented definitions from scratch: 26-neighbor flood fill for connected
components, voxel counting for the confusion rates, and a from-first-
principles branch decomposition following the same fixed rules as
``cotunet.metrics``.
"""

import numpy as np

OFFSETS26 = [
    (dz, dy, dx)
    for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    if (dz, dy, dx) != (0, 0, 0)
]
STEP_KINDS = ((1, 0, 0), (0, 1, 0), (0, 0, 1),
              (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1))


def flood_fill_components(mask):
    """List of voxel sets, one per 26-connected component, by flood fill."""
    mask = np.asarray(mask).astype(bool)
    remaining = set(map(tuple, np.argwhere(mask)))
    components = []
    while remaining:
        seed = min(remaining)
        comp = {seed}
        queue = [seed]
        remaining.discard(seed)
        while queue:
            z, y, x = queue.pop()
            for dz, dy, dx in OFFSETS26:
                w = (z + dz, y + dy, x + dx)
                if w in remaining:
                    remaining.discard(w)
                    comp.add(w)
                    queue.append(w)
        components.append(comp)
    return components


def largest_component_bruteforce(mask):
    """Largest 26-component; ties broken by lowest flat index."""
    mask = np.asarray(mask).astype(bool)
    comps = flood_fill_components(mask)
    out = np.zeros_like(mask)
    if not comps:
        return out
    dims = mask.shape

    def flat(v):
        return (v[0] * dims[1] + v[1]) * dims[2] + v[2]

    best = max(comps, key=lambda c: (len(c), -min(flat(v) for v in c)))
    for v in best:
        out[v] = True
    return out


def confusion_bruteforce(pred, gt, region=None):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    tp = fp = fn = tn = 0
    it = np.ndindex(pred.shape)
    for idx in it:
        if region is not None and not region[idx]:
            continue
        p, g = pred[idx], gt[idx]
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    tpr = 100.0 * tp / (tp + fn) if tp + fn else None
    fpr = 100.0 * fp / (fp + tn) if fp + tn else 0.0
    precision = 100.0 * tp / (tp + fp) if tp + fp else None
    return tpr, fpr, precision


def dsc_bruteforce(pred, gt):
    pred_set = set(map(tuple, np.argwhere(np.asarray(pred).astype(bool))))
    gt_set = set(map(tuple, np.argwhere(np.asarray(gt).astype(bool))))
    if not pred_set and not gt_set:
        return 100.0
    return 100.0 * 2.0 * len(pred_set & gt_set) / (len(pred_set) + len(gt_set))


# ---------------------------------------------------------------------------
# Branch decomposition, re-derived
# ---------------------------------------------------------------------------

def _kind_lengths(spacing):
    sd, sh, sw = spacing
    return [((az * sd) ** 2 + (ay * sh) ** 2 + (ax * sw) ** 2) ** 0.5
            for az, ay, ax in STEP_KINDS]


def decompose_bruteforce(skel, spacing=(1.0, 1.0, 1.0)):
    """Branches as (ordered path, voxel set) pairs, following the same
    deterministic rules as the package implementation."""
    skel = np.asarray(skel).astype(bool)
    dims = skel.shape

    def flat(v):
        return (v[0] * dims[1] + v[1]) * dims[2] + v[2]

    vox = sorted(map(tuple, np.argwhere(skel)), key=flat)
    vox_set = set(vox)
    nbrs = {}
    for v in vox:
        ns = []
        for dz, dy, dx in OFFSETS26:
            w = (v[0] + dz, v[1] + dy, v[2] + dx)
            if w in vox_set:
                ns.append(w)
        nbrs[v] = sorted(ns, key=flat)
    junctions = {v for v in vox if len(nbrs[v]) >= 3}

    branches = []  # (path, voxel set)
    consumed = set()
    for v in vox:
        if v in junctions or v in consumed:
            continue
        comp = {v}
        queue = [v]
        while queue:
            u = queue.pop()
            for w in nbrs[u]:
                if w not in junctions and w not in comp:
                    comp.add(w)
                    queue.append(w)
        consumed |= comp
        ends = sorted((u for u in comp
                       if sum(1 for w in nbrs[u] if w in comp) <= 1), key=flat)
        start = ends[0] if ends else sorted(comp, key=flat)[0]
        path = [start]
        used = {start}
        while True:
            step = None
            for w in nbrs[path[-1]]:
                if w in comp and w not in used:
                    step = w
                    break
            if step is None:
                break
            path.append(step)
            used.add(step)
        heads = [w for w in nbrs[path[0]] if w in junctions]
        if heads:
            path = [heads[0]] + path
        tails = [w for w in nbrs[path[-1]] if w in junctions and w != path[0]]
        if tails:
            path = path + [tails[0]]
        branches.append((path, set(path)))

    assigned = set()
    for _, vs in branches:
        assigned |= vs
    for v in vox:
        if v not in junctions or v in assigned or v in consumed:
            continue
        order = [v]
        comp = {v}
        qi = 0
        while qi < len(order):
            u = order[qi]
            qi += 1
            for w in nbrs[u]:
                if w in junctions and w not in comp and w not in assigned:
                    comp.add(w)
                    order.append(w)
        consumed |= comp
        if not any(any(n in assigned for n in nbrs[u]) for u in order):
            branches.append((order, set(order)))
            assigned |= comp

    leftover = sorted((v for v in junctions
                       if not any(v in vs for _, vs in branches)), key=flat)
    while leftover:
        progressed = False
        remaining = []
        for v in leftover:
            home = None
            for w in nbrs[v]:
                for path, vs in branches:
                    if w in vs:
                        home = vs
                        break
                if home is not None:
                    break
            if home is None:
                remaining.append(v)
            else:
                home.add(v)
                progressed = True
        if not progressed:
            for v in remaining:
                branches.append(([v], {v}))
            break
        leftover = remaining
    return branches


def _steps_of(path):
    counts = [0] * len(STEP_KINDS)
    for u, v in zip(path, path[1:]):
        d = (abs(u[0] - v[0]), abs(u[1] - v[1]), abs(u[2] - v[2]))
        if max(d) <= 1 and d != (0, 0, 0):
            counts[STEP_KINDS.index(d)] += 1
    return counts


def bd_bruteforce(skel, pred, detect_fraction=0.8, region=None,
                  spacing=(1.0, 1.0, 1.0)):
    pred = np.asarray(pred).astype(bool)
    branches = decompose_bruteforce(skel, spacing)
    total = hit = 0
    for _, vs in branches:
        vox = [v for v in vs if region is None or region[v]]
        if not vox:
            continue
        total += 1
        inside = sum(1 for v in vox if pred[v])
        if inside >= 1 and inside / len(vox) >= detect_fraction:
            hit += 1
    if total == 0:
        return None
    return 100.0 * hit / total


def td_bruteforce(skel, pred, region=None, spacing=(1.0, 1.0, 1.0)):
    pred = np.asarray(pred).astype(bool)
    branches = decompose_bruteforce(skel, spacing)
    lengths = _kind_lengths(spacing)
    num = [0] * len(STEP_KINDS)
    den = [0] * len(STEP_KINDS)
    for path, _ in branches:
        for u, v in zip(path, path[1:]):
            d = (abs(u[0] - v[0]), abs(u[1] - v[1]), abs(u[2] - v[2]))
            if max(d) > 1 or d == (0, 0, 0):
                continue
            k = STEP_KINDS.index(d)
            if region is not None and not (region[u] and region[v]):
                continue
            den[k] += 1
            if pred[u] and pred[v]:
                num[k] += 1
    den_mm = float(np.asarray(den, dtype=np.float64) @ np.asarray(lengths))
    if den_mm == 0.0:
        return None
    num_mm = float(np.asarray(num, dtype=np.float64) @ np.asarray(lengths))
    return 100.0 * num_mm / den_mm
