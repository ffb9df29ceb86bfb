"""Independent reference implementations used as test oracles.

They are written as plain loops straight from the operation contracts and
share no code with the package.
"""


def brute_force_scores(grads, cavs):
    """Sign-count score per concept: fraction of inputs with strictly positive dot product."""
    out = {}
    for name, vec in cavs.items():
        positive = 0
        for g in grads:
            s = 0.0
            for gi, vi in zip(g, vec):
                s += float(gi) * float(vi)
            positive += s > 0
        out[name] = positive / len(grads)
    return out


def box_iou(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    w = min(ax2, bx2) - max(ax1, bx1)
    h = min(ay2, by2) - max(ay1, by1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def reference_tracks(frames, label, threshold, max_gap):
    """Greedy IoU association simulated over integer frame indices.

    ``frames`` is a list of ``(frame_index, [(label, confidence, bbox), ...])``.
    Returns tracks as lists of ``(frame_index, bbox)`` in frame order.
    """
    dets = {}
    for f, boxes in frames:
        for j, (lab, conf, bbox) in enumerate(boxes):
            if lab == label:
                dets[(f, j)] = (conf, tuple(bbox))
    if not dets:
        return []
    lo = min(f for f, _ in dets)
    hi = max(f for f, _ in dets)
    free = set(dets)
    tracks = []
    while free:
        seed = min(free, key=lambda k: (-dets[k][0], k[0], dets[k][1][0], k))
        free.discard(seed)
        members = [seed]
        for step in (1, -1):
            anchor, last, f = dets[seed][1], seed[0], seed[0] + step
            while lo <= f <= hi and abs(f - last) - 1 <= max_gap:
                options = []
                for key in free:
                    if key[0] != f:
                        continue
                    score = box_iou(anchor, dets[key][1])
                    if score >= threshold:
                        options.append((-score, dets[key][1][0], dets[key][1][1], key))
                if options:
                    key = min(options)[3]
                    free.discard(key)
                    members.append(key)
                    anchor, last = dets[key][1], f
                f += step
        members.sort()
        tracks.append([(k[0], dets[k][1]) for k in members])
    return tracks
