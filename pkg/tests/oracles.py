"""Second, deliberately naive implementations used as test oracles."""
import math


def cosine(a, b):
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def brute_force_retained(records, image, mode, tau, tau_high):
    """Re-evaluate the retention predicate one sentence at a time.

    ``records`` are (source, index, codes, embedding) tuples with source in
    {"prior1", "prior2"}; returns the retained (source, index) keys in order.
    """
    p1_pos = set()
    p2_pos = set()
    for source, _, codes, _ in records:
        for j in range(13):
            if codes[j] == 1:
                (p1_pos if source == "prior1" else p2_pos).add(j)
    gone = p2_pos - p1_pos
    kept = []
    for want in ("prior1", "prior2"):
        for source, index, codes, emb in records:
            if source != want:
                continue
            if not any(codes[j] == 1 for j in range(13)):
                continue
            if mode == "none":
                kept.append((source, index))
                continue
            thr = tau
            if mode == "dynamic" and source == "prior2" and any(codes[j] == 1 for j in gone):
                thr = tau_high
            if cosine(image, emb) >= thr:
                kept.append((source, index))
    return kept
