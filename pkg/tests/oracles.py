"""Independent reference implementations used only by the tests."""
from fractions import Fraction

import numpy as np


def point_in_polygon(px, py, vertices):
    """Even-odd crossing count with exact rational arithmetic.

    A crossing is counted for an edge spanning ``ymin <= py < ymax`` whose
    intersection with the horizontal line lies strictly right of ``px``.
    """
    inside = False
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        if (y0 <= py) == (y1 <= py):
            continue
        xi = Fraction(x0) + (py - y0) * Fraction(x1 - x0, y1 - y0)
        if px < xi:
            inside = not inside
    return inside


def brute_force_mask(vertices, height, width):
    out = np.zeros((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            out[y, x] = point_in_polygon(Fraction(2 * x + 1, 2), Fraction(2 * y + 1, 2), vertices)
    return out


def numeric_grad(fn, params, name, idx, eps=1e-4):
    plus = params.copy()
    plus.tensors[name][idx] += eps
    minus = params.copy()
    minus.tensors[name][idx] -= eps
    return (fn(plus) - fn(minus)) / (2 * eps)


def tally_confusion(gt, pred, num_classes, ignore=255):
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for g, p in zip(np.ravel(gt), np.ravel(pred)):
        if g == ignore:
            continue
        counts[int(g), int(p)] += 1
    return counts
