"""Pure numpy version of the compiled inner loop, same signature and semantics."""
import math

import numpy as np


def affine_round(y, center, radius, H, drive, etas, acc, work):
    worst = 0.0
    for t in range(drive.shape[0]):
        acc += y
        np.subtract(y - etas[t] * (H @ y + drive[t]), center, out=work)
        r = math.sqrt(work @ work)
        if r > radius:
            work *= radius / r
            ratio = 1.0
        else:
            ratio = r / radius
        np.add(center, work, out=y)
        worst = max(worst, ratio)
    return worst
