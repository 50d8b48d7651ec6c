"""CTC loss on a toy lattice, and where it is infeasible."""

import itertools
import math

import numpy as np

from smad.losses import ctc_forward_backward, min_ctc_frames

rng = np.random.default_rng(2)
x = rng.normal(size=(4, 3))
lp = x - np.log(np.exp(x).sum(-1, keepdims=True))
target = [1, 1]

ll, occupancy = ctc_forward_backward(lp, target)
paths = [p for p in itertools.product(range(3), repeat=4)
         if [k for i, k in enumerate(p) if k and (i == 0 or k != p[i - 1])] == target]
brute = sum(math.exp(sum(lp[t, k] for t, k in enumerate(p))) for p in paths)
print(f"target {target} needs {min_ctc_frames(target)} frames; {len(paths)} valid paths of length 4")
print(f"forward  p = {math.exp(ll):.12f}")
print(f"brute    p = {brute:.12f}")
print("per-frame label occupancy sums:", np.round(occupancy.sum(-1), 12))

ll, _ = ctc_forward_backward(lp[:2], target)
print("two frames for [1, 1]:", ll)
