"""The mixed-attention mask and the weights it produces.

Target row i sees all n acoustic frames and the first i+1 targets.
"""

import numpy as np

from smad.attention import MultiHeadAttention, build_mixed_mask, mixed_attention

m, n = 3, 4
mask = build_mixed_mask(m, n)
print(f"mask for m={m} targets over n={n} acoustic frames (. visible, x hidden):")
for row in np.isfinite(mask.matrix):
    print("  " + " ".join("." if v else "x" for v in row))

rng = np.random.default_rng(1)
mha = MultiHeadAttention(8, 2, rng)
s, t = rng.normal(size=(1, n, 8)), rng.normal(size=(1, m, 8))
out, weights = mixed_attention(t, s, mha)
print("\nhead 0 weights (columns: acoustic | target):")
for row in weights[0, 0]:
    print("  " + " ".join(f"{v:.2f}" for v in row[:n]) + " | " + " ".join(f"{v:.2f}" for v in row[n:]))
print("row sums", np.round(weights.sum(-1)[0, 0], 12))
