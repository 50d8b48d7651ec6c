"""The synthetic corpus: prototypes, durations, normalisation and batching."""

import numpy as np

from smad.data import generate_corpus, make_batches, normalize

raw = generate_corpus(seed=0, n_utterances=250, vocab_size=12)
print({k: len(v) for k, v in raw.splits.items()})
u = raw.utterances[0]
print(f"{u.id}: tokens {raw.vocab.decode(u.tokens)} -> {u.n_frames} frames of dim {u.features.shape[1]}")
frames = [x.n_frames / len(x.tokens) for x in raw.utterances]
print(f"frames per token: min {min(frames):.2f} max {max(frames):.2f}")

norm, stats = normalize(raw)
train = np.concatenate([x.features for x in norm.split("train")])
print("train mean after normalisation (max abs):", float(np.abs(train.mean(0)).max()))

batches = make_batches(norm.split("train"), 8, norm.vocab.pad, "bucket", seed=0)
b = batches[0]
print(f"{len(batches)} batches; first is {b.features.shape} with frame lengths {b.feature_lengths.tolist()}")
