"""Train a small t_smad model on a clean corpus, then decode it greedily and with a beam.

Takes a few seconds on one core.
"""

from smad.data import generate_corpus, normalize
from smad.model import ModelConfig, SpeechTransformer
from smad.train import TrainConfig, decode_utterances, evaluate_cer, train

corpus, _ = normalize(generate_corpus(0, 40, 6, length_range=(2, 4)))
model = SpeechTransformer(ModelConfig(vocab_size=corpus.vocab.size, feat_dim=corpus.feat_dim,
                                      n_enc_layers=2, n_dec_layers=2))
result = train(model, corpus, TrainConfig(max_steps=300, batch_size=8, warmup=100, lr_scale=0.25, eval_every=50))
for r in result.records[::50]:
    print({k: round(v, 4) for k, v in r.items()})

model.load_state_dict(result.best_state)
utts = corpus.split("train")[:5]
for u, g, b in zip(utts, decode_utterances(model, utts, corpus.vocab), decode_utterances(model, utts, corpus.vocab, 4)):
    print(f"{u.id} ref {u.tokens.tolist()} greedy {g} beam4 {b}")
print("train CER", evaluate_cer(model, corpus.split("train"), corpus.vocab).cer)
