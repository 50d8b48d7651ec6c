"""Character error rate with its substitution/deletion/insertion breakdown."""

from smad.metrics import cer, corpus_cer

pairs = [("kitten", "sitting"), ("abc", "abc"), ("abcd", "ad"), ("", "xy")]
for ref, hyp in pairs:
    r = cer(list(ref), list(hyp))
    print(f"{ref!r:>8} -> {hyp!r:<9} S={r.substitutions} D={r.deletions} I={r.insertions} N={r.ref_len}")
total = corpus_cer((list(r), list(h)) for r, h in pairs)
print(f"pooled CER {total.cer:.2f}%")
