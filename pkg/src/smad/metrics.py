"""Character error rate via Levenshtein alignment."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CerReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self) -> float:
        """Error percentage; an empty reference scores 0 only for an empty hypothesis."""
        if self.ref_len == 0:
            return 0.0 if self.errors == 0 else 100.0 * self.errors
        return 100.0 * self.errors / self.ref_len

    def __add__(self, other: CerReport) -> CerReport:
        return CerReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_len + other.ref_len,
        )


def edit_distance(ref, hyp) -> int:
    return cer(ref, hyp).errors


def cer(ref, hyp) -> CerReport:
    """Unit-cost alignment of ``hyp`` against ``ref``.

    Among minimum-cost alignments the one with the most substitutions is
    reported, which pins down the split between insertions and deletions and
    makes swapping the arguments exchange those two counts.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # cell = (cost, -substitutions, deletions, insertions)
    table = [[None] * (m + 1) for _ in range(n + 1)]
    table[0][0] = (0, 0, 0, 0)
    for i in range(1, n + 1):
        table[i][0] = (i, 0, i, 0)
    for j in range(1, m + 1):
        table[0][j] = (j, 0, 0, j)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c, ns, d, ins = table[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, ns, d, ins)
            else:
                diag = (c + 1, ns - 1, d, ins)
            c, ns, d, ins = table[i - 1][j]
            dele = (c + 1, ns, d + 1, ins)
            c, ns, d, ins = table[i][j - 1]
            inse = (c + 1, ns, d, ins + 1)
            table[i][j] = min(diag, dele, inse, key=lambda t: (t[0], t[1]))
    cost, neg_sub, dels, ins = table[n][m]
    return CerReport(-neg_sub, dels, ins, n)


def corpus_cer(pairs) -> CerReport:
    total = CerReport(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + cer(ref, hyp)
    return total
