"""Word error rate with deletion/insertion/substitution breakdown, oracle WER
over n-best lists, relative-improvement arithmetic, and hypothesis diffing.

Alignment is minimal-edit-distance with unit costs.  When several alignments
tie, the backtrace prefers substitution over deletion over insertion so that
reported D/I/S splits are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError


@dataclass
class AlignmentResult:
    """Outcome of aligning a hypothesis against a reference."""

    deletions: int
    insertions: int
    substitutions: int
    ref_len: int
    pairs: list[tuple[Optional[str], Optional[str]]]  # (ref token | None, hyp token | None)

    @property
    def errors(self) -> int:
        return self.deletions + self.insertions + self.substitutions

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            raise ContractError("WER undefined for an empty reference")
        return self.errors / self.ref_len


def align(ref: Sequence[str], hyp: Sequence[str]) -> AlignmentResult:
    """Minimal-cost alignment of ``hyp`` to ``ref`` with unit edit costs.

    Among all minimal alignments the one with the most aligned (match or
    substitution) pairs is chosen, i.e. substitutions are preferred over
    deletion+insertion pairs.  That secondary criterion pins the D/I/S split
    uniquely: D - I always equals len(ref) - len(hyp), so maximizing
    substitutions fixes all three counts and makes the split symmetric under
    swapping the two roles.
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    diag = np.zeros((n + 1, m + 1), dtype=np.int64)  # max aligned pairs on a minimal path
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            best = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
            dist[i, j] = best
            cand = []
            if sub == best:
                cand.append(diag[i - 1, j - 1] + 1)
            if dist[i - 1, j] + 1 == best:
                cand.append(diag[i - 1, j])
            if dist[i, j - 1] + 1 == best:
                cand.append(diag[i, j - 1])
            diag[i, j] = max(cand)

    pairs: list[tuple[Optional[str], Optional[str]]] = []
    d = ins = s = 0
    i, j = n, m
    while i > 0 or j > 0:
        if (
            i > 0
            and j > 0
            and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            and diag[i, j] == diag[i - 1, j - 1] + 1
        ):
            if ref[i - 1] != hyp[j - 1]:
                s += 1
            pairs.append((ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1 and diag[i, j] == diag[i - 1, j]:
            d += 1
            pairs.append((ref[i - 1], None))
            i -= 1
        else:
            ins += 1
            pairs.append((None, hyp[j - 1]))
            j -= 1
    pairs.reverse()
    return AlignmentResult(
        deletions=d, insertions=ins, substitutions=s, ref_len=n, pairs=pairs
    )


@dataclass
class UtteranceScore:
    utt_id: str
    alignment: AlignmentResult
    oracle_alignment: Optional[AlignmentResult] = None
    oracle_rank: Optional[int] = None


@dataclass
class WerReport:
    """Corpus-level counts (summed, not averaged) plus per-utterance results."""

    per_utterance: list[UtteranceScore] = field(default_factory=list)

    def _totals(self, attr: str) -> tuple[int, int, int, int]:
        d = i = s = n = 0
        for u in self.per_utterance:
            a = getattr(u, attr)
            d, i, s, n = d + a.deletions, i + a.insertions, s + a.substitutions, n + a.ref_len
        return d, i, s, n

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return self._totals("alignment")

    @property
    def wer(self) -> float:
        d, i, s, n = self.counts
        if n == 0:
            raise ContractError("corpus WER undefined: total reference length is zero")
        return (d + i + s) / n

    @property
    def has_oracle(self) -> bool:
        return all(u.oracle_alignment is not None for u in self.per_utterance)

    @property
    def oracle_wer(self) -> float:
        if not self.has_oracle:
            raise ContractError("report has no oracle alignments")
        d, i, s, n = self._totals("oracle_alignment")
        if n == 0:
            raise ContractError("corpus oracle WER undefined: total reference length is zero")
        return (d + i + s) / n


def wer(refs: dict[str, Sequence[str]], hyps: dict[str, Sequence[str]]) -> WerReport:
    """Score one hypothesis per utterance; ids of ``hyps`` must resolve in ``refs``."""
    missing = set(hyps) - set(refs)
    if missing:
        raise ContractError(f"hypothesis ids missing from references: {sorted(missing)[:3]}")
    report = WerReport()
    for utt_id in hyps:
        report.per_utterance.append(
            UtteranceScore(utt_id=utt_id, alignment=align(refs[utt_id], hyps[utt_id]))
        )
    return report


def oracle_wer(ref: Sequence[str], nbest: Sequence[Sequence[str]]) -> tuple[float, int, AlignmentResult]:
    """Minimum WER over an n-best list -> (wer, minimizing rank, its alignment)."""
    if not nbest:
        raise ContractError("oracle WER needs a nonempty n-best list")
    if len(ref) == 0:
        raise ContractError("oracle WER undefined for an empty reference")
    best_rank, best_align = 0, align(ref, nbest[0])
    for rank, hyp in enumerate(nbest[1:], start=1):
        a = align(ref, hyp)
        if a.errors < best_align.errors:
            best_rank, best_align = rank, a
    return best_align.wer, best_rank, best_align


def score_nbest(
    refs: dict[str, Sequence[str]], nbests: dict[str, Sequence[Sequence[str]]]
) -> WerReport:
    """Score top hypotheses and attach per-utterance oracle alignments."""
    missing = set(nbests) - set(refs)
    if missing:
        raise ContractError(f"hypothesis ids missing from references: {sorted(missing)[:3]}")
    report = WerReport()
    for utt_id, nbest in nbests.items():
        if not nbest:
            raise ContractError(f"empty n-best list for utterance {utt_id}")
        _, rank, best = oracle_wer(refs[utt_id], nbest)
        report.per_utterance.append(
            UtteranceScore(
                utt_id=utt_id,
                alignment=align(refs[utt_id], nbest[0]),
                oracle_alignment=best,
                oracle_rank=rank,
            )
        )
    return report


def relative_improvement(baseline: float, system: float) -> float:
    """Percent relative WER reduction: 100 * (baseline - system) / baseline."""
    if baseline <= 0:
        raise ContractError(f"relative improvement needs a positive baseline, got {baseline}")
    return 100.0 * (baseline - system) / baseline


def diff_render(a: AlignmentResult) -> tuple[str, str]:
    """Render an alignment as a (reference, hypothesis) pair with bracket marks.

    Deleted and substituted words are marked on the reference side, inserted
    and substituted words on the hypothesis side.  Stripping the brackets
    recovers the original token strings exactly.
    """
    ref_out, hyp_out = [], []
    for r, h in a.pairs:
        if r is not None and h is not None:
            if r == h:
                ref_out.append(r)
                hyp_out.append(h)
            else:
                ref_out.append(f"[{r}]")
                hyp_out.append(f"[{h}]")
        elif r is not None:
            ref_out.append(f"[{r}]")
        else:
            hyp_out.append(f"[{h}]")
    return " ".join(ref_out), " ".join(hyp_out)


def strip_diff_marks(s: str) -> str:
    return s.replace("[", "").replace("]", "")


# ---------------------------------------------------------------------------
# report file


def render_report(report: WerReport, include_diffs: bool = False) -> str:
    """Machine-parsable `key value` summary plus an optional per-utterance section."""
    d, i, s, n = report.counts
    lines = [
        f"utterances {len(report.per_utterance)}",
        f"ref-words {n}",
        f"errors-dis {d}/{i}/{s}",
        f"wer {report.wer:.4f}",
        f"rate-dis {100 * d / n:.1f}/{100 * i / n:.1f}/{100 * s / n:.1f}",
    ]
    if report.has_oracle:
        od, oi, os_, on = report._totals("oracle_alignment")
        lines.append(f"oracle-errors-dis {od}/{oi}/{os_}")
        lines.append(f"oracle-wer {report.oracle_wer:.4f}")
    if include_diffs:
        lines.append("")
        for u in sorted(report.per_utterance, key=lambda u: u.utt_id):
            a = u.alignment
            lines.append(
                f"utt {u.utt_id} dis {a.deletions}/{a.insertions}/{a.substitutions} wer {a.wer:.4f}"
            )
            ref_s, hyp_s = diff_render(a)
            lines.append(f"  ref: {ref_s}")
            lines.append(f"  hyp: {hyp_s}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Parse the summary section of a rendered report back into a dict."""
    out: dict = {}
    for line in text.splitlines():
        if not line:
            break  # per-utterance section follows the blank separator
        parts = line.split()
        if len(parts) != 2:
            continue
        key, value = parts
        if key in ("utterances", "ref-words"):
            out[key] = int(value)
        elif key.endswith("-dis"):
            out[key] = tuple(int(v) if "." not in v else float(v) for v in value.split("/"))
        else:
            out[key] = float(value)
    return out
