"""Corpus caption metrics: BLEU-1..4, METEOR-lite, ROUGE-L, CIDEr-D.

METEOR-lite uses exact unigram matches only (no stemming, synonyms or
paraphrase tables) and is not comparable with published METEOR numbers.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import astuple, dataclass
from typing import Dict, List, Sequence, Tuple

from .errors import ValidationError

Tokens = Sequence[str]

CSV_HEADER = "model,B-1,B-2,B-3,B-4,METEOR,ROUGE-L,CIDEr"


@dataclass
class CorpusPair:
    candidates: Dict[str, List[str]]
    references: Dict[str, List[List[str]]]

    def __post_init__(self):
        if not self.candidates:
            raise ValidationError("empty candidate set")
        if set(self.candidates) != set(self.references):
            raise ValidationError("candidate and reference id sets differ")
        for k, refs in self.references.items():
            if not refs:
                raise ValidationError(f"no references for {k!r}")

    def ids(self) -> List[str]:
        return sorted(self.candidates)


@dataclass
class MetricsReport:
    b1: float
    b2: float
    b3: float
    b4: float
    meteor: float
    rouge_l: float
    cider: float

    def csv_row(self, model: str) -> str:
        return ",".join([model] + [f"{v:.4f}" for v in astuple(self)])


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def bleu(corpus: CorpusPair, max_n: int = 4) -> float:
    """Corpus BLEU: clipped n-gram precisions, uniform geometric mean, brevity penalty."""
    if not 1 <= max_n <= 4:
        raise ValidationError("max_n must be in 1..4")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for k in corpus.ids():
        cand = corpus.candidates[k]
        refs = corpus.references[k]
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cc = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in cc.items())
            total[n - 1] += sum(cc.values())
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_segment(cand: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        rec = lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(corpus: CorpusPair, beta: float = 1.2) -> float:
    ids = corpus.ids()
    return sum(rouge_l_segment(corpus.candidates[k], corpus.references[k], beta) for k in ids) / len(ids)


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

def _counts(tokens: Tokens, max_n: int) -> Counter:
    out: Counter = Counter()
    for n in range(1, max_n + 1):
        out.update(ngrams(tokens, n))
    return out


def cider(corpus: CorpusPair, max_n: int = 4, sigma: float = 6.0) -> float:
    """CIDEr-D averaged over the corpus, on the 0..10 scale.

    Document frequencies count reference sets containing an n-gram; idf is
    ``log(N) - log(max(1, df))``, so n-grams present in every reference set
    carry no weight (a one-segment corpus therefore scores 0).
    """
    ids = corpus.ids()
    N = len(ids)
    df: Counter = Counter()
    ref_counts = {}
    for k in ids:
        rc = [_counts(r, max_n) for r in corpus.references[k]]
        ref_counts[k] = rc
        df.update(set().union(*[set(c) for c in rc]))
    log_n = math.log(float(N))

    def vec(cnts: Counter):
        v = [dict() for _ in range(max_n)]
        norm = [0.0] * max_n
        for g, tf in cnts.items():
            w = tf * (log_n - math.log(max(1.0, df[g])))
            v[len(g) - 1][g] = w
            norm[len(g) - 1] += w * w
        return v, [math.sqrt(x) for x in norm]

    total = 0.0
    for k in ids:
        cand = corpus.candidates[k]
        vc, nc = vec(_counts(cand, max_n))
        acc = 0.0
        for r, rc in zip(corpus.references[k], ref_counts[k]):
            vr, nr = vec(rc)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma ** 2))
            sims = []
            for n in range(max_n):
                val = sum(min(w, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0) for g, w in vc[n].items())
                if nc[n] != 0 and nr[n] != 0:
                    val /= nc[n] * nr[n]
                sims.append(val * penalty)
            acc += sum(sims) / max_n
        total += 10.0 * acc / len(corpus.references[k])
    return total / N


# ---------------------------------------------------------------------------
# METEOR-lite
# ---------------------------------------------------------------------------

def align_exact(cand: Tokens, ref: Tokens) -> List[Tuple[int, int]]:
    """Greedy left-to-right exact alignment: (cand_pos, ref_pos) pairs."""
    used = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, rt in enumerate(ref):
            if not used[j] and rt == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def count_chunks(pairs: Sequence[Tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite_segment(cand: Tokens, refs: Sequence[Tokens], alpha: float = 0.9,
                        gamma: float = 0.5) -> float:
    best = 0.0
    for r in refs:
        pairs = align_exact(cand, r)
        m = len(pairs)
        if m == 0:
            continue
        p, rec = m / len(cand), m / len(r)
        fmean = p * rec / (alpha * p + (1 - alpha) * rec)
        penalty = gamma * (count_chunks(pairs) / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return best


def meteor_lite(corpus: CorpusPair) -> float:
    ids = corpus.ids()
    return sum(meteor_lite_segment(corpus.candidates[k], corpus.references[k]) for k in ids) / len(ids)


def evaluate_corpus(corpus: CorpusPair) -> MetricsReport:
    return MetricsReport(
        b1=bleu(corpus, 1), b2=bleu(corpus, 2), b3=bleu(corpus, 3), b4=bleu(corpus, 4),
        meteor=meteor_lite(corpus), rouge_l=rouge_l(corpus), cider=cider(corpus),
    )


def report_csv(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    lines = [CSV_HEADER] + [rep.csv_row(name) for name, rep in rows]
    return "\n".join(lines) + "\n"
