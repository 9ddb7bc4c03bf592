"""Corpus captioning metrics: BLEU-4, ROUGE-L, CIDEr-D.

All three operate on already-tokenized captions (lists of tokens); no
stemming or further normalization happens here.  Choices the underlying
metric papers leave open are pinned to the common captioning-toolkit
conventions: BLEU uses corpus-level clipped precisions with epsilon
smoothing and the closest-reference brevity penalty, ROUGE-L uses beta=1.2
with a max over references, CIDEr-D uses document frequencies over the
reference corpus, count clipping, and a Gaussian length penalty (sigma=6).
"""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass

Token = str | int
Sentence = list  # list[Token]

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
MAX_NGRAM = 4


@dataclass
class EvalCorpus:
    """Per-sample candidate plus its reference set."""
    candidates: list[Sentence]
    references: list[list[Sentence]]

    def __post_init__(self):
        if len(self.candidates) != len(self.references):
            raise ValueError(
                f"{len(self.candidates)} candidates vs {len(self.references)} "
                f"reference sets")
        if not self.candidates:
            raise ValueError("empty evaluation corpus")
        for i, (c, refs) in enumerate(zip(self.candidates, self.references)):
            if len(c) == 0:
                raise ValueError(f"sample {i}: empty candidate")
            if len(refs) == 0:
                raise ValueError(f"sample {i}: no references")

    def __len__(self) -> int:
        return len(self.candidates)


def _ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _all_ngrams(tokens: Sentence, max_n: int = MAX_NGRAM) -> Counter:
    counts = Counter()
    for n in range(1, max_n + 1):
        counts.update(_ngrams(tokens, n))
    return counts


# ---------------------------------------------------------------------------
# BLEU-4


def bleu4(corpus: EvalCorpus) -> float:
    """Corpus BLEU with n=1..4, uniform weights, brevity penalty.

    Clipped counts and candidate lengths are pooled over the corpus; a
    zero clipped count is smoothed to BLEU_EPS.  The effective reference
    length per sample is the closest to the candidate (ties go short).
    """
    clipped = [0] * MAX_NGRAM
    totals = [0] * MAX_NGRAM
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(corpus.candidates, corpus.references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, MAX_NGRAM + 1):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            max_ref = Counter()
            for r in refs:
                for gram, c in _ngrams(r, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            clipped[n - 1] += sum(min(c, max_ref[gram])
                                  for gram, c in counts.items())
            totals[n - 1] += sum(counts.values())

    log_p = 0.0
    for n in range(MAX_NGRAM):
        if totals[n] == 0:
            log_p += math.log(BLEU_EPS)
        else:
            log_p += math.log(max(clipped[n], BLEU_EPS) / totals[n])
    geo = math.exp(log_p / MAX_NGRAM)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * geo


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a: Sentence, b: Sentence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _rouge_f(cand: Sentence, ref: Sentence) -> float:
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    beta2 = ROUGE_BETA ** 2
    return (1 + beta2) * p * r / (r + beta2 * p)


def rouge_l(corpus: EvalCorpus) -> float:
    """Mean over samples of the max LCS F-measure across references."""
    total = 0.0
    for cand, refs in zip(corpus.candidates, corpus.references):
        total += max(_rouge_f(cand, r) for r in refs)
    return total / len(corpus)


# ---------------------------------------------------------------------------
# CIDEr-D


def _tfidf(counts: Counter, doc_freq: dict, log_n: float):
    """Per-n TF-IDF vectors, their norms, and the unigram length."""
    vecs = [defaultdict(float) for _ in range(MAX_NGRAM)]
    norms = [0.0] * MAX_NGRAM
    for gram, tf in counts.items():
        idf = max(0.0, log_n - math.log(max(1.0, doc_freq.get(gram, 0.0))))
        n = len(gram) - 1
        vecs[n][gram] = tf * idf
        norms[n] += (tf * idf) ** 2
    return vecs, [math.sqrt(x) for x in norms]


def cider_d(corpus: EvalCorpus) -> float:
    """Consensus score in [0, 10]: clipped TF-IDF cosine per n-gram order,
    Gaussian length penalty, averaged over n and references, scaled by 10.

    Document frequencies come from the reference sets of this corpus; a
    single-sample corpus therefore has all-zero IDF and scores 0.
    """
    if len(corpus) == 1:
        warnings.warn("cider_d on a single-sample corpus is degenerate "
                      "(all IDF weights are zero)", stacklevel=2)
    doc_freq: Counter = Counter()
    for refs in corpus.references:
        seen = set()
        for r in refs:
            seen.update(_all_ngrams(r).keys())
        doc_freq.update(seen)
    log_n = math.log(len(corpus))

    total = 0.0
    for cand, refs in zip(corpus.candidates, corpus.references):
        cvecs, cnorms = _tfidf(_all_ngrams(cand), doc_freq, log_n)
        per_n = [0.0] * MAX_NGRAM
        for ref in refs:
            rvecs, rnorms = _tfidf(_all_ngrams(ref), doc_freq, log_n)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2)
                               / (2.0 * CIDER_SIGMA ** 2))
            for n in range(MAX_NGRAM):
                if cnorms[n] == 0.0 or rnorms[n] == 0.0:
                    continue
                dot = sum(min(v, rvecs[n][g]) * rvecs[n][g]
                          for g, v in cvecs[n].items() if g in rvecs[n])
                per_n[n] += penalty * dot / (cnorms[n] * rnorms[n])
        total += 10.0 * sum(x / len(refs) for x in per_n) / MAX_NGRAM
    return total / len(corpus)


def score_corpus(corpus: EvalCorpus) -> dict[str, float]:
    """All three metrics on one corpus."""
    return {"bleu4": bleu4(corpus), "rouge_l": rouge_l(corpus),
            "cider_d": cider_d(corpus)}
