"""Consensus caption scoring: CIDEr-D with per-subset aggregation.

Candidates and references are compared as plain lowercased word sequences
(category phrases are ordinary words here), via clipped TF-IDF cosine
similarity over 1..4-grams with a gaussian length penalty, averaged over n
and references and scaled by 10. No stemming is applied, so scores are
internally consistent rather than comparable to external scorer pipelines.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import DataError
from .vocab import normalize_caption

NGRAM_MAX = 4
SIGMA = 6.0


def metric_tokens(text: str) -> List[str]:
    return normalize_caption(text)


def _ngram_counts(tokens: Sequence[str]) -> List[Counter]:
    out = []
    for n in range(1, NGRAM_MAX + 1):
        out.append(Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)))
    return out


@dataclass
class NGramStats:
    doc_freq: Dict[tuple, int]
    num_images: int

    def idf(self, ngram: tuple) -> float:
        # unseen n-grams are treated as singletons so idf stays finite
        return math.log(self.num_images / max(1.0, float(self.doc_freq.get(ngram, 0))))


def build_ngram_stats(references: Sequence[Sequence[str]]) -> NGramStats:
    """Document frequencies over the reference corpus.

    ``references`` holds one list of reference captions per image; an n-gram
    counts once per image no matter how often it appears in that image's
    references.
    """
    if not references:
        raise DataError("empty reference corpus")
    doc_freq: Dict[tuple, int] = {}
    for refs in references:
        seen = set()
        for ref in refs:
            for counts in _ngram_counts(metric_tokens(ref)):
                seen.update(counts)
        for g in seen:
            doc_freq[g] = doc_freq.get(g, 0) + 1
    return NGramStats(doc_freq=doc_freq, num_images=len(references))


def _tfidf(tokens: Sequence[str], stats: NGramStats):
    vecs = []
    norms = []
    for counts in _ngram_counts(tokens):
        vec = {g: c * stats.idf(g) for g, c in counts.items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(w * w for w in vec.values())))
    return vecs, norms


def cider_d(candidate: str, references: Sequence[str], stats: NGramStats, sigma: float = SIGMA) -> float:
    """CIDEr-D score of one candidate against its references, in [0, 10]."""
    if not references:
        raise DataError("cider_d needs at least one reference")
    cand_tokens = metric_tokens(candidate)
    if not cand_tokens:
        return 0.0
    cand_vecs, cand_norms = _tfidf(cand_tokens, stats)

    acc = [0.0] * NGRAM_MAX
    for ref in references:
        ref_tokens = metric_tokens(ref)
        ref_vecs, ref_norms = _tfidf(ref_tokens, stats)
        delta = float(len(cand_tokens) - len(ref_tokens))
        penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
        for n in range(NGRAM_MAX):
            num = 0.0
            for g, w in cand_vecs[n].items():
                rw = ref_vecs[n].get(g)
                if rw is not None:
                    num += min(w, rw) * rw
            if cand_norms[n] > 0.0 and ref_norms[n] > 0.0:
                acc[n] += penalty * num / (cand_norms[n] * ref_norms[n])
    per_n = sum(acc) / NGRAM_MAX
    return 10.0 * per_n / len(references)


@dataclass
class ScoreReport:
    per_image: Dict[str, float]
    subsets: List[Tuple[str, int, float]]  # (name, image count, mean score)

    def subset_mean(self, name: str) -> Optional[float]:
        for n, _, mean in self.subsets:
            if n == name:
                return mean
        return None


def evaluate(
    outputs: Sequence[Tuple[str, str]],
    dataset,
    subsets: Optional[Dict[str, set]] = None,
    stats: Optional[NGramStats] = None,
) -> ScoreReport:
    """Score (image_id, caption) pairs against dataset references.

    Document frequencies come from the full reference corpus of the dataset
    unless ``stats`` is supplied. Subset means are arithmetic means of the
    member per-image scores; an "all" row is always included.
    """
    refs_by_id = {rec.image_id: list(rec.captions) for rec in dataset}
    missing = sorted(
        oid for oid, _ in outputs if not refs_by_id.get(oid)
    )
    if missing:
        raise DataError(f"no references for image ids: {', '.join(missing)}")
    if stats is None:
        stats = build_ngram_stats([refs for refs in refs_by_id.values() if refs])

    per_image = {
        oid: cider_d(caption, refs_by_id[oid], stats) for oid, caption in outputs
    }
    rows: List[Tuple[str, int, float]] = []
    scored = sorted(per_image)
    rows.append(("all", len(scored), sum(per_image.values()) / len(scored) if scored else 0.0))
    for name in sorted(subsets or {}):
        members = [i for i in scored if i in subsets[name]]
        mean = sum(per_image[i] for i in members) / len(members) if members else 0.0
        rows.append((name, len(members), mean))
    return ScoreReport(per_image=per_image, subsets=rows)


def write_report(report: ScoreReport, path, details_path=None) -> None:
    """Delimited report: per-subset ``name,count,mean_cider`` rows, and an
    optional per-image detail file."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,count,mean_cider\n")
        for name, count, mean in report.subsets:
            fh.write(f"{name},{count},{mean!r}\n")
    if details_path is not None:
        with open(details_path, "w", encoding="utf-8") as fh:
            fh.write("image_id,cider\n")
            for image_id in sorted(report.per_image):
                fh.write(f"{image_id},{report.per_image[image_id]!r}\n")
