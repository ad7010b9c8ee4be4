"""
Caption metrics and the role analyses run over generation traces.

BLEU-1..4 are corpus level with clipped counts and a brevity penalty.
ROUGE-L is the sentence-level LCS F-measure averaged over the corpus.
CIDEr weights n-grams by term frequency and inverse document
frequency over the references, compares candidate and reference by
cosine per order, applies a gaussian length penalty and averages
orders 1 to 4, scaled by 10.

Typical Usage:

>>> from r3_captioner.metrics import bleu_n
>>> round(bleu_n([["the", "cat", "sat"]], [["the", "cat", "sat", "down"]], 1), 4)
0.7165
"""

from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import csv
import logging
import math

from nltk.translate.bleu_score import corpus_bleu, modified_precision
from pydantic import BaseModel, Field, model_validator
from rouge_score.rouge_scorer import _lcs_table, _score_lcs

from r3_captioner.errors import ContractError, RangeError

logger = logging.getLogger(__name__)

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_ORDERS = 4
STRATA = (1, 2, 3, 4)
METRICS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider")
UNDEFINED = "undefined"


class GenerationTrace(BaseModel):
    """
    Output of greedy generation for one example, with its reference.

    roles maps a decoder site to one per-head role list per generated
    token; encoder_roles maps an encoder site to one per-head role
    list per video token.
    """

    example_id: int
    generated_ids: List[int]
    generated_words: List[str]
    generated_tags: List[str] = []
    reference_ids: Optional[List[int]] = None
    reference_words: Optional[List[str]] = None
    reference_tags: Optional[List[str]] = None
    roles: Dict[str, List[List[int]]] = {}
    encoder_roles: Dict[str, List[List[int]]] = {}

    @model_validator(mode="after")
    def check_alignment(self):
        if len(self.generated_words) != len(self.generated_ids):
            raise ValueError("generated words and ids differ in length")

        for site, steps in self.roles.items():
            if len(steps) != len(self.generated_ids):
                raise ValueError(
                    f"site {site} has {len(steps)} role steps for "
                    f"{len(self.generated_ids)} generated tokens"
                )

        return self


class MetricReport(BaseModel):
    """
    Scores over one corpus. cider is None when the corpus holds
    fewer than two examples. strata maps a minimum predicate count
    to the report of that subset.
    """

    bleu1: float = Field(ge=0.0, le=1.0)
    bleu2: float = Field(ge=0.0, le=1.0)
    bleu3: float = Field(ge=0.0, le=1.0)
    bleu4: float = Field(ge=0.0, le=1.0)
    rouge_l: float = Field(ge=0.0, le=1.0)
    cider: Optional[float] = Field(default=None, ge=0.0, le=10.0 + 1e-9)
    count: int
    strata: Dict[int, "MetricReport"] = {}

    def scores(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in METRICS}


MetricReport.model_rebuild()


def _check_corpus(candidates: Sequence, references: Sequence):
    if not candidates:
        raise ContractError("metrics need a non-empty corpus")

    if len(candidates) != len(references):
        raise ContractError(
            f"{len(candidates)} candidates but {len(references)} references"
        )


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates: Sequence[Sequence], references: Sequence[Sequence], n: int) -> float:
    """
    Corpus BLEU up to order n with one reference per candidate,
    uniform weights and no smoothing.

    Args:
        candidates: Token sequences
        references: Token sequences, aligned with candidates
        n: Highest n-gram order, 1..4

    Returns:
        Score in [0, 1]; 0 when any order has no clipped match
    """

    _check_corpus(candidates, references)

    if n not in (1, 2, 3, 4):
        raise RangeError(f"BLEU order must lie in 1..4, got {n}")

    for k in range(1, n + 1):
        matches = sum(
            modified_precision([reference], candidate, k).numerator
            for candidate, reference in zip(candidates, references)
        )
        if matches == 0:
            return 0.0

    return corpus_bleu(
        [[reference] for reference in references],
        [list(candidate) for candidate in candidates],
        weights=(1.0 / n,) * n,
    )


def lcs_length(a: Sequence, b: Sequence) -> int:
    return _lcs_table(list(b), list(a))[-1][-1]


def rouge_l(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """
    Mean over pairs of the LCS F-measure with recall weighted by
    beta = 1.2.
    """

    _check_corpus(candidates, references)

    total = 0.0

    for candidate, reference in zip(candidates, references):
        score = _score_lcs(list(reference), list(candidate))

        if score.precision == 0 or score.recall == 0:
            continue

        total += ((1 + ROUGE_BETA**2) * score.precision * score.recall) / (
            score.recall + ROUGE_BETA**2 * score.precision
        )

    return total / len(candidates)


def _tfidf(counts: Counter, document_frequency: Counter, log_docs: float) -> Dict:
    return {
        gram: tf * (log_docs - math.log(max(1.0, document_frequency[gram])))
        for gram, tf in counts.items()
    }


def _cosine(a: Dict, b: Dict) -> float:
    norm_a = math.sqrt(sum(v * v for v in a.values()))
    norm_b = math.sqrt(sum(v * v for v in b.values()))

    if norm_a == 0 or norm_b == 0:
        return 0.0

    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (norm_a * norm_b)


def cider(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """
    Corpus CIDEr with document frequencies taken over the references.

    An order with no n-grams in the candidate or reference scores 0
    and still counts in the mean, so identical captions shorter than
    four tokens score 7.5 at most rather than 10.

    Returns:
        Mean per-example score in [0, 10]
    """

    _check_corpus(candidates, references)

    if len(candidates) < 2:
        raise ContractError("CIDEr needs at least two examples")

    log_docs = math.log(len(references))
    document_frequency = [Counter() for _ in range(CIDER_ORDERS)]

    for reference in references:
        for k in range(CIDER_ORDERS):
            document_frequency[k].update(ngrams(reference, k + 1).keys())

    total = 0.0

    for candidate, reference in zip(candidates, references):
        delta = len(candidate) - len(reference)
        penalty = math.exp(-(delta**2) / (2 * CIDER_SIGMA**2))
        score = 0.0

        for k in range(CIDER_ORDERS):
            vec_c = _tfidf(ngrams(candidate, k + 1), document_frequency[k], log_docs)
            vec_r = _tfidf(ngrams(reference, k + 1), document_frequency[k], log_docs)
            score += _cosine(vec_c, vec_r) * penalty

        total += 10.0 * score / CIDER_ORDERS

    return total / len(candidates)


def predicate_count(tags: Optional[Sequence[str]]) -> int:
    return 0 if tags is None else list(tags).count("VERB")


def predicate_stratify(traces: Sequence[GenerationTrace], min_predicates: int) -> list:
    """
    Traces whose reference holds at least min_predicates VERB tags.
    """

    if min_predicates not in STRATA:
        raise RangeError(f"min_predicates must lie in 1..4, got {min_predicates}")

    return [t for t in traces if predicate_count(t.reference_tags) >= min_predicates]


def _score(traces: Sequence[GenerationTrace]) -> dict:
    missing = [t.example_id for t in traces if t.reference_words is None]

    if missing:
        raise ContractError(f"examples without reference: {missing[:5]}")

    candidates = [t.generated_words for t in traces]
    references = [t.reference_words for t in traces]

    return dict(
        bleu1=bleu_n(candidates, references, 1),
        bleu2=bleu_n(candidates, references, 2),
        bleu3=bleu_n(candidates, references, 3),
        bleu4=bleu_n(candidates, references, 4),
        rouge_l=rouge_l(candidates, references),
        cider=cider(candidates, references) if len(traces) >= 2 else None,
        count=len(traces),
    )


def evaluate_corpus(
    traces: Sequence[GenerationTrace], strata: Sequence[int] = STRATA
) -> MetricReport:
    """
    Full-corpus report plus one sub-report per non-empty predicate
    stratum.
    """

    sub_reports = {}

    for m in strata:
        subset = predicate_stratify(traces, m)
        if subset:
            sub_reports[m] = MetricReport(**_score(subset))

    report = MetricReport(**_score(traces), strata=sub_reports)
    logger.info(
        "evaluated count=%d bleu4=%.4f rouge_l=%.4f", report.count, report.bleu4, report.rouge_l
    )
    return report


def improvement_report(
    model: MetricReport, baseline: MetricReport
) -> Dict[str, Dict[str, Optional[float]]]:
    """
    Relative improvement 100 * (model - baseline) / baseline per
    metric, for the full corpus ("all") and every stratum ("min<m>").
    A zero or missing baseline score yields None.
    """

    if set(model.strata) != set(baseline.strata):
        raise ContractError(
            f"strata differ: {sorted(model.strata)} vs {sorted(baseline.strata)}"
        )

    pairs = {"all": (model, baseline)}
    pairs.update({f"min{m}": (model.strata[m], baseline.strata[m]) for m in sorted(model.strata)})

    table = {}

    for name, (ours, theirs) in pairs.items():
        if ours.count != theirs.count:
            raise ContractError(f"stratum {name}: {ours.count} vs {theirs.count} examples")

        row = {}
        for metric in METRICS:
            a, b = getattr(ours, metric), getattr(theirs, metric)
            row[metric] = None if a is None or not b else 100.0 * (a - b) / b
        table[name] = row

    return table


def role_distribution(
    traces: Sequence[GenerationTrace], site: str, head: int
) -> Dict[str, Counter]:
    """
    word -> Counter of roles selected at (site, head) on the steps
    that emitted the word.
    """

    if not traces:
        raise ContractError("role analysis needs at least one trace")

    if not any(site in t.roles for t in traces):
        known = sorted({s for t in traces for s in t.roles})
        raise RangeError(f"unknown site {site!r}; traces hold {known}")

    # every site of one model carries the same number of heads
    widths = {
        len(step)
        for t in traces
        for steps in (*t.roles.values(), *t.encoder_roles.values())
        for step in steps
    }

    heads = min(widths, default=None)

    if head < 0 or (heads is not None and head >= heads):
        raise RangeError(f"head {head} outside the {heads} recorded heads")

    distribution: Dict[str, Counter] = {}

    for trace in traces:
        for word, step in zip(trace.generated_words, trace.roles.get(site, [])):
            distribution.setdefault(word, Counter())[step[head]] += 1

    return distribution


def role_word_probability(
    traces: Sequence[GenerationTrace], site: str, head: int = 0
) -> Dict[str, Tuple[int, float]]:
    """
    For every generated word, the role most often selected when the
    word was emitted and the fraction of emissions that chose it.
    Ties go to the lower role index.
    """

    table = {}

    for word, counts in role_distribution(traces, site, head).items():
        role, hits = min(counts.items(), key=lambda item: (-item[1], item[0]))
        table[word] = (role, hits / sum(counts.values()))

    return table


def word_frequency(traces: Sequence[GenerationTrace]) -> Counter:
    """
    Word counts over the reference captions.
    """

    counts = Counter()

    for trace in traces:
        counts.update(trace.reference_words or [])

    return counts


def _format(value: Optional[float]) -> str:
    return UNDEFINED if value is None else f"{value:.6f}"


def report_lines(report: MetricReport) -> List[str]:
    lines = [f"count={report.count}"]
    lines += [f"{name}={_format(value)}" for name, value in report.scores().items()]

    for m, sub in sorted(report.strata.items()):
        lines.append(f"min{m}.count={sub.count}")
        lines += [f"min{m}.{name}={_format(value)}" for name, value in sub.scores().items()]

    return lines


def write_report(path: Path, report: MetricReport):
    Path(path).write_text("\n".join(report_lines(report)) + "\n")


def write_improvement(path: Path, table: Dict[str, Dict[str, Optional[float]]]):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["stratum", *METRICS])
        for name, row in table.items():
            writer.writerow([name, *(_format(row[m]) for m in METRICS)])


def write_roles(
    path: Path,
    table: Dict[str, Tuple[int, float]],
    frequency: Counter,
    tags: Optional[Dict[str, str]] = None,
):
    """
    One row per word: word, role, probability, frequency, pos_tag;
    most frequent words first.
    """

    tags = tags or {}
    ordered = sorted(table, key=lambda w: (-frequency[w], w))

    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["word", "role", "probability", "frequency", "pos_tag"])
        for word in ordered:
            role, probability = table[word]
            writer.writerow(
                [word, role, f"{probability:.6f}", frequency[word], tags.get(word, "")]
            )


def write_frequency(path: Path, frequency: Counter):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["word", "count"])
        for word, count in sorted(frequency.items(), key=lambda item: (-item[1], item[0])):
            writer.writerow([word, count])
