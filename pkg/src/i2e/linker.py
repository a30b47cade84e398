"""Entity extraction from free text.

Candidate generation matches token n-grams against the alias table, seeding
each matched span with popularity priors. Disambiguation then iterates two
steps until the probabilities settle: build a full-text embedding as the
probability-weighted mean of every candidate's ball embedding, and rescale
each candidate's prior by exp(-distance_to_text / tau). The winning
candidate per span is kept when its probability clears the selection
threshold.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .kb import AliasTable, tokenize
from .hyperembed import PoincareEmbedding, poincare_distance, project_to_ball


class LinkError(Exception):
    """Raised for malformed corpus records or non-finite disambiguation state."""


class LinkerConfig(BaseModel):
    max_iters: int = 20
    epsilon: float = 1e-4  # max absolute probability change that counts as converged
    tau_sim: float = 1.0  # distance temperature in the candidate reweighting
    selection_threshold: float = 0.5
    include_self: bool = True  # include the span's own candidates in the text embedding


@dataclass
class CandidateSpan:
    token_range: tuple[int, int]  # [start, end) token indices
    surface: str
    candidates: list[tuple[str, float]]  # (entity_id, probability), sum to 1
    converged: bool = False


@dataclass
class ResolvedSpan:
    token_range: tuple[int, int]
    entity_id: str
    probability: float


@dataclass
class LinkResult:
    text: str
    spans: list[ResolvedSpan] = field(default_factory=list)
    iterations_used: int = 0


def generate_candidates(text: str, table: AliasTable, tokenizer=tokenize) -> list[CandidateSpan]:
    """All alias-table matches over token n-grams, longest-match resolved.

    Overlapping matches are resolved by preferring longer spans, then leftmost
    start, then the higher top prior.
    """
    tokens = tokenizer(text)
    matched: list[CandidateSpan] = []
    max_n = min(table.max_ngram, len(tokens))
    for n in range(1, max_n + 1):
        for start in range(0, len(tokens) - n + 1):
            surface = " ".join(tokens[start : start + n])
            candidates = table.lookup(surface)
            if candidates:
                matched.append(CandidateSpan((start, start + n), surface, candidates))
    matched.sort(key=lambda s: (-(s.token_range[1] - s.token_range[0]), s.token_range[0], -s.candidates[0][1]))
    taken: set[int] = set()
    kept: list[CandidateSpan] = []
    for span in matched:
        positions = range(span.token_range[0], span.token_range[1])
        if any(p in taken for p in positions):
            continue
        taken.update(positions)
        kept.append(span)
    kept.sort(key=lambda s: s.token_range[0])
    return kept


def disambiguate(
    spans: list[CandidateSpan],
    emb: PoincareEmbedding,
    config: LinkerConfig | None = None,
) -> tuple[list[CandidateSpan], int]:
    """Iteratively refine candidate probabilities against the full-text embedding.

    Candidates without an embedding are dropped up front (a span losing every
    candidate is discarded). Returns the refined spans and the number of
    iterations performed.
    """
    config = config or LinkerConfig()
    priors: list[np.ndarray] = []
    vecs: list[np.ndarray] = []
    ids: list[list[str]] = []
    live: list[CandidateSpan] = []
    for span in spans:
        pairs = [(eid, p) for eid, p in span.candidates if eid in emb]
        if not pairs:
            continue
        prior = np.array([p for _, p in pairs], dtype=np.float64)
        total = prior.sum()
        if total <= 0:
            prior = np.full(len(pairs), 1.0 / len(pairs))
        else:
            prior = prior / total
        priors.append(prior)
        vecs.append(np.stack([emb.get(eid) for eid, _ in pairs]))
        ids.append([eid for eid, _ in pairs])
        live.append(span)
    if not live:
        return [], 0

    probs = [p.copy() for p in priors]
    n_spans = len(live)
    iterations = 0
    converged = False
    for _ in range(config.max_iters):
        iterations += 1
        span_sums = [probs[i] @ vecs[i] for i in range(n_spans)]
        total_sum = np.sum(span_sums, axis=0)
        delta = 0.0
        new_probs: list[np.ndarray] = []
        for i in range(n_spans):
            if config.include_self:
                center = total_sum / n_spans
            elif n_spans > 1:
                center = (total_sum - span_sums[i]) / (n_spans - 1)
            else:
                new_probs.append(probs[i])
                continue
            center = project_to_ball(center, emb.max_norm)
            dists = poincare_distance(vecs[i], np.broadcast_to(center, vecs[i].shape))
            with np.errstate(divide="ignore"):
                logw = np.log(priors[i]) - np.atleast_1d(dists) / config.tau_sim
            logw = logw - np.max(logw)
            w = np.exp(logw)
            p = w / w.sum()
            if not np.all(np.isfinite(p)):
                raise LinkError(
                    f"non-finite probabilities for span {live[i].surface!r} (candidates {ids[i]})"
                )
            delta = max(delta, float(np.max(np.abs(p - probs[i]))))
            new_probs.append(p)
        probs = new_probs
        if delta < config.epsilon:
            converged = True
            break

    out = []
    for i, span in enumerate(live):
        out.append(
            replace(
                span,
                candidates=list(zip(ids[i], (float(x) for x in probs[i]))),
                converged=converged,
            )
        )
    return out, iterations


def link_text(
    text: str,
    table: AliasTable,
    emb: PoincareEmbedding,
    config: LinkerConfig | None = None,
) -> LinkResult:
    """Generate candidates, disambiguate, and keep per-span winners above threshold."""
    config = config or LinkerConfig()
    spans = generate_candidates(text, table)
    if not spans:
        return LinkResult(text=text)
    refined, iterations = disambiguate(spans, emb, config)
    resolved: list[ResolvedSpan] = []
    for span in refined:
        best_id, best_p = sorted(span.candidates, key=lambda c: (-c[1], c[0]))[0]
        if best_p >= config.selection_threshold:
            resolved.append(ResolvedSpan(span.token_range, best_id, best_p))
    return LinkResult(text=text, spans=resolved, iterations_used=iterations)


@dataclass
class LinkSummary:
    records: int = 0
    spans: int = 0
    seconds: float = 0.0

    @property
    def texts_per_sec(self) -> float:
        return self.records / self.seconds if self.seconds > 0 else 0.0


def _link_record(line: str, lineno: int, text_col: int, table, emb, config) -> tuple[str, int]:
    cols = line.split("\t")
    if len(cols) <= text_col:
        raise LinkError(f"record {lineno}: expected at least {text_col + 1} columns, got {len(cols)}")
    result = link_text(cols[text_col], table, emb, config)
    payload = [
        {"id": s.entity_id, "p": s.probability, "start": s.token_range[0], "end": s.token_range[1]}
        for s in result.spans
    ]
    return line + "\t" + json.dumps(payload), len(payload)


def link_corpus(
    input_path: str | Path,
    output_path: str | Path,
    table: AliasTable,
    emb: PoincareEmbedding,
    config: LinkerConfig | None = None,
    shards: int = 1,
    text_col: int = 1,
) -> LinkSummary:
    """Annotate a TSV corpus with a JSON column of resolved spans.

    Records are processed in shard-parallel chunks and written back in input
    order, so the output is byte-identical for any shard count.
    """
    config = config or LinkerConfig()
    lines = Path(input_path).read_text(encoding="utf-8").splitlines()
    start = time.perf_counter()
    indexed = list(enumerate(lines, start=1))
    if shards <= 1 or len(indexed) < 2:
        results = [_link_record(line, no, text_col, table, emb, config) for no, line in indexed]
    else:
        chunks = np.array_split(np.arange(len(indexed)), shards)

        def work(chunk):
            return [
                _link_record(indexed[i][1], indexed[i][0], text_col, table, emb, config)
                for i in chunk
            ]

        with ThreadPoolExecutor(max_workers=shards) as pool:
            parts = list(pool.map(work, chunks))
        results = [item for part in parts for item in part]
    elapsed = time.perf_counter() - start
    with open(output_path, "w", encoding="utf-8") as fh:
        for line, _ in results:
            fh.write(line + "\n")
    return LinkSummary(
        records=len(results), spans=sum(n for _, n in results), seconds=elapsed
    )
