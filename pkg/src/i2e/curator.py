"""Image-to-entities dataset curation.

Three passes over the corpus:

1. filter_pairs    -- drop NSFW / small / duplicate / out-of-bounds-text /
                      low image-text-similarity pairs, with a rejection ledger.
2. score_entities  -- keep linked entities whose enriched-text embedding is
                      cosine-similar enough to the image embedding.
3. build_i2e       -- drop entities with too few distinct images and emit the
                      images-per-entity histogram.

merge_i2t joins the curated examples back to the original pairs to build a
training corpus whose per-example text is entity text, original alt-text,
or a seeded 50/50 mix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .kb import KnowledgeBase, tokenize
from .store import VectorStore


HISTOGRAM_BUCKETS: list[tuple[int, int | None]] = [
    (0, 5),
    (5, 10),
    (10, 100),
    (100, 1000),
    (1000, 10000),
    (10000, None),
]


class CuratorError(Exception):
    """Raised for malformed pair files or unresolvable feature references."""


class TextStatBounds(BaseModel):
    """Optional text filters; every bound defaults to pass-through."""

    min_len: int | None = None
    max_len: int | None = None
    max_full_text_freq: int | None = None
    max_unigram_freq: float | None = None  # mean corpus frequency of the text's unigrams
    max_bigram_freq: float | None = None

    def active(self) -> bool:
        return any(v is not None for v in self.model_dump().values())


class CuratorConfig(BaseModel):
    pair_threshold: float = 0.24  # min image-text cosine to keep a pair
    entity_threshold: float = 0.24  # min image-entity cosine to keep a label
    min_dim: int = 200  # min shorter image dimension in pixels
    min_images_per_entity: int = 5
    text_bounds: TextStatBounds = TextStatBounds()


@dataclass
class ImageTextPair:
    image_id: str
    text: str
    min_dim_px: int
    nsfw: bool
    image_hash: str
    feature_key: str  # text feature key in the vector store


@dataclass
class I2EExample:
    image_id: str
    entity_labels: list[tuple[str, float]]  # (entity_id, image-entity cosine), desc by cosine
    text: str


@dataclass
class StageLedger:
    """Per-stage accounting: input == retained + sum(rejected) must hold."""

    stage: str
    input_count: int = 0
    retained: int = 0
    rejected: dict[str, int] = field(default_factory=dict)
    notes: dict[str, int] = field(default_factory=dict)  # non-conserving side counters

    def reject(self, reason: str) -> None:
        self.rejected[reason] = self.rejected.get(reason, 0) + 1

    def reconciles(self) -> bool:
        return self.input_count == self.retained + sum(self.rejected.values())

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "input": self.input_count,
            "retained": self.retained,
            "rejected": dict(sorted(self.rejected.items())),
            "notes": dict(sorted(self.notes.items())),
        }


def read_pairs(path: str | Path) -> list[ImageTextPair]:
    """Parse the pair TSV: image_id, text, min_dim_px, nsfw(0/1), image_hash, feature_key."""
    path = Path(path)
    pairs: list[ImageTextPair] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise CuratorError(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
            image_id, text, min_dim_s, nsfw_s, image_hash, feature_key = cols
            try:
                min_dim = int(min_dim_s)
                nsfw = bool(int(nsfw_s))
            except ValueError as exc:
                raise CuratorError(f"{path}:{lineno}: bad numeric field") from exc
            pairs.append(ImageTextPair(image_id, text, min_dim, nsfw, image_hash, feature_key))
    return pairs


def write_pairs(pairs: list[ImageTextPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(
                f"{p.image_id}\t{p.text}\t{p.min_dim_px}\t{int(p.nsfw)}\t{p.image_hash}\t{p.feature_key}\n"
            )


def _resolve(store: VectorStore, key: str, what: str) -> np.ndarray:
    try:
        return store.get(key)
    except KeyError as exc:
        raise CuratorError(f"unresolvable {what} feature reference {key!r}") from exc


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)))


def _text_stats(pairs: list[ImageTextPair]) -> list[tuple[int, int, float, float]]:
    """(length, full-text frequency, mean unigram freq, mean bigram freq) per pair."""
    full_counts: dict[str, int] = {}
    uni_counts: dict[str, int] = {}
    bi_counts: dict[tuple[str, str], int] = {}
    tokenized = [tokenize(p.text) for p in pairs]
    for p, toks in zip(pairs, tokenized):
        full_counts[p.text] = full_counts.get(p.text, 0) + 1
        for t in toks:
            uni_counts[t] = uni_counts.get(t, 0) + 1
        for a, b in zip(toks, toks[1:]):
            bi_counts[(a, b)] = bi_counts.get((a, b), 0) + 1
    stats = []
    for p, toks in zip(pairs, tokenized):
        uni = float(np.mean([uni_counts[t] for t in toks])) if toks else 0.0
        bigrams = list(zip(toks, toks[1:]))
        bi = float(np.mean([bi_counts[g] for g in bigrams])) if bigrams else 0.0
        stats.append((len(p.text), full_counts[p.text], uni, bi))
    return stats


def filter_pairs(
    pairs: list[ImageTextPair],
    config: CuratorConfig,
    store: VectorStore,
) -> tuple[list[ImageTextPair], StageLedger]:
    """Apply the pair filters in fixed order: nsfw, size, duplicate, text, similarity."""
    ledger = StageLedger("filter_pairs", input_count=len(pairs))
    bounds = config.text_bounds
    stats = _text_stats(pairs) if bounds.active() else None
    seen_hashes: set[str] = set()
    retained: list[ImageTextPair] = []
    for i, pair in enumerate(pairs):
        if pair.nsfw:
            ledger.reject("nsfw")
            continue
        if pair.min_dim_px < config.min_dim:
            ledger.reject("size")
            continue
        if pair.image_hash in seen_hashes:
            ledger.reject("duplicate")
            continue
        seen_hashes.add(pair.image_hash)
        if stats is not None:
            length, full_freq, uni, bi = stats[i]
            if (
                (bounds.min_len is not None and length < bounds.min_len)
                or (bounds.max_len is not None and length > bounds.max_len)
                or (bounds.max_full_text_freq is not None and full_freq > bounds.max_full_text_freq)
                or (bounds.max_unigram_freq is not None and uni > bounds.max_unigram_freq)
                or (bounds.max_bigram_freq is not None and bi > bounds.max_bigram_freq)
            ):
                ledger.reject("text")
                continue
        cos = _cosine(_resolve(store, pair.image_id, "image"), _resolve(store, pair.feature_key, "text"))
        if cos < config.pair_threshold:
            ledger.reject("similarity")
            continue
        retained.append(pair)
    ledger.retained = len(retained)
    return retained, ledger


def parse_linked_line(line: str, lineno: int) -> tuple[ImageTextPair, list[dict]]:
    cols = line.split("\t")
    if len(cols) != 7:
        raise CuratorError(f"linked record {lineno}: expected 7 columns, got {len(cols)}")
    pair = ImageTextPair(cols[0], cols[1], int(cols[2]), bool(int(cols[3])), cols[4], cols[5])
    try:
        spans = json.loads(cols[6])
    except json.JSONDecodeError as exc:
        raise CuratorError(f"linked record {lineno}: bad span JSON") from exc
    return pair, spans


def score_entities(
    linked_path: str | Path,
    kb: KnowledgeBase,
    store: VectorStore,
    config: CuratorConfig,
) -> tuple[list[I2EExample], StageLedger]:
    """Per linked record, keep entities whose text embedding matches the image.

    The entity's text representation ("name, description") must have a vector
    in the store under the entity_id; entities without one are skipped and
    counted, records with no surviving entity are dropped.
    """
    ledger = StageLedger("score_entities")
    examples: list[I2EExample] = []
    entities_kept = 0
    entities_below = 0
    entities_missing = 0
    with open(linked_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            ledger.input_count += 1
            pair, spans = parse_linked_line(line, lineno)
            image_vec = _resolve(store, pair.image_id, "image")
            labels: list[tuple[str, float]] = []
            seen: set[str] = set()
            for span in spans:
                eid = span["id"]
                if eid in seen:
                    continue
                seen.add(eid)
                if eid not in store:
                    entities_missing += 1
                    continue
                cos = _cosine(image_vec, store.get(eid))
                if cos >= config.entity_threshold:
                    labels.append((eid, cos))
                    entities_kept += 1
                else:
                    entities_below += 1
            if not labels:
                ledger.reject("no_entities")
                continue
            labels.sort(key=lambda x: (-x[1], x[0]))
            examples.append(I2EExample(pair.image_id, labels, pair.text))
    ledger.retained = len(examples)
    ledger.notes = {
        "entities_kept": entities_kept,
        "entities_below_threshold": entities_below,
        "entities_missing_embedding": entities_missing,
    }
    return examples, ledger


@dataclass
class EntityHistogram:
    """Images-per-entity distribution over the fixed bucket ranges."""

    counts: list[int] = field(default_factory=lambda: [0] * len(HISTOGRAM_BUCKETS))

    @classmethod
    def from_image_counts(cls, images_per_entity: dict[str, int]) -> "EntityHistogram":
        hist = cls()
        for count in images_per_entity.values():
            for b, (lo, hi) in enumerate(HISTOGRAM_BUCKETS):
                if count >= lo and (hi is None or count < hi):
                    hist.counts[b] += 1
                    break
        return hist

    def rows(self) -> list[tuple[int, int | None, int]]:
        return [(lo, hi, c) for (lo, hi), c in zip(HISTOGRAM_BUCKETS, self.counts)]


def write_histogram(hist: EntityHistogram, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lo, hi, count in hist.rows():
            fh.write(f"{lo}\t{hi if hi is not None else 'inf'}\t{count}\n")


def build_i2e(
    examples: list[I2EExample],
    config: CuratorConfig,
) -> tuple[list[I2EExample], EntityHistogram, StageLedger]:
    """Remove entities with fewer than min_images_per_entity distinct images.

    The histogram is computed before removal so the lowest bucket records what
    was dropped. Examples whose label set empties out are dropped and counted.
    """
    ledger = StageLedger("build_i2e", input_count=len(examples))
    images_per_entity: dict[str, set[str]] = {}
    for ex in examples:
        for eid, _ in ex.entity_labels:
            images_per_entity.setdefault(eid, set()).add(ex.image_id)
    counts = {eid: len(imgs) for eid, imgs in images_per_entity.items()}
    hist = EntityHistogram.from_image_counts(counts)
    keep_entities = {eid for eid, c in counts.items() if c >= config.min_images_per_entity}
    out: list[I2EExample] = []
    for ex in examples:
        labels = [(eid, cos) for eid, cos in ex.entity_labels if eid in keep_entities]
        if labels:
            out.append(I2EExample(ex.image_id, labels, ex.text))
        else:
            ledger.reject("no_entities_after_min_images")
    ledger.retained = len(out)
    ledger.notes = {
        "entities_kept": len(keep_entities),
        "entities_removed": len(counts) - len(keep_entities),
    }
    return out, hist, ledger


def write_i2e(examples: list[I2EExample], path: str | Path) -> None:
    """I2E TSV: image_id, entity_id:cosine pairs joined by '|', retained text."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            labels = "|".join(f"{eid}:{cos:.6f}" for eid, cos in ex.entity_labels)
            fh.write(f"{ex.image_id}\t{labels}\t{ex.text}\n")


def read_i2e(path: str | Path) -> list[I2EExample]:
    examples: list[I2EExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise CuratorError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
            labels = []
            for part in cols[1].split("|"):
                eid, _, cos = part.rpartition(":")
                labels.append((eid, float(cos)))
            examples.append(I2EExample(cols[0], labels, cols[2]))
    return examples


@dataclass
class CorpusRow:
    """One training example: entity labels plus a resolved text feature key."""

    image_id: str
    entity_labels: list[tuple[str, float]]
    text_key: str
    text_source: str  # "entity" or "alt"
    text: str


def merge_i2t(
    examples: list[I2EExample],
    pairs: list[ImageTextPair],
    kb: KnowledgeBase,
    mode: str = "i2e-only",
    seed: int = 0,
) -> list[CorpusRow]:
    """Build the training corpus from curated examples and their source pairs.

    mode "i2e-only": text is always the best entity's enriched string;
    mode "i2t-only": text is always the original alt-text;
    mode "mix": a seeded fair coin picks one of the two per example.
    """
    if mode not in ("i2e-only", "i2t-only", "mix"):
        raise ValueError(f"unknown merge mode {mode!r}")
    by_key = {(p.image_id, p.text): p.feature_key for p in pairs}
    rng = np.random.default_rng(seed)
    rows: list[CorpusRow] = []
    for ex in examples:
        key = (ex.image_id, ex.text)
        if key not in by_key:
            raise CuratorError(f"image {ex.image_id!r} not found in pairs (text mismatch?)")
        best_id = sorted(ex.entity_labels, key=lambda x: (-x[1], x[0]))[0][0]
        use_entity = mode == "i2e-only" or (mode == "mix" and rng.random() < 0.5)
        if use_entity:
            rows.append(CorpusRow(ex.image_id, ex.entity_labels, best_id, "entity", kb.enrich(best_id)))
        else:
            rows.append(CorpusRow(ex.image_id, ex.entity_labels, by_key[key], "alt", ex.text))
    return rows


def write_corpus(rows: list[CorpusRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            labels = "|".join(f"{eid}:{cos:.6f}" for eid, cos in row.entity_labels)
            fh.write(f"{row.image_id}\t{labels}\t{row.text_key}\t{row.text_source}\t{row.text}\n")


def read_corpus(path: str | Path) -> list[CorpusRow]:
    rows: list[CorpusRow] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise CuratorError(f"{path}:{lineno}: expected 5 columns, got {len(cols)}")
            labels = []
            for part in cols[1].split("|"):
                eid, _, cos = part.rpartition(":")
                labels.append((eid, float(cos)))
            rows.append(CorpusRow(cols[0], labels, cols[2], cols[3], cols[4]))
    return rows
