"""Entity knowledge base: records, alias lookup with popularity priors, enrichment.

KB file format: UTF-8 TSV with one entity per line,
``entity_id \\t name \\t description \\t alias1|alias2|... \\t popularity``.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)


class KBFormatError(Exception):
    """Raised for malformed or inconsistent KB files."""


def tokenize(text: str) -> list[str]:
    """Default surface tokenizer: lowercase, split on whitespace."""
    return text.lower().split()


@dataclass(frozen=True)
class EntityRecord:
    entity_id: str
    name: str
    description: str
    aliases: frozenset[str]  # lowercase surface strings, always includes the name
    popularity: float  # unnormalized prior mass, >= 0


@dataclass
class AliasTable:
    """Surface string -> candidates with per-surface normalized priors."""

    index: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    max_ngram: int = 1

    def lookup(self, surface: str) -> list[tuple[str, float]]:
        """Candidates for a lowercase surface, sorted by prior desc then entity_id.

        Unknown surfaces yield an empty list.
        """
        return list(self.index.get(surface, []))


class KnowledgeBase:
    def __init__(self, records: dict[str, EntityRecord], alias_table: AliasTable):
        self.records = records
        self.alias_table = alias_table

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.records

    def get(self, entity_id: str) -> EntityRecord:
        if entity_id not in self.records:
            raise KeyError(f"unknown entity_id {entity_id!r}")
        return self.records[entity_id]

    def enrich(self, entity_id: str) -> str:
        """Text representation of an entity: ``name, description`` (name alone
        when the description is empty)."""
        rec = self.get(entity_id)
        if rec.description:
            return f"{rec.name}, {rec.description}"
        return rec.name

    def lookup(self, surface: str) -> list[tuple[str, float]]:
        return self.alias_table.lookup(surface)


def build_alias_table(records: dict[str, EntityRecord]) -> AliasTable:
    """Index aliases and normalize popularity into per-surface priors.

    A surface whose candidates all have zero popularity gets a uniform prior
    (logged as a warning). Ties in prior are broken by entity_id so lookup
    order is deterministic.
    """
    by_surface: dict[str, list[str]] = {}
    max_ngram = 1
    for rec in records.values():
        for alias in rec.aliases:
            by_surface.setdefault(alias, []).append(rec.entity_id)
            max_ngram = max(max_ngram, len(tokenize(alias)))
    index: dict[str, list[tuple[str, float]]] = {}
    for surface, ids in by_surface.items():
        total = sum(records[eid].popularity for eid in ids)
        if total <= 0.0:
            logger.warning("surface %r has zero total popularity; using uniform prior", surface)
            pairs = [(eid, 1.0 / len(ids)) for eid in ids]
        else:
            pairs = [(eid, records[eid].popularity / total) for eid in ids]
        pairs.sort(key=lambda p: (-p[1], p[0]))
        index[surface] = pairs
    return AliasTable(index=index, max_ngram=max_ngram)


def load_kb(path: str | Path) -> KnowledgeBase:
    """Load and validate a KB TSV file.

    Raises KBFormatError with the offending line number for malformed rows
    and for duplicate entity_ids.
    """
    path = Path(path)
    records: dict[str, EntityRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise KBFormatError(f"{path}:{lineno}: expected 5 tab-separated columns, got {len(cols)}")
            entity_id, name, description, alias_field, pop_field = cols
            if not entity_id:
                raise KBFormatError(f"{path}:{lineno}: empty entity_id")
            if not name:
                raise KBFormatError(f"{path}:{lineno}: empty name for {entity_id!r}")
            if entity_id in records:
                raise KBFormatError(f"{path}:{lineno}: duplicate entity_id {entity_id!r}")
            try:
                popularity = float(pop_field)
            except ValueError as exc:
                raise KBFormatError(f"{path}:{lineno}: bad popularity {pop_field!r}") from exc
            if not popularity >= 0.0:
                raise KBFormatError(f"{path}:{lineno}: popularity must be >= 0, got {pop_field}")
            aliases = {a.strip().lower() for a in alias_field.split("|") if a.strip()}
            aliases.add(name.lower())
            records[entity_id] = EntityRecord(
                entity_id=entity_id,
                name=name,
                description=description,
                aliases=frozenset(aliases),
                popularity=popularity,
            )
    return KnowledgeBase(records, build_alias_table(records))
