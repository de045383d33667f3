from __future__ import annotations

import re

from ..prompts import parse_surrounding_description

_ARTICLE = re.compile(r"^(?:a|an|the)\s+", re.IGNORECASE)
_SPLIT = re.compile(r",|;|\s+and\s+", re.IGNORECASE)


def strip_article(phrase: str) -> str:
    return _ARTICLE.sub("", phrase.strip(), count=1).strip()


def dedupe(phrases: list[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for p in phrases:
        k = p.casefold()
        if p and k not in seen:
            seen.add(k)
            out.append(p)
    return out


def extract_noun_phrases(text: str) -> list[str]:
    """Deterministic baseline chunker.

    A reply in the surrounding-description format contributes its entity list;
    free text is split on commas, semicolons and "and". Leading articles are
    dropped and duplicates removed case-insensitively, keeping first order.
    """
    if not text.strip():
        return []
    _, entities, fallback = parse_surrounding_description(text)
    pieces = entities if not fallback else _SPLIT.split(text)
    return dedupe([strip_article(p) for p in pieces])

