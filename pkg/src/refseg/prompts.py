"""MLLM prompt templates and parsers for the generated descriptions."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from .errors import EmptyExpression

INPUT_SLOT = "<input>"

ATTRIBUTE_TEMPLATE = (
    'Given an image and the corresponding referring expression "<input>", '
    "the entity referred by the referring expression is unique in the image. "
    "Please generate a caption with local concept to describe the referent object "
    "according to the referring expression. "
    'The format is "A photo of <object> (attribute)".'
)

SURROUNDING_TEMPLATE = (
    'Given an image and the corresponding referring expression "<input>", '
    "the entity referred by the referring expression is unique in the image. "
    "Please generate a caption to describe the referent object and its surrounding "
    "entities according to the referring expression. "
    'The format is "A photo of <object> surrounded by (entities)".'
)


class PromptKind(str, Enum):
    ATTRIBUTE = "attribute"
    SURROUNDING = "surrounding"

    @property
    def template(self) -> str:
        return ATTRIBUTE_TEMPLATE if self is PromptKind.ATTRIBUTE else SURROUNDING_TEMPLATE


def build_prompt(kind: PromptKind, expression: str) -> str:
    if not expression or not expression.strip():
        raise EmptyExpression("referring expression is empty")
    head, tail = PromptKind(kind).template.split(INPUT_SLOT)
    return head + expression + tail


_PREFIX = re.compile(r"\s*a\s+photo\s+of\s+", re.IGNORECASE)
_SURROUNDED = re.compile(r"\s+surrounded\s+by\s*(?=\()", re.IGNORECASE)
_ENTITY_SPLIT = re.compile(r",|\band\b", re.IGNORECASE)


def _balanced_group(text: str, start: int) -> tuple[str, int] | None:
    """Contents of the parenthesis group opening at ``text[start]``."""
    depth = 0
    for i in range(start, len(text)):
        ch = text[i]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                return text[start + 1 : i], i
    return None


def parse_attribute_description(raw: str) -> tuple[str, str, bool]:
    """Split ``A photo of X (Y)`` into ``(X, Y, False)``.

    Anything that does not fit returns ``(raw, raw, True)``.
    """
    m = _PREFIX.match(raw)
    if m:
        open_at = raw.find("(", m.end())
        if open_at != -1:
            obj = raw[m.end() : open_at].strip()
            group = _balanced_group(raw, open_at)
            if obj and group is not None:
                return obj, group[0].strip(), False
    return raw, raw, True


def split_entities(segment: str) -> list[str]:
    parts = (p.strip() for p in _ENTITY_SPLIT.split(segment))
    return [p for p in parts if p]


def parse_surrounding_description(raw: str) -> tuple[str, list[str], bool]:
    """Split ``A photo of X surrounded by (E1, E2 and E3)`` into ``(X, [E1, E2, E3], False)``."""
    m = _PREFIX.match(raw)
    if m:
        s = _SURROUNDED.search(raw, m.end())
        if s:
            obj = raw[m.end() : s.start()].strip()
            group = _balanced_group(raw, s.end())
            if obj and "(" not in obj and group is not None:
                return obj, split_entities(group[0]), False
    return raw, [], True


@dataclass(frozen=True)
class DescriptionBundle:
    t_van: str
    t_att: str
    t_sur: str
    object_phrase: str
    attribute_phrase: str
    entity_phrases: list[str] = field(default_factory=list)
    att_fallback: bool = False
    sur_fallback: bool = False

    @classmethod
    def from_replies(cls, expression: str, t_att: str, t_sur: str) -> DescriptionBundle:
        att_obj, attribute, att_fb = parse_attribute_description(t_att)
        sur_obj, entities, sur_fb = parse_surrounding_description(t_sur)
        # the attribute reply names the referent most directly; fall back to the
        # surrounding reply only when the attribute reply is malformed
        obj = sur_obj if att_fb and not sur_fb else att_obj
        return cls(
            t_van=expression,
            t_att=t_att,
            t_sur=t_sur,
            object_phrase=obj,
            attribute_phrase=attribute,
            entity_phrases=entities,
            att_fallback=att_fb,
            sur_fallback=sur_fb,
        )

    def to_json(self) -> dict:
        return {
            "t_van": self.t_van,
            "t_att": self.t_att,
            "t_sur": self.t_sur,
            "object_phrase": self.object_phrase,
            "attribute_phrase": self.attribute_phrase,
            "entity_phrases": list(self.entity_phrases),
            "parse_fallback_used": {"attribute": self.att_fallback, "surrounding": self.sur_fallback},
        }

    @classmethod
    def from_json(cls, d: dict) -> DescriptionBundle:
        fb = d.get("parse_fallback_used", {})
        return cls(
            t_van=d["t_van"],
            t_att=d["t_att"],
            t_sur=d["t_sur"],
            object_phrase=d["object_phrase"],
            attribute_phrase=d["attribute_phrase"],
            entity_phrases=list(d.get("entity_phrases", [])),
            att_fallback=bool(fb.get("attribute", False)),
            sur_fallback=bool(fb.get("surrounding", False)),
        )
