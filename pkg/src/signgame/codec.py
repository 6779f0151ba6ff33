"""Message encoding and decoding.

The schema tag is the public wire contract between agents::

    @say {name: Ck}

exactly one space after ``@say`` and an optional single space after
``name:``. Text around the tag is tolerated; the tag itself is matched
case-sensitively and the leftmost occurrence wins.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional

from .core import DecodedName, FallbackMode, Lexicon, NameId

SCHEMA_LINE = "@say {name: Ck}"

STAGES = ("schema_first_try", "schema_retry", "free_text", "random_fallback", "none")
COMPLIANT_STAGES = frozenset({"schema_first_try", "schema_retry"})

# Leading zeros are not part of the grammar; "C0" parses but is out of range.
_SCHEMA_RE = re.compile(r"@say \{name: ?C(0|[1-9][0-9]*)\}")
_FREE_TEXT_RE = re.compile(r"(?<![^\W_])C([0-9]+)(?![^\W_])")
_MAX_INDEX_DIGITS = 9


class SchemaViolation(ValueError):
    REASONS = ("no_tag", "bad_payload", "index_out_of_range")

    def __init__(self, reason: str, text: str = ""):
        assert reason in self.REASONS
        self.reason = reason
        super().__init__(f"{reason}: {text[:80]!r}")


@dataclass(frozen=True)
class RawMessage:
    text: str
    token_count: int
    source: str = "whitespace"  # whitespace | endpoint | estimated
    prompt_tokens: int = 0
    latency_s: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "text": self.text,
            "tokens": self.token_count,
            "source": self.source,
            "prompt_tokens": self.prompt_tokens,
        }
        if self.latency_s is not None:
            d["latency_s"] = self.latency_s
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RawMessage":
        return cls(d["text"], d["tokens"], d.get("source", "whitespace"),
                   d.get("prompt_tokens", 0), d.get("latency_s"))

    @classmethod
    def of(cls, text: str) -> "RawMessage":
        return cls(text, count_tokens(text))


@dataclass(frozen=True)
class DecodeOutcome:
    name: DecodedName
    compliant: bool
    stage: str
    extra_tokens: int = 0
    retry_message: Optional[RawMessage] = None

    def __post_init__(self):
        assert self.stage in STAGES, self.stage
        assert self.compliant == (self.stage in COMPLIANT_STAGES)
        assert (self.stage == "none") == (self.name is None)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "decoded": self.name,
            "compliant": self.compliant,
            "stage": self.stage,
            "extra_tokens": self.extra_tokens,
            "retry": self.retry_message.to_dict() if self.retry_message else None,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "DecodeOutcome":
        retry = RawMessage.from_dict(d["retry"]) if d.get("retry") else None
        return cls(d["decoded"], d["compliant"], d["stage"], d.get("extra_tokens", 0), retry)


def count_tokens(text: str) -> int:
    return len(text.split())


def format_schema(name: NameId) -> RawMessage:
    return RawMessage.of(f"@say {{name: C{name}}}")


def parse_schema(msg: RawMessage, lexicon: Lexicon) -> NameId:
    """Extract the name from the leftmost schema tag or raise SchemaViolation."""
    text = msg.text
    m = _SCHEMA_RE.search(text)
    if m is None:
        raise SchemaViolation("bad_payload" if "@say" in text else "no_tag", text)
    digits = m.group(1)
    if len(digits) > _MAX_INDEX_DIGITS:
        raise SchemaViolation("index_out_of_range", text)
    k = int(digits)
    if k not in lexicon:
        raise SchemaViolation("index_out_of_range", text)
    return k


def decode_free_text(msg: RawMessage, lexicon: Lexicon) -> DecodedName:
    """First standalone lexicon label in reading order, or None."""
    for m in _FREE_TEXT_RE.finditer(msg.text):
        digits = m.group(1)
        if digits[0] == "0" or len(digits) > _MAX_INDEX_DIGITS:
            continue
        k = int(digits)
        if k in lexicon:
            return k
    return None


def enforce_schema(
    first: RawMessage,
    retry_provider: Callable[[], RawMessage],
    lexicon: Lexicon,
    fallback_mode: FallbackMode,
    rng: random.Random,
) -> DecodeOutcome:
    """Run the compliance state machine for one Schema-condition message.

    Parse the first reply; on failure ask ``retry_provider`` for exactly one
    reminded reply and parse that; failing that, scan the retry as free text;
    failing that, either draw a uniform fallback name from ``rng`` or give up.
    """
    try:
        return DecodeOutcome(parse_schema(first, lexicon), True, "schema_first_try")
    except SchemaViolation:
        pass
    retry = retry_provider()
    extra = retry.token_count
    try:
        return DecodeOutcome(parse_schema(retry, lexicon), True, "schema_retry", extra, retry)
    except SchemaViolation:
        pass
    name = decode_free_text(retry, lexicon)
    if name is not None:
        return DecodeOutcome(name, False, "free_text", extra, retry)
    if FallbackMode(fallback_mode) is FallbackMode.RANDOM_NAME:
        return DecodeOutcome(rng.randint(1, lexicon.size), False, "random_fallback", extra, retry)
    return DecodeOutcome(None, False, "none", extra, retry)


def decode_plain(msg: RawMessage, lexicon: Lexicon) -> DecodeOutcome:
    """Decode an NL / NL-SW message: free-text scan only, no retry."""
    name = decode_free_text(msg, lexicon)
    return DecodeOutcome(name, False, "free_text" if name is not None else "none")
