"""Agent policies: who says what, and how an agent reacts to a mismatch."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence

from .codec import RawMessage, format_schema
from .core import AgentState, Condition, InteractionRecord, Lexicon, NameId


_UNCHECKED = object()


class PolicyError(RuntimeError):
    """A policy could not produce a message; the run is aborted."""


class ScriptExhausted(PolicyError, IndexError):
    pass


class AdoptionError(RuntimeError):
    """apply_adoption was called outside its precondition (an engine bug)."""


# Lowercase filler so noise text can never contain a lexicon label.
FILLER_WORDS = (
    "i", "think", "we", "should", "call", "it", "maybe", "the", "name", "that",
    "sounds", "good", "to", "me", "let's", "pick", "something", "for", "this",
    "object", "hmm", "okay", "agree", "perhaps", "our", "choice", "could", "be",
    "one", "of", "those", "options", "really", "nice", "partner", "say",
)


@dataclass(frozen=True)
class MockPolicyParams:
    compliance_prob: float = 1.0
    verbosity_tokens: int = 8
    noise_mentions_name_prob: float = 0.0
    # Added to compliance_prob on the reminded retry (clipped to 1).
    retry_compliance_boost: float = 0.0
    # Filler words emitted before a compliant schema tag.
    schema_preamble_tokens: int = 0
    # Chance that free text naming its pick mentions a different, random name
    # first; the first-occurrence decoder then reads the wrong name.
    distractor_prob: float = 0.0

    def __post_init__(self):
        for name in ("compliance_prob", "noise_mentions_name_prob", "retry_compliance_boost",
                     "distractor_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {v}")
        if self.verbosity_tokens < 1:
            raise ValueError("verbosity_tokens must be >= 1")
        if self.schema_preamble_tokens < 0:
            raise ValueError("schema_preamble_tokens must be >= 0")


def choose_proposal_name(state: AgentState, rng: Optional[random.Random] = None) -> NameId:
    """Windowed majority of partner names, ties to the most recent; else current_name."""
    names = [r.partner_name for r in state.memory if r.partner_name is not None]
    if not names:
        return state.current_name
    counts = Counter(names)
    top = max(counts.values())
    for name in reversed(names):
        if counts[name] == top:
            return name
    raise AssertionError("unreachable")


def _filler(n: int, rng: random.Random) -> List[str]:
    return [rng.choice(FILLER_WORDS) for _ in range(n)]


def _free_text(n_tokens: int, mention: Optional[NameId], lexicon: Lexicon, rng: random.Random,
               distractor_prob: float = 0.0) -> str:
    words = _filler(n_tokens, rng)
    if mention is None:
        return " ".join(words)
    if n_tokens >= 2 and distractor_prob and rng.random() < distractor_prob:
        other = rng.randint(1, lexicon.size - 1)
        other += other >= mention
        first, second = sorted(rng.sample(range(n_tokens), 2))
        words[first] = lexicon.label(other)
        words[second] = lexicon.label(mention)
    else:
        words[rng.randrange(n_tokens)] = lexicon.label(mention)
    return " ".join(words)


def mock_propose(
    state: AgentState,
    condition: Condition,
    lexicon: Lexicon,
    params: MockPolicyParams,
    rng: random.Random,
    compliance_prob: Optional[float] = None,
) -> RawMessage:
    p = params.compliance_prob if compliance_prob is None else compliance_prob
    n = params.verbosity_tokens
    condition = Condition(condition)
    if condition is Condition.SCHEMA:
        chosen = choose_proposal_name(state, rng)
        if rng.random() < p:
            tag = format_schema(chosen).text
            if params.schema_preamble_tokens:
                tag = " ".join(_filler(params.schema_preamble_tokens, rng) + [tag])
            return RawMessage.of(tag)
        mention = chosen if rng.random() < params.noise_mentions_name_prob else None
        return RawMessage.of(_free_text(n, mention, lexicon, rng, params.distractor_prob))
    if condition is Condition.NL_SW:
        chosen = choose_proposal_name(state, rng)
        mention = chosen if rng.random() < p else None
        return RawMessage.of(_free_text(n, mention, lexicon, rng, params.distractor_prob))
    # NL: no memory and no persistent name influence the proposal
    mention = rng.randint(1, lexicon.size) if rng.random() < p else None
    return RawMessage.of(_free_text(n, mention, lexicon, rng))


def scripted_propose(script: Sequence[NameId], round: int) -> RawMessage:
    if not 0 <= round < len(script):
        raise ScriptExhausted(f"round {round} outside script of length {len(script)}")
    return format_schema(script[round])


def apply_adoption(
    state: AgentState,
    partner_name: Optional[NameId],
    alpha: float,
    rng: random.Random,
    own_name: Any = _UNCHECKED,
) -> bool:
    """Lose-shift: with probability ``alpha`` take on the partner's decoded name.

    ``own_name`` is the agent's own decoded name this round; pass it to have
    the mismatch precondition checked.
    """
    if partner_name is None:
        raise AdoptionError("cannot adopt an undecoded name")
    if own_name is not _UNCHECKED and own_name == partner_name:
        raise AdoptionError("adoption requires a mismatch")
    if rng.random() < alpha:
        state.current_name = partner_name
        state.last_emitted = partner_name
        return True
    return False


class AgentPolicy:
    """Base policy. Subclasses implement ``propose``.

    ``retry_propose`` is only called under the Schema condition, once, after
    a non-compliant first reply.
    """

    kind = "abstract"

    def propose(self, state: AgentState, condition: Condition, lexicon: Lexicon,
                rng: random.Random, round_index: int = 0) -> RawMessage:
        raise NotImplementedError

    def retry_propose(self, state: AgentState, condition: Condition, lexicon: Lexicon,
                      rng: random.Random, round_index: int = 0) -> RawMessage:
        return self.propose(state, condition, lexicon, rng, round_index)

    def on_result(self, state: AgentState, record: InteractionRecord) -> AgentState:
        state.remember(record)
        return state


class MockPolicy(AgentPolicy):
    kind = "mock"

    def __init__(self, params: Optional[MockPolicyParams] = None):
        self.params = params or MockPolicyParams()

    def propose(self, state, condition, lexicon, rng, round_index=0):
        return mock_propose(state, condition, lexicon, self.params, rng)

    def retry_propose(self, state, condition, lexicon, rng, round_index=0):
        p = min(1.0, self.params.compliance_prob + self.params.retry_compliance_boost)
        return mock_propose(state, condition, lexicon, self.params, rng, compliance_prob=p)

    def __repr__(self):
        return f"MockPolicy({asdict(self.params)})"


class ScriptedPolicy(AgentPolicy):
    """Emits a fixed schema tag per round; used as an oracle agent in tests."""

    kind = "scripted"

    def __init__(self, script: Sequence[NameId], repeat: bool = False):
        self.script = list(script)
        self.repeat = repeat

    def propose(self, state, condition, lexicon, rng, round_index=0):
        if self.repeat:
            round_index %= len(self.script)
        return scripted_propose(self.script, round_index)


def policy_from_entry(entry: Dict[str, Any], **llm_kwargs: Any) -> AgentPolicy:
    kind = entry["kind"]
    if kind == "mock":
        return MockPolicy(MockPolicyParams(**entry.get("params", {})))
    if kind == "scripted":
        return ScriptedPolicy(entry["script"], entry.get("repeat", False))
    if kind == "llm":
        from .llm import LLMPolicy

        return LLMPolicy.from_entry(entry, **llm_kwargs)
    raise ValueError(f"unknown policy kind {kind!r}")
