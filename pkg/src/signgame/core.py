"""Domain types, run configuration and seeded random streams.

Everything stochastic in a run draws from a named substream derived from the
run's root seed, so adding a new consumer never shifts the draws seen by an
existing one.
"""

from __future__ import annotations

import hashlib
import random
from collections import deque
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Deque, Dict, List, Optional, Tuple

NameId = int
DecodedName = Optional[int]

SEED_MAX = 2**64 - 1


class Condition(str, Enum):
    NL = "NL"
    NL_SW = "NL_SW"
    SCHEMA = "SCHEMA"


class PairingMode(str, Enum):
    SINGLE_PAIR = "single_pair"
    FULL_MATCHING = "full_matching"


class AdoptionMode(str, Enum):
    BILATERAL_INDEPENDENT = "bilateral_independent"
    SPEAKER_HEARER = "speaker_hearer"


class FallbackMode(str, Enum):
    RANDOM_NAME = "random_name"
    NONE = "none"


class AgreementMetric(str, Enum):
    PAIRWISE = "pairwise"
    MODAL = "modal"


class TokenAccounting(str, Enum):
    OUTPUT_ONLY = "output_only"
    OUTPUT_PLUS_PROMPT = "output_plus_prompt"


class ConfigError(ValueError):
    """A configuration invariant was violated.

    ``code`` is a stable, machine-readable name such as ``nl-requires-k0``.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


@dataclass(frozen=True)
class Lexicon:
    names: Tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ConfigError("lexicon-too-small", f"need at least 2 names, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("lexicon-duplicate-label")
        if any(not n or any(c.isspace() for c in n) for n in self.names):
            raise ConfigError("lexicon-bad-label")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def size(self) -> int:
        return len(self.names)

    def label(self, k: NameId) -> str:
        if not 1 <= k <= len(self.names):
            raise IndexError(f"name index {k} outside 1..{len(self.names)}")
        return self.names[k - 1]

    def __contains__(self, k: object) -> bool:
        return isinstance(k, int) and 1 <= k <= len(self.names)


def make_lexicon(m: int) -> Lexicon:
    if m < 2:
        raise ConfigError("lexicon-too-small", f"M must be >= 2, got {m}")
    return Lexicon(tuple(f"C{k}" for k in range(1, m + 1)))


def derive_rng(seed: int, stream_label: str) -> random.Random:
    """Return an independent deterministic stream keyed by ``(seed, stream_label)``."""
    digest = hashlib.sha256(f"{seed}\x1f{stream_label}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest, "big"))


@dataclass(frozen=True)
class InteractionRecord:
    round: int
    partner_id: int
    partner_name: DecodedName
    partner_compliant: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "partner_id": self.partner_id,
            "partner_name": self.partner_name,
            "partner_compliant": self.partner_compliant,
        }


@dataclass
class AgentState:
    agent_id: int
    current_name: NameId
    memory_window: int = 0
    last_emitted: DecodedName = None
    memory: Deque[InteractionRecord] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.memory is None:
            self.memory = deque(maxlen=self.memory_window)
        elif self.memory.maxlen != self.memory_window:
            self.memory = deque(self.memory, maxlen=self.memory_window)

    def remember(self, record: InteractionRecord) -> None:
        if record.partner_id == self.agent_id:
            raise ValueError("an agent cannot record an interaction with itself")
        # deque(maxlen=0) silently drops appends, which is exactly K = 0
        self.memory.append(record)

    def summary(self) -> Dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "current_name": self.current_name,
            "last_emitted": self.last_emitted,
            "memory": [r.to_dict() for r in self.memory],
        }


# Roster entries are plain dicts so they serialize unchanged:
#   {"kind": "mock", "params": {...}}
#   {"kind": "scripted", "script": [1, 1, 2], "repeat": false}
#   {"kind": "llm", "endpoint": "phi3"}
ROSTER_KINDS = ("mock", "scripted", "llm")


@dataclass(frozen=True)
class GameConfig:
    n_agents: int
    lexicon_size: int
    rounds: int
    memory_window: int
    lose_shift_alpha: float
    condition: Condition
    seed: int
    agent_roster: Tuple[Dict[str, Any], ...]
    pairing_mode: PairingMode = PairingMode.SINGLE_PAIR
    adoption_mode: AdoptionMode = AdoptionMode.BILATERAL_INDEPENDENT
    fallback_mode: FallbackMode = FallbackMode.RANDOM_NAME
    agreement_metric: AgreementMetric = AgreementMetric.PAIRWISE
    token_accounting: TokenAccounting = TokenAccounting.OUTPUT_ONLY
    endpoints: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    decoding: Dict[str, Any] = field(default_factory=dict)
    templates_dir: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = [dict(e) for e in value]
            elif isinstance(value, dict):
                value = {k: dict(v) if isinstance(v, dict) else v for k, v in value.items()}
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GameConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError("unknown-field", ", ".join(sorted(unknown)))
        missing = {"n_agents", "lexicon_size", "rounds", "memory_window",
                   "lose_shift_alpha", "condition", "seed", "agent_roster"} - set(data)
        if missing:
            raise ConfigError("missing-field", ", ".join(sorted(missing)))
        kw = dict(data)
        enums = {
            "condition": (Condition, "unknown-condition"),
            "pairing_mode": (PairingMode, "unknown-pairing-mode"),
            "adoption_mode": (AdoptionMode, "unknown-adoption-mode"),
            "fallback_mode": (FallbackMode, "unknown-fallback-mode"),
            "agreement_metric": (AgreementMetric, "unknown-agreement-metric"),
            "token_accounting": (TokenAccounting, "unknown-token-accounting"),
        }
        for name, (enum_cls, code) in enums.items():
            if name in kw:
                try:
                    kw[name] = enum_cls(kw[name])
                except ValueError:
                    raise ConfigError(code, repr(kw[name])) from None
        if not isinstance(kw["agent_roster"], (list, tuple)):
            raise ConfigError("bad-roster-entry", "agent_roster must be a list")
        kw["agent_roster"] = tuple(expand_roster(kw["agent_roster"], kw["n_agents"]))
        return cls(**kw)

    def replace(self, **changes: Any) -> "GameConfig":
        data = self.to_dict()
        data.update({k: v.value if isinstance(v, Enum) else v for k, v in changes.items()})
        return GameConfig.from_dict(data)


def expand_roster(entries: List[Dict[str, Any]], n_agents: int) -> List[Dict[str, Any]]:
    """Expand shorthand roster entries into exactly one entry per agent.

    An entry may carry ``"count": <int>``, ``"count": "rest"`` (fill whatever
    is left) or ``"fraction": <float>`` (rounded share of ``n_agents``).
    Entries without either stand for a single agent.
    """
    if not any(isinstance(e, dict) and ("count" in e or "fraction" in e) for e in entries):
        return [dict(e) if isinstance(e, dict) else e for e in entries]
    out: List[Dict[str, Any]] = []
    rest_at: Optional[int] = None
    for e in entries:
        if not isinstance(e, dict):
            raise ConfigError("bad-roster-entry", repr(e))
        base = {k: v for k, v in e.items() if k not in ("count", "fraction")}
        if e.get("count") == "rest":
            if rest_at is not None:
                raise ConfigError("bad-roster-entry", "only one 'rest' entry allowed")
            rest_at = len(out)
            out.append(base)
            continue
        if "fraction" in e:
            count = int(round(float(e["fraction"]) * n_agents))
        else:
            count = int(e.get("count", 1))
        if count < 0:
            raise ConfigError("bad-roster-entry", f"negative count {count}")
        out.extend(dict(base) for _ in range(count))
    if rest_at is not None:
        fill = n_agents - (len(out) - 1)
        if fill < 0:
            raise ConfigError("roster-size-mismatch", "explicit counts exceed n_agents")
        template = out.pop(rest_at)
        out[rest_at:rest_at] = [dict(template) for _ in range(fill)]
    return out


def _is_prob(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and 0.0 <= x <= 1.0


def _is_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate_config(cfg: GameConfig) -> GameConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise ConfigError."""
    if not _is_int(cfg.n_agents) or cfg.n_agents < 2:
        raise ConfigError("n-too-small", f"N must be an integer >= 2, got {cfg.n_agents!r}")
    if not _is_int(cfg.lexicon_size) or cfg.lexicon_size < 2:
        raise ConfigError("lexicon-too-small", f"M must be an integer >= 2, got {cfg.lexicon_size!r}")
    if not _is_int(cfg.rounds) or cfg.rounds < 1:
        raise ConfigError("rounds-too-small", f"T must be an integer >= 1, got {cfg.rounds!r}")
    if not _is_int(cfg.memory_window) or cfg.memory_window < 0:
        raise ConfigError("k-negative", f"K must be an integer >= 0, got {cfg.memory_window!r}")
    if not _is_prob(cfg.lose_shift_alpha):
        raise ConfigError("alpha-out-of-range", f"alpha must lie in [0,1], got {cfg.lose_shift_alpha!r}")
    if cfg.condition is Condition.NL and cfg.memory_window != 0:
        raise ConfigError("nl-requires-k0", f"NL runs without memory, got K={cfg.memory_window}")
    if cfg.condition is not Condition.NL and cfg.memory_window < 1:
        raise ConfigError("memory-requires-k1", f"{cfg.condition.value} needs K >= 1")
    if cfg.pairing_mode is PairingMode.FULL_MATCHING and cfg.n_agents % 2:
        raise ConfigError("odd-n-full-matching", f"full_matching needs even N, got {cfg.n_agents}")
    if not _is_int(cfg.seed) or not 0 <= cfg.seed <= SEED_MAX:
        raise ConfigError("seed-out-of-range", f"seed must be a 64-bit unsigned integer, got {cfg.seed!r}")
    if len(cfg.agent_roster) != cfg.n_agents:
        raise ConfigError("roster-size-mismatch",
                          f"roster has {len(cfg.agent_roster)} entries for N={cfg.n_agents}")
    for i, entry in enumerate(cfg.agent_roster):
        _validate_roster_entry(i, entry, cfg)
    return cfg


def _validate_roster_entry(i: int, entry: Any, cfg: GameConfig) -> None:
    if not isinstance(entry, dict) or entry.get("kind") not in ROSTER_KINDS:
        raise ConfigError("bad-roster-entry", f"agent {i}: {entry!r}")
    kind = entry["kind"]
    if kind == "mock":
        params = entry.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("bad-mock-params", f"agent {i}: params must be an object")
        for key in ("compliance_prob", "noise_mentions_name_prob", "retry_compliance_boost",
                    "distractor_prob"):
            if key in params and not _is_prob(params[key]):
                raise ConfigError("bad-mock-params", f"agent {i}: {key}={params[key]!r}")
        for key, lo in (("verbosity_tokens", 1), ("schema_preamble_tokens", 0)):
            if key in params and (not _is_int(params[key]) or params[key] < lo):
                raise ConfigError("bad-mock-params", f"agent {i}: {key}={params[key]!r}")
    elif kind == "scripted":
        script = entry.get("script")
        if not isinstance(script, list) or not script:
            raise ConfigError("bad-roster-entry", f"agent {i}: scripted agents need a nonempty script")
        if any(not _is_int(k) or not 1 <= k <= cfg.lexicon_size for k in script):
            raise ConfigError("script-out-of-lexicon", f"agent {i}: {script!r}")
    else:
        if entry.get("endpoint") not in cfg.endpoints:
            raise ConfigError("unknown-endpoint", f"agent {i}: {entry.get('endpoint')!r}")
