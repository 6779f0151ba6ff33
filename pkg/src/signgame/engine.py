"""The round loop: pairing, proposals, decoding, lose-shift adoption, memory.

A run is strictly sequential. Stochastic draws come from labeled substreams
of the run seed:

    init          initial current_name per agent
    pairing       pair selection
    adoption      lose-shift coins
    fallback      random fallback names under the Schema condition
    policy/<i>    everything agent i's policy samples
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import IO, Any, Dict, Iterable, List, Optional, Sequence, Tuple

from .agents import AgentPolicy, PolicyError, apply_adoption, policy_from_entry
from .codec import DecodeOutcome, RawMessage, decode_plain, enforce_schema
from .core import (
    AdoptionMode,
    AgentState,
    AgreementMetric,
    Condition,
    GameConfig,
    InteractionRecord,
    Lexicon,
    PairingMode,
    TokenAccounting,
    derive_rng,
    make_lexicon,
    validate_config,
)
from .metrics import modal_agreement, pairwise_agreement

log = logging.getLogger(__name__)

Pair = Tuple[int, int]


def plan_pairs(n: int, mode: PairingMode, rng: random.Random) -> List[Pair]:
    """One uniform random pair, or a uniform random perfect matching.

    Pairs are ordered: under speaker_hearer the first agent speaks.
    """
    mode = PairingMode(mode)
    if mode is PairingMode.SINGLE_PAIR:
        i, j = rng.sample(range(n), 2)
        return [(i, j)]
    if n % 2:
        raise ValueError(f"full_matching needs an even population, got {n}")
    perm = list(range(n))
    rng.shuffle(perm)
    return [(perm[k], perm[k + 1]) for k in range(0, n, 2)]


@dataclass
class PairExchange:
    pair: Pair
    messages: Tuple[RawMessage, RawMessage]
    outcomes: Tuple[DecodeOutcome, DecodeOutcome]
    mismatch: bool
    adoptions: Tuple[bool, bool]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pair": list(self.pair),
            "messages": [m.to_dict() for m in self.messages],
            "outcomes": [o.to_dict() for o in self.outcomes],
            "mismatch": self.mismatch,
            "adoptions": list(self.adoptions),
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "PairExchange":
        return cls(
            tuple(d["pair"]),
            tuple(RawMessage.from_dict(m) for m in d["messages"]),
            tuple(DecodeOutcome.from_dict(o) for o in d["outcomes"]),
            d["mismatch"],
            tuple(d["adoptions"]),
        )


@dataclass
class RoundEvent:
    round: int
    exchanges: List[PairExchange]
    tokens_this_round: int
    cumulative_tokens: int
    agreement_after: float
    pairwise: float
    modal: float

    @property
    def pair(self) -> Pair:
        return self.exchanges[0].pair

    @property
    def mismatch(self) -> bool:
        return any(x.mismatch for x in self.exchanges)

    def agreement(self, metric: AgreementMetric) -> float:
        return self.pairwise if AgreementMetric(metric) is AgreementMetric.PAIRWISE else self.modal

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": "round",
            "round": self.round,
            "exchanges": [x.to_dict() for x in self.exchanges],
            "tokens_this_round": self.tokens_this_round,
            "cumulative_tokens": self.cumulative_tokens,
            "agreement_after": self.agreement_after,
            "pairwise": self.pairwise,
            "modal": self.modal,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RoundEvent":
        return cls(d["round"], [PairExchange.from_dict(x) for x in d["exchanges"]],
                   d["tokens_this_round"], d["cumulative_tokens"], d["agreement_after"],
                   d["pairwise"], d["modal"])


@dataclass
class RunLog:
    config: GameConfig
    events: List[RoundEvent] = field(default_factory=list)
    final_states: List[Dict[str, Any]] = field(default_factory=list)
    status: str = "running"
    error: Optional[str] = None

    @property
    def total_tokens(self) -> int:
        return self.events[-1].cumulative_tokens if self.events else 0

    @property
    def final_agreement(self) -> float:
        return self.events[-1].agreement_after if self.events else 0.0

    def header(self) -> Dict[str, Any]:
        return {"type": "header", "config": self.config.to_dict()}

    def trailer(self) -> Dict[str, Any]:
        return {
            "type": "trailer",
            "status": self.status,
            "error": self.error,
            "rounds_completed": len(self.events),
            "total_tokens": self.total_tokens,
            "final_agreement": self.final_agreement,
            "agreement_metric": self.config.agreement_metric.value,
            "final_states": self.final_states,
        }

    def to_jsonl(self) -> str:
        lines = [self.header()] + [e.to_dict() for e in self.events] + [self.trailer()]
        return "".join(dump_line(x) for x in lines)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "RunLog":
        runlog: Optional[RunLog] = None
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "header":
                runlog = cls(GameConfig.from_dict(rec["config"]))
            elif runlog is None:
                raise ValueError("run log does not start with a header line")
            elif kind == "round":
                runlog.events.append(RoundEvent.from_dict(rec))
            elif kind == "trailer":
                runlog.status = rec["status"]
                runlog.error = rec.get("error")
                runlog.final_states = rec.get("final_states", [])
        if runlog is None:
            raise ValueError("empty run log")
        if runlog.status == "running":
            # no trailer: the writer died mid-run
            runlog.status = "incomplete"
        return runlog


def dump_line(obj: Dict[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False) + "\n"


def read_runlog(path) -> RunLog:
    with open(path, encoding="utf-8") as fh:
        return RunLog.from_lines(fh)


class Population:
    """Agent states and policies for one run, plus the run's random streams."""

    def __init__(self, cfg: GameConfig, roster: Sequence[AgentPolicy]):
        self.cfg = cfg
        self.lexicon: Lexicon = make_lexicon(cfg.lexicon_size)
        self.policies = list(roster)
        init = derive_rng(cfg.seed, "init")
        self.states = [
            AgentState(i, init.randint(1, cfg.lexicon_size), cfg.memory_window)
            for i in range(cfg.n_agents)
        ]
        self.pairing_rng = derive_rng(cfg.seed, "pairing")
        self.adoption_rng = derive_rng(cfg.seed, "adoption")
        self.fallback_rng = derive_rng(cfg.seed, "fallback")
        self.policy_rngs = [derive_rng(cfg.seed, f"policy/{i}") for i in range(cfg.n_agents)]

    def names(self) -> List[Optional[int]]:
        return [s.last_emitted for s in self.states]


def build_roster(cfg: GameConfig, **llm_kwargs: Any) -> List[AgentPolicy]:
    return [
        policy_from_entry(entry, endpoints=cfg.endpoints, decoding=cfg.decoding,
                          templates_dir=cfg.templates_dir, **llm_kwargs)
        if entry["kind"] == "llm" else policy_from_entry(entry)
        for entry in cfg.agent_roster
    ]


def _speak(pop: Population, agent: int, round_index: int) -> Tuple[RawMessage, DecodeOutcome]:
    cfg, state, policy = pop.cfg, pop.states[agent], pop.policies[agent]
    rng = pop.policy_rngs[agent]
    msg = policy.propose(state, cfg.condition, pop.lexicon, rng, round_index)
    if cfg.condition is Condition.SCHEMA:
        outcome = enforce_schema(
            msg,
            lambda: policy.retry_propose(state, cfg.condition, pop.lexicon, rng, round_index),
            pop.lexicon,
            cfg.fallback_mode,
            pop.fallback_rng,
        )
    else:
        outcome = decode_plain(msg, pop.lexicon)
    if outcome.name is not None:
        state.last_emitted = outcome.name
    return msg, outcome


def _message_tokens(msg: RawMessage, accounting: TokenAccounting) -> int:
    if accounting is TokenAccounting.OUTPUT_PLUS_PROMPT:
        return msg.token_count + msg.prompt_tokens
    return msg.token_count


def _exchange(pop: Population, pair: Pair, round_index: int) -> PairExchange:
    cfg = pop.cfg
    i, j = pair
    msg_i, out_i = _speak(pop, i, round_index)
    msg_j, out_j = _speak(pop, j, round_index)
    y_i, y_j = out_i.name, out_j.name
    mismatch = y_i is None or y_j is None or y_i != y_j

    # Each side adopts the partner's *decoded* name, which is fixed before any
    # adoption happens, so sequential application equals simultaneous update.
    adopt_i = adopt_j = False
    if mismatch:
        alpha = cfg.lose_shift_alpha
        if cfg.adoption_mode is AdoptionMode.BILATERAL_INDEPENDENT:
            if y_j is not None:
                adopt_i = apply_adoption(pop.states[i], y_j, alpha, pop.adoption_rng, own_name=y_i)
            if y_i is not None:
                adopt_j = apply_adoption(pop.states[j], y_i, alpha, pop.adoption_rng, own_name=y_j)
        elif y_i is not None:
            # speaker_hearer: i speaks, only j may shift
            adopt_j = apply_adoption(pop.states[j], y_i, alpha, pop.adoption_rng, own_name=y_j)

    pop.policies[i].on_result(pop.states[i], InteractionRecord(round_index, j, y_j, out_j.compliant))
    pop.policies[j].on_result(pop.states[j], InteractionRecord(round_index, i, y_i, out_i.compliant))
    return PairExchange(pair, (msg_i, msg_j), (out_i, out_j), mismatch, (adopt_i, adopt_j))


def run_round(pop: Population, round_index: int, cumulative_tokens: int = 0) -> RoundEvent:
    cfg = pop.cfg
    if not 0 <= round_index < cfg.rounds:
        raise ValueError(f"round {round_index} outside 0..{cfg.rounds - 1}")
    plan = plan_pairs(cfg.n_agents, cfg.pairing_mode, pop.pairing_rng)
    exchanges = [_exchange(pop, pair, round_index) for pair in plan]
    tokens = 0
    for x in exchanges:
        for msg, out in zip(x.messages, x.outcomes):
            tokens += _message_tokens(msg, cfg.token_accounting)
            if out.retry_message is not None:
                tokens += _message_tokens(out.retry_message, cfg.token_accounting)
    names = pop.names()
    pw = pairwise_agreement(names, cfg.n_agents)
    modal = modal_agreement(names, cfg.n_agents)
    chosen = pw if cfg.agreement_metric is AgreementMetric.PAIRWISE else modal
    return RoundEvent(round_index, exchanges, tokens, cumulative_tokens + tokens, chosen, pw, modal)


def run_game(
    cfg: GameConfig,
    roster: Optional[Sequence[AgentPolicy]] = None,
    sink: Optional[IO[str]] = None,
) -> RunLog:
    """Play ``cfg.rounds`` rounds and return the log.

    If ``sink`` is given, the header, each round and the trailer are written
    to it as JSON lines as soon as they exist, so an aborted run leaves a
    usable partial log.
    """
    validate_config(cfg)
    if roster is None:
        roster = build_roster(cfg)
    if len(roster) != cfg.n_agents:
        raise ValueError(f"roster has {len(roster)} policies for N={cfg.n_agents}")
    pop = Population(cfg, roster)
    runlog = RunLog(cfg)

    def emit(obj: Dict[str, Any]) -> None:
        if sink is not None:
            sink.write(dump_line(obj))
            sink.flush()

    emit(runlog.header())
    cumulative = 0
    try:
        for t in range(cfg.rounds):
            event = run_round(pop, t, cumulative)
            cumulative = event.cumulative_tokens
            runlog.events.append(event)
            emit(event.to_dict())
        runlog.status = "completed"
    except PolicyError as exc:
        log.error("run aborted at round %d: %s", len(runlog.events), exc)
        runlog.status = "aborted"
        runlog.error = f"{type(exc).__name__}: {exc}"
    runlog.final_states = [s.summary() for s in pop.states]
    emit(runlog.trailer())
    return runlog
