"""OpenAI-compatible chat-completion client and condition prompt templates.

Requests are issued one at a time per run. Sampling stays stochastic on the
server side, so runs with LLM rosters are not reproducible from the seed;
only the request bodies are (byte-stable for identical inputs).
"""

from __future__ import annotations

import json
import logging
import os
import random
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import httpx

from .agents import AgentPolicy, PolicyError
from .codec import SCHEMA_LINE, RawMessage, count_tokens
from .core import AgentState, Condition, ConfigError, Lexicon

log = logging.getLogger(__name__)

TEMPLATE_FILES = {
    Condition.NL: "nl.txt",
    Condition.NL_SW: "nl_sw.txt",
    Condition.SCHEMA: "schema.txt",
}

Messages = List[Dict[str, str]]


class EndpointError(PolicyError):
    pass


@dataclass(frozen=True)
class EndpointProfile:
    base_url: str
    model_name: str
    api_key_ref: Optional[str] = None
    timeout: float = 60.0
    max_retries_on_transport_error: int = 3
    backoff_base: float = 0.5
    # "repeat_penalty" (llama.cpp style), "repetition_penalty" (vLLM / TGI),
    # or "frequency_penalty", which is sent as repeat_penalty - 1.
    repeat_penalty_field: str = "repeat_penalty"

    def __post_init__(self):
        if not self.base_url:
            raise ConfigError("bad-endpoint", "base_url must be nonempty")
        if self.timeout <= 0:
            raise ConfigError("bad-endpoint", "timeout must be positive")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "EndpointProfile":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("bad-endpoint", str(exc)) from None

    @property
    def chat_url(self) -> str:
        url = self.base_url.rstrip("/")
        if url.endswith("/chat/completions"):
            return url
        return url + "/chat/completions"


@dataclass(frozen=True)
class DecodingParams:
    max_new_tokens: int = 32
    temperature: float = 0.7
    top_p: float = 0.9
    repeat_penalty: float = 1.1

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "DecodingParams":
        return cls(**(d or {}))


@dataclass(frozen=True)
class CompletionResult:
    text: str
    completion_tokens: int
    prompt_tokens: int
    latency: float
    usage_estimated: bool = False


def build_request_body(profile: EndpointProfile, params: DecodingParams, messages: Messages) -> bytes:
    body: Dict[str, Any] = {
        "model": profile.model_name,
        "messages": messages,
        "max_tokens": params.max_new_tokens,
        "temperature": params.temperature,
        "top_p": params.top_p,
    }
    if profile.repeat_penalty_field == "frequency_penalty":
        body["frequency_penalty"] = round(params.repeat_penalty - 1.0, 10)
    else:
        body[profile.repeat_penalty_field] = params.repeat_penalty
    return json.dumps(body, ensure_ascii=False, sort_keys=True).encode("utf-8")


def _parse_response(payload: Any) -> CompletionResult:
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise EndpointError(f"malformed completion response: {str(payload)[:200]}") from None
    text = text or ""
    usage = payload.get("usage") if isinstance(payload, dict) else None
    if isinstance(usage, dict) and isinstance(usage.get("completion_tokens"), int):
        return CompletionResult(text, usage["completion_tokens"], int(usage.get("prompt_tokens") or 0), 0.0)
    return CompletionResult(text, count_tokens(text), 0, 0.0, usage_estimated=True)


def complete(
    profile: EndpointProfile,
    params: DecodingParams,
    messages: Messages,
    client: Optional[httpx.Client] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResult:
    """Issue one chat-completion request; retry transport failures with backoff."""
    headers = {"Content-Type": "application/json"}
    if profile.api_key_ref:
        key = os.environ.get(profile.api_key_ref)
        if key:
            headers["Authorization"] = f"Bearer {key}"
    body = build_request_body(profile, params, messages)
    own_client = client is None
    if own_client:
        client = httpx.Client(timeout=profile.timeout)
    try:
        attempt = 0
        while True:
            start = time.perf_counter()
            try:
                resp = client.post(profile.chat_url, content=body, headers=headers)
            except httpx.TransportError as exc:
                err: Exception = exc
            else:
                if 400 <= resp.status_code < 500:
                    raise EndpointError(f"HTTP {resp.status_code} from {profile.chat_url}: {resp.text[:200]}")
                if resp.status_code < 400:
                    try:
                        payload = resp.json()
                    except ValueError:
                        raise EndpointError(f"non-JSON response from {profile.chat_url}") from None
                    result = _parse_response(payload)
                    latency = time.perf_counter() - start
                    return CompletionResult(result.text, result.completion_tokens, result.prompt_tokens,
                                            latency, result.usage_estimated)
                err = EndpointError(f"HTTP {resp.status_code} from {profile.chat_url}")
            if attempt >= profile.max_retries_on_transport_error:
                raise EndpointError(f"endpoint {profile.chat_url} failed after {attempt + 1} attempts: {err}")
            delay = profile.backoff_base * 2**attempt
            log.warning("request to %s failed (%s); retrying in %.2fs", profile.chat_url, err, delay)
            sleep(delay)
            attempt += 1
    finally:
        if own_client:
            client.close()


@dataclass
class PromptTemplate:
    system: str
    user: str
    reminder: str


def load_template(condition: Condition, templates_dir: Optional[str] = None) -> PromptTemplate:
    fname = TEMPLATE_FILES[Condition(condition)]
    try:
        if templates_dir:
            text = (Path(templates_dir) / fname).read_text(encoding="utf-8")
        else:
            text = resources.files("signgame").joinpath("templates", fname).read_text(encoding="utf-8")
    except (FileNotFoundError, NotADirectoryError):
        raise ConfigError("missing-template", f"{fname} not found in {templates_dir or 'package templates'}") from None
    sections: Dict[str, List[str]] = {}
    current = None
    for line in text.splitlines():
        if line.strip() in ("[system]", "[user]", "[reminder]"):
            current = line.strip()[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    if set(sections) != {"system", "user", "reminder"}:
        raise ConfigError("missing-template", f"{fname} needs [system], [user] and [reminder] sections")
    return PromptTemplate(*("\n".join(sections[k]).strip("\n") for k in ("system", "user", "reminder")))


def _render(text: str, values: Dict[str, str]) -> str:
    for key, value in values.items():
        text = text.replace("{{" + key + "}}", value)
    return text


def render_memory(state: AgentState, lexicon: Lexicon) -> str:
    if state.memory.maxlen == 0:
        return ""
    if not state.memory:
        return "You have not played with anyone yet.\n"
    said = [lexicon.label(r.partner_name) if r.partner_name is not None else "(unreadable)"
            for r in state.memory]
    return "Names your recent partners used, oldest first: " + ", ".join(said) + ".\n"


def build_prompt(
    condition: Condition,
    state: AgentState,
    lexicon: Lexicon,
    reminder: bool,
    templates_dir: Optional[str] = None,
) -> Messages:
    tpl = load_template(condition, templates_dir)
    values = {
        "lexicon": ", ".join(lexicon.names),
        "memory": render_memory(state, lexicon),
        "schema_line": SCHEMA_LINE,
        "current_name": lexicon.label(state.current_name),
    }
    reminder_text = _render(tpl.reminder, values)
    values["reminder"] = (" " + reminder_text) if reminder else ""
    return [
        {"role": "system", "content": _render(tpl.system, values)},
        {"role": "user", "content": _render(tpl.user, values)},
    ]


@dataclass
class LLMPolicy(AgentPolicy):
    profile: EndpointProfile
    params: DecodingParams = field(default_factory=DecodingParams)
    templates_dir: Optional[str] = None
    client: Optional[httpx.Client] = None
    sleep: Callable[[float], None] = time.sleep

    kind = "llm"

    @classmethod
    def from_entry(cls, entry: Dict[str, Any], endpoints: Dict[str, Dict[str, Any]],
                   decoding: Optional[Dict[str, Any]] = None, templates_dir: Optional[str] = None,
                   client: Optional[httpx.Client] = None) -> "LLMPolicy":
        profile = EndpointProfile.from_dict(endpoints[entry["endpoint"]])
        return cls(profile, DecodingParams.from_dict(decoding), templates_dir, client)

    def _ask(self, state: AgentState, condition: Condition, lexicon: Lexicon, reminder: bool) -> RawMessage:
        messages = build_prompt(condition, state, lexicon, reminder, self.templates_dir)
        result = complete(self.profile, self.params, messages, self.client, self.sleep)
        return RawMessage(
            result.text,
            result.completion_tokens,
            "estimated" if result.usage_estimated else "endpoint",
            result.prompt_tokens,
            round(result.latency, 6),
        )

    def propose(self, state, condition, lexicon, rng: random.Random = None, round_index=0):
        return self._ask(state, condition, lexicon, reminder=False)

    def retry_propose(self, state, condition, lexicon, rng: random.Random = None, round_index=0):
        return self._ask(state, condition, lexicon, reminder=True)


def llm_propose(profile: EndpointProfile, params: DecodingParams, condition: Condition,
                state: AgentState, lexicon: Lexicon, rng_unused: Any = None,
                reminder: bool = False, **kwargs: Any) -> RawMessage:
    policy = LLMPolicy(profile, params, **kwargs)
    return policy._ask(state, condition, lexicon, reminder)
