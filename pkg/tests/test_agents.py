import random
from collections import deque
from itertools import permutations

import pytest
from scipy import stats

from signgame.agents import (
    AdoptionError,
    MockPolicy,
    MockPolicyParams,
    ScriptExhausted,
    ScriptedPolicy,
    apply_adoption,
    choose_proposal_name,
    mock_propose,
    scripted_propose,
)
from signgame.codec import decode_free_text, parse_schema
from signgame.core import AgentState, Condition, InteractionRecord, make_lexicon

LEX = make_lexicon(12)


def state_with(names, current=9, k=10):
    s = AgentState(0, current, memory_window=k)
    for r, name in enumerate(names):
        s.remember(InteractionRecord(r, 1 + r % 5, name, name is not None))
    return s


def oracle_proposal(names, current):
    """Count every name, keep the max, and among the winners take the one
    whose latest position in the window is largest."""
    defined = [(pos, n) for pos, n in enumerate(names) if n is not None]
    if not defined:
        return current
    freq = {}
    last_pos = {}
    for pos, n in defined:
        freq[n] = freq.get(n, 0) + 1
        last_pos[n] = pos
    best = max(freq.values())
    winners = [n for n in freq if freq[n] == best]
    return max(winners, key=lambda n: last_pos[n])


def test_choose_majority():
    assert choose_proposal_name(state_with([2, 2, 5])) == 2


def test_choose_tie_goes_to_most_recent():
    assert choose_proposal_name(state_with([5, 2])) == 2
    assert choose_proposal_name(state_with([2, 5])) == 5
    for order in permutations([5, 2]):
        assert choose_proposal_name(state_with(list(order))) == oracle_proposal(list(order), 9)


def test_choose_empty_window_uses_current_name():
    assert choose_proposal_name(state_with([], current=7)) == 7
    assert choose_proposal_name(state_with([None, None], current=7)) == 7


def test_choose_matches_oracle_on_random_windows():
    rng = random.Random(7)
    for _ in range(10_000):
        m = rng.randint(2, 12)
        length = rng.randint(0, 10)
        names = [rng.choice([None] + list(range(1, m + 1))) for _ in range(length)]
        current = rng.randint(1, m)
        assert choose_proposal_name(state_with(names, current)) == oracle_proposal(names, current)


def test_schema_mock_fully_compliant_emits_exact_tag():
    s = state_with([4, 4, 1])
    msg = mock_propose(s, Condition.SCHEMA, LEX, MockPolicyParams(compliance_prob=1.0), random.Random(0))
    assert msg.text == "@say {name: C4}"


def test_schema_mock_compliance_one_always_parses():
    rng = random.Random(3)
    params = MockPolicyParams(compliance_prob=1.0, schema_preamble_tokens=5)
    for _ in range(2000):
        s = state_with([rng.randint(1, 12) for _ in range(rng.randint(0, 5))], rng.randint(1, 12))
        msg = mock_propose(s, Condition.SCHEMA, LEX, params, rng)
        assert parse_schema(msg, LEX) == choose_proposal_name(s)
        assert msg.token_count == 8


def test_nl_mock_is_uniform_and_ignores_state():
    # fixed seed; over 40 seeds the rejection rate at p=0.01 was 1/40
    rng = random.Random(0)
    s = state_with([3, 3, 3], current=3)
    counts = [0] * 12
    for _ in range(10_000):
        name = decode_free_text(mock_propose(s, Condition.NL, LEX, MockPolicyParams(1.0, 25), rng), LEX)
        counts[name - 1] += 1
    assert stats.chisquare(counts).pvalue > 0.01


@pytest.mark.parametrize("condition", list(Condition))
def test_mock_zero_compliance_is_undecodable(condition):
    rng = random.Random(5)
    params = MockPolicyParams(compliance_prob=0.0, verbosity_tokens=12, noise_mentions_name_prob=0.0)
    for _ in range(500):
        msg = mock_propose(state_with([2]), condition, LEX, params, rng)
        assert decode_free_text(msg, LEX) is None
        assert msg.token_count == 12


def test_nl_sw_mock_mentions_windowed_majority():
    rng = random.Random(2)
    s = state_with([6, 6, 1])
    for _ in range(200):
        msg = mock_propose(s, Condition.NL_SW, LEX, MockPolicyParams(1.0, 25), rng)
        assert decode_free_text(msg, LEX) == 6
        assert msg.token_count == 25


def test_distractor_misleads_first_occurrence_decoder():
    rng = random.Random(4)
    s = state_with([6])
    params = MockPolicyParams(1.0, 25, distractor_prob=1.0)
    for _ in range(300):
        msg = mock_propose(s, Condition.NL_SW, LEX, params, rng)
        assert decode_free_text(msg, LEX) != 6
        assert "C6" in msg.text.split()


def test_mock_policy_retry_boost():
    policy = MockPolicy(MockPolicyParams(compliance_prob=0.0, retry_compliance_boost=1.0))
    s = state_with([3])
    assert parse_schema(policy.retry_propose(s, Condition.SCHEMA, LEX, random.Random(0)), LEX) == 3


def test_scripted_propose():
    assert scripted_propose([1, 1, 2], 2).text == "@say {name: C2}"
    assert scripted_propose([1], 0).text == "@say {name: C1}"
    with pytest.raises(ScriptExhausted):
        scripted_propose([1], 1)


def test_scripted_policy_repeat():
    p = ScriptedPolicy([1, 2], repeat=True)
    s = state_with([])
    assert p.propose(s, Condition.SCHEMA, LEX, random.Random(0), 5).text == "@say {name: C2}"


def test_adoption_degenerate_probabilities():
    rng = random.Random(0)
    for _ in range(1000):
        s = AgentState(0, 1, 3, last_emitted=1)
        assert apply_adoption(s, 4, 1.0, rng, own_name=1)
        assert (s.current_name, s.last_emitted) == (4, 4)
        s = AgentState(0, 1, 3, last_emitted=1)
        assert not apply_adoption(s, 4, 0.0, rng, own_name=1)
        assert (s.current_name, s.last_emitted) == (1, 1)


@pytest.mark.parametrize("alpha", [0.5, 0.75, 0.99])
def test_adoption_frequency(alpha):
    rng = random.Random(2024)
    adopted = 0
    for _ in range(10_000):
        s = AgentState(0, 1, 3, last_emitted=1)
        flag = apply_adoption(s, 2, alpha, rng, own_name=1)
        assert flag == (s.current_name == 2)
        adopted += flag
    assert abs(adopted / 10_000 - alpha) <= 0.02


def test_adoption_precondition():
    s = AgentState(0, 1, 3)
    with pytest.raises(AdoptionError):
        apply_adoption(s, None, 1.0, random.Random(0))
    with pytest.raises(AdoptionError):
        apply_adoption(s, 2, 1.0, random.Random(0), own_name=2)


def test_on_result_window_length():
    policy = MockPolicy()
    for k in (0, 1, 5):
        s = AgentState(0, 1, k)
        for r in range(12):
            policy.on_result(s, InteractionRecord(r, 1, 2, True))
            assert len(s.memory) == min(r + 1, k)
        assert isinstance(s.memory, deque)


def test_mock_params_validation():
    with pytest.raises(ValueError):
        MockPolicyParams(compliance_prob=1.5)
    with pytest.raises(ValueError):
        MockPolicyParams(verbosity_tokens=0)
