import json
import random
import time
from collections import defaultdict
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from march.agents import AgentRole, CallableBackend, ScriptedBackend
from march.agents.parsing import Action, Answer, parse_fellow_stance
from march.consensus import (
    ConsensusConfig,
    ConsensusTranscript,
    Termination,
    adjudicate,
    collect_stances,
    run_consensus,
    synthesize_initial,
)
from march.core import Report, parse_report
from march.errors import BackendError, ConsensusAborted

from helpers import REPORT_POOL, decision, random_agents, rep, stance, synthesis

FIXTURE = Path(__file__).parent / "fixtures" / "consensus_disagreement.json"


def as_text(item):
    return item if isinstance(item, str) else json.dumps(item)


def fixture_agents():
    data = json.loads(FIXTURE.read_text())
    fellows = [
        ScriptedBackend([as_text(c) for c in lane], name=f"fellow-{i + 1}", role=AgentRole.FELLOW)
        for i, lane in enumerate(data["fellows"])
    ]
    attending = ScriptedBackend([as_text(c) for c in data["attending"]], name="attending", role=AgentRole.ATTENDING)
    revised = [parse_report(r) for r in data["revised"]]
    return data, attending, fellows, revised


def fellows_from(scripts):
    return [ScriptedBackend(s, name=f"fellow-{i + 1}", role=AgentRole.FELLOW) for i, s in enumerate(scripts)]


# --- synthesis -------------------------------------------------------------


def test_synthesis_single_fellow_echo():
    r1 = rep(lung="Clear.")
    attending = ScriptedBackend([synthesis(r1)], role=AgentRole.ATTENDING)
    assert synthesize_initial(attending, [r1]).report == r1
    assert "Doctor 1: The region 0 is lung: Clear." in attending.prompts[0]


def test_synthesis_identical_reports():
    r = rep(heart="Normal.")
    attending = ScriptedBackend([synthesis(r)], role=AgentRole.ATTENDING)
    assert synthesize_initial(attending, [r, r, r]).report == r
    assert "Doctor 3:" in attending.prompts[0]


def test_synthesis_fixture_reasons_captured():
    data, attending, fellows, revised = fixture_agents()
    out = synthesize_initial(attending, revised)
    assert out.report == parse_report(data["expected"]["synthesis"])
    assert out.reasons == tuple(data["attending"][0]["reasons"])


# --- stances ---------------------------------------------------------------


def test_collect_two_agree():
    current = rep(lung="Clear.")
    fellows = fellows_from([[stance("agree", 3)], [stance("agree", 3)]])
    got = collect_stances(fellows, [current, current], current, 1)
    assert [s.fellow_id for s in got] == ["fellow-1", "fellow-2"]
    assert all(s.answer is Answer.AGREE and s.confidence == 3 for s in got)


def test_collect_disagree_passthrough():
    current = rep(lung="Clear.")
    fellows = fellows_from([[stance("agree", 3)], [stance("disagree", 1, "Nodule seen.", ["[ImageToText#2] nodule"])]])
    got = collect_stances(fellows, [current, current], current, 1)
    assert got[1].answer is Answer.DISAGREE
    assert got[1].confidence == 1
    assert got[1].reason == "Nodule seen."
    assert got[1].evidences == ("[ImageToText#2] nodule",)


def test_collect_fixture_matches_standalone_parse():
    data, attending, fellows, revised = fixture_agents()
    current = parse_report(data["expected"]["synthesis"])
    got = collect_stances(fellows, revised, current, 1)
    expected = [parse_fellow_stance(as_text(lane[0]), fellow_id=f"fellow-{i + 1}", round=1) for i, lane in enumerate(data["fellows"])]
    assert got == expected
    assert [s.answer.value for s in got] == data["expected"]["round_1_answers"]
    assert [s.confidence for s in got] == data["expected"]["round_1_confidences"]


def test_collect_prompt_contents_and_instructions():
    current = rep(lung="Merged.")
    own = [rep(lung="Mine A."), rep(lung="Mine B.")]
    fellows = fellows_from([[stance()] * 2, [stance()] * 2])
    collect_stances(fellows, own, current, 1, ["do X", "do Y"], evidence=["EVID-A", "EVID-B"])
    collect_stances(fellows, own, current, 2, ["do X", "do Y"], evidence=["EVID-A", "EVID-B"])
    first, second = fellows[1].prompts
    assert "Mine B." in first and "Merged." in first and "EVID-B" in first
    assert "do Y" not in first
    assert "do Y" in second and "do X" not in second


def test_collect_failure_aborts_unless_degraded():
    current = rep(lung="Clear.")
    with pytest.raises(BackendError):
        fellows = fellows_from([[stance()]]) + [CallableBackend(_boom, name="fellow-2")]
        collect_stances(fellows, [current] * 2, current, 1)
    failures = []
    fellows = fellows_from([[stance()]]) + [CallableBackend(_boom, name="fellow-2")]
    got = collect_stances(fellows, [current] * 2, current, 1, degraded_mode=True, failures=failures)
    assert len(got) == 1
    assert failures[0]["fellow_id"] == "fellow-2"


def _boom(prompt):
    raise BackendError("Transport", "connection refused")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_stance_order_independent_of_timing(seed, n):
    rng = random.Random(seed)
    current = rep(lung="Clear.")

    def delayed(i, pause):
        def fn(prompt):
            time.sleep(pause)
            return stance("agree", 1 + i % 3, reason=f"fellow {i}")
        return fn

    fellows = [CallableBackend(delayed(i, rng.random() * 0.01), name=f"fellow-{i + 1}") for i in range(n)]
    exchanges = []
    got = collect_stances(fellows, [current] * n, current, 1, exchanges=exchanges)
    assert [s.reason for s in got] == [f"fellow {i}" for i in range(n)]
    assert [e.agent for e in exchanges] == [f"fellow-{i + 1}" for i in range(n)]


# --- adjudication ----------------------------------------------------------


def test_adjudicate_all_agree_stop():
    current = rep(lung="Clear.")
    stances = [parse_fellow_stance(stance("agree", 3))] * 3
    attending = ScriptedBackend([decision("No", current)], role=AgentRole.ATTENDING)
    out = adjudicate(attending, current, stances, 1)
    assert out.action is Action.STOP and out.report == current
    assert "Doctor 3: agree (confidence 3)" in attending.prompts[0]


def test_adjudicate_majority_disagree_continue():
    current = rep(lung="Clear.")
    revised = rep(lung="Nodule.")
    stances = [parse_fellow_stance(stance("disagree", 2))] * 2 + [parse_fellow_stance(stance("agree", 1))]
    attending = ScriptedBackend([decision("Yes", revised, reasons=["two doctors cite a nodule"])], role=AgentRole.ATTENDING)
    out = adjudicate(attending, current, stances, 1)
    assert out.action is Action.CONTINUE and out.report == revised


def test_adjudicate_requires_reasons_for_changed_report():
    current = rep(lung="Clear.")
    attending = ScriptedBackend(
        [decision("Yes", rep(lung="Nodule."), reasons=[]), decision("Yes", rep(lung="Nodule."), reasons=["why"])],
        role=AgentRole.ATTENDING,
    )
    out = adjudicate(attending, current, [parse_fellow_stance(stance())], 1)
    assert out.reasons == ("why",)
    assert attending.calls == 2


# --- full protocol ---------------------------------------------------------


def test_unanimous_short_circuit():
    t0 = rep(lung="Merged.")
    attending = ScriptedBackend([synthesis(t0)], role=AgentRole.ATTENDING)
    fellows = fellows_from([[stance()]] * 3)
    transcript = run_consensus(attending, fellows, [rep(lung="x.")] * 3, ConsensusConfig())
    assert transcript.termination is Termination.UNANIMOUS_AGREEMENT
    assert transcript.rounds_used == 1
    assert transcript.final_report == t0
    assert attending.calls == 1
    assert transcript.rounds[0].decision is None


def test_attending_always_continues_hits_cap():
    reports = [rep(lung=f"Version {i}.") for i in range(4)]
    attending = ScriptedBackend(
        [synthesis(reports[0])] + [decision("Yes", reports[i], reasons=["r"]) for i in (1, 2, 3)],
        role=AgentRole.ATTENDING,
    )
    fellows = fellows_from([[stance("disagree")] * 3] * 3)
    transcript = run_consensus(attending, fellows, [reports[0]] * 3, ConsensusConfig(max_rounds=3))
    assert transcript.rounds_used == 3
    assert transcript.termination is Termination.MAX_ROUNDS_REACHED
    assert transcript.final_report == reports[3]
    assert [r.consensus_report for r in transcript.rounds] == reports[:3]


def test_fixture_disagree_revise_agree_stop():
    data, attending, fellows, revised = fixture_agents()
    config = ConsensusConfig(unanimity_short_circuit=False)
    transcript = run_consensus(attending, fellows, revised, config)
    exp = data["expected"]
    assert transcript.rounds_used == exp["rounds_used"]
    assert transcript.termination.value == exp["termination"]
    assert transcript.final_report == parse_report(exp["final_report"])
    assert transcript.final_report == transcript.rounds[-1].decision.report
    assert transcript.rounds[1].consensus_report == transcript.rounds[0].decision.report
    assert "Re-check the nodule" in fellows[0].prompts[1]


def test_abort_carries_partial_transcript():
    t0 = rep(lung="Merged.")
    attending = ScriptedBackend([synthesis(t0)], role=AgentRole.ATTENDING)
    fellows = fellows_from([[stance("disagree")], [stance("disagree")]])
    with pytest.raises(ConsensusAborted) as info:
        run_consensus(attending, fellows, [t0, t0], ConsensusConfig(num_fellows=2))
    partial = info.value.transcript
    assert partial.synthesis.consensus_report == t0
    assert partial.rounds_used == 1
    assert partial.termination is None
    assert len(partial.rounds[0].stances) == 2
    assert len(partial.exchanges()) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        ConsensusConfig(num_fellows=0)
    with pytest.raises(ValueError):
        ConsensusConfig(max_rounds=0)
    with pytest.raises(ValueError):
        run_consensus(ScriptedBackend(["x"]), fellows_from([["x"]]), [rep(lung="a.")], ConsensusConfig(num_fellows=2))


def replay(transcript, num_fellows, config):
    lanes = defaultdict(list)
    for exchange in transcript.exchanges():
        lanes[exchange.agent].append(exchange.completion)
    attending = ScriptedBackend(lanes["attending"], name="attending", role=AgentRole.ATTENDING)
    fellows = [
        ScriptedBackend(lanes[f"fellow-{i + 1}"] or ["unused"], name=f"fellow-{i + 1}", role=AgentRole.FELLOW)
        for i in range(num_fellows)
    ]
    return attending, fellows


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.sampled_from([1, 2, 3, 5]), st.booleans())
def test_random_agents_terminate_and_replay(seed, n, max_rounds, short_circuit):
    rng = random.Random(seed)
    attending, fellows = random_agents(rng, n, garbage_rate=0.05)
    revised = [rng.choice(REPORT_POOL) for _ in range(n)]
    config = ConsensusConfig(num_fellows=n, max_rounds=max_rounds, unanimity_short_circuit=short_circuit)
    try:
        transcript = run_consensus(attending, fellows, revised, config)
    except ConsensusAborted as exc:
        transcript = exc.transcript
        assert transcript.final_report is None
    total_calls = attending.calls + sum(f.calls for f in fellows)
    assert len(transcript.exchanges()) == total_calls
    assert transcript.rounds_used <= max_rounds
    assert [r.index for r in transcript.rounds] == list(range(1, transcript.rounds_used + 1))
    if transcript.final_report is None:
        return
    for record in transcript.rounds:
        assert len(record.stances) == n
        if short_circuit and all(s.answer is Answer.AGREE for s in record.stances):
            assert record.decision is None
    replay_att, replay_fellows = replay(transcript, n, config)
    again = run_consensus(replay_att, replay_fellows, revised, config)
    assert again.final_report == transcript.final_report
    assert json.dumps(again.to_json()) == json.dumps(transcript.to_json())


def test_transcript_json_round_trip():
    data, attending, fellows, revised = fixture_agents()
    transcript = run_consensus(attending, fellows, revised, ConsensusConfig(unanimity_short_circuit=False))
    restored = ConsensusTranscript.from_json(json.loads(json.dumps(transcript.to_json())))
    assert restored.to_json() == transcript.to_json()
    assert isinstance(restored.final_report, Report)
