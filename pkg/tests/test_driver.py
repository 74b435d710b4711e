"""Mock-backed session contract: stepwise execution, rollback, queries,
whole-proof checks. The same properties gate the real backend in the
integration tier."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coqharness.driver import (
    ERROR,
    PreludeError,
    QueryRejected,
    SessionConfig,
    start_session,
)
from coqharness.mockprover import (
    DEFAULT_TACTIC_FAILURE,
    INCOMPLETE_PROOF_MESSAGE,
    NO_FOCUSED_PROOF_MESSAGE,
    NO_MORE_GOALS_MESSAGE,
)
from coqharness.sentences import LexicalError


def test_session_config_validation():
    with pytest.raises(ValueError):
        SessionConfig(timeout_per_step=0)
    with pytest.raises(ValueError):
        SessionConfig(backend="real", prover_command="  ")


def test_trivial_proof_stepwise(mock_session):
    first = mock_session.execute("Lemma weak_refl: forall x, Weak T x x.")
    assert first.ok and first.state is not None
    assert first.state.goals == ("forall x, Weak T x x",)
    assert "T" in first.state.hypothesis_names

    assert mock_session.execute("Proof.").ok
    step = mock_session.execute("intros x.")
    assert step.ok and not step.proof_complete
    assert "x" in step.state.hypothesis_names
    assert mock_session.execute("constructor.").ok
    last_tactic = mock_session.execute("reflexivity.")
    assert last_tactic.ok and last_tactic.state is None
    assert last_tactic.message == NO_MORE_GOALS_MESSAGE
    closing = mock_session.execute("Qed.")
    assert closing.ok and closing.proof_complete


def test_unknown_theorem_rejects_tactics(mock_session):
    assert mock_session.execute("Lemma mystery: True.").ok
    result = mock_session.execute("auto.")
    assert result.outcome == ERROR
    assert result.message == DEFAULT_TACTIC_FAILURE


def test_intro_name_collision(mock_session):
    mock_session.execute("Lemma G_evolve: forall (R0 : relation2 X Y) (n : nat), incl (comp (star B) (UExp G R0 n)) (UExp G R0 (S n)).")
    result = mock_session.execute("intro R.")
    assert result.outcome == ERROR
    assert result.message == "R is already used."
    # rollback: the failed step left no trace; the accepted script still runs
    assert mock_session.execute("intro RR.").ok


def test_premature_qed_and_stray_closer(mock_session):
    assert mock_session.execute("Qed.").message == NO_FOCUSED_PROOF_MESSAGE
    mock_session.execute("Lemma weak_refl: forall x, Weak T x x.")
    result = mock_session.execute("Qed.")
    assert result.outcome == ERROR
    assert result.message == INCOMPLETE_PROOF_MESSAGE


def test_admitted_closes_without_completing(mock_session):
    mock_session.execute("Lemma weak_refl: forall x, Weak T x x.")
    result = mock_session.execute("Admitted.")
    assert result.ok and not result.proof_complete
    assert mock_session.current_state() is None


def test_execute_rollback_state_equality(mock_session):
    mock_session.execute("Lemma weak_refl: forall x, Weak T x x.")
    mock_session.execute("intros x.")
    before = mock_session.current_state()
    failed = mock_session.execute("nonsense tactic.")
    assert failed.outcome == ERROR
    assert mock_session.current_state() == before


def test_query_happy_and_rejected(mock_session):
    assert "Set" in mock_session.query("Check", "nat")
    assert "function A A" in mock_session.query("Print", "G")
    with pytest.raises(QueryRejected) as err:
        mock_session.query("Print", "undefined_xyz")
    assert "not found" in err.value.message
    with pytest.raises(QueryRejected):
        mock_session.query("Compute", "nat")  # not in the allow-list
    with pytest.raises(QueryRejected):
        mock_session.query("Check", "   ")


def test_query_preserves_proof_state(mock_session):
    mock_session.execute("Lemma weak_refl: forall x, Weak T x x.")
    before = mock_session.current_state()
    mock_session.query("Check", "nat")
    assert mock_session.current_state() == before


def test_check_proof_accepts_and_restores(mock_session):
    result = mock_session.check_proof(
        "Lemma weak_refl: forall x, Weak T x x.",
        "Proof. intros x. constructor. reflexivity. Qed.",
    )
    assert result.accepted and result.failing_step is None
    assert len(result.states) >= 3
    again = mock_session.check_proof(
        "Lemma weak_refl: forall x, Weak T x x.",
        "Proof. intros x. constructor. reflexivity. Qed.",
    )
    assert again.accepted == result.accepted
    assert mock_session.current_state() is None  # restored to top level


def test_check_proof_failing_step_index(mock_session):
    result = mock_session.check_proof(
        "Lemma weak_refl: forall x, Weak T x x.",
        "Proof. exact O. Qed.",
    )
    assert not result.accepted
    index, sentence = result.failing_step
    assert index == 1 and sentence.text == "exact O."
    assert result.message == DEFAULT_TACTIC_FAILURE


def test_check_proof_incomplete_without_closer(mock_session):
    result = mock_session.check_proof(
        "Lemma weak_refl: forall x, Weak T x x.",
        "Proof. intros x. constructor.",
    )
    assert not result.accepted and result.failing_step is None
    assert "incomplete" in result.message


def test_check_proof_lexical_error_distinct(mock_session):
    with pytest.raises(LexicalError):
        mock_session.check_proof("Lemma weak_refl: forall x, Weak T x x.", "auto")


def test_prelude_executes_and_fails(mock_table):
    from coqharness.sentences import segment_sentences

    ok_config = SessionConfig(
        backend="mock",
        mock_table=mock_table,
        prelude=list(segment_sentences("Require Import Arith. Definition two := 2.")),
    )
    session = start_session(ok_config)
    assert session.current_state() is None
    session.close()

    bad = SessionConfig(
        backend="mock",
        mock_table=mock_table,
        prelude=list(segment_sentences("Require Import NoSuchLib.")),
    )
    with pytest.raises(PreludeError) as err:
        start_session(bad)
    assert err.value.step_index == 0
    assert "Cannot find" in err.value.message


def test_scripted_states_are_served(tmp_path):
    table = {
        "theorems": {
            "two_goals": {
                "scripts": [
                    {
                        "steps": ["split.", "auto.", "auto.", "Qed."],
                        "states": [
                            "______(1/2)\nA\n______(2/2)\nB",
                            "______(2/2)\nB",
                            None,
                        ],
                    }
                ]
            }
        }
    }
    session = start_session(SessionConfig(backend="mock", mock_table=table))
    session.execute("Lemma two_goals: A /\\ B.")
    first = session.execute("split.")
    assert first.state.goal_index == (1, 2)
    second = session.execute("auto.")
    assert second.state.goal_index == (2, 2)
    third = session.execute("auto.")
    assert third.state is None and third.message == NO_MORE_GOALS_MESSAGE
    assert session.execute("Qed.").proof_complete
    session.close()


_sentences = st.lists(
    st.sampled_from(
        ["Proof.", "intros x.", "constructor.", "reflexivity.", "auto.", "Qed.",
         "intro R.", "nonsense.", "Admitted.", "exact I."]
    ),
    max_size=8,
)


@given(script=_sentences)
@settings(max_examples=120, deadline=None)
def test_property_errors_never_mutate_state(mock_table, script):
    session = start_session(SessionConfig(backend="mock", mock_table=mock_table))
    session.execute("Lemma weak_refl: forall x, Weak T x x.")
    for text in script:
        before = session.current_state()
        result = session.execute(text)
        if result.outcome == ERROR:
            assert session.current_state() == before
        if session.current_state() is None and result.ok:
            break
    session.close()


@given(script=_sentences)
@settings(max_examples=80, deadline=None)
def test_property_check_proof_is_side_effect_free(mock_table, script):
    session = start_session(SessionConfig(backend="mock", mock_table=mock_table))
    statement = "Lemma weak_refl: forall x, Weak T x x."
    body = " ".join(script) if script else "auto."
    first = session.check_proof(statement, body)
    second = session.check_proof(statement, body)
    assert first.accepted == second.accepted
    assert first.failing_step == second.failing_step
    assert first.message == second.message
    session.close()
