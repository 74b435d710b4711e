"""Segmentation vs the independent character-automaton oracle."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coqharness.sentences import (
    LexicalError,
    Sentence,
    UnterminatedComment,
    UnterminatedSentence,
    UnterminatedString,
    is_closing,
    is_statement,
    rejoin,
    segment_sentences,
    statement_name,
)

from oracles import OracleLexicalError, oracle_segment

C5_PRECEDING_BLOCK = """\
Lemma comp_incl: incl R R' -> incl S S' -> incl (comp R S) (comp R' S').
Proof.
  unfold eeq, comp, incl; intuition.
  destruct H1 as [ t ]; exists t; auto.
Qed.

Lemma comp_eeq: eeq R R' -> eeq S S' -> eeq (comp R S) (comp R' S').
Proof.
  unfold eeq, comp, incl; intuition;
  destruct H0 as [ t ]; exists t; auto.
Qed.

Lemma union_incl: (forall i, incl (F i) (F' i)) -> incl (union F) (union F').
Proof.
  unfold eeq, union, incl; intuition.
  destruct H0 as [ i ]; exists i; auto.
Qed.
"""

C5_UNION2_BLOCK = """\
Lemma union2_evolve_left:
  forall l R S S', evolve_1 l R S -> evolve_1 l R (union2 S S').
Proof.
  intros l R S S' H x x' y Hxx' xRy; destruct (H _ _ _ Hxx' xRy) as [ y' ];
  exists y'; auto; left; auto.
Qed.

Lemma union2_evolve_right:
  forall l R S S', evolve_1 l R S' -> evolve_1 l R (union2 S S').
Proof.
  intros l R S S' H x x' y Hxx' xRy; destruct (H _ _ _ Hxx' xRy) as [ y' ];
  exists y'; auto; right; auto.
Qed.
"""

# The crafted tricky corpus: strings, comments, qualified names, bullets.
TRICKY_SNIPPETS = [
    "",
    "   \n\t  ",
    "Proof. intros x. Qed.",
    "(* a. b. *) Lemma l: Mod.t = Mod.t. Proof. reflexivity. Qed.",
    "(* outer (* inner. *) still. *) auto.",
    'Definition s := "a. b".',
    'Definition q := "she said ""hi. there""".',
    'Notation "x . y" := (dotted x y).',
    'Definition c := "(* not a comment *)".',
    "Check Nat.add. Compute List.map.",
    "Require Import Coq.Lists.List.",
    "Proof. split. - auto. - reflexivity. Qed.",
    "Proof. - -- auto. -- idtac. - auto. Qed.",
    "Proof. { auto. } { reflexivity. } Qed.",
    "* auto. * idtac.",
    "+ eauto. + auto.",
    "split. { auto. } - reflexivity.",
    "intros x... auto.",
    "Check 1.5.",
    "auto.auto.",
    "Lemma a (* note. *) : True. Proof. auto. Qed.",
    "Lemma ab: forall x, x = x. Proof. auto. Qed.",
    "auto. (* trailing comment *)",
    "auto. (**) eauto.",
    "(** doc. with periods. *) trivial.",
    "(* a (* b (* c. *) *) *) trivial.",
    "intros x' y''. exact x'.",
    "pose proof _foo_bar. auto.",
    "auto. -",
    "{ }",
    "auto.\r\nidtac.",
    "destruct (H _ _ _ Hxx' xRy) as [ y' ]; exists y'; auto.",
    "Lemma union2_evolve_left:\n  forall l R S S', evolve_1 l R S -> evolve_1 l R (union2 S S').\nProof.\n  auto.\nQed.",
    "Lemma weak_refl: forall x, Weak T x x.\nProof.\n  intros x.\n  constructor.\n  reflexivity.\nQed.",
    C5_PRECEDING_BLOCK,
    C5_UNION2_BLOCK,
]


def _gap_is_whitespace_and_comments(gap: str) -> bool:
    i, n = 0, len(gap)
    while i < n:
        if gap[i].isspace():
            i += 1
        elif gap.startswith("(*", i):
            depth = 0
            while i < n:
                if gap.startswith("(*", i):
                    depth += 1
                    i += 2
                elif gap.startswith("*)", i):
                    depth -= 1
                    i += 2
                    if depth == 0:
                        break
                else:
                    i += 1
            if depth != 0:
                return False
        else:
            return False
    return True


def assert_segmentation_invariants(source: str, sentences: list[Sentence]) -> None:
    raw = source.encode("utf-8")
    previous_end = 0
    for s in sentences:
        start, end = s.span
        assert start >= previous_end and end > start
        assert raw[start:end].decode("utf-8") == s.text
        assert _gap_is_whitespace_and_comments(raw[previous_end:start].decode("utf-8"))
        previous_end = end
    assert _gap_is_whitespace_and_comments(raw[previous_end:].decode("utf-8"))
    assert rejoin(source, sentences) == source


@pytest.mark.parametrize("source", TRICKY_SNIPPETS)
def test_matches_oracle_on_tricky_corpus(source):
    expected = oracle_segment(source)
    got = segment_sentences(source)
    assert [(s.text, *s.span) for s in got] == expected
    assert_segmentation_invariants(source, got)


def test_empty_input():
    assert segment_sentences("") == []


def test_three_sentences():
    got = segment_sentences("Proof. intros x. Qed.")
    assert [s.text for s in got] == ["Proof.", "intros x.", "Qed."]


def test_comment_skipped_and_qualified_name_kept():
    got = segment_sentences("(* a. b. *) Lemma l: Mod.t = Mod.t. Proof. reflexivity. Qed.")
    assert [s.text for s in got] == [
        "Lemma l: Mod.t = Mod.t.",
        "Proof.",
        "reflexivity.",
        "Qed.",
    ]


def test_bullets_are_own_sentences():
    got = segment_sentences("Proof. split. - auto. - reflexivity. Qed.")
    assert [s.text for s in got] == ["Proof.", "split.", "-", "auto.", "-", "reflexivity.", "Qed."]
    assert segment_sentences("--- auto.")[0].text == "---"


@pytest.mark.parametrize(
    "source,exc,offset",
    [
        ("auto. (* unterminated", UnterminatedComment, 6),
        ('Definition s := "open.', UnterminatedString, 16),
        ("intros x", UnterminatedSentence, 0),
        ("auto. trailing", UnterminatedSentence, 6),
    ],
)
def test_lexical_errors_with_offsets(source, exc, offset):
    with pytest.raises(exc) as err:
        segment_sentences(source)
    assert err.value.offset == offset


def test_helpers():
    qed = segment_sentences("Qed.")[0]
    assert is_closing(qed) and is_closing(qed, proving_only=True)
    admitted = segment_sentences("Admitted.")[0]
    assert is_closing(admitted) and not is_closing(admitted, proving_only=True)
    stmt = segment_sentences("Lemma foo': forall x, x = x.")[0]
    assert is_statement(stmt)
    assert statement_name(stmt) == "foo'"
    assert not is_statement(segment_sentences("Definition d := 1.")[0])
    assert segment_sentences("-")[0].is_bullet()


_ident = st.from_regex(r"[A-Za-z_][A-Za-z0-9_']{0,6}", fullmatch=True)
_atom = st.one_of(
    _ident.map(lambda t: f"{t}."),
    st.tuples(_ident, _ident).map(lambda p: f"{p[0]} {p[1]}."),
    st.tuples(_ident, _ident).map(lambda p: f"Check {p[0]}.{p[1]}."),
    _ident.map(lambda t: f'Definition {t} := "a. b".'),
    _ident.map(lambda t: f"(* {t}. nested (* inner. *) *)"),
    st.sampled_from(["-", "+", "*", "--", "{", "}", "(* c. *)", "(**)"]),
)
_ws = st.sampled_from([" ", "  ", "\n", "\t", "\n\n", " \n "])


@st.composite
def vernacular_sources(draw):
    parts = draw(st.lists(st.tuples(_atom, _ws), max_size=12))
    return "".join(atom + ws for atom, ws in parts)


@given(vernacular_sources())
@settings(max_examples=200, deadline=None)
def test_property_oracle_equivalence_and_roundtrip(source):
    expected = oracle_segment(source)
    got = segment_sentences(source)
    assert [(s.text, *s.span) for s in got] == expected
    assert_segmentation_invariants(source, got)


@given(st.text(alphabet="ab.(*) \"-+{}\n", max_size=60))
@settings(max_examples=300, deadline=None)
def test_property_agrees_with_oracle_on_noise(source):
    try:
        expected = oracle_segment(source)
    except OracleLexicalError as err:
        with pytest.raises(LexicalError):
            segment_sentences(source)
        try:
            segment_sentences(source)
        except LexicalError as got_err:
            assert got_err.offset == len(source[: err.char_offset].encode("utf-8"))
        return
    got = segment_sentences(source)
    assert [(s.text, *s.span) for s in got] == expected
    assert_segmentation_invariants(source, got)
