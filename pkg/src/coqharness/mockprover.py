"""Table-driven mock prover.

The behavior table maps theorem names to the exact tactic sequences that
prove them, plus scripted query responses and error messages phrased like
the real toplevel's, so classifier rules can be exercised with no Coq
installed. File format (JSON)::

    {
      "theorems": {
        "weak_refl": {
          "statement_goal": "forall x, Weak T x x",       // optional
          "initial_state": "<rendered proof state>",       // optional
          "scripts": [
            ["intros x.", "constructor.", "reflexivity.", "Qed."],
            {"steps": ["auto.", "Qed."], "states": [null]}
          ],
          "errors": [{"contains": "stutter_bisim",
                      "message": "The reference stutter_bisim was not found in the current environment."}]
        }
      },
      "queries": {"Check": {"nat": "nat\\n     : Set"}},
      "query_default_error": "The reference {arg} was not found in the current environment.",
      "errors": [ ... ]     // matched against sentences outside proofs
    }

Script steps are matched on whitespace-normalized text; a bare "Proof."
is a no-op and never part of the match. A script's last step must be a
closing command (one is appended when missing).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .driver import (
    ERROR,
    OK,
    QueryRejected,
    SessionConfig,
    SessionHandle,
    StepResult,
    _coerce_sentence,
)
from .proofstate import ProofState, parse_proof_state
from .sentences import Sentence, is_closing, is_statement, statement_name

INCOMPLETE_PROOF_MESSAGE = "Attempt to save an incomplete proof."
NO_FOCUSED_PROOF_MESSAGE = "No focused proof (No proof-editing in progress)."
NO_MORE_GOALS_MESSAGE = "No more goals."
DEFAULT_TACTIC_FAILURE = "No applicable tactic."
DEFAULT_QUERY_ERROR = "The reference {arg} was not found in the current environment."

_INTRO_RE = re.compile(r"^intros?\b(.*)\.$")
_IDENT_RE = re.compile(r"^[^\W\d][\w']*$")


def _norm(text: str) -> str:
    return " ".join(text.split())


@dataclass
class _Script:
    steps: list[str]
    states: list[str | None]


@dataclass
class _TheoremEntry:
    name: str
    goal: str | None = None
    initial_state: ProofState | None = None
    scripts: list[_Script] = field(default_factory=list)
    errors: list[tuple[re.Pattern, str]] = field(default_factory=list)


def _compile_error_rules(raw: list[dict]) -> list[tuple[re.Pattern, str]]:
    rules = []
    for item in raw:
        if "contains" in item:
            pattern = re.compile(re.escape(item["contains"]))
        else:
            pattern = re.compile(item["regex"])
        rules.append((pattern, item["message"]))
    return rules


def _parse_script(raw) -> _Script:
    if isinstance(raw, dict):
        steps = [_norm(s) for s in raw["steps"]]
        states = list(raw.get("states") or [])
    else:
        steps = [_norm(s) for s in raw]
        states = []
    steps = [s for s in steps if s != "Proof."]
    if not steps or not is_closing(steps[-1]):
        steps.append("Qed.")
    states += [None] * (len(steps) - 1 - len(states))
    return _Script(steps, states[: len(steps) - 1])


def load_behavior_table(source: dict | str | Path | None) -> dict:
    if source is None:
        return {}
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return json.load(fh)
    return source


class MockSession(SessionHandle):
    """Deterministic scripted prover honoring the SessionHandle contract."""

    def __init__(self, config: SessionConfig):
        self.config = config
        table = load_behavior_table(config.mock_table)
        self._theorems: dict[str, _TheoremEntry] = {}
        for name, raw in table.get("theorems", {}).items():
            entry = _TheoremEntry(name)
            entry.goal = raw.get("statement_goal")
            if raw.get("initial_state"):
                entry.initial_state = parse_proof_state(raw["initial_state"])
            entry.scripts = [_parse_script(s) for s in raw.get("scripts", [])]
            entry.errors = _compile_error_rules(raw.get("errors", []))
            self._theorems[name] = entry
        self._queries: dict[str, dict[str, str]] = table.get("queries", {})
        self._query_default = table.get("query_default_error", DEFAULT_QUERY_ERROR)
        self._global_errors = _compile_error_rules(table.get("errors", []))

        # Mutable session state: the open proof (if any) and its executed steps.
        self._entry: _TheoremEntry | None = None
        self._steps: list[str] = []
        # Prelude replay is trusted file content: tactics inside its proofs
        # pass without adjudication so a whole file can be fed through.
        self._prelude_mode = False

    def set_prelude_mode(self, enabled: bool) -> None:
        self._prelude_mode = enabled

    # -- helpers --

    def _open_proof(self, statement: Sentence) -> StepResult:
        name = statement_name(statement) or "_unnamed"
        entry = self._theorems.get(name)
        if entry is None:
            entry = _TheoremEntry(name)
            m = re.match(r"[^:]*:\s*(.*)\.\s*$", statement.text, re.DOTALL)
            entry.goal = _norm(m.group(1)) if m else "True"
        self._entry = entry
        self._steps = []
        return StepResult(OK, "", self._synthesized_state())

    def _initial_state(self) -> ProofState:
        entry = self._entry
        assert entry is not None
        if entry.initial_state is not None:
            return entry.initial_state
        goal = entry.goal or "True"
        return ProofState((), (goal,), (1, 1))

    def _introduced_names(self) -> list[str]:
        names = []
        for step in self._steps:
            m = _INTRO_RE.match(step)
            if m:
                names += [t for t in m.group(1).split() if _IDENT_RE.match(t)]
        return names

    def _synthesized_state(self) -> ProofState:
        base = self._initial_state()
        known = set(base.hypothesis_names)
        extra = []
        for name in self._introduced_names():
            if name not in known:
                known.add(name)
                extra.append(((name,), "_"))
        return ProofState(base.hypotheses + tuple(extra), base.goals, base.goal_index)

    def _matching_scripts(self, steps: list[str]) -> list[_Script]:
        entry = self._entry
        assert entry is not None
        return [s for s in entry.scripts if s.steps[: len(steps)] == steps]

    def _state_after(self, script: _Script, k: int) -> tuple[ProofState | None, str]:
        """State and message after executing steps[:k] of an accepted prefix."""
        if k == len(script.steps) - 1:
            # Only the closer remains.
            scripted = script.states[k - 1] if 0 < k <= len(script.states) else None
            if scripted:
                return parse_proof_state(scripted), ""
            return None, NO_MORE_GOALS_MESSAGE
        scripted = script.states[k - 1] if 0 < k <= len(script.states) else None
        if scripted:
            return parse_proof_state(scripted), ""
        return self._synthesized_state(), ""

    def _fail(self, text: str) -> StepResult:
        entry = self._entry
        m = _INTRO_RE.match(text)
        if m:
            current = set(self.current_state().hypothesis_names) if self.current_state() else set()
            for name in (t for t in m.group(1).split() if _IDENT_RE.match(t)):
                if name in current:
                    return StepResult(ERROR, f"{name} is already used.")
        if entry is not None:
            for pattern, message in entry.errors:
                if pattern.search(text):
                    return StepResult(ERROR, message)
        for pattern, message in self._global_errors:
            if pattern.search(text):
                return StepResult(ERROR, message)
        return StepResult(ERROR, DEFAULT_TACTIC_FAILURE)

    # -- SessionHandle contract --

    def execute(self, sentence: Sentence | str) -> StepResult:
        sentence = _coerce_sentence(sentence)
        text = _norm(sentence.text)

        if self._entry is None:
            if is_statement(sentence):
                return self._open_proof(sentence)
            if is_closing(sentence):
                return StepResult(ERROR, NO_FOCUSED_PROOF_MESSAGE)
            for pattern, message in self._global_errors:
                if pattern.search(text):
                    return StepResult(ERROR, message)
            return StepResult(OK, "")

        if is_statement(sentence):
            return StepResult(ERROR, "Nested proofs are not supported.")
        if text == "Proof." or text.startswith("Proof using"):
            state, message = (self._synthesized_state(), "")
            if self._matching_scripts(self._steps):
                matched = self._matching_scripts(self._steps)[0]
                state, message = self._state_after(matched, len(self._steps))
            return StepResult(OK, message, state)

        candidate = self._steps + [text]
        matches = self._matching_scripts(candidate)
        if matches:
            self._steps = candidate
            script = matches[0]
            if len(candidate) == len(script.steps):
                complete = is_closing(text, proving_only=True)
                self._entry = None
                self._steps = []
                return StepResult(OK, "", None, proof_complete=complete)
            state, message = self._state_after(script, len(candidate))
            return StepResult(OK, message, state)

        if is_closing(sentence, proving_only=True):
            if self._prelude_mode:
                self._entry = None
                self._steps = []
                return StepResult(OK, "", None, proof_complete=True)
            return StepResult(ERROR, INCOMPLETE_PROOF_MESSAGE)
        if is_closing(sentence):
            # Admitted./Abort. close the proof without completing it.
            self._entry = None
            self._steps = []
            return StepResult(OK, "")
        if self._prelude_mode:
            return StepResult(OK, "", self._synthesized_state())
        return self._fail(text)

    def query(self, command: str, argument: str) -> str:
        self._validate_query(command, argument)
        argument = argument.strip()
        response = self._queries.get(command, {}).get(argument)
        if response is None:
            raise QueryRejected(self._query_default.format(arg=argument))
        return response

    def current_state(self) -> ProofState | None:
        if self._entry is None:
            return None
        matches = self._matching_scripts(self._steps)
        if matches and self._steps:
            state, _ = self._state_after(matches[0], len(self._steps))
            return state
        return self._synthesized_state()

    def _snapshot(self):
        return (self._entry, list(self._steps))

    def _restore(self, token) -> None:
        self._entry, steps = token
        self._steps = list(steps)
