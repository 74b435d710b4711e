"""Sessions against a Coq toplevel, real or mock.

The real backend drives a line-oriented toplevel (``coqtop -emacs`` by
default) over stdin/stdout, delimiting responses with the emacs prompt
marker. The mock backend (mockprover module) replays a deterministic
behavior table. Both satisfy the same contract:

  * execute() either advances the session or leaves it untouched on error;
  * check_proof() restores the session to its pre-check state;
  * one session is strictly single-threaded.
"""

from __future__ import annotations

import logging
import queue
import re
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .proofstate import MalformedState, ProofState, parse_proof_state
from .sentences import Sentence, is_closing, segment_sentences

log = logging.getLogger(__name__)

OK = "ok"
ERROR = "error"

QUERY_COMMANDS = ("Print", "Check", "Search", "About", "Locate")

DEFAULT_TIMEOUT = 20.0
TIMEOUT_MESSAGE = "TIMEOUT"


class ProverError(Exception):
    pass


class SpawnFailure(ProverError):
    pass


class SessionDead(ProverError):
    pass


class PreludeError(ProverError):
    def __init__(self, step_index: int, message: str):
        super().__init__(f"prelude step {step_index} rejected: {message}")
        self.step_index = step_index
        self.message = message


class QueryRejected(ProverError):
    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


@dataclass
class SessionConfig:
    backend: str = "mock"
    prover_command: str = "coqtop -emacs -q"
    prelude: list[Sentence] = field(default_factory=list)
    timeout_per_step: float = DEFAULT_TIMEOUT
    workdir: str | Path = "."
    # mock backend: behavior table (dict) or path to its JSON file
    mock_table: dict | str | Path | None = None

    def __post_init__(self):
        if self.timeout_per_step <= 0:
            raise ValueError("timeout_per_step must be positive")
        if self.backend == "real" and not self.prover_command.strip():
            raise ValueError("prover_command required for the real backend")


@dataclass
class StepResult:
    outcome: str
    message: str = ""
    state: ProofState | None = None
    proof_complete: bool = False

    @property
    def ok(self) -> bool:
        return self.outcome == OK


@dataclass
class ProofCheckResult:
    accepted: bool
    failing_step: tuple[int, Sentence] | None
    message: str
    states: list[ProofState]


def _coerce_sentence(sentence: Sentence | str) -> Sentence:
    if isinstance(sentence, Sentence):
        return sentence
    parsed = segment_sentences(sentence)
    if len(parsed) != 1:
        raise ValueError(f"expected exactly one sentence, got {len(parsed)}: {sentence!r}")
    return parsed[0]


class SessionHandle:
    """Base session: step execution, informational queries, whole-proof checks."""

    def execute(self, sentence: Sentence | str) -> StepResult:
        raise NotImplementedError

    def query(self, command: str, argument: str) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # Backend-specific checkpointing used by check_proof.
    def _snapshot(self):
        raise NotImplementedError

    def _restore(self, token) -> None:
        raise NotImplementedError

    def current_state(self) -> ProofState | None:
        raise NotImplementedError

    def _validate_query(self, command: str, argument: str) -> None:
        if command not in QUERY_COMMANDS:
            raise QueryRejected(f"command {command!r} is not in the query allow-list")
        if not argument.strip():
            raise QueryRejected("empty query argument")

    def check_proof(self, theorem_statement: str, proof_script: str) -> ProofCheckResult:
        """Run statement + script, restore the session, report acceptance.

        failing_step indexes into the script's sentences; -1 marks a
        rejected statement. Lexical errors in the script propagate as
        LexicalError, distinct from prover rejection.
        """
        statement_sentences = segment_sentences(theorem_statement)
        script_sentences = segment_sentences(proof_script)
        token = self._snapshot()
        states: list[ProofState] = []
        try:
            for offset, sentence in enumerate(statement_sentences):
                result = self.execute(sentence)
                if not result.ok:
                    return ProofCheckResult(False, (-1, sentence), result.message, states)
                if result.state is not None:
                    states.append(result.state)
            result = None
            for index, sentence in enumerate(script_sentences):
                result = self.execute(sentence)
                if not result.ok:
                    return ProofCheckResult(False, (index, sentence), result.message, states)
                if result.state is not None:
                    states.append(result.state)
            if result is not None and result.proof_complete:
                return ProofCheckResult(True, None, "", states)
            return ProofCheckResult(
                False, None, "proof incomplete: no closing command accepted", states
            )
        finally:
            self._restore(token)


def start_session(config: SessionConfig) -> SessionHandle:
    """Spawn (or mock) a prover with the prelude already executed."""
    if config.backend == "mock":
        from .mockprover import MockSession

        session: SessionHandle = MockSession(config)
    elif config.backend == "real":
        session = RealCoqSession(config)
    else:
        raise ValueError(f"unknown backend {config.backend!r}")

    set_prelude_mode = getattr(session, "set_prelude_mode", lambda enabled: None)
    set_prelude_mode(True)
    try:
        for index, sentence in enumerate(config.prelude):
            result = session.execute(sentence)
            if not result.ok:
                session.close()
                raise PreludeError(index, result.message)
    finally:
        set_prelude_mode(False)
    if isinstance(session, RealCoqSession):
        session.mark_checkpoint()
    return session


# ---------------------------------------------------------------------------
# Real toplevel backend
# ---------------------------------------------------------------------------

# coqtop -emacs wraps its prompt in these markers (written to stderr, which
# we merge into stdout). The prompt body carries the current state id and
# the stack of open proofs: e.g. "Coq < 4 |lem| 4 < ".
PROMPT_RE = re.compile(r"<prompt>(.*?)</prompt>", re.DOTALL)
PROMPT_FIELDS_RE = re.compile(r"<\s*(\d+)\s*\|([^|]*)\|")
ERROR_RE = re.compile(r"^\s*(?:Error\b|Anomaly\b|Toplevel input, characters)", re.MULTILINE)
NO_MORE_GOALS_RE = re.compile(r"No more (?:sub)?goals", re.IGNORECASE)


class RealCoqSession(SessionHandle):
    """Subprocess-backed session speaking to coqtop in emacs-prompt mode."""

    def __init__(self, config: SessionConfig):
        self.config = config
        self._history: list[Sentence] = []
        self._checkpoint_len = 0
        self._state_id = 0
        self._open_proofs = ""
        self._proc: subprocess.Popen | None = None
        self._out: queue.Queue[str | None] = queue.Queue()
        self._replaying = False
        self._spawn()

    # -- process plumbing --

    def _spawn(self) -> None:
        template = self.config.prover_command.replace("{workdir}", str(self.config.workdir))
        command = shlex.split(template)
        try:
            self._proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                cwd=str(self.config.workdir),
                text=True,
                bufsize=0,
            )
        except OSError as exc:
            raise SpawnFailure(f"cannot spawn {self.config.prover_command!r}: {exc}") from exc
        self._out = queue.Queue()
        thread = threading.Thread(target=self._pump, args=(self._proc.stdout,), daemon=True)
        thread.start()
        try:
            self._read_until_prompt(self.config.timeout_per_step)
        except TimeoutError as exc:
            self._kill()
            raise SpawnFailure(f"no initial prompt from prover: {exc}") from exc

    def _pump(self, stream) -> None:
        while True:
            chunk = stream.read(1)
            if not chunk:
                self._out.put(None)
                return
            self._out.put(chunk)

    def _kill(self) -> None:
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=5)
            except OSError:
                pass
            self._proc = None

    def close(self) -> None:
        self._kill()

    def _read_until_prompt(self, timeout: float) -> str:
        buffer = ""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(buffer)
            try:
                chunk = self._out.get(timeout=remaining)
            except queue.Empty:
                raise TimeoutError(buffer) from None
            if chunk is None:
                raise SessionDead(f"prover exited; output so far: {buffer[-500:]!r}")
            buffer += chunk
            match = None
            for match in PROMPT_RE.finditer(buffer):
                pass
            if match and match.end() == len(buffer):
                fields = PROMPT_FIELDS_RE.search(match.group(1))
                if fields:
                    self._state_id = int(fields.group(1))
                    self._open_proofs = fields.group(2).strip()
                return buffer[: match.start()]

    def _send(self, text: str, timeout: float | None = None) -> str:
        if self._proc is None or self._proc.poll() is not None:
            raise SessionDead("prover process is not running")
        flat = re.sub(r"[\r\n]+", " ", text).strip()
        assert self._proc.stdin is not None
        self._proc.stdin.write(flat + "\n")
        self._proc.stdin.flush()
        return self._read_until_prompt(timeout or self.config.timeout_per_step)

    # -- session operations --

    def mark_checkpoint(self) -> None:
        """Everything executed so far is replayed verbatim after a restart."""
        self._checkpoint_len = len(self._history)

    @property
    def in_proof(self) -> bool:
        return bool(self._open_proofs)

    def execute(self, sentence: Sentence | str) -> StepResult:
        sentence = _coerce_sentence(sentence)
        was_in_proof = self.in_proof
        pre_state_id = self._state_id
        try:
            response = self._send(sentence.text)
        except TimeoutError:
            if self._replaying:
                raise SessionDead("timeout while replaying after a restart") from None
            self._restart_from_checkpoint()
            return StepResult(ERROR, TIMEOUT_MESSAGE)

        if ERROR_RE.search(response):
            if self._state_id != pre_state_id:
                # The toplevel normally does not advance on error; undo if it did.
                self._send(f"BackTo {pre_state_id}.")
            return StepResult(ERROR, response.strip())

        self._history.append(sentence)
        proof_complete = bool(
            was_in_proof and not self.in_proof and is_closing(sentence, proving_only=True)
        )
        state = self._parse_state(response) if self.in_proof else None
        return StepResult(OK, response.strip(), state, proof_complete)

    @staticmethod
    def _parse_state(response: str) -> ProofState | None:
        if NO_MORE_GOALS_RE.search(response):
            return None
        try:
            return parse_proof_state(response)
        except MalformedState:
            return None

    def query(self, command: str, argument: str) -> str:
        self._validate_query(command, argument)
        pre_state_id = self._state_id
        try:
            response = self._send(f"{command} {argument.strip()}.")
        except TimeoutError:
            self._restart_from_checkpoint()
            raise QueryRejected(TIMEOUT_MESSAGE) from None
        if ERROR_RE.search(response):
            if self._state_id != pre_state_id:
                self._send(f"BackTo {pre_state_id}.")
            raise QueryRejected(response.strip())
        if self._state_id != pre_state_id:
            self._send(f"BackTo {pre_state_id}.")
        return response.strip()

    def current_state(self) -> ProofState | None:
        if not self.in_proof:
            return None
        try:
            response = self._send("Show.")
        except TimeoutError:
            self._restart_from_checkpoint()
            return None
        return self._parse_state(response)

    def _snapshot(self):
        return (self._state_id, len(self._history))

    def _restore(self, token) -> None:
        state_id, history_len = token
        if self._proc is None or self._proc.poll() is not None:
            self._restart_from_checkpoint(history_len)
            return
        response = self._send(f"BackTo {state_id}.")
        if ERROR_RE.search(response):
            raise SessionDead(f"BackTo {state_id} rejected: {response.strip()}")
        del self._history[history_len:]

    def _restart_from_checkpoint(self, keep: int | None = None) -> None:
        """Kill and respawn, replaying the prelude checkpoint and history."""
        self._kill()
        replay = self._history[: keep if keep is not None else len(self._history)]
        self._history = []
        self._open_proofs = ""
        self._spawn()
        self._replaying = True
        try:
            for sentence in replay:
                result = self.execute(sentence)
                if not result.ok:
                    raise SessionDead(
                        f"replay after restart failed at {sentence.text!r}: {result.message}"
                    )
        finally:
            self._replaying = False
