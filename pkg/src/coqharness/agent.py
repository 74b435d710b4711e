"""Proof-attempt orchestration.

Four loop styles over one theorem:

  one_shot     sample n candidate proofs from one prompt, machine-check each
  interactive  converse with the prover: state feedback, QUERY tool calls,
               stepwise execution with rollback on errors
  repair       one-shot round 0, then feed each unique failing script its
               prover error back and sample one fix per round
  ensemble     one-shot once per prompt-diversity variant, splitting the
               sample budget, base variant taking the remainder

All loops are deterministic under the scripted provider and mock prover for
a fixed seed.
"""

from __future__ import annotations

import logging
import random
import re
import time
from dataclasses import dataclass, field, replace
from typing import Callable

from .client import DecodingParams, Provider, complete
from .corpus import Corpus, TheoremRecord, preceding_lemmas
from .driver import SessionConfig, SessionHandle, start_session
from .prompting import (
    EMPTY,
    MALFORMED,
    PROOF,
    REFUSAL,
    ChatMessage,
    ChatPrompt,
    ConfigMismatch,
    TemplateSet,
    build_prompt,
    diversify,
    parse_completion,
)
from .proofstate import render_proof_state
from .retriever import EmbeddingModel, Index, retrieve
from .sentences import LexicalError, segment_sentences

log = logging.getLogger(__name__)

MODES = ("zs", "fs-rand", "fs-sim", "zs+lem", "fs+lem")
LOOPS = ("one_shot", "interactive", "repair", "ensemble")

DEFAULT_K_SHOTS = 6
DEFAULT_N_LEMMAS = 6
DEFAULT_MAX_TURNS = 30
DEFAULT_MAX_QUERIES = 10
DEFAULT_REPAIR_ROUNDS = 2
MAX_TACTICS_PER_TURN = 5

_QUERY_LINE_RE = re.compile(r"^QUERY\s+(Print|Check|Search|About|Locate)\s+(.+?)\s*$", re.MULTILINE)


class AgentError(Exception):
    pass


@dataclass
class RunConfig:
    tag: str
    mode: str
    loop: str = "one_shot"
    k_shots: int | None = None
    n_lemmas: int = DEFAULT_N_LEMMAS
    decoding: DecodingParams = field(default_factory=DecodingParams)
    seed: int = 0
    repair_rounds: int = DEFAULT_REPAIR_ROUNDS
    strategies: tuple[str, ...] = ()
    max_turns: int = DEFAULT_MAX_TURNS
    max_queries: int = DEFAULT_MAX_QUERIES
    wall_clock: float | None = None  # seconds per theorem for looping agents
    max_prompt_chars: int | None = None
    retrieval_mode: str = "lexical"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loop not in LOOPS:
            raise ValueError(f"unknown agent loop {self.loop!r}")
        if self.k_shots is None:
            self.k_shots = 0 if self.zero_shot else DEFAULT_K_SHOTS
        if self.zero_shot != (self.k_shots == 0):
            raise ValueError("k_shots must be 0 exactly for zero-shot modes")
        if self.loop == "repair" and self.repair_rounds < 1:
            raise ValueError("repair needs at least one round")
        if self.loop == "ensemble" and not self.strategies:
            raise ConfigMismatch("ensemble needs a non-empty strategy list")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")

    @property
    def zero_shot(self) -> bool:
        return self.mode.startswith("zs")

    @property
    def with_lemmas(self) -> bool:
        return self.mode.endswith("+lem")


@dataclass(frozen=True)
class Turn:
    prompt_delta: str
    completion: str
    tool_calls: tuple[tuple[str, str, str], ...] = ()


@dataclass
class AttemptRecord:
    theorem_id: str
    config_tag: str
    variant_id: str
    candidate_index: int
    proof_script: str
    accepted: bool
    failing_step: tuple[int, str, str] | None  # (index, sentence, error message)
    turns: list[Turn]
    completion_kind: str
    refusal_text: str | None = None
    category: str | None = None
    round: int = 0
    budget_exhausted: bool = False
    appended_qed: bool = False
    lexical_error: bool = False
    dropped_examples: int = 0
    missed_simple: bool = False
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def error_message(self) -> str:
        return self.failing_step[2] if self.failing_step else ""


def attempt_to_json(record: AttemptRecord, with_timings: bool = True) -> dict:
    row = {
        "theorem_id": record.theorem_id,
        "config_tag": record.config_tag,
        "variant_id": record.variant_id,
        "candidate_index": record.candidate_index,
        "proof_script": record.proof_script,
        "accepted": record.accepted,
        "failing_step": list(record.failing_step) if record.failing_step else None,
        "turns": [
            {"prompt_delta": t.prompt_delta, "completion": t.completion,
             "tool_calls": [list(c) for c in t.tool_calls]}
            for t in record.turns
        ],
        "completion_kind": record.completion_kind,
        "refusal_text": record.refusal_text,
        "category": record.category,
        "round": record.round,
        "budget_exhausted": record.budget_exhausted,
        "appended_qed": record.appended_qed,
        "lexical_error": record.lexical_error,
        "dropped_examples": record.dropped_examples,
        "missed_simple": record.missed_simple,
    }
    if with_timings:
        row["timings"] = record.timings
    return row


def attempt_from_json(row: dict) -> AttemptRecord:
    return AttemptRecord(
        theorem_id=row["theorem_id"],
        config_tag=row["config_tag"],
        variant_id=row["variant_id"],
        candidate_index=row["candidate_index"],
        proof_script=row["proof_script"],
        accepted=row["accepted"],
        failing_step=tuple(row["failing_step"]) if row.get("failing_step") else None,
        turns=[
            Turn(t["prompt_delta"], t["completion"],
                 tuple(tuple(c) for c in t.get("tool_calls", [])))
            for t in row.get("turns", [])
        ],
        completion_kind=row["completion_kind"],
        refusal_text=row.get("refusal_text"),
        category=row.get("category"),
        round=row.get("round", 0),
        budget_exhausted=row.get("budget_exhausted", False),
        appended_qed=row.get("appended_qed", False),
        lexical_error=row.get("lexical_error", False),
        dropped_examples=row.get("dropped_examples", 0),
        missed_simple=row.get("missed_simple", False),
        timings=row.get("timings", {}),
    )


@dataclass
class AgentDeps:
    corpus: Corpus
    provider: Provider
    session_factory: Callable[[TheoremRecord], SessionHandle]
    index: Index | None = None
    templates: TemplateSet | None = None
    embedding: EmbeddingModel | None = None


def session_factory_from_config(base: SessionConfig) -> Callable[[TheoremRecord], SessionHandle]:
    """Sessions whose prelude is everything before the target in its file."""

    def factory(target: TheoremRecord) -> SessionHandle:
        prelude = segment_sentences(target.preceding_source)
        return start_session(replace(base, prelude=list(prelude)))

    return factory


# ---------------------------------------------------------------------------
# Prompt assembly
# ---------------------------------------------------------------------------


def _select_examples(
    target: TheoremRecord, config: RunConfig, deps: AgentDeps
) -> list[TheoremRecord]:
    if config.zero_shot:
        return []
    train = [r for r in deps.corpus.train if r.id != target.id]
    if not train:
        raise AgentError(f"no train records available for few-shot mode {config.mode}")
    k = min(config.k_shots, len(train))
    if k < config.k_shots:
        log.warning("only %d train records for k_shots=%d", len(train), config.k_shots)
    # fs+lem keys on similarity when an index is available, else random.
    if config.mode == "fs-rand" or (config.mode == "fs+lem" and deps.index is None):
        rng = random.Random(f"{config.seed}:{target.id}")
        return rng.sample(train, k)
    if config.mode in ("fs-sim", "fs+lem"):
        if deps.index is None:
            raise AgentError("similarity modes need a retrieval index")
        ranked = retrieve(
            deps.index, target, k, mode=config.retrieval_mode, model=deps.embedding
        )
        by_id = {r.id: r for r in train}
        # least similar first, so the budget trimmer sheds the farthest one
        return [by_id[rid] for rid, _ in reversed(ranked) if rid in by_id]
    raise AgentError(f"unhandled mode {config.mode}")


def _lemma_pairs(target_or_example: TheoremRecord, config: RunConfig, deps: AgentDeps):
    if not config.with_lemmas:
        return []
    found = preceding_lemmas(deps.corpus, target_or_example.id, config.n_lemmas)
    return [(name, statement.text) for name, statement, _ in found]


def _build_target_prompt(
    target: TheoremRecord, config: RunConfig, deps: AgentDeps, interactive: bool = False
) -> ChatPrompt:
    examples = _select_examples(target, config, deps)
    lemmas = _lemma_pairs(target, config, deps)
    example_lemmas = [_lemma_pairs(e, config, deps) for e in examples]
    prompt = build_prompt(
        config,
        target,
        examples=examples,
        lemmas=lemmas,
        templates=deps.templates,
        example_lemmas=example_lemmas,
        interactive=interactive,
        max_prompt_chars=config.max_prompt_chars,
    )
    reference = target.proof_text
    if reference and any(reference in m.content for m in prompt.messages):
        log.warning("target %s reference proof leaked into its prompt", target.id)
    return prompt


# ---------------------------------------------------------------------------
# One-shot
# ---------------------------------------------------------------------------


def _check_candidates(
    prompt: ChatPrompt,
    target: TheoremRecord,
    config: RunConfig,
    deps: AgentDeps,
    n: int,
    first_index: int = 0,
    round_no: int = 0,
    session: SessionHandle | None = None,
) -> list[AttemptRecord]:
    """Sample n completions for the prompt, parse, and check the proofs."""
    decoding = replace(config.decoding, n=n)
    started = time.monotonic()
    completions = complete(prompt, decoding, deps.provider)
    sample_time = time.monotonic() - started

    own_session = session is None
    if own_session:
        session = deps.session_factory(target)
    check_cache: dict[str, object] = {}
    records: list[AttemptRecord] = []
    try:
        for i, raw in enumerate(completions):
            parsed = parse_completion(raw, target.statement_text)
            turn = Turn(prompt.messages[-1].content, raw)
            record = AttemptRecord(
                theorem_id=target.id,
                config_tag=config.tag,
                variant_id=prompt.variant_id,
                candidate_index=first_index + i,
                proof_script=parsed.proof_script or "",
                accepted=False,
                failing_step=None,
                turns=[turn],
                completion_kind=parsed.kind,
                refusal_text=parsed.refusal_text,
                round=round_no,
                appended_qed=parsed.appended_qed,
                lexical_error=parsed.lexical,
                dropped_examples=prompt.dropped_examples,
                timings={"sample_s": sample_time},
            )
            if parsed.kind == PROOF:
                script = parsed.proof_script or ""
                if script in check_cache:
                    result = check_cache[script]
                else:
                    check_started = time.monotonic()
                    try:
                        result = session.check_proof(target.statement.text, script)
                    except LexicalError as exc:
                        result = exc
                    check_cache[script] = result
                    record.timings["check_s"] = time.monotonic() - check_started
                if isinstance(result, LexicalError):
                    record.completion_kind = MALFORMED
                    record.lexical_error = True
                    record.failing_step = (-1, "", str(result))
                else:
                    record.accepted = result.accepted
                    if not result.accepted:
                        if result.failing_step is not None:
                            idx, sentence = result.failing_step
                            record.failing_step = (idx, sentence.text, result.message)
                        else:
                            record.failing_step = (-1, "", result.message)
            records.append(record)
    finally:
        if own_session:
            session.close()
    return records


def prove_one_shot(
    target: TheoremRecord, config: RunConfig, deps: AgentDeps
) -> list[AttemptRecord]:
    """The baseline pipeline: one prompt, n samples, machine-check each."""
    prompt = _build_target_prompt(target, config, deps)
    return _check_candidates(prompt, target, config, deps, config.decoding.n)


# ---------------------------------------------------------------------------
# Interactive
# ---------------------------------------------------------------------------


def _parse_turn_reply(raw: str, statement_text: str):
    """A turn reply is a QUERY line, tactic sentences, a refusal, or noise."""
    text = raw.strip()
    m = _QUERY_LINE_RE.search(text)
    if m:
        return ("query", m.group(1), m.group(2))
    parsed = parse_completion(raw, statement_text)
    if parsed.kind == REFUSAL:
        return ("refusal", parsed.refusal_text or "", None)
    if parsed.kind in (EMPTY, MALFORMED):
        return ("noise", None, None)
    script = parsed.proof_script or ""
    try:
        sentences = segment_sentences(script)
    except LexicalError:
        return ("noise", None, None)
    texts = [s.text for s in sentences if s.text.strip() != "Proof."]
    if parsed.appended_qed and texts and texts[-1] == "Qed.":
        texts = texts[:-1]  # partial turn: do not auto-close the proof
    if not texts:
        return ("noise", None, None)
    return ("tactics", texts, None)


def prove_interactive(
    target: TheoremRecord, config: RunConfig, deps: AgentDeps
) -> AttemptRecord:
    """Turn loop with proof-state feedback and QUERY tool calls.

    Every model call consumes one turn (bounded by max_turns); QUERY lines
    also count against max_queries. Errors roll the session back and the
    verbatim message is fed back. Terminates on proof completion, budget
    exhaustion, refusal, or two consecutive contentless replies.
    """
    templates = deps.templates or TemplateSet.load()
    prompt = _build_target_prompt(target, config, deps, interactive=True)
    decoding = replace(config.decoding, n=1)
    session = deps.session_factory(target)
    turns: list[Turn] = []
    executed: list[str] = []
    queries_used = 0
    accepted = False
    budget_exhausted = False
    kind = PROOF
    refusal_text = None
    last_failing: tuple[int, str, str] | None = None
    step_counter = 0
    stall_streak = 0
    started = time.monotonic()

    try:
        opening = session.execute(target.statement.text)
        if not opening.ok:
            return AttemptRecord(
                theorem_id=target.id, config_tag=config.tag, variant_id=prompt.variant_id,
                candidate_index=0, proof_script="", accepted=False,
                failing_step=(-1, target.statement.text, opening.message),
                turns=[], completion_kind=MALFORMED,
                timings={"wall_s": time.monotonic() - started},
            )
        history = list(prompt.messages)
        delta = (
            templates.render("interactive.state", state=render_proof_state(opening.state))
            if opening.state is not None
            else templates.render("interactive.no_goals")
        )

        for _ in range(config.max_turns):
            if config.wall_clock is not None and time.monotonic() - started >= config.wall_clock:
                budget_exhausted = True
                break
            history.append(ChatMessage("user", delta))
            conversation = replace(prompt, messages=tuple(history))
            completion = complete(conversation, decoding, deps.provider)[0]
            history.append(ChatMessage("assistant", completion or "(empty completion)"))
            kind_tag, payload, extra = _parse_turn_reply(completion, target.statement.text)

            if kind_tag == "query":
                command, argument = payload, extra
                if queries_used >= config.max_queries:
                    budget_exhausted = True
                    turns.append(Turn(delta, completion))
                    break
                try:
                    output = session.query(command, argument)
                except Exception as exc:  # QueryRejected and friends stay in-band
                    output = str(exc)
                queries_used += 1
                turns.append(Turn(delta, completion, ((command, argument, output),)))
                delta = templates.render("interactive.query_result", state=output)
                stall_streak = 0
                continue

            if kind_tag == "refusal":
                kind = REFUSAL
                refusal_text = payload
                turns.append(Turn(delta, completion))
                break

            if kind_tag == "noise":
                turns.append(Turn(delta, completion))
                stall_streak += 1
                if stall_streak >= 2:
                    break
                delta = templates.render(
                    "interactive.error",
                    error="Reply with tactic sentences or a QUERY line.",
                )
                continue

            stall_streak = 0
            turns.append(Turn(delta, completion))
            error_message = None
            state_after = None
            no_goals = False
            for text in payload[:MAX_TACTICS_PER_TURN]:
                result = session.execute(text)
                if not result.ok:
                    error_message = result.message
                    last_failing = (step_counter, text, result.message)
                    break
                executed.append(text)
                step_counter += 1
                state_after = result.state
                no_goals = result.state is None and not result.proof_complete
                if result.proof_complete:
                    accepted = True
                    break
            if accepted:
                break
            if error_message is not None:
                error_block = templates.render("interactive.error", error=error_message)
                current = session.current_state()
                if current is not None:
                    error_block += "\n\n" + templates.render(
                        "interactive.state", state=render_proof_state(current)
                    )
                delta = error_block
            elif state_after is not None:
                delta = templates.render("interactive.state", state=render_proof_state(state_after))
            elif no_goals:
                delta = templates.render("interactive.no_goals")
            else:
                delta = templates.render("interactive.no_goals")
        else:
            budget_exhausted = True
    finally:
        session.close()

    if kind == PROOF and not accepted and stall_streak >= 2:
        kind = MALFORMED  # stalled: no tactics, no queries
    record = AttemptRecord(
        theorem_id=target.id,
        config_tag=config.tag,
        variant_id=prompt.variant_id,
        candidate_index=0,
        proof_script=" ".join(executed),
        accepted=accepted,
        failing_step=None if accepted else last_failing,
        turns=turns,
        completion_kind=kind,
        refusal_text=refusal_text,
        budget_exhausted=budget_exhausted,
        dropped_examples=prompt.dropped_examples,
        timings={"wall_s": time.monotonic() - started},
    )
    return record


# ---------------------------------------------------------------------------
# Repair loop
# ---------------------------------------------------------------------------


def _repair_feedback(record: AttemptRecord) -> str:
    if record.failing_step and record.failing_step[0] >= 0:
        index, sentence, message = record.failing_step
        return f'Step {index} ("{sentence}") failed with error:\n{message}'
    return record.error_message or "The proof was not accepted."


def repair_loop(target: TheoremRecord, config: RunConfig, deps: AgentDeps) -> list[AttemptRecord]:
    """Round 0 is one-shot; each later round feeds every unique still-failing
    script its prover error and samples one repair, stopping early on any
    acceptance."""
    templates = deps.templates or TemplateSet.load()
    started = time.monotonic()
    prompt = _build_target_prompt(target, config, deps)
    session = deps.session_factory(target)
    try:
        records = _check_candidates(
            prompt, target, config, deps, config.decoding.n, session=session
        )
        if any(r.accepted for r in records):
            return records

        # One repair chain per unique failing proof script from round 0.
        chains: list[dict] = []
        seen: set[str] = set()
        for record in records:
            if record.completion_kind != PROOF or record.accepted:
                continue
            if record.proof_script in seen:
                continue
            seen.add(record.proof_script)
            chains.append({"conversation": prompt, "latest": record, "done": False})

        candidate_index = len(records)
        for round_no in range(1, config.repair_rounds + 1):
            if not chains:
                break
            if config.wall_clock is not None and time.monotonic() - started >= config.wall_clock:
                break
            any_accepted = False
            for chain in chains:
                if chain["done"]:
                    continue
                latest: AttemptRecord = chain["latest"]
                feedback = templates.render("repair.feedback", error=_repair_feedback(latest))
                conversation = chain["conversation"].appended(
                    ChatMessage("assistant", latest.proof_script or latest.turns[-1].completion),
                    ChatMessage("user", feedback),
                )
                chain["conversation"] = conversation
                repaired = _check_candidates(
                    conversation, target, config, deps, 1,
                    first_index=candidate_index, round_no=round_no, session=session,
                )[0]
                candidate_index += 1
                records.append(repaired)
                chain["latest"] = repaired
                if repaired.accepted:
                    chain["done"] = True
                    any_accepted = True
                    break
            if any_accepted:
                break
        return records
    finally:
        session.close()


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


def run_ensemble(target: TheoremRecord, config: RunConfig, deps: AgentDeps) -> list[AttemptRecord]:
    """One one-shot pass per diversity variant; n splits evenly with the
    remainder going to the base prompt."""
    if not config.strategies:
        raise ConfigMismatch("ensemble needs a non-empty strategy list")
    base = _build_target_prompt(target, config, deps)
    variants = diversify(base, list(config.strategies), deps.templates)
    groups = [base] + variants
    per = config.decoding.n // len(groups)
    remainder = config.decoding.n - per * len(groups)

    session = deps.session_factory(target)
    records: list[AttemptRecord] = []
    try:
        index = 0
        for position, variant_prompt in enumerate(groups):
            budget = per + (remainder if position == 0 else 0)
            if budget == 0:
                continue
            records.extend(
                _check_candidates(
                    variant_prompt, target, config, deps, budget,
                    first_index=index, session=session,
                )
            )
            index += budget
    finally:
        session.close()
    return records


DISPATCH = {
    "one_shot": prove_one_shot,
    "interactive": lambda t, c, d: [prove_interactive(t, c, d)],
    "repair": repair_loop,
    "ensemble": run_ensemble,
}


def prove(target: TheoremRecord, config: RunConfig, deps: AgentDeps) -> list[AttemptRecord]:
    return DISPATCH[config.loop](target, config, deps)
