"""Chat prompt construction and model-output parsing.

Prompt wordings live in a template file (data/prompt_templates.txt) so
experiments can vary them without touching code; builders here assemble the
message lists for every run mode and parse completions back into proof
scripts or refusals.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .sentences import LexicalError, is_closing, is_statement, segment_sentences

ROLES = ("system", "user", "assistant")

PROOF, REFUSAL, EMPTY, MALFORMED = "proof", "refusal", "empty", "malformed"

REFUSAL_PATTERNS = (
    "provide more information",
    "cannot generate",
    "please define",
)

STRATEGIES = ("simple-tactics-first", "no-lemma-use", "verbose-stepwise", "example-reorder")

_REORDER_RE = re.compile(r"^example-reorder[:(](\d+)\)?$")
_PLACEHOLDER_RE = re.compile(r"\{(statement|lemmas|examples|state|error)\}")


class PromptError(Exception):
    pass


class ConfigMismatch(PromptError):
    pass


class UnknownStrategy(PromptError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"bad role {self.role!r}")
        if not self.content:
            raise ValueError("empty message content")


@dataclass(frozen=True)
class ChatPrompt:
    messages: tuple[ChatMessage, ...]
    config_tag: str
    variant_id: str = "base"
    target_id: str = ""
    dropped_examples: int = 0

    def __post_init__(self):
        if not self.messages or self.messages[0].role != "system":
            raise ValueError("first message must be the system message")
        if sum(1 for m in self.messages if m.role == "system") != 1:
            raise ValueError("exactly one system message allowed")
        if self.messages[-1].role != "user":
            raise ValueError("final message must have role user")

    def appended(self, *extra: ChatMessage) -> "ChatPrompt":
        return replace(self, messages=self.messages + tuple(extra))


@dataclass(frozen=True)
class ParsedCompletion:
    kind: str
    raw: str
    proof_script: str | None = None
    refusal_text: str | None = None
    appended_qed: bool = False
    lexical: bool = False  # malformed specifically because segmentation failed


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


class TemplateSet:
    """Named plain-text sections with {placeholder} substitution."""

    def __init__(self, sections: dict[str, str]):
        self.sections = sections

    @staticmethod
    def parse(text: str) -> "TemplateSet":
        sections: dict[str, str] = {}
        name: str | None = None
        body: list[str] = []
        for line in text.splitlines():
            if line.startswith(";"):
                continue
            header = re.fullmatch(r"\[([A-Za-z0-9_.\-]+)\]\s*", line)
            if header:
                if name is not None:
                    sections[name] = "\n".join(body).strip("\n")
                name = header.group(1)
                body = []
            elif name is not None:
                body.append(line)
        if name is not None:
            sections[name] = "\n".join(body).strip("\n")
        return TemplateSet(sections)

    @staticmethod
    def load(path: str | Path | None = None) -> "TemplateSet":
        if path is None:
            text = resources.files("coqharness.data").joinpath("prompt_templates.txt").read_text(
                encoding="utf-8"
            )
        else:
            text = Path(path).read_text(encoding="utf-8")
        return TemplateSet.parse(text)

    def render(self, section: str, **values: object) -> str:
        try:
            template = self.sections[section]
        except KeyError:
            raise PromptError(f"missing template section [{section}]") from None
        return _PLACEHOLDER_RE.sub(lambda m: str(values.get(m.group(1), m.group(0))), template)


# ---------------------------------------------------------------------------
# Prompt builders
# ---------------------------------------------------------------------------


def _render_lemmas(lemmas: list[tuple[str, str]]) -> str:
    return "\n".join(f"{name}: {statement.strip()}" for name, statement in lemmas)


def build_prompt(
    config,
    target,
    examples: list = (),
    lemmas: list[tuple[str, str]] = (),
    templates: TemplateSet | None = None,
    example_lemmas: list[list[tuple[str, str]]] | None = None,
    interactive: bool = False,
    max_prompt_chars: int | None = None,
) -> ChatPrompt:
    """Assemble the prompt for one theorem under one run configuration.

    `config` needs .mode and .tag (see agent.RunConfig). Examples arrive
    least-similar first so over-budget prompts shed the farthest example;
    each example renders as a user/assistant turn pair. `example_lemmas`
    optionally carries, per example, the (name, statement) list shown with
    it in the +lemma formats.
    """
    templates = templates or TemplateSet.load()
    mode = config.mode
    zero_shot = mode.startswith("zs")
    with_lemmas = mode.endswith("+lem")
    if zero_shot and examples:
        raise ConfigMismatch(f"{mode} takes no few-shot examples")
    if not zero_shot and not examples:
        raise ConfigMismatch(f"{mode} requires few-shot examples")
    if lemmas and not with_lemmas:
        raise ConfigMismatch(f"{mode} does not take preceding lemmas")

    system_text = templates.render("system.base")
    if not zero_shot:
        system_text += "\n\n" + templates.render("system.fewshot_suffix", examples=len(examples))
    if with_lemmas:
        system_text += "\n\n" + templates.render("system.lemma_suffix")
    if interactive:
        system_text += "\n\n" + templates.render("system.interactive_suffix")

    examples = list(examples)
    example_lemmas = [list(x) for x in example_lemmas] if example_lemmas else [[] for _ in examples]
    if len(example_lemmas) != len(examples):
        raise ConfigMismatch("example_lemmas must parallel examples")

    def example_pair(record, record_lemmas) -> tuple[ChatMessage, ChatMessage]:
        if with_lemmas and record_lemmas:
            content = templates.render(
                "user.example_with_lemmas",
                statement=record.statement_text,
                lemmas=_render_lemmas(record_lemmas),
            )
        else:
            content = templates.render("user.example", statement=record.statement_text)
        return ChatMessage("user", content), ChatMessage("assistant", record.proof_text)

    if with_lemmas and lemmas:
        target_text = templates.render(
            "user.target_with_lemmas",
            statement=target.statement_text,
            lemmas=_render_lemmas(list(lemmas)),
        )
    else:
        target_text = templates.render("user.target", statement=target.statement_text)

    dropped = 0
    while True:
        messages = [ChatMessage("system", system_text)]
        for record, record_lemmas in zip(examples, example_lemmas):
            messages.extend(example_pair(record, record_lemmas))
        messages.append(ChatMessage("user", target_text))
        total = sum(len(m.content) for m in messages)
        if max_prompt_chars is None or total <= max_prompt_chars or not examples:
            break
        examples.pop(0)
        example_lemmas.pop(0)
        dropped += 1

    return ChatPrompt(
        tuple(messages),
        config_tag=config.tag,
        target_id=getattr(target, "id", ""),
        dropped_examples=dropped,
    )


def diversify(prompt: ChatPrompt, strategies: list[str], templates: TemplateSet | None = None) -> list[ChatPrompt]:
    """One variant per strategy, differing from the base only in system
    message text and/or example order."""
    templates = templates or TemplateSet.load()
    variants: list[ChatPrompt] = []
    for strategy in strategies:
        reorder = _REORDER_RE.match(strategy)
        if reorder:
            pairs = _example_pairs(prompt)
            rng = random.Random(int(reorder.group(1)))
            rng.shuffle(pairs)
            flat = [m for pair in pairs for m in pair]
            messages = (prompt.messages[0], *flat, prompt.messages[-1])
            variants.append(replace(prompt, messages=messages, variant_id=strategy))
            continue
        if strategy not in STRATEGIES or strategy == "example-reorder":
            raise UnknownStrategy(strategy)
        addendum = templates.render(f"variant.{strategy}")
        system = ChatMessage("system", prompt.messages[0].content + "\n\n" + addendum)
        variants.append(
            replace(prompt, messages=(system,) + prompt.messages[1:], variant_id=strategy)
        )
    return variants


def _example_pairs(prompt: ChatPrompt) -> list[tuple[ChatMessage, ChatMessage]]:
    middle = prompt.messages[1:-1]
    if len(middle) % 2 != 0:
        raise PromptError("malformed few-shot prompt: unpaired example messages")
    pairs = []
    for i in range(0, len(middle), 2):
        if middle[i].role != "user" or middle[i + 1].role != "assistant":
            raise PromptError("malformed few-shot prompt: roles do not alternate")
        pairs.append((middle[i], middle[i + 1]))
    return pairs


# ---------------------------------------------------------------------------
# Completion parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z]*\n(.*?)```", re.DOTALL)


def _strip_fences(raw: str) -> str:
    blocks = _FENCE_RE.findall(raw)
    if blocks:
        return "\n".join(blocks)
    return raw


def _comment_spans(text: str) -> list[tuple[int, int]]:
    spans = []
    i, n = 0, len(text)
    while i < n:
        if text.startswith("(*", i):
            start = i
            depth = 0
            while i < n:
                if text.startswith("(*", i):
                    depth += 1
                    i += 2
                elif text.startswith("*)", i):
                    depth -= 1
                    i += 2
                    if depth == 0:
                        break
                else:
                    i += 1
            spans.append((start, i))
        else:
            i += 1
    return spans


def _comment_text(text: str) -> str:
    return " ".join(text[a + 2 : b - 2].strip() for a, b in _comment_spans(text))


def _matches_refusal(text: str) -> bool:
    lowered = text.lower()
    return any(pattern in lowered for pattern in REFUSAL_PATTERNS)


def parse_completion(raw: str, target_statement: str | None = None) -> ParsedCompletion:
    """Classify a model completion as proof / refusal / empty / malformed.

    Code fences are stripped; a restated theorem line is dropped (and must
    match `target_statement` modulo whitespace when that is given); a proof
    lacking a closing command gets "Qed." appended, flagged as a repair.
    """
    if not raw.strip():
        return ParsedCompletion(EMPTY, raw)
    text = _strip_fences(raw).strip()

    try:
        sentences = segment_sentences(text)
    except LexicalError:
        sentences = None

    if not sentences:  # nothing but comments/prose: refusal or malformed
        commentary = _comment_text(text) if sentences == [] else text
        if _matches_refusal(commentary):
            return ParsedCompletion(REFUSAL, raw, refusal_text=commentary.strip())
        return ParsedCompletion(MALFORMED, raw, lexical=sentences is None)

    if is_statement(sentences[0]):
        if target_statement is not None:
            restated = " ".join(sentences[0].text.split())
            wanted = " ".join(target_statement.split())
            if restated != wanted:
                return ParsedCompletion(MALFORMED, raw)
        start = sentences[0].span[1]
        text = text.encode("utf-8")[start:].decode("utf-8").strip()
        sentences = sentences[1:]
        if not sentences:
            return ParsedCompletion(MALFORMED, raw)

    script = text
    appended = False
    if not is_closing(sentences[-1]):
        script = script.rstrip() + "\nQed."
        appended = True
    return ParsedCompletion(PROOF, raw, proof_script=script, appended_qed=appended)
