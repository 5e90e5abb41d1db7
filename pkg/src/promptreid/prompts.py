"""Prompt generation: composed/LLM sentences, question-bank sentences, and
the learnable-slot template.

Each identity gets one free-form sentence covering all of its attribute words
(from a remote text generator or the deterministic composer), seven
question-derived sentences whose answers are read straight from the attribute
table, and a reference into the per-identity learnable token bank.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from . import tokenizer as tok
from .errors import ConfigError, GenerationError, ParseError
from .tokenizer import TokenSequence, Vocabulary

GENERATOR_URL_ENV = "PROMPTREID_GENERATOR_URL"
GENERATOR_TOKEN_ENV = "PROMPTREID_GENERATOR_TOKEN"

INSTRUCTION = (
    "Write one fluent English sentence describing a person so that every "
    "attribute word below appears verbatim in the sentence."
)


@dataclass(frozen=True)
class AttributeRecord:
    identity: int
    attributes: dict[str, str]

    def __post_init__(self):
        for name, value in self.attributes.items():
            if not isinstance(value, str) or not value.strip():
                raise ConfigError(f"identity {self.identity}: empty value for {name!r}")


def covers_attributes(sentence: str, attributes: dict[str, str]) -> bool:
    lowered = sentence.lower()
    return all(value.lower() in lowered for value in attributes.values())


# ---------------------------------------------------------------------------
# deterministic sentence composer (offline generator)
# ---------------------------------------------------------------------------

_VOWELS = "aeiou"


def _article(phrase: str) -> str:
    return "an" if phrase[:1].lower() in _VOWELS else "a"


def _wear_item(key: str, value: str) -> str:
    if key == "shoe_color":
        return f"{value} shoes"
    if key in ("hat", "bag", "tie", "watch"):
        return value
    if value.endswith("s") or value.startswith(("a ", "an ", "no ")):
        return value
    return f"{_article(value)} {value}"


class TemplateComposer:
    """Deterministic fallback generator; covers every attribute by design."""

    def generate(self, attributes: dict[str, str], instruction: str = "") -> str:
        attrs = dict(attributes)
        gender = attrs.pop("gender", "person")
        age = attrs.pop("age", None)
        hair = attrs.pop("hair", None)
        upper_color = attrs.pop("upper_color", None)
        shirt_type = attrs.pop("shirt_type", None)
        sleeves = attrs.pop("sleeve_length", None)

        head = f"{age} {gender}" if age else gender
        subject = f"{_article(head).capitalize()} {head}"
        if hair:
            subject += f" with {hair}"

        wear = []
        top = None
        if upper_color and shirt_type:
            top = f"{_article(upper_color)} {upper_color} {shirt_type}"
        elif shirt_type:
            top = f"{_article(shirt_type)} {shirt_type}"
        elif upper_color:
            top = f"{_article(upper_color)} {upper_color} top"
        if top and sleeves:
            top += f" with {sleeves}"
        elif sleeves:
            wear.append(sleeves)
        if top:
            wear.append(top)
        for key, value in attrs.items():
            wear.append(_wear_item(key, value))

        if not wear:
            return subject + "."
        if len(wear) == 1:
            tail = wear[0]
        else:
            tail = ", ".join(wear[:-1]) + " and " + wear[-1]
        return f"{subject} wearing {tail}."


class HttpGeneratorClient:
    """Remote sentence generator over HTTP JSON.

    POSTs ``{"instruction": ..., "attribute_words": {...}}`` to the base URL
    and expects ``{"sentence": ...}`` back. Transport failures retry with
    exponential backoff before raising.
    """

    def __init__(self, base_url: str, token: str | None = None,
                 timeout: float = 30.0, retries: int = 3, backoff: float = 0.5):
        self.base_url = base_url
        self.token = token
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    @classmethod
    def from_env(cls) -> "HttpGeneratorClient | None":
        url = os.environ.get(GENERATOR_URL_ENV)
        if not url:
            return None
        return cls(url, token=os.environ.get(GENERATOR_TOKEN_ENV))

    def generate(self, attributes: dict[str, str], instruction: str = INSTRUCTION) -> str:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        body = {"instruction": instruction, "attribute_words": dict(attributes)}
        last_error: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                response = requests.post(
                    self.base_url, json=body, headers=headers, timeout=self.timeout
                )
                response.raise_for_status()
                sentence = response.json().get("sentence")
                if not isinstance(sentence, str) or not sentence.strip():
                    raise GenerationError("generator returned no sentence")
                return sentence
            except (requests.RequestException, ValueError, GenerationError) as exc:
                last_error = exc
        raise GenerationError(f"generator unreachable after {self.retries} attempts: {last_error}")


def generate_chatgpt_prompt(record: AttributeRecord, client, max_retries: int = 1,
                            fallback: TemplateComposer | None = None) -> str:
    """One sentence covering all attribute words of ``record``.

    Sentences failing attribute coverage are retried ``max_retries`` times,
    then the deterministic composer takes over. Transport failures propagate
    as GenerationError carrying the identity id.
    """
    if not record.attributes:
        raise ConfigError(f"identity {record.identity}: no attributes to describe")
    fallback = fallback or TemplateComposer()
    if client is None or isinstance(client, TemplateComposer):
        return fallback.generate(record.attributes, INSTRUCTION)
    for _ in range(max_retries + 1):
        try:
            sentence = client.generate(record.attributes, INSTRUCTION)
        except GenerationError as exc:
            raise GenerationError(f"identity {record.identity}: {exc}") from exc
        if covers_attributes(sentence, record.attributes):
            return sentence
    return fallback.generate(record.attributes, INSTRUCTION)


# ---------------------------------------------------------------------------
# question bank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Question:
    """A question template plus the declarative sentence(s) for its answers.

    ``templates`` maps attribute values to finished sentences; ``template``
    is a single pattern with a ``{value}`` slot. Exactly one must be set.
    """

    attribute: str
    question: str
    template: str | None = None
    templates: dict[str, str] | None = None

    def render(self, record: AttributeRecord) -> str:
        value = record.attributes.get(self.attribute)
        if value is None:
            raise ConfigError(
                f"question {self.question!r} unanswerable: identity "
                f"{record.identity} has no attribute {self.attribute!r}"
            )
        if self.templates is not None:
            sentence = self.templates.get(value)
            if sentence is None:
                raise ConfigError(
                    f"question {self.question!r} has no sentence for answer {value!r}"
                )
            return sentence
        if self.template is None:
            raise ConfigError(f"question {self.question!r} has no sentence template")
        return self.template.format(value=value)


@dataclass(frozen=True)
class QuestionBank:
    questions: tuple[Question, ...]

    def __post_init__(self):
        if len(self.questions) < 7:
            raise ConfigError(f"question bank needs >= 7 questions, has {len(self.questions)}")

    @classmethod
    def from_json(cls, text: str) -> "QuestionBank":
        try:
            doc = json.loads(text)
            questions = []
            for entry in doc["questions"]:
                template = entry.get("template")
                templates = entry.get("templates")
                questions.append(
                    Question(
                        attribute=entry["attribute"],
                        question=entry["question"],
                        template=template,
                        templates=dict(templates) if templates else None,
                    )
                )
            return cls(questions=tuple(questions))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed question bank: {exc}") from exc

    def to_json(self) -> str:
        entries = []
        for q in self.questions:
            entry = {"attribute": q.attribute, "question": q.question}
            if q.template is not None:
                entry["template"] = q.template
            if q.templates is not None:
                entry["templates"] = q.templates
            entries.append(entry)
        return json.dumps({"questions": entries}, sort_keys=True, indent=2)


DEFAULT_QUESTION_BANK = QuestionBank(
    questions=(
        Question(
            attribute="tie",
            question="Is the person wearing a tie?",
            templates={
                "a tie": "The person is wearing a tie.",
                "no tie": "The person is not wearing a tie.",
                "yes": "The person is wearing a tie.",
                "no": "The person is not wearing a tie.",
            },
        ),
        Question(
            attribute="watch",
            question="Is the person wearing a watch?",
            templates={
                "a watch": "The person is wearing a watch.",
                "no watch": "The person is not wearing a watch.",
                "yes": "The person is wearing a watch.",
                "no": "The person is not wearing a watch.",
            },
        ),
        Question(
            attribute="shirt_type",
            question="What kind of shirt is the person wearing?",
            template="The person is wearing a {value}.",
        ),
        Question(
            attribute="bag",
            question="What kind of bag is the person carrying?",
            templates={
                "a backpack": "The person is carrying a backpack.",
                "a handbag": "The person is carrying a handbag.",
                "no bag": "The person is not carrying a bag.",
            },
        ),
        Question(
            attribute="hat",
            question="Is the person wearing a hat?",
            templates={
                "a hat": "The person is wearing a hat.",
                "no hat": "The person is not wearing a hat.",
                "yes": "The person is wearing a hat.",
                "no": "The person is not wearing a hat.",
            },
        ),
        Question(
            attribute="shoe_color",
            question="What color are the person's shoes?",
            template="The person is wearing {value} shoes.",
        ),
        Question(
            attribute="sleeve_length",
            question="How long are the person's sleeves?",
            template="The person has {value}.",
        ),
    )
)


def generate_vqa_prompts(record: AttributeRecord, bank: QuestionBank, rng_seed: int) -> list[str]:
    """Seven declarative sentences answering randomly assigned questions.

    Question selection is a seeded draw without replacement, so the same seed
    yields the same seven sentences. Answers come from the attribute table.
    """
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(bank.questions), size=7, replace=False)
    return [bank.questions[int(i)].render(record) for i in chosen]


# ---------------------------------------------------------------------------
# learnable-slot template
# ---------------------------------------------------------------------------

IMPLICIT_PREFIX = "a photo of a"
IMPLICIT_SUFFIX = "person"


def implicit_template(T: int, vocab: Vocabulary, context_length: int) -> TokenSequence:
    """Token sequence for the slotted description template.

    The sequence reads SOS, the template prefix, ``T`` consecutive slot
    placeholder ids, the suffix word, EOS, PAD...; the text encoder later
    swaps per-identity learnable embeddings into the slot positions.
    """
    if T < 1 or T > context_length - 6:
        raise ConfigError(f"slot count {T} outside [1, {context_length - 6}]")
    if T > vocab.n_slots:
        raise ConfigError(f"vocabulary reserves {vocab.n_slots} slot ids, need {T}")
    prefix = tok.encode(IMPLICIT_PREFIX, vocab, context_length).ids
    prefix_ids = list(prefix[1 : prefix.index(vocab.eos_id)])
    suffix = tok.encode(IMPLICIT_SUFFIX, vocab, context_length).ids
    suffix_ids = list(suffix[1 : suffix.index(vocab.eos_id)])
    content = prefix_ids + [vocab.slot_ids[i] for i in range(T)] + suffix_ids
    if len(content) > context_length - 2:
        raise ConfigError(
            f"template with {T} slots needs {len(content) + 2} positions, "
            f"context is {context_length}"
        )
    ids = [vocab.sos_id] + content + [vocab.eos_id]
    eos_position = len(ids) - 1
    ids.extend([vocab.pad_id] * (context_length - len(ids)))
    return TokenSequence(ids=tuple(ids), eos_position=eos_position)


def slot_positions(seq: TokenSequence, vocab: Vocabulary) -> list[int]:
    slot_ids = set(vocab.slot_ids)
    return [i for i, t in enumerate(seq.ids) if t in slot_ids]


# ---------------------------------------------------------------------------
# prompt dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptSet:
    identity: int
    chatgpt: str
    vqa: tuple[str, ...]
    implicit_ref: int
    slot_count: int = field(default=4)

    def __post_init__(self):
        if not self.chatgpt.strip():
            raise ParseError(f"identity {self.identity}: empty sentence")
        if len(self.vqa) != 7 or any(not s.strip() for s in self.vqa):
            raise ParseError(f"identity {self.identity}: need exactly 7 question prompts")


def build_prompt_dataset(records, bank: QuestionBank, client, seed: int, path,
                         slot_count: int = 4) -> list[PromptSet]:
    """Generate one PromptSet per identity and write them as JSON lines.

    All-or-nothing: generation failures are collected and reported together,
    and no file is written unless every identity succeeded. The write is
    atomic and byte-stable for a fixed (records, seed, composer) triple.
    """
    records = list(records)
    if not records:
        raise ConfigError("no attribute records supplied")
    seen = set()
    for record in records:
        if record.identity in seen:
            raise ConfigError(f"duplicate identity {record.identity}")
        seen.add(record.identity)

    prompt_sets = []
    failures = []
    for record in records:
        try:
            chatgpt = generate_chatgpt_prompt(record, client)
            vqa = generate_vqa_prompts(record, bank, _identity_seed(seed, record.identity))
            prompt_sets.append(
                PromptSet(
                    identity=record.identity,
                    chatgpt=chatgpt,
                    vqa=tuple(vqa),
                    implicit_ref=record.identity,
                    slot_count=slot_count,
                )
            )
        except (GenerationError, ConfigError) as exc:
            failures.append((record.identity, str(exc)))
    if failures:
        ids = ", ".join(str(i) for i, _ in failures)
        detail = "; ".join(msg for _, msg in failures[:3])
        raise GenerationError(f"prompt generation failed for identities [{ids}]: {detail}")

    lines = []
    for ps in prompt_sets:
        lines.append(
            json.dumps(
                {"id": ps.identity, "chatgpt": ps.chatgpt, "vqa": list(ps.vqa),
                 "T": ps.slot_count},
                sort_keys=True,
                ensure_ascii=True,
            )
        )
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return prompt_sets


def _identity_seed(seed: int, identity: int) -> int:
    return int(np.random.SeedSequence([seed, identity]).generate_state(1)[0])


def load_prompt_dataset(path, identity_count: int | None = None) -> dict[int, PromptSet]:
    result: dict[int, PromptSet] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                ps = PromptSet(
                    identity=int(doc["id"]),
                    chatgpt=doc["chatgpt"],
                    vqa=tuple(doc["vqa"]),
                    implicit_ref=int(doc["id"]),
                    slot_count=int(doc.get("T", 4)),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad prompt line: {exc}") from exc
            if ps.identity in result:
                raise ParseError(f"{path}:{lineno}: duplicate identity {ps.identity}")
            if identity_count is not None and not (0 <= ps.identity < identity_count):
                raise ParseError(
                    f"{path}:{lineno}: identity {ps.identity} outside [0, {identity_count})"
                )
            result[ps.identity] = ps
    return result


def check_context_fit(prompt_sets, vocab: Vocabulary, context_length: int) -> list[str]:
    """Sentences whose encodings would lose content to truncation."""
    complaints = []
    for ps in prompt_sets:
        for label, sentence in [("chatgpt", ps.chatgpt)] + [
            (f"vqa[{i}]", s) for i, s in enumerate(ps.vqa)
        ]:
            if not tok.fits_context(sentence, vocab, context_length):
                complaints.append(f"identity {ps.identity} {label} exceeds context")
    return complaints
