"""Multiple-choice reasoning corpus: datasets, synthetic tasks, prompts, features.

The synthetic task is a fact-lookup MCQ benchmark over three question
families (addition facts, subtraction facts, letter-pattern continuation).
Each family owns a small fixed table of fact instances; the correct option
content is determined by the fact, while the option letter is re-randomised
per sample.  A model therefore only scores above chance if it has encoded
the facts and can match them against the lettered choices, which is what
makes knowledge transfer between differently-skewed models observable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

N_CHOICES = 4
ANSWER_LETTERS = ("A", "B", "C", "D")

BOS = "<bos>"
EOS = "<eos>"
ANSWER_CUE = "ans"

FAMILIES = ("add", "times", "pattern")
PATTERN_SYMBOLS = ("u", "v", "w", "x", "y", "z")

DEFAULT_FEATURE_DIM = 64


class CorpusError(ValueError):
    """Malformed record, invalid dataset, or broken corpus invariant."""


class EncodingError(CorpusError):
    """A token is not part of the vocabulary."""


@dataclass(frozen=True)
class McqSample:
    """One multiple-choice question; ``answer`` is None for pool samples."""

    id: str
    question: str
    choices: tuple[str, str, str, str]
    answer: int | None = None
    rationale: str | None = None

    def __post_init__(self) -> None:
        if len(self.choices) != N_CHOICES:
            raise CorpusError(
                f"sample {self.id!r}: expected {N_CHOICES} choices, got {len(self.choices)}"
            )
        if self.answer is not None and not 0 <= self.answer < N_CHOICES:
            raise CorpusError(f"sample {self.id!r}: answer index {self.answer} out of range")

    def to_record(self) -> dict:
        record: dict = {
            "id": self.id,
            "question": self.question,
            "choices": list(self.choices),
        }
        if self.answer is not None:
            record["answer"] = self.answer
        if self.rationale is not None:
            record["rationale"] = self.rationale
        return record


def _check_unique_ids(samples: Sequence[McqSample], label: str) -> None:
    seen: set[str] = set()
    for sample in samples:
        if sample.id in seen:
            raise CorpusError(f"{label}: duplicate sample id {sample.id!r}")
        seen.add(sample.id)


@dataclass(frozen=True)
class LocalDataset:
    """A client's private answered samples (no rationales required)."""

    owner: int
    samples: tuple[McqSample, ...]

    def __post_init__(self) -> None:
        _check_unique_ids(self.samples, f"local dataset {self.owner}")
        for sample in self.samples:
            if sample.answer is None:
                raise CorpusError(
                    f"local dataset {self.owner}: sample {sample.id!r} has no answer"
                )

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class DistillationPool:
    """Shared unanswered prompt pool over which models exchange responses."""

    samples: tuple[McqSample, ...]

    def __post_init__(self) -> None:
        _check_unique_ids(self.samples, "pool")
        for sample in self.samples:
            if sample.answer is not None:
                raise CorpusError(f"pool: sample {sample.id!r} must not carry an answer")

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict[str, McqSample]:
        return {sample.id: sample for sample in self.samples}


@dataclass(frozen=True)
class ReasoningTriple:
    """Prompt plus client and server responses: the unit of distillation."""

    sample_id: str
    prompt: tuple[int, ...]
    client_response: tuple[int, ...]
    server_response: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.client_response or not self.server_response:
            raise CorpusError(f"triple {self.sample_id!r}: responses must be non-empty")


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-length deterministic featurisation of a sample."""

    values: np.ndarray
    norm: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise CorpusError("feature vector has non-finite entries")


class Vocabulary:
    """Fixed token set shared by every policy; encoding is strict."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocabulary contains duplicate tokens")
        if not tokens or tokens[0] != BOS or tokens[1] != EOS:
            raise CorpusError(f"vocabulary must start with {BOS!r}, {EOS!r}")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._ids = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        ids = []
        for token in tokens:
            if token not in self._ids:
                raise EncodingError(f"token {token!r} not in vocabulary")
            ids.append(self._ids[token])
        return tuple(ids)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)

    def to_text(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))


def default_vocabulary() -> Vocabulary:
    """Vocabulary covering the synthetic task plus prompt scaffolding."""
    tokens = [BOS, EOS, *ANSWER_LETTERS, "+", "*", "=", "next", "?", ANSWER_CUE]
    tokens += [str(n) for n in range(19)]
    tokens += list(PATTERN_SYMBOLS)
    return Vocabulary(tokens)


# ---------------------------------------------------------------------------
# JSONL ingestion


def _parse_record(record: dict, line_no: int, kind: str) -> McqSample:
    for key in ("id", "question", "choices"):
        if key not in record:
            raise CorpusError(f"line {line_no}: missing field {key!r}")
    choices = record["choices"]
    if not isinstance(choices, list) or len(choices) != N_CHOICES:
        raise CorpusError(f"line {line_no}: expected {N_CHOICES} choices")
    answer = record.get("answer")
    if kind == "pool" and answer is not None:
        raise CorpusError(f"line {line_no}: pool record {record['id']!r} carries an answer")
    if kind == "local" and answer is None:
        raise CorpusError(f"line {line_no}: local record {record['id']!r} lacks an answer")
    if answer is not None and (not isinstance(answer, int) or not 0 <= answer < N_CHOICES):
        raise CorpusError(f"line {line_no}: answer must be an index in [0, {N_CHOICES})")
    return McqSample(
        id=str(record["id"]),
        question=str(record["question"]),
        choices=tuple(str(c) for c in choices),
        answer=answer,
        rationale=record.get("rationale"),
    )


def load_dataset(path: str | Path, kind: str, owner: int = 0) -> LocalDataset | DistillationPool:
    """Parse a JSONL dataset file; ``kind`` is ``"local"`` or ``"pool"``."""
    if kind not in ("local", "pool"):
        raise CorpusError(f"unknown dataset kind {kind!r}")
    path = Path(path)
    samples: list[McqSample] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {line_no}: malformed JSON ({exc.msg})") from exc
            samples.append(_parse_record(record, line_no, kind))
    if kind == "pool":
        return DistillationPool(samples=tuple(samples))
    return LocalDataset(owner=owner, samples=tuple(samples))


def save_dataset(dataset: LocalDataset | DistillationPool, path: str | Path) -> None:
    """Write one JSON object per line; inverse of :func:`load_dataset`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for sample in dataset.samples:
            handle.write(json.dumps(sample.to_record(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Synthetic task generation


@dataclass(frozen=True)
class _Fact:
    family: str
    question_tokens: tuple[str, ...]
    answer_content: str


_TIMES_PAIRS = tuple((a, b) for a in range(2, 7) for b in range(2, 4))


def _content_space(family: str) -> tuple[str, ...]:
    if family == "add":
        return tuple(str(n) for n in range(4, 19))
    if family == "times":
        return tuple(sorted({str(a * b) for a, b in _TIMES_PAIRS}, key=int))
    return PATTERN_SYMBOLS


def _build_fact_tables(rng: np.random.Generator, per_family: int = 8) -> dict[str, list[_Fact]]:
    tables: dict[str, list[_Fact]] = {}

    add_pairs = [(a, b) for a in range(2, 10) for b in range(2, 10)]
    picks = rng.choice(len(add_pairs), size=per_family, replace=False)
    tables["add"] = [
        _Fact("add", (str(a), "+", str(b), "?"), str(a + b))
        for a, b in (add_pairs[i] for i in picks)
    ]

    picks = rng.choice(len(_TIMES_PAIRS), size=per_family, replace=False)
    tables["times"] = [
        _Fact("times", (str(a), "*", str(b), "?"), str(a * b))
        for a, b in (_TIMES_PAIRS[i] for i in picks)
    ]

    pattern_pairs = [
        (p, q) for p in PATTERN_SYMBOLS for q in PATTERN_SYMBOLS if p != q
    ]
    picks = rng.choice(len(pattern_pairs), size=per_family, replace=False)
    tables["pattern"] = [
        _Fact("pattern", ("next", p, q, p, "?"), q)
        for p, q in (pattern_pairs[i] for i in picks)
    ]
    return tables


class _AnswerDeck:
    """Balanced answer-slot dealer: every block of four deals each option once."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._block: list[int] = []

    def deal(self) -> int:
        if not self._block:
            self._block = list(self._rng.permutation(N_CHOICES))
        return int(self._block.pop())


def _make_sample(
    fact: _Fact,
    sample_id: str,
    rng: np.random.Generator,
    deck: _AnswerDeck,
    with_answer: bool,
) -> McqSample:
    # distractors avoid every question token so a correct choice is never
    # shadowed by a trivially-present wrong option
    excluded = set(fact.question_tokens) | {fact.answer_content}
    space = [c for c in _content_space(fact.family) if c not in excluded]
    picks = rng.choice(len(space), size=N_CHOICES - 1, replace=False)
    distractors = [space[i] for i in picks]
    slot = deck.deal()
    choices = distractors[:slot] + [fact.answer_content] + distractors[slot:]
    return McqSample(
        id=sample_id,
        question=" ".join(fact.question_tokens),
        choices=tuple(choices),
        answer=slot if with_answer else None,
    )


def _skewed_family(rng: np.random.Generator, main: str, skew: float) -> str:
    if rng.random() < skew:
        return main
    others = [f for f in FAMILIES if f != main]
    return others[int(rng.integers(len(others)))]


def generate_synthetic(
    seed: int,
    n_local_per_client: int,
    n_pool: int,
    n_test_per_client: int,
    vocab: Vocabulary | None = None,
    n_clients: int = 3,
    skew: float = 1.0,
    test_skew: float = 0.7,
) -> tuple[list[LocalDataset], DistillationPool, list[LocalDataset]]:
    """Deterministic synthetic MCQ task with per-client domain skew.

    Client ``k`` draws ``skew`` of its local samples from family ``k mod 3``
    and the rest uniformly from the other families; test sets use
    ``test_skew`` the same way, and the pool mixes families uniformly.
    Answer letters are balanced by construction within every dataset.
    """
    if min(n_local_per_client, n_pool, n_test_per_client, n_clients) < 1:
        raise CorpusError("all counts must be >= 1")
    vocab = vocab or default_vocabulary()
    rng = np.random.default_rng(seed)
    tables = _build_fact_tables(rng)
    for facts in tables.values():
        for fact in facts:
            vocab.encode(fact.question_tokens)
            vocab.encode((fact.answer_content,))

    def draw(family: str) -> _Fact:
        facts = tables[family]
        return facts[int(rng.integers(len(facts)))]

    locals_: list[LocalDataset] = []
    for k in range(n_clients):
        deck = _AnswerDeck(rng)
        main = FAMILIES[k % len(FAMILIES)]
        samples = [
            _make_sample(
                draw(_skewed_family(rng, main, skew)),
                f"local-{k}-{i:04d}",
                rng,
                deck,
                with_answer=True,
            )
            for i in range(n_local_per_client)
        ]
        locals_.append(LocalDataset(owner=k, samples=tuple(samples)))

    deck = _AnswerDeck(rng)
    pool_samples = [
        _make_sample(
            draw(FAMILIES[int(rng.integers(len(FAMILIES)))]),
            f"pool-{i:04d}",
            rng,
            deck,
            with_answer=False,
        )
        for i in range(n_pool)
    ]
    pool = DistillationPool(samples=tuple(pool_samples))

    tests: list[LocalDataset] = []
    for k in range(n_clients):
        deck = _AnswerDeck(rng)
        main = FAMILIES[k % len(FAMILIES)]
        samples = [
            _make_sample(
                draw(_skewed_family(rng, main, test_skew)),
                f"test-{k}-{i:04d}",
                rng,
                deck,
                with_answer=True,
            )
            for i in range(n_test_per_client)
        ]
        tests.append(LocalDataset(owner=k, samples=tuple(samples)))

    return locals_, pool, tests


def generate_general_dataset(
    seed: int, n_samples: int, owner: int = -1
) -> LocalDataset:
    """Uniform-mix answered dataset, the 'broad pre-training corpus' stand-in."""
    if n_samples < 1:
        raise CorpusError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    tables = _build_fact_tables(rng)
    deck = _AnswerDeck(rng)
    samples = []
    for i in range(n_samples):
        family = FAMILIES[int(rng.integers(len(FAMILIES)))]
        facts = tables[family]
        fact = facts[int(rng.integers(len(facts)))]
        samples.append(
            _make_sample(fact, f"general-{owner}-{i:04d}", rng, deck, with_answer=True)
        )
    return LocalDataset(owner=owner, samples=tuple(samples))


def standard_demo() -> McqSample:
    """The single fixed worked example used by one-shot prompting."""
    return McqSample(
        id="demo-0000",
        question="2 + 3 ?",
        choices=("4", "5", "6", "9"),
        answer=1,
        rationale="2 + 3 = 5",
    )


# ---------------------------------------------------------------------------
# Prompt formatting


def format_prompt(
    sample: McqSample,
    mode: str,
    demo: McqSample | None = None,
    vocab: Vocabulary | None = None,
) -> tuple[int, ...]:
    """Token ids for a question prompt.

    ``zero_shot`` emits question + lettered choices + the answer cue.
    ``one_shot`` prepends exactly one worked demonstration (question,
    choices, cue, rationale, answer letter, end token).
    """
    if mode not in ("zero_shot", "one_shot"):
        raise CorpusError(f"unknown prompt mode {mode!r}")
    vocab = vocab or default_vocabulary()

    def body(s: McqSample) -> list[str]:
        tokens = s.question.split()
        for letter, choice in zip(ANSWER_LETTERS, s.choices):
            tokens.append(letter)
            tokens.extend(choice.split())
        tokens.append(ANSWER_CUE)
        return tokens

    tokens: list[str] = []
    if mode == "one_shot":
        if demo is None or demo.rationale is None or demo.answer is None:
            raise CorpusError("one_shot mode requires a demo with rationale and answer")
        tokens.extend(body(demo))
        tokens.extend(demo.rationale.split())
        tokens.append(ANSWER_LETTERS[demo.answer])
        tokens.append(EOS)
    tokens.extend(body(sample))
    return vocab.encode(tokens)


# ---------------------------------------------------------------------------
# Featurisation


def _bucket(token: str, n_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % n_buckets


def featurize(sample: McqSample, d: int = DEFAULT_FEATURE_DIM) -> FeatureVector:
    """Hashed bag-of-tokens over question+choices plus two length features.

    The first ``d - 2`` entries are L2-normalised token-bucket counts (zero
    for empty text); the last two are a clipped token-count feature and a
    squashed choice-length-variance feature.
    """
    if d < 8:
        raise CorpusError("feature dimension must be >= 8")
    values = np.zeros(d, dtype=np.float64)
    tokens = sample.question.split()
    for choice in sample.choices:
        tokens.extend(choice.split())
    for token in tokens:
        values[_bucket(token, d - 2)] += 1.0
    bag_norm = float(np.linalg.norm(values[: d - 2]))
    if bag_norm > 0.0:
        values[: d - 2] /= bag_norm
    values[d - 2] = min(1.0, len(tokens) / 64.0)
    choice_lengths = np.array([len(c.split()) for c in sample.choices], dtype=np.float64)
    variance = float(choice_lengths.var())
    values[d - 1] = variance / (1.0 + variance)
    return FeatureVector(values=values, norm=float(np.linalg.norm(values)))
