"""Accuracy evaluation, answer extraction, and the non-federated baselines."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .corpus import (
    ANSWER_LETTERS,
    DistillationPool,
    LocalDataset,
    McqSample,
    Vocabulary,
    default_vocabulary,
    format_prompt,
    standard_demo,
)
from .policy import DecodeConfig, Model, TokenPolicy, generate, sft

_LETTER_RE = re.compile(r"\b([ABCDabcd])\b")


@dataclass(frozen=True)
class EvalReport:
    """Accuracy of one model on one test set under one prompting mode."""

    model: str
    mode: str
    n: int
    correct: int

    def __post_init__(self) -> None:
        if not 0 <= self.correct <= self.n:
            raise ValueError(f"correct={self.correct} out of range for n={self.n}")

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


def extract_answer(text: str, choices: Sequence[str]) -> int | None:
    """Index of the first standalone option letter in the text, if any."""
    match = _LETTER_RE.search(text)
    if match is None:
        return None
    index = ANSWER_LETTERS.index(match.group(1).upper())
    return index if index < len(choices) else None


def evaluate(
    model: Model,
    test_set: LocalDataset | Sequence[McqSample],
    mode: str,
    decode_cfg: DecodeConfig | None = None,
    vocab: Vocabulary | None = None,
    demo: McqSample | None = None,
    model_name: str | None = None,
) -> EvalReport:
    """Greedy-decode every prompt and score extracted answers.

    Outputs with no extractable letter count as incorrect.
    """
    vocab = vocab or default_vocabulary()
    decode_cfg = decode_cfg or DecodeConfig()
    if mode == "one_shot" and demo is None:
        demo = standard_demo()
    samples = test_set.samples if isinstance(test_set, LocalDataset) else tuple(test_set)
    correct = 0
    for sample in samples:
        prompt = format_prompt(sample, mode, demo=demo, vocab=vocab)
        response = generate(model, prompt, decode_cfg)
        predicted = extract_answer(vocab.to_text(response), sample.choices)
        if predicted is not None and predicted == sample.answer:
            correct += 1
    name = model_name or getattr(model, "role", "model")
    return EvalReport(model=name, mode=mode, n=len(samples), correct=correct)


def run_standalone(
    datasets: tuple[list[LocalDataset], DistillationPool, list[LocalDataset]],
    cfg,
) -> list[EvalReport]:
    """SFT each client on local data only and report both prompting modes.

    Shares the SFT and evaluation code paths (and seeds) with the federated
    run, so these reports equal the federation's post-SFT reference state.
    """
    from .federation import build_client_policies

    locals_, _, tests = datasets
    vocab = default_vocabulary()
    reports: list[EvalReport] = []
    clients = build_client_policies(cfg, vocab)
    for k, policy in enumerate(clients):
        sft(
            policy,
            locals_[k],
            epochs=cfg.sft_epochs,
            lr=cfg.sft_lr,
            vocab=vocab,
            batch_size=cfg.sft_batch_size,
        )
        for mode in ("one_shot", "zero_shot"):
            reports.append(
                evaluate(policy, tests[k], mode, cfg.decode_config(), vocab)
            )
    return reports


def run_fedkd(
    cfg,
    datasets: tuple[list[LocalDataset], DistillationPool, list[LocalDataset]],
):
    """Classical one-way federated distillation baseline.

    Clients SFT on local data, then fine-tune with cross-entropy on the
    server's responses over the complete pool; the server never updates.
    Returns (metrics rows, message log) in the same schema as the main run.
    """
    from . import federation
    from .corpus import format_prompt as fp

    locals_, pool, tests = datasets
    vocab = default_vocabulary()
    decode_cfg = cfg.decode_config()

    clients = federation.build_client_policies(cfg, vocab)
    for k, policy in enumerate(clients):
        sft(
            policy,
            locals_[k],
            epochs=cfg.sft_epochs,
            lr=cfg.sft_lr,
            vocab=vocab,
            batch_size=cfg.sft_batch_size,
        )
    server = federation.build_server_policy(cfg, vocab)

    log = federation.MessageLog()
    rows: list[dict] = []
    pool_prompts = {
        s.id: fp(s, cfg.distill_mode, vocab=vocab) for s in pool.samples
    }
    responses = {
        sample_id: generate(server, prompt, decode_cfg)
        for sample_id, prompt in sorted(pool_prompts.items())
    }
    pairs = [(pool_prompts[sid], responses[sid]) for sid in sorted(responses)]

    for round_index in range(1, cfg.rounds + 1):
        payload = federation.encode_responses(responses, vocab)
        for k in range(cfg.clients):
            federation.account_message(
                log,
                "server",
                f"client-{k}",
                "responses",
                payload,
                round_index=round_index,
                ids=tuple(sorted(responses)),
            )
        if pairs:
            for k, policy in enumerate(clients):
                federation.cross_entropy_finetune(
                    policy, pairs, lr=cfg.lr_client, epochs=1
                )
        for k, policy in enumerate(clients):
            rows.extend(
                federation.metric_rows_for_model(
                    policy, tests[k], cfg, vocab, round_index, log,
                    mean_loss=0.0, selected=len(pool),
                )
            )
        combined = [s for t in tests for s in t.samples]
        rows.extend(
            federation.metric_rows_for_model(
                server, combined, cfg, vocab, round_index, log,
                mean_loss=0.0, selected=len(pool),
            )
        )
    return rows, log, clients, server
