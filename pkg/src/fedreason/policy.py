"""Tiny differentiable token policies standing in for server/client LMs.

The architecture is a single attention read over the context followed by a
feedforward head.  Attention queries come from the mean context embedding,
keys from per-token projections, and the attended value carries both the
token embedding and a soft position-from-end indicator, so the network can
learn content lookups ("which option holds the remembered answer") as well
as positional decoding ("which letter labels that slot").  All math is
float64 numpy with hand-written backprop so gradients can be checked
against finite differences exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import LocalDataset, McqSample, Vocabulary, format_prompt

PROB_FLOOR = 1e-12


class PolicyError(ValueError):
    """Invalid policy construction or use."""


class SequenceLengthError(PolicyError):
    """Prompt plus response does not fit the policy context."""


class TrainingDivergedError(PolicyError):
    """A training step produced a non-finite loss."""


@dataclass(frozen=True)
class ArchSpec:
    """Shapes of the fixed architecture; width knobs realise model scale."""

    vocab_size: int
    context_len: int
    d_emb: int
    d_hidden: int

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.context_len, self.d_emb, self.d_hidden) < 1:
            raise PolicyError("architecture dimensions must be positive")

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        v, w, de, dh = self.vocab_size, self.context_len, self.d_emb, self.d_hidden
        return {
            "emb": (v, de),
            "w_query": (de, de),
            "w_key": (de, de),
            "pos_bias": (w,),
            "w_hidden": (dh, 2 * de + w),
            "b_hidden": (dh,),
            "w_out": (v, dh),
            "b_out": (v,),
        }

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())


def _views(arch: ArchSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    views: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in arch.shapes.items():
        size = int(np.prod(shape))
        views[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    return views


@dataclass
class TokenPolicy:
    """A mutable policy; ``params`` is the flat parameter vector."""

    arch: ArchSpec
    params: np.ndarray
    role: str

    def __post_init__(self) -> None:
        if self.params.shape != (self.arch.n_params,):
            raise PolicyError(
                f"parameter vector has shape {self.params.shape}, "
                f"expected ({self.arch.n_params},)"
            )

    @classmethod
    def create(cls, arch: ArchSpec, role: str, seed: int) -> "TokenPolicy":
        rng = np.random.default_rng(seed)
        flat = np.zeros(arch.n_params, dtype=np.float64)
        views = _views(arch, flat)
        views["emb"][:] = rng.normal(0.0, 0.3, views["emb"].shape)
        for name in ("w_query", "w_key", "w_hidden"):
            fan_in = views[name].shape[1]
            views[name][:] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), views[name].shape)
        # output head starts at zero: the initial policy is exactly uniform
        return cls(arch=arch, params=flat, role=role)

    @property
    def views(self) -> dict[str, np.ndarray]:
        return _views(self.arch, self.params)

    def snapshot(self, frozen_round: int = 0) -> "ReferenceSnapshot":
        params = self.params.copy()
        params.setflags(write=False)
        return ReferenceSnapshot(
            arch=self.arch, params=params, role=self.role, frozen_round=frozen_round
        )


@dataclass(frozen=True)
class ReferenceSnapshot:
    """Immutable frozen copy of a policy's parameters with provenance."""

    arch: ArchSpec
    params: np.ndarray
    role: str
    frozen_round: int

    @property
    def views(self) -> dict[str, np.ndarray]:
        return _views(self.arch, self.params)


@dataclass(frozen=True)
class DecodeConfig:
    """How responses are decoded; greedy is the deterministic default."""

    mode: str = "greedy"
    temperature: float = 1.0
    max_new_tokens: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("greedy", "sampled"):
            raise PolicyError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sampled" and self.temperature <= 0.0:
            raise PolicyError("sampled decoding requires temperature > 0")
        if self.max_new_tokens < 0:
            raise PolicyError("max_new_tokens must be >= 0")


Model = TokenPolicy | ReferenceSnapshot


def _check_fit(arch: ArchSpec, prompt_len: int, extra: int) -> None:
    total = 1 + prompt_len + extra  # leading begin-of-sequence token
    if total > arch.context_len:
        raise SequenceLengthError(
            f"sequence of {total} tokens exceeds context length {arch.context_len}"
        )


def _step_forward(arch: ArchSpec, views: dict[str, np.ndarray], ctx: Sequence[int]) -> dict:
    """Distribution over the next token given context ids; caches intermediates."""
    m = len(ctx)
    emb = views["emb"]
    x = emb[list(ctx)]  # (m, de)
    x_mean = x.mean(axis=0)
    query = views["w_query"] @ x_mean
    keys = x @ views["w_key"].T  # (m, de)
    pos = np.arange(m - 1, -1, -1)  # distance from the sequence end
    scores = keys @ query / math.sqrt(arch.d_emb) + views["pos_bias"][pos]
    scores = scores - scores.max()
    exp_s = np.exp(scores)
    attn = exp_s / exp_s.sum()
    content = attn @ x  # (de,)
    pos_read = np.zeros(arch.context_len, dtype=np.float64)
    np.add.at(pos_read, pos, attn)
    g = np.concatenate([content, x[-1], pos_read])
    z1 = views["w_hidden"] @ g + views["b_hidden"]
    h = np.tanh(z1)
    logits = views["w_out"] @ h + views["b_out"]
    logits = logits - logits.max()
    exp_l = np.exp(logits)
    probs = exp_l / exp_l.sum()
    return {
        "ctx": tuple(ctx),
        "x": x,
        "x_mean": x_mean,
        "query": query,
        "keys": keys,
        "pos": pos,
        "attn": attn,
        "content": content,
        "g": g,
        "h": h,
        "probs": probs,
    }


def _step_backward(
    arch: ArchSpec,
    views: dict[str, np.ndarray],
    cache: dict,
    dlogits: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for one next-token prediction step."""
    x, attn, pos = cache["x"], cache["attn"], cache["pos"]
    m = x.shape[0]

    grads["w_out"] += np.outer(dlogits, cache["h"])
    grads["b_out"] += dlogits
    dh = views["w_out"].T @ dlogits
    dz1 = dh * (1.0 - cache["h"] ** 2)
    grads["w_hidden"] += np.outer(dz1, cache["g"])
    grads["b_hidden"] += dz1
    dg = views["w_hidden"].T @ dz1

    de = arch.d_emb
    dcontent = dg[:de]
    dx_last = dg[de : 2 * de]
    dpos_read = dg[2 * de :]

    dattn = x @ dcontent + dpos_read[pos]
    dscores = attn * (dattn - float(attn @ dattn))
    grads["pos_bias"][pos] += dscores

    scale = 1.0 / math.sqrt(de)
    dquery = cache["keys"].T @ dscores * scale
    dkeys = np.outer(dscores, cache["query"]) * scale
    grads["w_key"] += dkeys.T @ x
    grads["w_query"] += np.outer(dquery, cache["x_mean"])

    dx = np.outer(attn, dcontent)
    dx += dkeys @ views["w_key"]
    dx += (views["w_query"].T @ dquery)[None, :] / m
    dx[-1] += dx_last
    np.add.at(grads["emb"], list(cache["ctx"]), dx)


def _log_prob_impl(
    model: Model,
    prompt: Sequence[int],
    response: Sequence[int],
    grad_out: np.ndarray | None,
) -> float:
    arch = model.arch
    _check_fit(arch, len(prompt), len(response))
    views = _views(arch, model.params)
    grads = _views(arch, grad_out) if grad_out is not None else None
    seq = [0, *prompt]  # id 0 is the begin-of-sequence token
    total = 0.0
    for target in response:
        cache = _step_forward(arch, views, seq)
        probs = cache["probs"]
        total += math.log(max(float(probs[target]), PROB_FLOOR))
        if grads is not None:
            dlogits = -probs.copy()
            dlogits[target] += 1.0
            _step_backward(arch, views, cache, dlogits, grads)
        seq.append(target)
    return total


def log_prob(model: Model, prompt: Sequence[int], response: Sequence[int]) -> float:
    """Sum of conditional log-probabilities of the response tokens; <= 0."""
    return _log_prob_impl(model, prompt, response, None)


def grad_log_prob(
    policy: TokenPolicy, prompt: Sequence[int], response: Sequence[int]
) -> np.ndarray:
    """Gradient of :func:`log_prob` with respect to the flat parameters."""
    grad = np.zeros(policy.arch.n_params, dtype=np.float64)
    _log_prob_impl(policy, prompt, response, grad)
    return grad


def log_prob_and_grad(
    policy: TokenPolicy, prompt: Sequence[int], response: Sequence[int]
) -> tuple[float, np.ndarray]:
    grad = np.zeros(policy.arch.n_params, dtype=np.float64)
    value = _log_prob_impl(policy, prompt, response, grad)
    return value, grad


def next_token_probs(model: Model, context: Sequence[int]) -> np.ndarray:
    """Distribution over the next token; context excludes the implicit BOS."""
    arch = model.arch
    _check_fit(arch, len(context), 0)
    views = _views(arch, model.params)
    return _step_forward(arch, views, [0, *context])["probs"]


def generate(model: Model, prompt: Sequence[int], cfg: DecodeConfig) -> tuple[int, ...]:
    """Decode a response; greedy argmax or seeded temperature sampling.

    Stops after the end token (id 1) or ``max_new_tokens``; the end token is
    included in the returned sequence.
    """
    arch = model.arch
    _check_fit(arch, len(prompt), cfg.max_new_tokens)
    views = _views(arch, model.params)
    rng = np.random.default_rng(cfg.seed) if cfg.mode == "sampled" else None
    seq = [0, *prompt]
    out: list[int] = []
    for _ in range(cfg.max_new_tokens):
        probs = _step_forward(arch, views, seq)["probs"]
        if rng is None:
            token = int(np.argmax(probs))
        else:
            logp = np.log(np.maximum(probs, PROB_FLOOR)) / cfg.temperature
            logp -= logp.max()
            p = np.exp(logp)
            p /= p.sum()
            token = int(rng.choice(arch.vocab_size, p=p))
        out.append(token)
        seq.append(token)
        if token == 1:
            break
    return tuple(out)


def apply_update(policy: TokenPolicy, gradient: np.ndarray, lr: float) -> TokenPolicy:
    """In-place descent step ``params -= lr * gradient``; returns the policy."""
    if gradient.shape != policy.params.shape:
        raise PolicyError(
            f"gradient shape {gradient.shape} does not match parameters "
            f"{policy.params.shape}"
        )
    policy.params -= lr * gradient
    return policy


def sft_pairs(
    dataset: LocalDataset,
    mode: str,
    vocab: Vocabulary,
    demo: McqSample | None = None,
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(prompt, target) pairs: the target is the answer letter plus end token."""
    from .corpus import ANSWER_LETTERS

    pairs = []
    for sample in dataset.samples:
        assert sample.answer is not None
        prompt = format_prompt(sample, mode, demo=demo, vocab=vocab)
        target = vocab.encode((ANSWER_LETTERS[sample.answer],)) + (vocab.eos_id,)
        pairs.append((prompt, target))
    return pairs


def sft(
    policy: TokenPolicy,
    dataset: LocalDataset,
    epochs: int,
    lr: float,
    mode: str = "zero_shot",
    vocab: Vocabulary | None = None,
    demo: McqSample | None = None,
    batch_size: int = 16,
    frozen_round: int = 0,
) -> tuple[TokenPolicy, ReferenceSnapshot]:
    """Cross-entropy training of answer tokens; returns policy + frozen snapshot."""
    if epochs < 0 or lr < 0:
        raise PolicyError("epochs and lr must be non-negative")
    from .corpus import default_vocabulary

    vocab = vocab or default_vocabulary()
    pairs = sft_pairs(dataset, mode, vocab, demo=demo)
    # Adam keeps supervised fitting stable across the mixed parameter scales;
    # state is zero-initialised so lr=0 or epochs=0 leaves parameters unchanged
    first = np.zeros_like(policy.params)
    second = np.zeros_like(policy.params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    for epoch in range(epochs):
        for start in range(0, len(pairs), batch_size):
            batch = pairs[start : start + batch_size]
            grad = np.zeros(policy.arch.n_params, dtype=np.float64)
            loss = 0.0
            for prompt, target in batch:
                value = _log_prob_impl(policy, prompt, target, grad)
                loss -= value
            loss /= len(batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite cross-entropy at epoch {epoch}, batch offset {start}"
                )
            grad = -grad / len(batch)
            step += 1
            first = beta1 * first + (1.0 - beta1) * grad
            second = beta2 * second + (1.0 - beta2) * grad * grad
            corrected = first / (1.0 - beta1**step)
            scale = np.sqrt(second / (1.0 - beta2**step)) + eps
            policy.params -= lr * corrected / scale
    return policy, policy.snapshot(frozen_round=frozen_round)


def mean_cross_entropy(
    policy: Model,
    dataset: LocalDataset,
    mode: str = "zero_shot",
    vocab: Vocabulary | None = None,
    demo: McqSample | None = None,
) -> float:
    """Mean per-sample negative log-likelihood of the answer tokens."""
    from .corpus import default_vocabulary

    vocab = vocab or default_vocabulary()
    pairs = sft_pairs(dataset, mode, vocab, demo=demo)
    total = 0.0
    for prompt, target in pairs:
        total -= log_prob(policy, prompt, target)
    return total / len(pairs)
