"""Round/batch orchestration of the federated distillation protocol.

Each round, every client in ascending order runs a fixed number of batches:
forward distillation loss on its current selection, reward computation,
exploit/explore filter training, pool re-estimation and re-selection,
a response exchange for the new selection, and a policy gradient step.
After all clients, the server re-selects per client pair with its own
filters, partitions overlapping picks, and takes one weighted update.
Everything that crosses the client/server boundary is text and is logged
with exact byte accounting; parameters never cross.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import evaluation
from .corpus import (
    DistillationPool,
    FeatureVector,
    LocalDataset,
    ReasoningTriple,
    Vocabulary,
    default_vocabulary,
    featurize,
    format_prompt,
    generate_general_dataset,
)
from .distill import (
    DistillConfig,
    OverlapPartition,
    client_loss,
    client_loss_and_grad,
    overlap_partition,
    per_pair_server_losses,
    server_loss_and_grad,
)
from .filter import (
    FilterState,
    SelectionConfig,
    cold_start,
    estimate_batch,
    exploit_forward_batch,
    select,
    train_exploit,
    train_explore,
)
from .policy import (
    ArchSpec,
    DecodeConfig,
    ReferenceSnapshot,
    TokenPolicy,
    apply_update,
    generate,
    log_prob_and_grad,
    sft,
)
from .reward import RewardTrace

ENVELOPE_BYTES = 16
METRICS_HEADER = ("round", "model", "mode", "accuracy", "mean_loss", "selected", "cum_mb")


class FederationError(RuntimeError):
    """A sub-operation failed; carries round/client/batch context."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key."""


@dataclass(frozen=True)
class FederationConfig:
    """All knobs of a federated run; defaults give the reference toy setup."""

    rounds: int = 5
    clients: int = 3
    batch_size: int = 8
    epochs_per_round: int = 2
    lr_client: float = 0.02
    lr_server: float = 0.02
    alpha: float = 0.5
    lam: float = 0.5
    beta: float = 0.1
    selection_mode: str = "threshold"
    selection_min: int = 4
    seed: int = 0
    max_new_tokens: int = 4
    decode_mode: str = "greedy"
    decode_temperature: float = 1.0
    filter_lr: float = 3e-4
    filter_epochs: int = 10
    filter_width: int = 64
    filter_blocks: int = 2
    feature_dim: int = 64
    sft_epochs: int = 120
    sft_lr: float = 0.01
    sft_batch_size: int = 16
    server_corpus_n: int = 480
    server_sft_epochs: int = 60
    client_d_emb: int = 16
    client_d_hidden: int = 32
    server_d_emb: int = 24
    server_d_hidden: int = 48
    context_len: int = 48
    distill_mode: str = "zero_shot"
    data_dir: str = ""

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.clients < 1 or self.batch_size < 1:
            raise ConfigError("rounds, clients and batch_size must be >= 1")
        if self.epochs_per_round < 1:
            raise ConfigError("epochs_per_round must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.selection_mode not in ("threshold", "top_k"):
            raise ConfigError(f"unknown selection_mode {self.selection_mode!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "FederationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**data)  # type: ignore[arg-type]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            mode=self.decode_mode,
            temperature=self.decode_temperature,
            max_new_tokens=self.max_new_tokens,
            seed=self.seed,
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(beta=self.beta)

    def selection_config(self, pool_size: int) -> SelectionConfig:
        return SelectionConfig(
            mode=self.selection_mode,
            top_k=self.batch_size,
            min_count=min(self.selection_min, pool_size),
            max_count=pool_size,
        )


def derive_seed(master: int, label: str) -> int:
    """Stable per-component seed derived from the master seed and a label."""
    digest = hashlib.blake2b(f"{master}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


# ---------------------------------------------------------------------------
# Message accounting


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    receiver: str
    kind: str
    payload_bytes: int
    ids: tuple[str, ...] | None = None


@dataclass
class MessageLog:
    """Ordered exchange records with exact payload byte accounting."""

    records: list[Message] = field(default_factory=list)

    def total_bytes(self) -> int:
        return sum(record.payload_bytes for record in self.records)

    def total_mb(self) -> float:
        return self.total_bytes() / 2**20

    def to_jsonl(self) -> str:
        lines = []
        for record in self.records:
            entry = {
                "round": record.round,
                "sender": record.sender,
                "receiver": record.receiver,
                "kind": record.kind,
                "payload_bytes": record.payload_bytes,
            }
            if record.ids is not None:
                entry["ids"] = list(record.ids)
            lines.append(json.dumps(entry, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def account_message(
    log: MessageLog,
    sender: str,
    receiver: str,
    kind: str,
    payload: str,
    round_index: int,
    ids: tuple[str, ...] | None = None,
) -> MessageLog:
    """Append a record; bytes are the UTF-8 payload plus a fixed envelope."""
    if kind not in ("sample_ids", "responses", "envelope"):
        raise FederationError(f"unknown message kind {kind!r}")
    log.records.append(
        Message(
            round=round_index,
            sender=sender,
            receiver=receiver,
            kind=kind,
            payload_bytes=len(payload.encode("utf-8")) + ENVELOPE_BYTES,
            ids=ids,
        )
    )
    return log


def encode_sample_ids(ids: Sequence[str]) -> str:
    return json.dumps(sorted(ids), separators=(",", ":"))


def encode_responses(responses: Mapping[str, tuple[int, ...]], vocab: Vocabulary) -> str:
    payload = {sample_id: vocab.to_text(tokens) for sample_id, tokens in responses.items()}
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Federation state


@dataclass
class ClientState:
    index: int
    policy: TokenPolicy
    reference: ReferenceSnapshot
    filter_state: FilterState
    selection: list[str]
    trace: RewardTrace
    triples: dict[str, ReasoningTriple] = field(default_factory=dict)
    last_losses: list[float] = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"client-{self.index}"


@dataclass
class ServerState:
    policy: TokenPolicy
    reference: ReferenceSnapshot
    filters: list[FilterState]
    selections: list[list[str]]
    traces: list[RewardTrace]
    triples: dict[tuple[str, int], ReasoningTriple] = field(default_factory=dict)
    received: dict[tuple[str, int], tuple[int, ...]] = field(default_factory=dict)
    partition: OverlapPartition | None = None
    last_loss: float = 0.0


@dataclass
class RoundState:
    """Full federation snapshot between rounds."""

    round_index: int
    clients: list[ClientState]
    server: ServerState
    log: MessageLog
    pool: DistillationPool
    vocab: Vocabulary
    features: dict[str, FeatureVector]
    prompts: dict[str, tuple[int, ...]]
    response_cache: dict[tuple[str, str], tuple[int, ...]] = field(default_factory=dict)
    update_audit: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Construction helpers


def build_client_policies(cfg: FederationConfig, vocab: Vocabulary) -> list[TokenPolicy]:
    arch = ArchSpec(
        vocab_size=len(vocab),
        context_len=cfg.context_len,
        d_emb=cfg.client_d_emb,
        d_hidden=cfg.client_d_hidden,
    )
    return [
        TokenPolicy.create(arch, f"client-{k}", derive_seed(cfg.seed, f"policy-client-{k}"))
        for k in range(cfg.clients)
    ]


def build_server_policy(cfg: FederationConfig, vocab: Vocabulary) -> TokenPolicy:
    """Wide policy fitted on a broad uniform corpus: the 'pre-trained' server."""
    arch = ArchSpec(
        vocab_size=len(vocab),
        context_len=cfg.context_len,
        d_emb=cfg.server_d_emb,
        d_hidden=cfg.server_d_hidden,
    )
    server = TokenPolicy.create(arch, "server", derive_seed(cfg.seed, "policy-server"))
    corpus = generate_general_dataset(
        derive_seed(cfg.seed, "server-corpus"), cfg.server_corpus_n
    )
    sft(
        server,
        corpus,
        epochs=cfg.server_sft_epochs,
        lr=cfg.sft_lr,
        vocab=vocab,
        batch_size=cfg.sft_batch_size,
    )
    return server


def _decode_for(
    state: RoundState, model: TokenPolicy, role: str, sample_id: str, cfg: FederationConfig
) -> tuple[int, ...]:
    key = (role, sample_id)
    cached = state.response_cache.get(key)
    if cached is None:
        cached = generate(model, state.prompts[sample_id], cfg.decode_config())
        if not cached:
            cached = (state.vocab.eos_id,)
        state.response_cache[key] = cached
    return cached


def _client_exchange(
    state: RoundState, cs: ClientState, ids: Sequence[str], cfg: FederationConfig
) -> None:
    """One batch exchange: selection ids up, server responses down, client responses up."""
    round_index = state.round_index
    ids = sorted(ids)
    account_message(
        state.log, cs.name, "server", "sample_ids", encode_sample_ids(ids),
        round_index=round_index, ids=tuple(ids),
    )
    server_responses = {
        sample_id: _decode_for(state, state.server.policy, "server", sample_id, cfg)
        for sample_id in ids
    }
    account_message(
        state.log, "server", cs.name, "responses",
        encode_responses(server_responses, state.vocab),
        round_index=round_index, ids=tuple(ids),
    )
    client_responses = {
        sample_id: _decode_for(state, cs.policy, cs.name, sample_id, cfg)
        for sample_id in ids
    }
    account_message(
        state.log, cs.name, "server", "responses",
        encode_responses(client_responses, state.vocab),
        round_index=round_index, ids=tuple(ids),
    )
    for sample_id in ids:
        triple = ReasoningTriple(
            sample_id=sample_id,
            prompt=state.prompts[sample_id],
            client_response=client_responses[sample_id],
            server_response=server_responses[sample_id],
        )
        cs.triples[sample_id] = triple
        state.server.triples[(sample_id, cs.index)] = triple
        state.server.received[(sample_id, cs.index)] = client_responses[sample_id]


def _server_fetch_missing(
    state: RoundState, client_index: int, ids: Sequence[str], cfg: FederationConfig
) -> None:
    """Request client responses the server lacks for its own selection."""
    missing = [
        sample_id for sample_id in sorted(ids)
        if (f"client-{client_index}", sample_id) not in state.response_cache
    ]
    if not missing:
        return
    cs = state.clients[client_index]
    account_message(
        state.log, "server", cs.name, "sample_ids", encode_sample_ids(missing),
        round_index=state.round_index, ids=tuple(missing),
    )
    responses = {
        sample_id: _decode_for(state, cs.policy, cs.name, sample_id, cfg)
        for sample_id in missing
    }
    account_message(
        state.log, cs.name, "server", "responses",
        encode_responses(responses, state.vocab),
        round_index=state.round_index, ids=tuple(missing),
    )
    for sample_id, tokens in responses.items():
        state.server.received[(sample_id, client_index)] = tokens


def _server_refresh_triples(
    state: RoundState, client_index: int, ids: Sequence[str], cfg: FederationConfig
) -> None:
    """Build server-side triples for (ids x client) with this round's responses."""
    _server_fetch_missing(state, client_index, ids, cfg)
    for sample_id in ids:
        state.server.triples[(sample_id, client_index)] = ReasoningTriple(
            sample_id=sample_id,
            prompt=state.prompts[sample_id],
            client_response=state.server.received[(sample_id, client_index)],
            server_response=_decode_for(state, state.server.policy, "server", sample_id, cfg),
        )


def _pool_estimates(
    state: RoundState, filter_state: FilterState
) -> list[tuple[str, float]]:
    ids = sorted(state.features)
    matrix = np.stack([state.features[sample_id].values for sample_id in ids])
    values = estimate_batch(filter_state, matrix)
    return list(zip(ids, (float(v) for v in values)))


def _filter_update_and_reselect(
    state: RoundState,
    filter_state: FilterState,
    trace: RewardTrace,
    selection: Sequence[str],
    losses: Sequence[float],
    cfg: FederationConfig,
) -> list[str]:
    """Reward computation, exploit/explore training, and pool re-selection."""
    _, _, r_total = trace.rewards(losses)
    feats = np.stack([state.features[sample_id].values for sample_id in selection])
    _, hidden_pre = exploit_forward_batch(filter_state, feats)
    train_exploit(filter_state, feats, r_total, cfg.filter_lr, cfg.filter_epochs)
    post_pred, _ = exploit_forward_batch(filter_state, feats)
    residuals = r_total - post_pred
    train_explore(filter_state, hidden_pre, residuals, cfg.filter_lr, cfg.filter_epochs)
    trace.observe_batch(losses)
    return select(filter_state, _pool_estimates(state, filter_state))


def run_round(state: RoundState, pool: DistillationPool, cfg: FederationConfig) -> RoundState:
    """Advance the federation by one communication round (in place)."""
    state.round_index += 1
    state.response_cache = {}
    dcfg = cfg.distill_config()
    for cs in state.clients:
        for b in range(cfg.epochs_per_round):
            try:
                if any(s not in cs.triples for s in cs.selection):
                    _client_exchange(state, cs, cs.selection, cfg)
                losses = [
                    client_loss(cs.triples[s], cs.policy, cs.reference, dcfg)
                    for s in cs.selection
                ]
                new_selection = _filter_update_and_reselect(
                    state, cs.filter_state, cs.trace, cs.selection, losses, cfg
                )
                _client_exchange(state, cs, new_selection, cfg)
                grad = np.zeros_like(cs.policy.params)
                for sample_id in new_selection:
                    _, g = client_loss_and_grad(
                        cs.triples[sample_id], cs.policy, cs.reference, dcfg
                    )
                    grad += g
                grad /= len(new_selection)
                apply_update(cs.policy, grad, cfg.lr_client)
                state.update_audit.append(
                    {
                        "round": state.round_index,
                        "model": cs.name,
                        "batch": b,
                        "sample_ids": list(new_selection),
                    }
                )
                cs.selection = new_selection
                cs.last_losses = losses
            except Exception as exc:
                raise FederationError(
                    f"round {state.round_index}, {cs.name}, batch {b}: {exc}"
                ) from exc
        cs.trace.finish_round(
            [client_loss(cs.triples[s], cs.policy, cs.reference, dcfg) for s in cs.selection]
        )

    server = state.server
    try:
        new_selections: list[list[str]] = []
        for k in range(cfg.clients):
            selection = server.selections[k]
            if any((s, k) not in server.triples for s in selection):
                _server_refresh_triples(state, k, selection, cfg)
            losses = per_pair_server_losses(
                server.triples, selection, k, server.policy, server.reference, dcfg
            )
            new_selection = _filter_update_and_reselect(
                state, server.filters[k], server.traces[k], selection, losses, cfg
            )
            _server_refresh_triples(state, k, new_selection, cfg)
            new_selections.append(new_selection)
        server.partition = overlap_partition(
            {k: new_selections[k] for k in range(cfg.clients)}
        )
        loss, grad = server_loss_and_grad(
            server.triples, server.partition, server.policy, server.reference, dcfg
        )
        apply_update(server.policy, grad, cfg.lr_server)
        server.last_loss = loss
        state.update_audit.append(
            {
                "round": state.round_index,
                "model": "server",
                "batch": 0,
                "sample_ids": sorted(server.partition.sample_ids),
            }
        )
        server.selections = new_selections
        for k in range(cfg.clients):
            final_losses = per_pair_server_losses(
                server.triples, new_selections[k], k,
                server.policy, server.reference, dcfg,
            )
            server.traces[k].finish_round(final_losses)
    except Exception as exc:
        raise FederationError(f"round {state.round_index}, server: {exc}") from exc
    return state


def initialise(
    cfg: FederationConfig,
    datasets: tuple[list[LocalDataset], DistillationPool, list[LocalDataset]],
) -> RoundState:
    """SFT references, server pre-training, cold-start selections (round 0)."""
    locals_, pool, _ = datasets
    if len(locals_) != cfg.clients:
        raise ConfigError(
            f"config expects {cfg.clients} clients, datasets provide {len(locals_)}"
        )
    vocab = default_vocabulary()
    features = {s.id: featurize(s, cfg.feature_dim) for s in pool.samples}
    prompts = {
        s.id: format_prompt(s, cfg.distill_mode, vocab=vocab) for s in pool.samples
    }
    feature_items = sorted(features.items())
    selection_cfg = cfg.selection_config(len(pool))
    prototype_count = min(cfg.batch_size, len(pool))

    clients: list[ClientState] = []
    for k, policy in enumerate(build_client_policies(cfg, vocab)):
        sft(
            policy,
            locals_[k],
            epochs=cfg.sft_epochs,
            lr=cfg.sft_lr,
            vocab=vocab,
            batch_size=cfg.sft_batch_size,
        )
        _, reference = policy, policy.snapshot(frozen_round=1)
        filter_state = FilterState.create(
            cfg.feature_dim,
            pair_id=(f"client-{k}", "server"),
            seed=derive_seed(cfg.seed, f"filter-client-{k}"),
            width=cfg.filter_width,
            n_blocks=cfg.filter_blocks,
            lam=cfg.lam,
            selection=selection_cfg,
        )
        selection = cold_start(
            feature_items, prototype_count, derive_seed(cfg.seed, f"coldstart-client-{k}")
        )
        clients.append(
            ClientState(
                index=k,
                policy=policy,
                reference=reference,
                filter_state=filter_state,
                selection=selection,
                trace=RewardTrace(alpha=cfg.alpha),
            )
        )

    server_policy = build_server_policy(cfg, vocab)
    server = ServerState(
        policy=server_policy,
        reference=server_policy.snapshot(frozen_round=1),
        filters=[
            FilterState.create(
                cfg.feature_dim,
                pair_id=("server", f"client-{k}"),
                seed=derive_seed(cfg.seed, f"filter-server-{k}"),
                width=cfg.filter_width,
                n_blocks=cfg.filter_blocks,
                lam=cfg.lam,
                selection=selection_cfg,
            )
            for k in range(cfg.clients)
        ],
        selections=[
            cold_start(
                feature_items, prototype_count, derive_seed(cfg.seed, f"coldstart-server-{k}")
            )
            for k in range(cfg.clients)
        ],
        traces=[RewardTrace(alpha=cfg.alpha) for _ in range(cfg.clients)],
    )
    return RoundState(
        round_index=0,
        clients=clients,
        server=server,
        log=MessageLog(),
        pool=pool,
        vocab=vocab,
        features=features,
        prompts=prompts,
    )


def metric_rows_for_model(
    model, test_set, cfg: FederationConfig, vocab: Vocabulary,
    round_index: int, log: MessageLog, mean_loss: float, selected: int,
) -> list[dict]:
    rows = []
    for mode in ("one_shot", "zero_shot"):
        report = evaluation.evaluate(model, test_set, mode, cfg.decode_config(), vocab)
        rows.append(
            {
                "round": round_index,
                "model": report.model,
                "mode": mode,
                "accuracy": report.accuracy,
                "mean_loss": mean_loss,
                "selected": selected,
                "cum_mb": log.total_mb(),
            }
        )
    return rows


def run(
    cfg: FederationConfig,
    datasets: tuple[list[LocalDataset], DistillationPool, list[LocalDataset]],
) -> tuple[RoundState, list[dict]]:
    """Initialise, run all rounds, and evaluate after each round."""
    locals_, pool, tests = datasets
    state = initialise(cfg, datasets)
    combined = [s for t in tests for s in t.samples]
    rows: list[dict] = []
    for _ in range(cfg.rounds):
        state = run_round(state, pool, cfg)
        for cs in state.clients:
            mean_loss = float(np.mean(cs.last_losses)) if cs.last_losses else 0.0
            rows.extend(
                metric_rows_for_model(
                    cs.policy, tests[cs.index], cfg, state.vocab,
                    state.round_index, state.log,
                    mean_loss=mean_loss, selected=len(cs.selection),
                )
            )
        union = set()
        for sel in state.server.selections:
            union.update(sel)
        rows.extend(
            metric_rows_for_model(
                state.server.policy, combined, cfg, state.vocab,
                state.round_index, state.log,
                mean_loss=state.server.last_loss, selected=len(union),
            )
        )
    return state, rows


def metrics_to_csv(rows: Sequence[Mapping[str, object]]) -> str:
    lines = [",".join(METRICS_HEADER)]
    for row in rows:
        lines.append(",".join(str(row[key]) for key in METRICS_HEADER))
    return "\n".join(lines) + "\n"


def cross_entropy_finetune(
    policy: TokenPolicy,
    pairs: Sequence[tuple[tuple[int, ...], tuple[int, ...]]],
    lr: float,
    epochs: int = 1,
    batch_size: int = 16,
) -> None:
    """Plain cross-entropy fit of (prompt, response) pairs (FedKD baseline)."""
    for _ in range(epochs):
        for start in range(0, len(pairs), batch_size):
            batch = pairs[start : start + batch_size]
            grad = np.zeros_like(policy.params)
            for prompt, target in batch:
                _, g = log_prob_and_grad(policy, prompt, target)
                grad += g
            policy.params += (lr / len(batch)) * grad
