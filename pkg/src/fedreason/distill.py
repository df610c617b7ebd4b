"""Contrastive reasoning-distillation losses and their analytic gradients.

Both sides score a (prompt, client response, server response) triple by the
reference-anchored log-ratio margin

    margin = (log p(preferred|x) - log p_ref(preferred|x))
           - (log p(other|x)     - log p_ref(other|x))

and pay ``-log sigmoid(beta * margin)``.  Clients prefer the server
response; the server prefers the client response (the direction of
knowledge transfer is flipped).  Server-side samples selected for several
clients are combined with per-client weights that sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import ReasoningTriple
from .policy import ReferenceSnapshot, TokenPolicy, log_prob, log_prob_and_grad


class DistillError(ValueError):
    """Architecture mismatch or missing triple."""


@dataclass(frozen=True)
class DistillConfig:
    """Contrastive loss settings; ``beta`` scales the log-ratio margin."""

    beta: float = 0.1

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise DistillError("beta must be >= 0")


@dataclass(frozen=True)
class OverlapPartition:
    """Server-side split of selected samples into shared vs single-client."""

    overlapping: dict[str, tuple[int, ...]]
    disjoint: dict[str, int]
    weights: dict[tuple[str, int], float]

    def __post_init__(self) -> None:
        both = set(self.overlapping) & set(self.disjoint)
        if both:
            raise DistillError(f"samples in both partitions: {sorted(both)}")
        for sample_id, clients in self.overlapping.items():
            total = sum(self.weights[(sample_id, k)] for k in clients)
            if abs(total - 1.0) > 1e-9:
                raise DistillError(f"weights for {sample_id!r} sum to {total}, not 1")

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.overlapping) | set(self.disjoint)))


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _softplus(z: float) -> float:
    # log(1 + e^z), stable for large |z|
    if z > 0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


def _check_arch(policy: TokenPolicy, ref: ReferenceSnapshot) -> None:
    if policy.arch != ref.arch:
        raise DistillError(
            f"policy architecture {policy.arch} does not match reference {ref.arch}"
        )


def _margin(
    triple: ReasoningTriple,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    preferred: str,
) -> float:
    x = triple.prompt
    y_pref = triple.server_response if preferred == "server" else triple.client_response
    y_other = triple.client_response if preferred == "server" else triple.server_response
    return (
        (log_prob(policy, x, y_pref) - log_prob(ref, x, y_pref))
        - (log_prob(policy, x, y_other) - log_prob(ref, x, y_other))
    )


def client_loss(
    triple: ReasoningTriple,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    cfg: DistillConfig,
) -> float:
    """Client-side contrastive loss; the server response is preferred."""
    _check_arch(policy, ref)
    margin = _margin(triple, policy, ref, preferred="server")
    return _softplus(-cfg.beta * margin)


def _pair_loss_and_grad(
    triple: ReasoningTriple,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    cfg: DistillConfig,
    preferred: str,
) -> tuple[float, np.ndarray]:
    x = triple.prompt
    y_pref = triple.server_response if preferred == "server" else triple.client_response
    y_other = triple.client_response if preferred == "server" else triple.server_response
    lp_pref, g_pref = log_prob_and_grad(policy, x, y_pref)
    lp_other, g_other = log_prob_and_grad(policy, x, y_other)
    margin = (
        (lp_pref - log_prob(ref, x, y_pref)) - (lp_other - log_prob(ref, x, y_other))
    )
    loss = _softplus(-cfg.beta * margin)
    coeff = -cfg.beta * _sigmoid(-cfg.beta * margin)
    return loss, coeff * (g_pref - g_other)


def client_loss_grad(
    triple: ReasoningTriple,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    cfg: DistillConfig,
) -> np.ndarray:
    """Gradient of :func:`client_loss` w.r.t. the policy parameters only."""
    _check_arch(policy, ref)
    _, grad = _pair_loss_and_grad(triple, policy, ref, cfg, preferred="server")
    return grad


def client_loss_and_grad(
    triple: ReasoningTriple,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    cfg: DistillConfig,
) -> tuple[float, np.ndarray]:
    _check_arch(policy, ref)
    return _pair_loss_and_grad(triple, policy, ref, cfg, preferred="server")


def overlap_partition(filtered_sets: Mapping[int, Iterable[str]]) -> OverlapPartition:
    """Split per-client selections into overlapping and single-client samples.

    Overlapping samples get uniform weights over their selecting clients.
    """
    selectors: dict[str, list[int]] = {}
    for client, ids in filtered_sets.items():
        for sample_id in ids:
            selectors.setdefault(sample_id, []).append(client)
    overlapping: dict[str, tuple[int, ...]] = {}
    disjoint: dict[str, int] = {}
    weights: dict[tuple[str, int], float] = {}
    for sample_id, clients in selectors.items():
        clients = sorted(clients)
        if len(clients) == 1:
            disjoint[sample_id] = clients[0]
        else:
            overlapping[sample_id] = tuple(clients)
            w = 1.0 / len(clients)
            for k in clients:
                weights[(sample_id, k)] = w
    return OverlapPartition(overlapping=overlapping, disjoint=disjoint, weights=weights)


def _server_terms(
    triples: Mapping[tuple[str, int], ReasoningTriple],
    partition: OverlapPartition,
) -> list[tuple[str, int, float]]:
    """(sample, client, weight) terms of the server objective, in stable order."""
    terms: list[tuple[str, int, float]] = []
    for sample_id in sorted(partition.overlapping):
        for client in partition.overlapping[sample_id]:
            if (sample_id, client) not in triples:
                raise DistillError(f"missing triple for sample {sample_id!r}, client {client}")
            terms.append((sample_id, client, partition.weights[(sample_id, client)]))
    for sample_id in sorted(partition.disjoint):
        client = partition.disjoint[sample_id]
        if (sample_id, client) not in triples:
            raise DistillError(f"missing triple for sample {sample_id!r}, client {client}")
        terms.append((sample_id, client, 1.0))
    return terms


def server_loss(
    triples: Mapping[tuple[str, int], ReasoningTriple],
    partition: OverlapPartition,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    cfg: DistillConfig,
) -> float:
    """Mean weighted contrastive loss; the client responses are preferred."""
    _check_arch(policy, ref)
    n_samples = len(partition.overlapping) + len(partition.disjoint)
    if n_samples == 0:
        raise DistillError("empty partition")
    total = 0.0
    for sample_id, client, weight in _server_terms(triples, partition):
        margin = _margin(triples[(sample_id, client)], policy, ref, preferred="client")
        total += weight * _softplus(-cfg.beta * margin)
    return total / n_samples


def server_loss_grad(
    triples: Mapping[tuple[str, int], ReasoningTriple],
    partition: OverlapPartition,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    cfg: DistillConfig,
) -> np.ndarray:
    """Gradient of :func:`server_loss` w.r.t. the server parameters only."""
    _, grad = server_loss_and_grad(triples, partition, policy, ref, cfg)
    return grad


def server_loss_and_grad(
    triples: Mapping[tuple[str, int], ReasoningTriple],
    partition: OverlapPartition,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    cfg: DistillConfig,
) -> tuple[float, np.ndarray]:
    _check_arch(policy, ref)
    n_samples = len(partition.overlapping) + len(partition.disjoint)
    if n_samples == 0:
        raise DistillError("empty partition")
    total = 0.0
    grad = np.zeros(policy.arch.n_params, dtype=np.float64)
    for sample_id, client, weight in _server_terms(triples, partition):
        loss, term_grad = _pair_loss_and_grad(
            triples[(sample_id, client)], policy, ref, cfg, preferred="client"
        )
        total += weight * loss
        grad += weight * term_grad
    return total / n_samples, grad / n_samples


def per_pair_server_losses(
    triples: Mapping[tuple[str, int], ReasoningTriple],
    sample_ids: Sequence[str],
    client: int,
    policy: TokenPolicy,
    ref: ReferenceSnapshot,
    cfg: DistillConfig,
) -> list[float]:
    """Unweighted per-sample server-side losses for one (server, client) pair."""
    _check_arch(policy, ref)
    losses = []
    for sample_id in sample_ids:
        if (sample_id, client) not in triples:
            raise DistillError(f"missing triple for sample {sample_id!r}, client {client}")
        margin = _margin(triples[(sample_id, client)], policy, ref, preferred="client")
        losses.append(_softplus(-cfg.beta * margin))
    return losses
