"""Learnability-aware sample filter: reward regression plus exploration bonus.

One :class:`FilterState` serves one (learner, teacher) pair.  The ExploitNet
regresses observed batch rewards from sample features; the ExploreNet
regresses the ExploitNet's residual from its concatenated hidden states and
contributes an uncertainty bonus, so the combined estimate behaves like an
upper-confidence score.  Selection is by threshold (default) or top-K, and
the first-round cold start picks cluster prototypes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import FeatureVector


class FilterError(ValueError):
    """Dimension mismatch, invalid configuration, or diverged training."""


@dataclass(frozen=True)
class NetSpec:
    """Residual feedforward regressor shape: input -> width x blocks -> scalar."""

    in_dim: int
    width: int
    n_blocks: int

    def __post_init__(self) -> None:
        if min(self.in_dim, self.width, self.n_blocks) < 1:
            raise FilterError("net dimensions must be positive")

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {
            "w_in": (self.width, self.in_dim),
            "b_in": (self.width,),
        }
        for i in range(self.n_blocks):
            shapes[f"w_block{i}"] = (self.width, self.width)
            shapes[f"b_block{i}"] = (self.width,)
        shapes["w_out"] = (self.width,)
        shapes["b_out"] = (1,)
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    @property
    def hidden_dim(self) -> int:
        return self.width * self.n_blocks


def _net_views(spec: NetSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    views: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in spec.shapes.items():
        size = int(np.prod(shape))
        views[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    return views


@dataclass
class ResidualNet:
    """Fully connected regressor with residual blocks; flat parameter vector."""

    spec: NetSpec
    params: np.ndarray

    def __post_init__(self) -> None:
        if self.params.shape != (self.spec.n_params,):
            raise FilterError(
                f"parameter vector has shape {self.params.shape}, "
                f"expected ({self.spec.n_params},)"
            )

    @classmethod
    def create(cls, spec: NetSpec, seed: int) -> "ResidualNet":
        rng = np.random.default_rng(seed)
        flat = np.zeros(spec.n_params, dtype=np.float64)
        views = _net_views(spec, flat)
        for name, view in views.items():
            if name.startswith("w"):
                fan_in = view.shape[-1]
                view[:] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), view.shape)
        return cls(spec=spec, params=flat)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
        """Predictions and concatenated hidden states for a (n, in_dim) batch."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.spec.in_dim:
            raise FilterError(
                f"input dimension {x.shape[1]} does not match net input "
                f"{self.spec.in_dim}"
            )
        views = _net_views(self.spec, self.params)
        pre_acts: list[np.ndarray] = []
        block_outs: list[np.ndarray] = []
        h = np.tanh(x @ views["w_in"].T + views["b_in"])
        h0 = h
        for i in range(self.spec.n_blocks):
            a = np.tanh(h @ views[f"w_block{i}"].T + views[f"b_block{i}"])
            pre_acts.append(a)
            h = h + a
            block_outs.append(h)
        pred = h @ views["w_out"] + views["b_out"][0]
        hidden = np.concatenate(block_outs, axis=1)
        cache = {"x": x, "h0": h0, "pre_acts": pre_acts, "block_outs": block_outs}
        return pred, hidden, cache

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def squared_loss_and_grad(
        self, x: np.ndarray, targets: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """Half mean squared error against per-sample targets, with gradient."""
        pred, _, cache = self.forward(x)
        targets = np.broadcast_to(np.asarray(targets, dtype=np.float64), pred.shape)
        n = pred.shape[0]
        err = pred - targets
        loss = float(err @ err) / (2.0 * n)
        views = _net_views(self.spec, self.params)
        flat = np.zeros(self.spec.n_params, dtype=np.float64)
        grads = _net_views(self.spec, flat)

        dpred = err / n
        grads["w_out"] += cache["block_outs"][-1].T @ dpred
        grads["b_out"][0] = dpred.sum()
        dh = np.outer(dpred, views["w_out"])
        for i in range(self.spec.n_blocks - 1, -1, -1):
            a = cache["pre_acts"][i]
            da = dh * (1.0 - a**2)
            h_prev = cache["block_outs"][i - 1] if i > 0 else cache["h0"]
            grads[f"w_block{i}"] += da.T @ h_prev
            grads[f"b_block{i}"] += da.sum(axis=0)
            dh = dh + da @ views[f"w_block{i}"]
        dh0 = dh * (1.0 - cache["h0"] ** 2)
        grads["w_in"] += dh0.T @ cache["x"]
        grads["b_in"] += dh0.sum(axis=0)
        return loss, flat


@dataclass(frozen=True)
class SelectionConfig:
    """How pool estimates turn into a selected id set."""

    mode: str = "threshold"
    threshold: float = 0.5
    top_k: int = 8
    min_count: int = 4
    max_count: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("threshold", "top_k"):
            raise FilterError(f"unknown selection mode {self.mode!r}")
        if self.mode == "top_k" and self.top_k < 1:
            raise FilterError("top_k must be >= 1")
        if self.min_count < 0:
            raise FilterError("min_count must be >= 0")


@dataclass
class FilterState:
    """Exploit/explore nets plus selection settings for one model pair."""

    exploit: ResidualNet
    explore: ResidualNet
    lam: float
    selection: SelectionConfig
    pair_id: tuple[str, str]

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise FilterError("lam must be >= 0")
        if self.explore.spec.in_dim != self.exploit.spec.hidden_dim:
            raise FilterError(
                f"explore input width {self.explore.spec.in_dim} must equal the "
                f"exploit hidden width {self.exploit.spec.hidden_dim}"
            )

    @classmethod
    def create(
        cls,
        feature_dim: int,
        pair_id: tuple[str, str],
        seed: int,
        width: int = 64,
        n_blocks: int = 2,
        lam: float = 0.5,
        selection: SelectionConfig | None = None,
    ) -> "FilterState":
        exploit_spec = NetSpec(in_dim=feature_dim, width=width, n_blocks=n_blocks)
        explore_spec = NetSpec(
            in_dim=exploit_spec.hidden_dim, width=width, n_blocks=n_blocks
        )
        rng = np.random.default_rng(seed)
        seeds = rng.integers(0, 2**63 - 1, size=2)
        return cls(
            exploit=ResidualNet.create(exploit_spec, int(seeds[0])),
            explore=ResidualNet.create(explore_spec, int(seeds[1])),
            lam=lam,
            selection=selection or SelectionConfig(),
            pair_id=pair_id,
        )


def _as_matrix(features: Sequence[FeatureVector] | np.ndarray) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features.astype(np.float64, copy=False))
    return np.stack([f.values for f in features])


def exploit_forward(
    state: FilterState, x: FeatureVector | np.ndarray
) -> tuple[float, np.ndarray]:
    """Reward prediction and concatenated hidden states for one sample."""
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x)
    pred, hidden, _ = state.exploit.forward(values[None, :])
    return float(pred[0]), hidden[0]


def exploit_forward_batch(
    state: FilterState, features: Sequence[FeatureVector] | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    pred, hidden, _ = state.exploit.forward(_as_matrix(features))
    return pred, hidden


def _descend(
    net: ResidualNet, x: np.ndarray, targets: np.ndarray, lr: float, steps: int
) -> float:
    for step in range(steps):
        loss, grad = net.squared_loss_and_grad(x, targets)
        if not math.isfinite(loss):
            raise FilterError(f"filter training diverged at step {step}")
        net.params -= lr * grad
    loss, _ = net.squared_loss_and_grad(x, targets)
    if not math.isfinite(loss):
        raise FilterError("filter training diverged")
    return loss


def train_exploit(
    state: FilterState,
    features: Sequence[FeatureVector] | np.ndarray,
    r_total: float,
    lr: float,
    steps: int,
) -> float:
    """Regress every sample in the batch to the shared observed reward.

    Returns the final half-MSE after ``steps`` gradient steps.
    """
    x = _as_matrix(features)
    if x.shape[0] == 0:
        raise FilterError("train_exploit requires a non-empty batch")
    return _descend(state.exploit, x, np.full(x.shape[0], r_total), lr, steps)


def train_explore(
    state: FilterState,
    hidden: np.ndarray,
    targets: np.ndarray,
    lr: float,
    steps: int,
) -> float:
    """Regress residual targets from pre-update exploit hidden states."""
    hidden = np.atleast_2d(np.asarray(hidden, dtype=np.float64))
    if hidden.shape[0] == 0:
        raise FilterError("train_explore requires a non-empty batch")
    return _descend(state.explore, hidden, np.asarray(targets, dtype=np.float64), lr, steps)


def estimate(state: FilterState, x: FeatureVector | np.ndarray) -> float:
    """Combined reward estimate: exploit prediction plus scaled explore bonus."""
    pred, hidden = exploit_forward(state, x)
    if state.lam == 0.0:
        return pred
    bonus = float(state.explore.predict(hidden[None, :])[0])
    return pred + state.lam * bonus


def estimate_batch(
    state: FilterState, features: Sequence[FeatureVector] | np.ndarray
) -> np.ndarray:
    pred, hidden = exploit_forward_batch(state, features)
    if state.lam == 0.0:
        return pred
    return pred + state.lam * state.explore.predict(hidden)


def select(state: FilterState, pool_estimates: Sequence[tuple[str, float]]) -> list[str]:
    """Selected sample ids, sorted ascending.

    Threshold mode keeps ids whose estimate strictly exceeds the threshold,
    then clamps the count to [min_count, max_count] in descending-estimate
    order (ties broken by ascending id).  Top-K mode keeps the K highest.
    """
    if not pool_estimates:
        raise FilterError("select requires a non-empty estimate list")
    ranked = sorted(pool_estimates, key=lambda item: (-item[1], item[0]))
    cfg = state.selection
    if cfg.mode == "top_k":
        chosen = [sample_id for sample_id, _ in ranked[: cfg.top_k]]
        return sorted(chosen)
    qualifying = [sample_id for sample_id, value in ranked if value > cfg.threshold]
    if len(qualifying) < cfg.min_count:
        qualifying = [sample_id for sample_id, _ in ranked[: cfg.min_count]]
    if cfg.max_count is not None and len(qualifying) > cfg.max_count:
        qualifying = qualifying[: cfg.max_count]
    return sorted(qualifying)


def _kmeans_pp_init(
    x: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[int(rng.integers(n))]
    closest = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def cold_start(
    features: Sequence[tuple[str, FeatureVector]],
    k: int,
    seed: int,
    n_iterations: int = 50,
) -> list[str]:
    """First-round prototype selection: k-means, then the id nearest each centroid.

    Deterministic given the seed; ties break by ascending id and the returned
    ids are distinct.
    """
    if k < 1:
        raise FilterError("k must be >= 1")
    if k > len(features):
        raise FilterError(f"k={k} exceeds pool size {len(features)}")
    items = sorted(features, key=lambda item: item[0])
    ids = [sample_id for sample_id, _ in items]
    x = np.stack([fv.values for _, fv in items])
    rng = np.random.default_rng(seed)

    centroids = _kmeans_pp_init(x, k, rng)
    assignment = np.full(x.shape[0], -1)
    for _ in range(n_iterations):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignment = dists.argmin(axis=1)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = x[assignment == j]
            if len(members):
                centroids[j] = members.mean(axis=0)

    chosen: list[str] = []
    used: set[int] = set()
    for j in range(k):
        dist = ((x - centroids[j]) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(len(ids)), dist))
        for idx in order:
            if int(idx) not in used:
                used.add(int(idx))
                chosen.append(ids[int(idx)])
                break
    return sorted(chosen)
