"""Offline datasets drawn from the nominal model.

Sampling uses SplitMix64 in counter mode: the ``k``-th 64-bit draw for a seed
is ``mix(seed + (k + 1) * 0x9E3779B97F4A7C15)`` (mod 2**64). Transition ``i``
consumes draws ``2i`` (state-action pair, inverse CDF over ``mu`` flattened
row-major) and ``2i + 1`` (next state, inverse CDF over the kernel row).
A draw becomes a uniform in [0, 1) as ``(z >> 11) * 2**-53``. Sample ``i``
therefore does not depend on ``n`` or on batching.

File format (JSON Lines): a header object with ``n_states``, ``n_actions``,
``mu``, ``seed`` and ``source_id``, then one ``{"s", "a", "r", "s_next"}``
object per transition. Weighted datasets add ``"w"`` to each line.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import STOCH_TOL, InvalidModelError, Policy, TabularRMDP, occupancy

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, counters) -> np.ndarray:
    """SplitMix64 outputs number ``counters`` (0-based) for ``seed``."""
    counters = np.asarray(counters, dtype=np.uint64)
    base = np.full(counters.shape, seed % 2**64, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = base + (counters + np.uint64(1)) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniforms(seed: int, counters) -> np.ndarray:
    return (splitmix64(seed, counters) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Smallest ``j`` with ``u < cdf[j]``; ``probs`` is (k,) or (1, k) shared, or (n, k)."""
    if probs.shape[0] == 1:
        cdf = np.cumsum(probs[0])
        idx = np.searchsorted(cdf, u, side="right")
        last = np.full(u.shape, probs.shape[1] - 1 - np.argmax(probs[0, ::-1] > 0.0))
    else:
        cdf = np.cumsum(probs, axis=1)
        idx = (u[:, None] >= cdf).sum(axis=1)
        last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0.0, axis=1)
    # u beyond a total that rounded below 1 lands on the last positive entry
    return np.minimum(idx, last).astype(np.int64)


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    w: float = 1.0


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Transitions stored column-wise. ``w`` is 1 for sampled data."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    w: np.ndarray
    mu: np.ndarray
    seed: int = 0
    source_id: str = ""

    def __post_init__(self):
        for name, dtype in (("s", np.int64), ("a", np.int64), ("s_next", np.int64),
                            ("r", np.float64), ("w", np.float64), ("mu", np.float64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.s.size
        if not (self.a.size == self.r.size == self.s_next.size == self.w.size == n):
            raise InvalidModelError("transition columns differ in length")
        if self.mu.ndim != 2 or abs(self.mu.sum() - 1.0) > STOCH_TOL or np.any(self.mu < 0):
            raise InvalidModelError("mu must be a 2-D probability table")
        n_s, n_a = self.mu.shape
        if n and (
            self.s.min() < 0 or self.s.max() >= n_s or self.s_next.min() < 0
            or self.s_next.max() >= n_s or self.a.min() < 0 or self.a.max() >= n_a
        ):
            raise InvalidModelError("transition index out of range")
        if n and np.any(self.mu[self.s, self.a] <= 0.0):
            raise InvalidModelError("a transition lies outside the support of mu")
        if np.any(self.w <= 0.0):
            raise InvalidModelError("transition weights must be positive")

    def __len__(self):
        return int(self.s.size)

    @property
    def n_states(self) -> int:
        return self.mu.shape[0]

    @property
    def n_actions(self) -> int:
        return self.mu.shape[1]

    @property
    def weighted(self) -> bool:
        return bool(np.any(self.w != 1.0))

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(int(s), int(a), float(r), int(sn), float(w))
            for s, a, r, sn, w in zip(self.s, self.a, self.r, self.s_next, self.w)
        ]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.source_id == other.source_id
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("s", "a", "r", "s_next", "w", "mu")
            )
        )

    def permuted(self, order) -> "Dataset":
        order = np.asarray(order)
        return Dataset(self.s[order], self.a[order], self.r[order], self.s_next[order],
                       self.w[order], self.mu, self.seed, self.source_id)

    def atoms(self) -> "Atoms":
        """Merge transitions sharing ``(s, a, s')`` into weighted atoms.

        Transitions are put in a canonical order first, so the result does not
        depend on the order of the records.
        """
        order = np.lexsort((self.w, self.r, self.s_next, self.a, self.s))
        s, a, sn = self.s[order], self.a[order], self.s_next[order]
        r, w = self.r[order], self.w[order]
        n_a = self.n_actions
        cell = s * n_a + a
        if cell.size == 0:
            empty = np.zeros(0)
            return Atoms(np.zeros(0, np.int64), np.zeros(0, np.int64), empty, empty, empty,
                         self.n_states, n_a)
        key = cell * self.n_states + sn
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        return Atoms(
            cell=cell[starts],
            s_next=sn[starts],
            w=np.add.reduceat(w, starts),
            wr=np.add.reduceat(w * r, starts),
            wr2=np.add.reduceat(w * r * r, starts),
            n_states=self.n_states,
            n_actions=n_a,
        )


class Atoms(NamedTuple):
    """Dataset merged by ``(cell, s')`` with summed weight, weight*r, weight*r^2."""

    cell: np.ndarray
    s_next: np.ndarray
    w: np.ndarray
    wr: np.ndarray
    wr2: np.ndarray
    n_states: int
    n_actions: int

    @property
    def total_weight(self) -> float:
        return float(self.w.sum())

    def cell_weights(self) -> np.ndarray:
        return np.bincount(self.cell, weights=self.w, minlength=self.n_states * self.n_actions)


def _check_mu(mu, shape) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != shape:
        raise InvalidModelError(f"mu shape {mu.shape} != {shape}")
    if np.any(mu < 0.0) or abs(mu.sum() - 1.0) > STOCH_TOL:
        raise InvalidModelError(f"mu is not a distribution (sum={mu.sum():.17g})")
    return mu


def generate_dataset(
    rmdp: TabularRMDP, mu, n: int, seed: int, source_id: str = "generated"
) -> Dataset:
    """Draw ``n`` i.i.d. transitions with ``(s, a) ~ mu`` and ``s' ~ P0(.|s, a)``."""
    mu = _check_mu(mu, (rmdp.n_states, rmdp.n_actions))
    if n < 0:
        raise ValueError("n must be >= 0")
    idx = np.arange(n, dtype=np.uint64)
    u_pair = uniforms(seed, 2 * idx)
    u_next = uniforms(seed, 2 * idx + np.uint64(1))
    cell = _inverse_cdf(mu.reshape(1, -1), u_pair)
    s, a = np.divmod(cell, rmdp.n_actions)
    s_next = _inverse_cdf(rmdp.kernel[s, a], u_next)
    return Dataset(s, a, rmdp.reward[s, a], s_next, np.ones(n), mu, seed, source_id)


def exhaustive_dataset(rmdp: TabularRMDP, mu=None, source_id: str = "exhaustive") -> Dataset:
    """Every ``(s, a, s')`` with weight ``mu(s, a) * P0(s'|s, a)``.

    Empirical averages over this dataset equal population expectations.
    """
    if mu is None:
        mu = uniform_mu(rmdp.n_states, rmdp.n_actions)
    mu = _check_mu(mu, (rmdp.n_states, rmdp.n_actions))
    weights = mu[:, :, None] * rmdp.kernel
    s, a, sn = np.nonzero(weights > 0.0)
    return Dataset(s, a, rmdp.reward[s, a], sn, weights[s, a, sn], mu, 0, source_id)


def uniform_mu(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / (n_states * n_actions))


def smoothed_policy(policy: Policy, epsilon: float) -> Policy:
    """With probability ``epsilon`` act uniformly at random."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    n_a = policy.probs.shape[1]
    if epsilon == 0.0:
        return policy
    return Policy.stochastic((1.0 - epsilon) * policy.probs + epsilon / n_a)


def mu_from_policy(rmdp: TabularRMDP, policy: Policy, epsilon: float) -> np.ndarray:
    """Occupancy of the epsilon-smoothed policy under the nominal kernel."""
    mix = smoothed_policy(policy, epsilon)
    mu = occupancy(mix, rmdp.kernel, rmdp.gamma, rmdp.init_dist)
    return mu / mu.sum()


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "n_states": dataset.n_states,
        "n_actions": dataset.n_actions,
        "mu": dataset.mu.tolist(),
        "seed": dataset.seed,
        "source_id": dataset.source_id,
    }
    weighted = dataset.weighted
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for t in dataset.transitions:
            rec = {"s": t.s, "a": t.a, "r": t.r, "s_next": t.s_next}
            if weighted:
                rec["w"] = t.w
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}:1: missing header line")
    try:
        header = json.loads(lines[0])
        mu = np.asarray(header["mu"], dtype=float)
        seed = int(header["seed"])
        source_id = str(header.get("source_id", ""))
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}:1: malformed header ({exc})") from None
    if mu.shape != (header.get("n_states"), header.get("n_actions")):
        raise DatasetFormatError(f"{path}:1: mu shape disagrees with n_states/n_actions")

    cols = {k: [] for k in ("s", "a", "r", "s_next", "w")}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            s, a, sn = rec["s"], rec["a"], rec["s_next"]
            if not all(isinstance(x, int) and not isinstance(x, bool) for x in (s, a, sn)):
                raise TypeError("indices must be integers")
            r = float(rec["r"])
            w = float(rec.get("w", 1.0))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
        cols["s"].append(s)
        cols["a"].append(a)
        cols["s_next"].append(sn)
        cols["r"].append(r)
        cols["w"].append(w)
    try:
        return Dataset(mu=mu, seed=seed, source_id=source_id, **cols)
    except InvalidModelError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
