"""Small perturbable RMDP families: ``chain``, ``gridworld`` and ``risky-safe``."""
from __future__ import annotations

import numpy as np

from .core import InvalidModelError, TabularRMDP, validate

RISKY, SAFE = 0, 1


def chain(length=4, slip=0.1, gamma=0.9, rho=0.1, fail=False) -> TabularRMDP:
    """Walk right to collect reward 1 at the last state.

    Action 0 moves left, action 1 moves right. With probability ``slip`` the
    move is reversed, or, when ``fail`` is set, the agent drops into an
    extra absorbing fail state instead. The last state keeps its position
    on a successful right move.
    """
    length = int(length)
    if length < 1 or not 0.0 <= slip <= 1.0:
        raise InvalidModelError("chain needs length >= 1 and slip in [0, 1]")
    n = length + (1 if fail else 0)
    n_a = 2 if length > 1 or fail else 1
    kernel = np.zeros((n, n_a, n))
    reward = np.zeros((n, n_a))
    for s in range(length):
        left, right = max(s - 1, 0), min(s + 1, length - 1)
        for a in range(n_a):
            ok, bad = (right, left) if a == 1 else (left, right)
            kernel[s, a, ok] += 1.0 - slip
            kernel[s, a, length if fail else bad] += slip
    reward[length - 1] = 1.0
    if fail:
        kernel[length, :, length] = 1.0
    init = np.zeros(n)
    init[0] = 1.0
    return TabularRMDP(kernel, reward, gamma, init, rho, length if fail else None)


_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


def gridworld(size=3, slip=0.1, gamma=0.9, rho=0.1, traps=((1, 1),)) -> TabularRMDP:
    """``size x size`` grid with goal in the bottom-right corner (reward 1, absorbing).

    A move goes in the chosen direction with probability ``1 - slip`` and in a
    uniformly random direction otherwise. Walls keep the agent in place.
    Entering a trap cell leads to an absorbing fail state.
    """
    size = int(size)
    if size < 1 or not 0.0 <= slip <= 1.0:
        raise InvalidModelError("gridworld needs size >= 1 and slip in [0, 1]")
    traps = {tuple(int(x) for x in t) for t in traps}
    n_cells = size * size
    fail = n_cells if traps else None
    n = n_cells + (1 if traps else 0)
    goal = n_cells - 1
    kernel = np.zeros((n, 4, n))
    reward = np.zeros((n, 4))

    def dest(r, c, move):
        rr = min(max(r + move[0], 0), size - 1)
        cc = min(max(c + move[1], 0), size - 1)
        return fail if (rr, cc) in traps else rr * size + cc

    for r in range(size):
        for c in range(size):
            s = r * size + c
            if s == goal:
                kernel[s, :, s] = 1.0
                reward[s] = 1.0
                continue
            if (r, c) in traps:
                kernel[s, :, fail] = 1.0
                continue
            for a, move in enumerate(_MOVES):
                kernel[s, a, dest(r, c, move)] += 1.0 - slip
                for other in _MOVES:
                    kernel[s, a, dest(r, c, other)] += slip / 4.0
    if fail is not None:
        kernel[fail, :, fail] = 1.0
    init = np.zeros(n)
    init[0] = 1.0
    return TabularRMDP(kernel, reward, gamma, init, rho, fail)


def risky_safe(p_fail=0.15, r_high=1.0, r_mid=0.8, gamma=0.9, rho=0.5) -> TabularRMDP:
    """Start state with a risky and a safe action.

    States: 0 start, 1 high-reward region, 2 mid-reward region, 3 fail.
    From the start, action 0 (risky) reaches the high region with probability
    ``1 - p_fail`` and fails otherwise; action 1 (safe) reaches the mid region
    surely. The regions pay ``r_high`` / ``r_mid`` per step and loop on
    themselves. Robust values scale both regions by the same factor, so the
    optimal start action switches from risky to safe when ``rho`` exceeds
    :func:`risky_safe_threshold`.
    """
    if not (0.0 <= p_fail <= 1.0 and 0.0 <= r_mid < r_high <= 1.0):
        raise InvalidModelError("risky-safe needs p_fail in [0,1] and 0 <= r_mid < r_high <= 1")
    kernel = np.zeros((4, 2, 4))
    reward = np.zeros((4, 2))
    kernel[0, RISKY, 1] = 1.0 - p_fail
    kernel[0, RISKY, 3] = p_fail
    kernel[0, SAFE, 2] = 1.0
    kernel[1, :, 1] = 1.0
    kernel[2, :, 2] = 1.0
    kernel[3, :, 3] = 1.0
    reward[1] = r_high
    reward[2] = r_mid
    return TabularRMDP(kernel, reward, gamma, [1.0, 0.0, 0.0, 0.0], rho, 3)


def risky_safe_threshold(p_fail=0.15, r_high=1.0, r_mid=0.8, **_) -> float:
    """Radius above which the safe action is robust-optimal at the start state.

    Risky is preferred iff ``(1 - p - rho) r_high > (1 - rho) r_mid``.
    """
    return 1.0 - p_fail * r_high / (r_high - r_mid)


def risky_safe_robust_q(p_fail=0.15, r_high=1.0, r_mid=0.8, gamma=0.9, rho=0.5) -> tuple[float, float]:
    """Closed-form robust values of (risky, safe) at the start state, for ``rho <= 1``."""
    scale = 1.0 / (1.0 - gamma * (1.0 - rho))
    risky = gamma * max(1.0 - p_fail - rho, 0.0) * r_high * scale
    safe = gamma * (1.0 - rho) * r_mid * scale
    return risky, safe


def risky_safe_crossover(p_fail=0.15, r_high=1.0, r_mid=0.8, **_) -> float:
    """Actual fail probability above which the safe action has the larger nominal value."""
    return 1.0 - r_mid / r_high


def random_rmdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    gamma: float = 0.9,
    rho: float = 0.2,
    fail: bool = False,
    sparsity: float = 0.0,
) -> TabularRMDP:
    """Random dense (or, with ``sparsity > 0``, partly sparse) RMDP.

    With ``fail`` the last state becomes an absorbing zero-reward fail state.
    """
    kernel = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0.0:
        keep = rng.random(kernel.shape) >= sparsity
        keep[..., 0] |= ~keep.any(axis=2)
        kernel = np.where(keep, kernel, 0.0)
        kernel /= kernel.sum(axis=2, keepdims=True)
    reward = rng.random((n_states, n_actions))
    fail_state = None
    if fail:
        fail_state = n_states - 1
        kernel[fail_state] = 0.0
        kernel[fail_state, :, fail_state] = 1.0
        reward[fail_state] = 0.0
    init = rng.dirichlet(np.ones(n_states))
    return TabularRMDP(kernel, reward, gamma, init, rho, fail_state)


FAMILIES = {"chain": chain, "gridworld": gridworld, "risky-safe": risky_safe}


def make_benchmark(name: str, **params) -> TabularRMDP:
    try:
        builder = FAMILIES[name]
    except KeyError:
        raise InvalidModelError(f"unknown benchmark {name!r}; choose from {sorted(FAMILIES)}") from None
    try:
        rmdp = builder(**params)
    except TypeError as exc:
        raise InvalidModelError(f"{name}: {exc}") from None
    problems = validate(rmdp)
    if problems:
        raise InvalidModelError(f"{name} with {params}: " + "; ".join(problems))
    return rmdp
