"""Core market objects: experiments, buyer types, utilities with externality.

An experiment is a row-stochastic matrix pi whose row w gives the signal
distribution under state w; signals double as recommended actions.  A buyer's
type is a payoff scale v and an interim belief theta over states.  Utilities
use the matching payoff v * 1{action == state} minus a separable negative
externality: each competitor who matches the state costs the buyer
v * alpha_bar, with alpha_bar = alpha / (n - 1).

Validation happens at construction so the batched helpers can skip checks in
hot loops.  Everything here is pure and immutable.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .dists import PointMass, TypeDistribution, make_rng

__all__ = [
    "ShapeError",
    "Experiment",
    "BuyerType",
    "MarketEnv",
    "identity_experiment",
    "constant_signal_experiment",
    "obedient_match_prob",
    "best_response_value",
    "is_obedient",
    "outside_option_utility",
    "profile_utility",
    "match_prob",
    "best_response",
    "belief_from_scalar",
]

ROW_TOL = 1e-9


class ShapeError(ValueError):
    """Dimension mismatch between experiments, beliefs, or profiles."""


def _check_belief(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ShapeError("belief must be a vector")
    if np.any(theta < -ROW_TOL) or abs(theta.sum() - 1.0) > ROW_TOL:
        raise ValueError(f"belief {theta} is not a probability vector")
    return theta


@dataclass(frozen=True)
class Experiment:
    """Row-stochastic m x m signaling matrix (row = state, column = action)."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
            raise ShapeError(f"experiment must be square, got {pi.shape}")
        if np.any(pi < -ROW_TOL) or np.any(np.abs(pi.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("experiment rows must be nonnegative and sum to 1")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)

    @property
    def m(self) -> int:
        return self.pi.shape[0]

    def to_json(self) -> list[list[float]]:
        return self.pi.tolist()

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.pi, delimiter=",", fmt="%.12g")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Experiment":
        return cls(np.loadtxt(io.StringIO(text), delimiter=",", ndmin=2))


def identity_experiment(m: int) -> Experiment:
    return Experiment(np.eye(m))


def constant_signal_experiment(m: int, signal: int = 0) -> Experiment:
    """Uninformative experiment: every state emits the same signal."""
    pi = np.zeros((m, m))
    pi[:, signal] = 1.0
    return Experiment(pi)


@dataclass(frozen=True)
class BuyerType:
    """Payoff scale v >= 0 and interim belief theta over states."""

    v: float
    theta: np.ndarray

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"payoff scale must be nonnegative, got {self.v}")
        theta = _check_belief(self.theta)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)


def belief_from_scalar(x, m: int = 2) -> np.ndarray:
    """Belief vector (x, 1-x[, ...]) from the first-coordinate parameterization."""
    if m != 2:
        raise ShapeError("scalar belief parameterization is binary-state only")
    x = np.asarray(x, dtype=float)
    return np.stack([x, 1.0 - x], axis=-1)


@dataclass(frozen=True)
class MarketEnv:
    """Number of buyers/states, externality intensity, and per-buyer type dists."""

    n: int
    m: int
    alpha: float
    v_dists: tuple[TypeDistribution, ...]
    theta_dists: tuple[TypeDistribution, ...]
    alpha_bar: float = field(init=False)

    def __post_init__(self):
        if self.n < 1 or self.m < 2:
            raise ValueError(f"need n >= 1 and m >= 2, got n={self.n}, m={self.m}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if len(self.v_dists) != self.n or len(self.theta_dists) != self.n:
            raise ShapeError("need one payoff and one belief distribution per buyer")
        object.__setattr__(self, "v_dists", tuple(self.v_dists))
        object.__setattr__(self, "theta_dists", tuple(self.theta_dists))
        bar = 0.0 if self.n == 1 else self.alpha / (self.n - 1)
        object.__setattr__(self, "alpha_bar", bar)

    @property
    def fixed_theta(self) -> bool:
        return all(isinstance(d, PointMass) for d in self.theta_dists)

    def sample_profiles(self, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw (V, Theta) with shapes (count, n) and (count, n, m)."""
        rng = make_rng(seed)
        v_cols = [d._draw(count, rng) for d in self.v_dists]
        t_cols = [belief_from_scalar(d._draw(count, rng), self.m) for d in self.theta_dists]
        return np.stack(v_cols, axis=1), np.stack(t_cols, axis=1)

    def theta_point(self) -> np.ndarray:
        """Common fixed belief matrix (n, m); only valid when beliefs are point masses."""
        if not self.fixed_theta:
            raise ValueError("beliefs are not fixed in this environment")
        return np.stack([belief_from_scalar(d.value, self.m) for d in self.theta_dists])


# ---------------------------------------------------------------------------
# batched primitives (leading dimensions broadcast)
# ---------------------------------------------------------------------------


def match_prob(pi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Probability the recommended action matches the state: sum_k theta_k pi_kk."""
    return np.einsum("...kk,...k->...", pi, theta)


def best_response(pi: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and argmax map of the best action deviation per recommendation.

    Value is sum_k max_j theta_j pi_jk; the deviation maps recommendation k to
    the maximizing state j, with ties broken toward k itself so obedient
    experiments report the identity map.
    """
    scores = theta[..., :, None] * pi  # (..., j, k)
    col_max = scores.max(axis=-2)
    value = col_max.sum(axis=-1)
    dev = scores.argmax(axis=-2)
    ks = np.arange(pi.shape[-1])
    diag = np.einsum("...kk->...k", scores)
    dev = np.where(diag >= col_max, ks, dev)
    return value, dev


def obedient_match_prob(exp: Experiment, theta) -> float:
    theta = _check_belief(theta)
    if theta.shape[0] != exp.m:
        raise ShapeError(f"belief has {theta.shape[0]} states, experiment has {exp.m}")
    return float(match_prob(exp.pi, theta))


def best_response_value(exp: Experiment, theta) -> tuple[float, np.ndarray]:
    theta = _check_belief(theta)
    if theta.shape[0] != exp.m:
        raise ShapeError(f"belief has {theta.shape[0]} states, experiment has {exp.m}")
    value, dev = best_response(exp.pi, theta)
    return float(value), dev


def is_obedient(exp: Experiment, theta, tol: float = 0.0) -> bool:
    """True iff every recommendation is a best response: theta_k pi_kk >= theta_j pi_jk - tol."""
    theta = _check_belief(theta)
    scores = theta[:, None] * exp.pi
    return bool(np.all(np.diag(scores) >= scores.max(axis=0) - tol))


def outside_option_utility(v: float, theta, alpha: float) -> float:
    """Opt-out utility v * (max theta - alpha): prior-best guess while fully informed rivals match."""
    theta = _check_belief(theta)
    return v * (float(theta.max()) - alpha)


def profile_utility(
    env: MarketEnv,
    types: list[BuyerType],
    exps: list[Experiment],
    payments: list[float],
    i: int,
) -> float:
    """Obedient expected utility of buyer i under the full profile, net of payment."""
    if not (len(types) == len(exps) == len(payments) == env.n):
        raise ShapeError("profile lists must have length n")
    if not 0 <= i < env.n:
        raise IndexError(f"buyer index {i} out of range for n={env.n}")
    own = match_prob(exps[i].pi, types[i].theta)
    others = sum(match_prob(exps[j].pi, types[j].theta) for j in range(env.n) if j != i)
    return float(types[i].v * (own - env.alpha_bar * others) - payments[i])
