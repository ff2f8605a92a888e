"""Ground-truth mechanisms to check the learners against.

Three oracles live here:

* the published optimal single-buyer menus for the catalog settings A and B;
* the ex post optimal multi-buyer mechanism for binary states with a common
  fixed prior: buyer i gets the fully informative experiment exactly when
  their (optionally ironed) virtual value clears alpha_bar times the sum of
  the rivals' virtual values, and otherwise an uninformative constant signal
  at the prior's most likely state.  Payments come from the utility-envelope
  identity t_i(v) = v_i x~_i(v) - int_0^{v_i} x~_i(s, v_-i) ds with zero
  utility at v_i = 0, where x~ is the match probability net of externality;
  the integrand is piecewise constant so the integral is summed exactly;
* a small exact LP for discretized single-buyer instances, solved by a dense
  two-phase primal simplex with Bland's rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dists import TypeDistribution, VirtualValueTable, ironed_virtual_table, make_rng
from .econ import (
    Experiment,
    MarketEnv,
    ShapeError,
    constant_signal_experiment,
    identity_experiment,
)
from .menu import Menu

__all__ = [
    "UnsupportedEnvError",
    "known_single_optimal",
    "AllocationDecision",
    "virtual_value_allocation",
    "virtual_value_payments",
    "VirtualValueMechanism",
    "DiscreteInstance",
    "lp_single_optimal",
    "check_discrete_feasible",
    "simplex_solve",
    "SimplexStatus",
]


class UnsupportedEnvError(ValueError):
    """Oracle preconditions (common prior, support at zero, ...) not met."""


# ---------------------------------------------------------------------------
# known optimal menus
# ---------------------------------------------------------------------------


def known_single_optimal(setting_id: str) -> Menu:
    """Published optimal menus for the single-buyer catalog settings."""
    if setting_id == "A":
        return Menu.from_priced_entries([(identity_experiment(2), 0.25)])
    if setting_id == "B":
        partial = Experiment(np.array([[0.78, 0.22], [0.0, 1.0]]))
        return Menu.from_priced_entries([(partial, 0.14), (identity_experiment(2), 0.26)])
    raise KeyError(f"no published optimal menu for setting {setting_id!r}")


# ---------------------------------------------------------------------------
# virtual-value threshold mechanism
# ---------------------------------------------------------------------------


@dataclass
class AllocationDecision:
    """Per-buyer fully-informative flags plus the constant signal used otherwise."""

    fully_informative: np.ndarray  # (n,) bool
    uninformative_signal: int


def _common_theta(env: MarketEnv) -> np.ndarray:
    if not env.fixed_theta:
        raise UnsupportedEnvError("oracle needs fixed interim beliefs")
    theta = env.theta_point()
    if not np.allclose(theta, theta[0:1], atol=1e-12):
        raise UnsupportedEnvError("oracle needs a common prior across buyers")
    return theta[0]


class _PhiEval:
    """Raw or ironed virtual-value evaluation with a left inverse."""

    def __init__(self, dist: TypeDistribution, ironed: bool, grid_size: int):
        self.dist = dist
        self.ironed = ironed
        self.table: VirtualValueTable | None = ironed_virtual_table(dist, grid_size) if ironed else None

    def value(self, v: np.ndarray) -> np.ndarray:
        if self.table is not None:
            return self.table.ironed_at(v)
        return self.dist.virtual_value(v)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """inf{v : phi(v) >= y}, clamped to the (truncated) support."""
        if self.table is not None:
            idx = np.searchsorted(self.table.phi_ironed, y, side="left")
            idx = np.clip(idx, 0, self.table.grid.size - 1)
            out = self.table.grid[idx]
            return np.where(y > self.table.phi_ironed[-1], self.table.grid[-1], out)
        lo, hi = self.dist.bounded_support()
        return np.clip(self.dist.virtual_value_inverse(y), lo, hi)


@dataclass
class VirtualValueMechanism:
    """Threshold-on-virtual-values mechanism with envelope payments.

    Binary states, common fixed prior; payoff supports must start at zero so
    the envelope pins the lowest type's utility at the opt-out level.
    """

    env: MarketEnv
    ironed: bool = False
    grid_size: int = 4096

    def __post_init__(self):
        theta = _common_theta(self.env)
        if self.env.m != 2:
            raise UnsupportedEnvError("threshold mechanism is binary-state only")
        self._theta = theta
        self._theta_max = float(theta.max())
        self._signal = int(theta.argmax())
        self._phis = [_PhiEval(d, self.ironed, self.grid_size) for d in self.env.v_dists]
        for d in self.env.v_dists:
            if abs(d.support()[0]) > 1e-12:
                raise UnsupportedEnvError("payoff supports must start at 0 for envelope payments")

    # -- allocation ------------------------------------------------------
    def phi_matrix(self, v: np.ndarray) -> np.ndarray:
        return np.stack([self._phis[i].value(v[:, i]) for i in range(self.env.n)], axis=1)

    def allocate(self, v: np.ndarray) -> np.ndarray:
        """(B, n) bool: fully informative iff phi_i >= alpha_bar * sum_{j != i} phi_j."""
        phi = self.phi_matrix(v)
        rivals = phi.sum(axis=1, keepdims=True) - phi
        return phi >= self.env.alpha_bar * rivals - 1e-15

    def match_probs(self, v: np.ndarray) -> np.ndarray:
        """x_i(v): 1 when fully informed, max theta otherwise."""
        full = self.allocate(v)
        return np.where(full, 1.0, self._theta_max)

    # -- payments ----------------------------------------------------------
    def payments(self, v: np.ndarray) -> np.ndarray:
        """Envelope payments, exact piecewise integration of x~_i(s, v_-i)."""
        env = self.env
        v = np.asarray(v, dtype=float)
        batch, n = v.shape
        phi = self.phi_matrix(v)
        x_now = self.match_probs(v)
        theta_max = self._theta_max
        pay = np.empty((batch, n))
        for i in range(n):
            rivals_sum = phi.sum(axis=1) - phi[:, i]
            # own allocation threshold in s
            a_thr = self._phis[i].inverse(env.alpha_bar * rivals_sum)
            up_to = v[:, i]
            own_int = theta_max * np.minimum(up_to, a_thr) + np.maximum(0.0, up_to - a_thr)
            x_tilde_now = x_now[:, i]
            rival_int = np.zeros(batch)
            if env.alpha_bar > 0:
                for j in range(n):
                    if j == i:
                        continue
                    # rival j stays fully informed while phi_i(s) <= phi_j / ab - sum_others
                    others = rivals_sum - phi[:, j]
                    c_j = phi[:, j] / env.alpha_bar - others
                    b_thr = self._phis[i].inverse(c_j)
                    # inverse is a left inverse; x_j flips where phi_i(s) exceeds c_j
                    below = np.minimum(up_to, b_thr)
                    rival_int += below + theta_max * np.maximum(0.0, up_to - below)
                    x_tilde_now = x_tilde_now - env.alpha_bar * x_now[:, j]
            pay[:, i] = v[:, i] * x_tilde_now - (own_int - env.alpha_bar * rival_int)
        return pay

    # -- mechanism interface ----------------------------------------------
    def respond(self, v: np.ndarray, theta: np.ndarray | None = None):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        full = self.allocate(v)
        eye = np.eye(self.env.m)
        const = constant_signal_experiment(self.env.m, self._signal).pi
        pi = np.where(full[:, :, None, None], eye, const)
        return pi, self.payments(v)

    def experiments_for(self, v: np.ndarray) -> list[Experiment]:
        full = self.allocate(np.atleast_2d(v))[0]
        return [
            identity_experiment(self.env.m) if f else constant_signal_experiment(self.env.m, self._signal)
            for f in full
        ]

    def mc_revenue(self, profiles: int, seed: int, chunk: int = 2**17) -> tuple[float, float]:
        """Monte-Carlo expected total payment and its standard error."""
        rng = make_rng(seed)
        total = 0.0
        total_sq = 0.0
        done = 0
        while done < profiles:
            b = min(chunk, profiles - done)
            v = np.stack([d._draw(b, rng) for d in self.env.v_dists], axis=1)
            t = self.payments(v).sum(axis=1)
            total += t.sum()
            total_sq += (t * t).sum()
            done += b
        mean = total / profiles
        var = total_sq / profiles - mean * mean
        return float(mean), float(np.sqrt(var / profiles))


def virtual_value_allocation(v, env: MarketEnv, ironed: bool = False) -> AllocationDecision:
    mech = VirtualValueMechanism(env, ironed=ironed)
    full = mech.allocate(np.atleast_2d(np.asarray(v, dtype=float)))[0]
    return AllocationDecision(fully_informative=full, uninformative_signal=mech._signal)


def virtual_value_payments(v, env: MarketEnv, ironed: bool = False) -> np.ndarray:
    mech = VirtualValueMechanism(env, ironed=ironed)
    return mech.payments(np.atleast_2d(np.asarray(v, dtype=float)))[0]


# ---------------------------------------------------------------------------
# dense two-phase simplex with Bland's rule
# ---------------------------------------------------------------------------


class SimplexStatus:
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


def simplex_solve(
    c: np.ndarray,
    a_ub: np.ndarray | None = None,
    b_ub: np.ndarray | None = None,
    a_eq: np.ndarray | None = None,
    b_eq: np.ndarray | None = None,
    tol: float = 1e-9,
) -> tuple[np.ndarray | None, float, str]:
    """Minimize c @ x subject to a_ub x <= b_ub, a_eq x = b_eq, x >= 0.

    Dense tableau, Bland's anti-cycling pivot rule (smallest eligible entering
    index; ties in the ratio test go to the smallest basis index).
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    rows = []
    rhs = []
    kinds = []
    if a_ub is not None and len(a_ub):
        for row, b in zip(np.atleast_2d(np.asarray(a_ub, dtype=float)), np.asarray(b_ub, dtype=float)):
            rows.append(row)
            rhs.append(b)
            kinds.append("ub")
    if a_eq is not None and len(a_eq):
        for row, b in zip(np.atleast_2d(np.asarray(a_eq, dtype=float)), np.asarray(b_eq, dtype=float)):
            rows.append(row)
            rhs.append(b)
            kinds.append("eq")
    m_c = len(rows)
    n_slack = sum(1 for k in kinds if k == "ub")
    table = np.zeros((m_c, n + n_slack))
    b_vec = np.zeros(m_c)
    slack_at = {}
    s = 0
    for r, (row, b, kind) in enumerate(zip(rows, rhs, kinds)):
        table[r, :n] = row
        b_vec[r] = b
        if kind == "ub":
            table[r, n + s] = 1.0
            slack_at[r] = n + s
            s += 1
    neg = b_vec < 0
    table[neg] *= -1
    b_vec[neg] *= -1

    # starting basis: usable slacks, artificials elsewhere
    basis = np.full(m_c, -1, dtype=int)
    art_cols = []
    for r in range(m_c):
        col = slack_at.get(r)
        if col is not None and table[r, col] > 0.5:
            basis[r] = col
        else:
            art_cols.append(r)
    if art_cols:
        art = np.zeros((m_c, len(art_cols)))
        for idx, r in enumerate(art_cols):
            art[r, idx] = 1.0
            basis[r] = table.shape[1] + idx
        table = np.hstack([table, art])

    def run_phase(obj: np.ndarray, table, b_vec, basis, allowed: int):
        z = obj[basis] @ table - obj
        val = obj[basis] @ b_vec
        while True:
            enter = -1
            for j in range(allowed):
                if j in basis:
                    continue
                if z[j] > tol:  # reduced cost of min problem: z_j - c_j > 0 improves
                    enter = j
                    break
            if enter < 0:
                return val, table, b_vec, basis, SimplexStatus.OPTIMAL
            col = table[:, enter]
            mask = col > tol
            if not mask.any():
                return val, table, b_vec, basis, SimplexStatus.UNBOUNDED
            ratios = np.where(mask, b_vec / np.where(mask, col, 1.0), np.inf)
            best = ratios.min()
            cand = np.where(np.abs(ratios - best) <= tol * (1 + abs(best)))[0]
            leave = cand[np.argmin(basis[cand])]
            pivot = table[leave, enter]
            table[leave] /= pivot
            b_vec[leave] /= pivot
            for r in range(m_c):
                if r != leave and abs(table[r, enter]) > 0:
                    f = table[r, enter]
                    table[r] -= f * table[leave]
                    b_vec[r] -= f * b_vec[leave]
            basis[leave] = enter
            z = obj[basis] @ table - obj
            val = obj[basis] @ b_vec

    n_total = table.shape[1]
    if art_cols:
        phase1 = np.zeros(n_total)
        phase1[n + n_slack :] = 1.0
        val, table, b_vec, basis, status = run_phase(phase1, table, b_vec, basis, n_total)
        if status != SimplexStatus.OPTIMAL or val > 1e-7:
            return None, np.nan, SimplexStatus.INFEASIBLE
        # drive artificials out of the basis where possible; a stuck artificial
        # row is degenerate (all-real-zero) and stays inert in phase 2
        for r in range(m_c):
            if basis[r] >= n + n_slack:
                for j in range(n + n_slack):
                    if abs(table[r, j]) > tol:
                        pivot = table[r, j]
                        table[r] /= pivot
                        b_vec[r] /= pivot
                        for rr in range(m_c):
                            if rr != r and abs(table[rr, j]) > 0:
                                f = table[rr, j]
                                table[rr] -= f * table[r]
                                b_vec[rr] -= f * b_vec[r]
                        basis[r] = j
                        break
    obj = np.zeros(table.shape[1])
    obj[:n] = c
    val, table, b_vec, basis, status = run_phase(obj, table, b_vec, basis, n + n_slack)
    if status != SimplexStatus.OPTIMAL:
        return None, np.nan, status
    x = np.zeros(table.shape[1])
    for r, col in enumerate(basis):
        if col < table.shape[1]:
            x[col] = b_vec[r]
    return x[:n], float(val), SimplexStatus.OPTIMAL


# ---------------------------------------------------------------------------
# discrete single-buyer LP oracle
# ---------------------------------------------------------------------------


@dataclass
class DiscreteInstance:
    """Finite single-buyer type distribution: payoffs, beliefs, probabilities."""

    v: np.ndarray  # (T,)
    theta: np.ndarray  # (T, m)
    prob: np.ndarray  # (T,), sums to 1

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.prob = np.asarray(self.prob, dtype=float)
        if abs(self.prob.sum() - 1.0) > 1e-9 or np.any(self.prob < 0):
            raise ValueError("type probabilities must be a distribution")
        if self.theta.shape != (self.v.size, 2):
            raise ShapeError("LP oracle supports m = 2 instances")

    @property
    def size(self) -> int:
        return self.v.size

    @classmethod
    def from_csv(cls, text: str) -> "DiscreteInstance":
        arr = np.loadtxt(text.strip().splitlines(), delimiter=",", ndmin=2)
        return cls(v=arr[:, 1], theta=arr[:, 2:4], prob=arr[:, 0])


_DEVIATIONS = [(0, 1), (1, 0), (0, 0), (1, 1)]  # recommendation k -> action delta(k)


def _deviation_value(theta: np.ndarray, delta) -> np.ndarray:
    """Coefficient of each pi entry in sum_k theta_{delta(k)} pi_{delta(k), k}."""
    coeff = np.zeros((2, 2))
    for k in (0, 1):
        coeff[delta[k], k] += theta[delta[k]]
    return coeff.ravel()


@dataclass
class DiscreteMechanismLP:
    instance: DiscreteInstance
    optimal_value: float
    experiments: np.ndarray  # (T, 2, 2)
    payments: np.ndarray  # (T,)


def lp_single_optimal(inst: DiscreteInstance, max_types: int = 25) -> DiscreteMechanismLP:
    """Exact revenue-optimal direct mechanism for a discrete single-buyer instance.

    Maximizes sum_l p_l t_l subject to, for every ordered type pair (l, l')
    and every action-deviation map delta, the truthful-obedient utility of l
    dominating the double deviation, plus individual rationality against the
    opt-out utility v max(theta).
    """
    t_count = inst.size
    if t_count > max_types:
        raise UnsupportedEnvError(f"instance has {t_count} types, limit {max_types}")
    n_pi = 4 * t_count
    n_var = n_pi + 2 * t_count  # pi entries, then t+ and t-
    idx_pi = lambda l: slice(4 * l, 4 * l + 4)
    idx_tp = lambda l: n_pi + l
    idx_tm = lambda l: n_pi + t_count + l

    a_eq = np.zeros((2 * t_count, n_var))
    b_eq = np.ones(2 * t_count)
    for l in range(t_count):
        a_eq[2 * l, 4 * l : 4 * l + 2] = 1.0  # row 0 sums to 1
        a_eq[2 * l + 1, 4 * l + 2 : 4 * l + 4] = 1.0

    rows_ub = []
    rhs_ub = []
    diag_coeff = lambda th: np.array([th[0], 0.0, 0.0, th[1]])
    for l in range(t_count):
        v_l, th_l = inst.v[l], inst.theta[l]
        for lp in range(t_count):
            for delta in _DEVIATIONS:
                if lp == l and delta == (0, 1):
                    continue  # trivial 0 <= 0
                row = np.zeros(n_var)
                row[idx_pi(lp)] += v_l * _deviation_value(th_l, delta)
                row[idx_tp(lp)] -= 1.0
                row[idx_tm(lp)] += 1.0
                row[idx_pi(l)] -= v_l * diag_coeff(th_l)
                row[idx_tp(l)] += 1.0
                row[idx_tm(l)] -= 1.0
                rows_ub.append(row)
                rhs_ub.append(0.0)
        # IR: v max(theta) - U_l <= 0
        row = np.zeros(n_var)
        row[idx_pi(l)] -= v_l * diag_coeff(th_l)
        row[idx_tp(l)] += 1.0
        row[idx_tm(l)] -= 1.0
        rows_ub.append(row)
        rhs_ub.append(-v_l * th_l.max())

    c = np.zeros(n_var)
    c[n_pi : n_pi + t_count] = -inst.prob
    c[n_pi + t_count :] = inst.prob
    x, val, status = simplex_solve(c, np.array(rows_ub), np.array(rhs_ub), a_eq, b_eq)
    assert status == SimplexStatus.OPTIMAL, f"LP should be feasible and bounded, got {status}"
    payments = x[n_pi : n_pi + t_count] - x[n_pi + t_count :]
    experiments = x[:n_pi].reshape(t_count, 2, 2)
    return DiscreteMechanismLP(
        instance=inst, optimal_value=-val, experiments=experiments, payments=payments
    )


def check_discrete_feasible(inst: DiscreteInstance, experiments: np.ndarray, payments: np.ndarray, tol: float = 1e-9) -> bool:
    """Verify truthfulness (with double deviations), obedience, and IR directly."""
    t_count = inst.size
    for l in range(t_count):
        v_l, th_l = inst.v[l], inst.theta[l]
        u_l = v_l * (np.diag(experiments[l]) * th_l).sum() - payments[l]
        if u_l < v_l * th_l.max() - tol:
            return False
        for lp in range(t_count):
            for delta in _DEVIATIONS:
                dev = sum(th_l[delta[k]] * experiments[lp][delta[k], k] for k in (0, 1))
                if v_l * dev - payments[lp] > u_l + tol:
                    return False
    return True
