"""Single-buyer learner: a trainable menu of priced experiments.

Each of the P menu entries holds pre-softmax experiment logits and a price.
A buyer of type (v, theta) values an entry at

    h(entry) = v * sum_k max_j theta_j * pi_jk  -  price,

i.e. the entry's best-response value: action deviations are already folded in,
so evaluating the menu with a hard argmax (against the free uninformative null
entry, whose utility equals the opt-out utility v * max theta) yields a
mechanism that is incentive compatible and individually rational by
construction.  Training relaxes the argmax to a low-temperature softmax over
the priced entries only - the null entry stays fixed and re-enters at
evaluation time - and minimizes expected negated revenue with Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .econ import Experiment, MarketEnv, ShapeError, best_response, constant_signal_experiment, match_prob

__all__ = [
    "DivergenceError",
    "MenuParams",
    "Menu",
    "MenuTrainConfig",
    "DESK_MENU",
    "PAPER_MENU",
    "entry_utility",
    "choose_entry",
    "menu_utilities",
    "soft_loss",
    "soft_loss_graph",
    "train_menu",
    "distill_menu",
    "evaluate_menu",
    "differential_informativeness",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class MenuParams:
    """Trainable menu: experiment logits gamma (P, m, m), prices beta (P,), temperature tau."""

    gamma: np.ndarray
    beta: np.ndarray
    tau: float

    def __post_init__(self):
        if self.gamma.ndim != 3 or self.gamma.shape[1] != self.gamma.shape[2]:
            raise ShapeError(f"gamma must be (P, m, m), got {self.gamma.shape}")
        if self.beta.shape != (self.gamma.shape[0],):
            raise ShapeError("beta must have one price per entry")
        if self.gamma.shape[0] < 1 or self.tau <= 0:
            raise ValueError("need P >= 1 and tau > 0")

    @property
    def entry_count(self) -> int:
        return self.gamma.shape[0]

    def experiments(self) -> np.ndarray:
        """Row-softmax of the logits in float64: (P, m, m) stack of experiments."""
        z = self.gamma.astype(np.float64)
        z -= z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def to_param_vector(self) -> ParamVector:
        return ParamVector.from_segments({"gamma": self.gamma, "beta": self.beta}, dtype=self.gamma.dtype)


@dataclass
class Menu:
    """Evaluated menu: (experiment, price) entries with the free null entry at index 0."""

    entries: list[tuple[Experiment, float]]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("menu cannot be empty")
        null_exp, null_price = self.entries[0]
        if null_price != 0.0 or not np.all(null_exp.pi == null_exp.pi[:1]):
            raise ValueError("entry 0 must be the free constant-signal null entry")
        if any(price < 0 for _, price in self.entries):
            raise ValueError("menu prices must be nonnegative")

    @property
    def m(self) -> int:
        return self.entries[0][0].m

    @classmethod
    def from_priced_entries(cls, priced: list[tuple[Experiment, float]], m: int | None = None) -> "Menu":
        m = m if m is not None else priced[0][0].m
        return cls([(constant_signal_experiment(m), 0.0), *priced])

    def to_csv(self, usage: np.ndarray | None = None) -> str:
        """One row per entry: entry_id, price, q, usage_fraction, flattened experiment."""
        lines = ["entry_id,price,q,usage_fraction," + ",".join(
            f"pi_{r}{c}" for r in range(self.m) for c in range(self.m))]
        for idx, (exp, price) in enumerate(self.entries):
            q = differential_informativeness(exp) if self.m == 2 else float("nan")
            use = usage[idx] if usage is not None else float("nan")
            flat = ",".join(f"{x:.12g}" for x in exp.pi.ravel())
            lines.append(f"{idx},{price:.12g},{q:.12g},{use:.12g},{flat}")
        return "\n".join(lines) + "\n"


def differential_informativeness(exp: Experiment) -> float:
    """q = pi_11 - pi_22 for binary experiments: 0 fully informative, +-1 uninformative."""
    if exp.m != 2:
        raise ShapeError("differential informativeness is defined for m=2 only")
    return float(exp.pi[0, 0] - exp.pi[1, 1])


# ---------------------------------------------------------------------------
# utilities and hard-max evaluation
# ---------------------------------------------------------------------------


def entry_utility(entry: tuple[Experiment, float], rho) -> float:
    """v * best_response_value(pi, theta) - price."""
    exp, price = entry
    value, _ = best_response(exp.pi, np.asarray(rho.theta, dtype=float))
    return float(rho.v * value - price)


def menu_utilities(menu: Menu, v: np.ndarray, theta: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Utility matrix (N, len(entries)) for a batch of types."""
    pis = np.stack([exp.pi for exp, _ in menu.entries])
    prices = np.array([price for _, price in menu.entries])
    out = np.empty((v.shape[0], len(menu.entries)))
    for start in range(0, v.shape[0], chunk):
        th = theta[start : start + chunk]
        br = (th[:, None, :, None] * pis[None]).max(axis=2).sum(axis=2)
        out[start : start + chunk] = v[start : start + chunk, None] * br - prices[None, :]
    return out


def choose_entry(menu: Menu, rho) -> int:
    """Argmax entry index; ties break to the lowest index, so the null wins ties."""
    utilities = [entry_utility(entry, rho) for entry in menu.entries]
    return int(np.argmax(utilities))


def choose_entries(menu: Menu, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return menu_utilities(menu, v, theta).argmax(axis=1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class MenuTrainConfig:
    entries: int = 200
    batch: int = 4096
    iterations: int = 5000
    lr: float = 1e-3
    tau: float = 1.0 / 200.0
    tau_start: float = 1.0 / 20.0  # softened early softmax keeps rival entries alive
    tau_final: float = 1.0 / 800.0  # late sharpening pulls prices onto the hard-argmax optimum
    anneal_frac: float = 0.5  # fraction of training annealing tau_start -> tau
    sharp_frac: float = 0.8  # fraction after which tau -> tau_final
    log_every: int = 500
    dtype: str = "float32"
    gamma_init_scale: float = 0.1 * np.sqrt(3.0)  # uniform with std 0.1

    def tau_at(self, iteration: int) -> float:
        """Piecewise-geometric temperature: tau_start -> tau -> hold -> tau_final."""
        x = iteration / max(1, self.iterations)
        if x < self.anneal_frac:
            frac = x / self.anneal_frac
            return self.tau_start * (self.tau / self.tau_start) ** frac
        if x < self.sharp_frac:
            return self.tau
        frac = (x - self.sharp_frac) / max(1e-9, 1.0 - self.sharp_frac)
        return self.tau * (self.tau_final / self.tau) ** frac


DESK_MENU = MenuTrainConfig()
PAPER_MENU = MenuTrainConfig(
    entries=1000, batch=2**15, iterations=20000, tau_start=1.0 / 200.0, tau_final=1.0 / 200.0
)


def best_response_matrix(theta: np.ndarray, pi: Tensor) -> Tensor:
    """Fused (batch, P) best-response values sum_k max_j theta_bj pi_pjk.

    A single graph node with a hand-written pass-through-argmax VJP (ties to
    the lowest state index); avoids materializing the 4-D score tensor that a
    composition of broadcast-mul/max/sum would create on every step.
    """
    pv = pi.data  # (P, m, m)
    n_batch, m = theta.shape
    dtype = np.result_type(theta.dtype, pv.dtype)
    br = np.zeros((n_batch, pv.shape[0]), dtype=dtype)
    masks: list[list[np.ndarray]] = []  # masks[k][j]: argmax indicator
    for k in range(m):
        best = theta[:, 0:1] * pv[None, :, 0, k]
        best_j = np.zeros_like(br, dtype=np.int8)
        for j in range(1, m):
            s = theta[:, j : j + 1] * pv[None, :, j, k]
            take = s > best
            best = np.where(take, s, best)
            best_j = np.where(take, np.int8(j), best_j)
        br += best
        masks.append([(best_j == j).astype(dtype) for j in range(m)] if m > 1 else [np.ones_like(br)])
    out = Tensor(br, (pi,))

    def vjp(g):
        gpi = np.zeros_like(pv)
        for k in range(m):
            for j in range(m):
                gpi[:, j, k] = np.einsum("bp,b,bp->p", g, theta[:, j], masks[k][j])
        return (gpi,)

    out.vjp = vjp
    return out


def _softmax_revenue(br: Tensor, beta: Tensor, v: np.ndarray, h0: np.ndarray | None, tau: float) -> Tensor:
    """Fused negated expected revenue -mean_b sum_p w_bp beta_p.

    w is the temperature-tau softmax over entry utilities h_bp = v_b br_bp -
    beta_p, optionally anchored by a fixed zero-revenue utility column h0.
    One node keeps the (B, P) intermediates off the tape.
    """
    h = v[:, None] * br.data - beta.data[None, :]
    if h0 is None:
        shift = h.max(axis=1, keepdims=True)
        denom = 0.0
    else:
        shift = np.maximum(h.max(axis=1, keepdims=True), h0[:, None])
        denom = np.exp((h0[:, None] - shift) * (1.0 / tau))
    w = np.exp((h - shift) * (1.0 / tau))
    w /= denom + w.sum(axis=1, keepdims=True)
    revenue_b = w @ beta.data
    n_batch = br.data.shape[0]
    out = Tensor(np.asarray(-revenue_b.mean(), dtype=br.data.dtype), (br, beta))

    def vjp(g):
        # d(-rev)/dh_bp = -(g/(B tau)) w_bp (beta_p - revenue_b)
        gh = w * (revenue_b[:, None] - beta.data[None, :])
        gh *= float(g) / (n_batch * tau)
        gbeta = -(float(g) / n_batch) * w.sum(axis=0) - gh.sum(axis=0)
        return (gh * v[:, None], gbeta)

    out.vjp = vjp
    return out


def soft_loss_graph(
    leaves: dict[str, Tensor],
    v: np.ndarray,
    theta: np.ndarray,
    tau: float,
    anchor_null: bool = False,
) -> Tensor:
    """Differentiable negated-revenue loss over a batch of types.

    With ``anchor_null=False`` the softmax runs over the priced entries only.
    That relaxation is unbounded below (shifting every price up leaves the
    weights unchanged), so training uses ``anchor_null=True``, which adds the
    fixed free null entry as a zero-revenue column of the softmax and thereby
    prices the menu against the buyer's opt-out utility.
    """
    pi = ad.softmax(leaves["gamma"], axis=-1)  # (P, m, m)
    br = best_response_matrix(theta, pi)  # (B, P)
    h0 = None
    if anchor_null:
        h0 = (v * theta.max(axis=1)).astype(br.data.dtype)
    return _softmax_revenue(br, leaves["beta"], v, h0, tau)


def soft_loss(params: MenuParams, v: np.ndarray, theta: np.ndarray) -> float:
    pv = params.to_param_vector()
    loss, _ = ad.value_and_grad(lambda lv: soft_loss_graph(lv, v, theta, params.tau), pv)
    return loss


def init_menu_params(m: int, cfg: MenuTrainConfig, seed: int) -> MenuParams:
    rng = np.random.Generator(np.random.Philox(seed))
    dtype = np.dtype(cfg.dtype)
    gamma = rng.uniform(-cfg.gamma_init_scale, cfg.gamma_init_scale, size=(cfg.entries, m, m)).astype(dtype)
    beta = np.zeros(cfg.entries, dtype=dtype)
    return MenuParams(gamma=gamma, beta=beta, tau=cfg.tau)


def train_menu(env: MarketEnv, cfg: MenuTrainConfig, seed: int) -> tuple[MenuParams, list[dict]]:
    """Train a menu for a single-buyer environment; deterministic given seed."""
    if env.n != 1:
        raise ShapeError("menu training is single-buyer only")
    params = init_menu_params(env.m, cfg, seed)
    pv = params.to_param_vector()
    opt = ad.AdamState.for_params(pv, lr=cfg.lr)
    dtype = np.dtype(cfg.dtype)
    log: list[dict] = []
    batch_seed = np.random.Generator(np.random.Philox(seed + 1))
    for it in range(cfg.iterations):
        tau = cfg.tau_at(it)
        v_b, t_b = env.sample_profiles(cfg.batch, int(batch_seed.integers(2**62)))
        v_b = v_b[:, 0].astype(dtype)
        t_b = t_b[:, 0].astype(dtype)
        loss, g = ad.value_and_grad(
            lambda lv: soft_loss_graph(lv, v_b, t_b, tau, anchor_null=True), pv
        )
        if not np.isfinite(loss) or not np.all(np.isfinite(pv.data)):
            raise DivergenceError(f"non-finite loss {loss} at iteration {it}")
        ad.adam_step(opt, pv, g)
        if (it + 1) % cfg.log_every == 0 or it == 0:
            log.append({"iteration": it + 1, "loss": float(loss), "soft_revenue": float(-loss)})
    trained = MenuParams(gamma=pv.view("gamma").copy(), beta=pv.view("beta").copy(), tau=cfg.tau)
    return trained, log


# ---------------------------------------------------------------------------
# distillation and evaluation
# ---------------------------------------------------------------------------


def _params_menu(params: MenuParams) -> Menu:
    pis = params.experiments()
    priced = [(Experiment(pis[p]), float(params.beta[p])) for p in range(params.entry_count)]
    return Menu.from_priced_entries(priced, m=params.gamma.shape[1])


def _canonical_signals(exp: Experiment) -> Experiment:
    """Relabel binary signals so the diagonal carries the mass.

    Buyers best-respond to signals, so column permutations of an experiment
    are economically identical; canonicalizing lets near-duplicates merge.
    """
    if exp.m != 2:
        return exp
    pi = exp.pi
    if pi[0, 0] + pi[1, 1] < pi[0, 1] + pi[1, 0]:
        return Experiment(pi[:, ::-1])
    return exp


@dataclass
class DistilledMenu:
    menu: Menu
    usage: np.ndarray  # usage fraction per kept entry (null first)
    q: np.ndarray | None  # differential informativeness per kept entry (m=2 only)


def distill_menu(
    params: MenuParams,
    testset: tuple[np.ndarray, np.ndarray],
    usage_tol: float = 1e-3,
    merge_tol: float = 0.02,
) -> DistilledMenu:
    """Keep entries that test types actually choose, merge near-duplicates.

    Entries chosen by fewer than usage_tol of the test types are dropped;
    surviving entries whose experiments and prices differ by less than
    merge_tol in max norm collapse onto the most-used representative.
    """
    v, theta = testset
    full = _params_menu(params)
    choice = choose_entries(full, v, theta)
    counts = np.bincount(choice, minlength=len(full.entries)) / v.shape[0]

    kept = [p for p in range(1, len(full.entries)) if counts[p] >= usage_tol]
    kept.sort(key=lambda p: -counts[p])
    merged: list[tuple[Experiment, float, float]] = []  # (exp, price, usage)
    for p in kept:
        exp_p, price_p = full.entries[p]
        exp_p = _canonical_signals(exp_p)
        for idx, (exp_q, price_q, use_q) in enumerate(merged):
            if np.abs(exp_p.pi - exp_q.pi).max() < merge_tol and abs(price_p - price_q) < merge_tol:
                merged[idx] = (exp_q, price_q, use_q + counts[p])
                break
        else:
            merged.append((exp_p, price_p, counts[p]))
    merged.sort(key=lambda t: t[1])

    for _, price, _ in merged:
        if price < 0:
            raise ValueError(f"distilled entry has negative price {price}")
    menu = Menu.from_priced_entries([(exp, price) for exp, price, _ in merged], m=full.m)
    kept_usage = np.array([u for _, _, u in merged])
    usage = np.concatenate([[1.0 - kept_usage.sum()], kept_usage])
    q = None
    if full.m == 2:
        q = np.array([differential_informativeness(exp) for exp, _ in menu.entries])
    return DistilledMenu(menu=menu, usage=usage, q=q)


@dataclass
class MenuEvaluation:
    revenue: float
    revenue_se: float
    ir_violations: int
    usage: np.ndarray


def evaluate_menu(menu_or_params: Menu | MenuParams, testset: tuple[np.ndarray, np.ndarray]) -> MenuEvaluation:
    """Hard-argmax evaluation: mean price paid, IR violations (always 0), usage histogram."""
    menu = _params_menu(menu_or_params) if isinstance(menu_or_params, MenuParams) else menu_or_params
    v, theta = testset
    utilities = menu_utilities(menu, v, theta)
    choice = utilities.argmax(axis=1)
    prices = np.array([price for _, price in menu.entries])
    revenue = prices[choice]
    chosen_u = np.take_along_axis(utilities, choice[:, None], axis=1)[:, 0]
    outside = v * theta.max(axis=1)
    violations = int(np.sum(chosen_u < outside - 1e-9))
    assert violations == 0, "null entry dominates opting out; argmax cannot violate IR"
    usage = np.bincount(choice, minlength=len(menu.entries)) / v.shape[0]
    return MenuEvaluation(
        revenue=float(revenue.mean()),
        revenue_se=float(revenue.std(ddof=1) / np.sqrt(v.shape[0])),
        ir_violations=violations,
        usage=usage,
    )
