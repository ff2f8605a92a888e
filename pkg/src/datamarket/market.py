"""Multi-buyer learner: experiment network, IR-safe payment heads, regret training.

The mechanism is a pair of feed-forward networks over the reported type
profile.  The experiment net emits one m x m logit block per buyer, row-wise
softmaxed into a valid experiment.  Payments are sigmoid-normalized and then
scaled by the gap between a buyer's truthful-obedient utility and the opt-out
utility v * (max theta - alpha), which makes the mechanism individually
rational for every weight vector - ex post when the scale uses the realized
profile, interim when it averages over sampled competitor types.

Incentive violations are measured as regret: the best joint misreport/action
deviation gain, with the per-recommendation action deviation maximized in
closed form (column max of the misreported experiment).  Training minimizes
negated revenue plus an augmented-Lagrangian penalty on per-buyer mean regret,
where each sample's regret is the best over sampled misreport candidates
(truthful report included, so regret is nonnegative).  Interim ("BIC") mode
reuses the minibatch members' already-computed interim quantities as the
candidate misreports; ex post mode scores fresh candidates per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .econ import MarketEnv, ShapeError, belief_from_scalar
from .menu import DivergenceError

__all__ = [
    "MarketWeights",
    "LagrangianState",
    "MarketTrainConfig",
    "DESK_EXPOST",
    "DESK_INTERIM",
    "PAPER_EXPOST",
    "PAPER_INTERIM",
    "forward_market",
    "payment_expost",
    "payment_interim",
    "expost_regret",
    "interim_regret",
    "lagrangian_loss",
    "train_market",
    "estimate_regret_test",
    "evaluate_revenue",
    "LearnedMechanism",
]


# ---------------------------------------------------------------------------
# encoding and architecture
# ---------------------------------------------------------------------------


def _theta_varies(env: MarketEnv) -> bool:
    return not env.fixed_theta


def profile_width(env: MarketEnv) -> int:
    per = 1 + (env.m if _theta_varies(env) else 0)
    return env.n * per


def own_width(env: MarketEnv) -> int:
    return 1 + (env.m if _theta_varies(env) else 0)


def encode_profile(env: MarketEnv, v: np.ndarray, theta: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Stack reported types into net input rows; fixed beliefs are dropped."""
    cols = []
    for i in range(env.n):
        cols.append(v[:, i : i + 1])
        if _theta_varies(env):
            cols.append(theta[:, i, :])
    return np.concatenate(cols, axis=1).astype(dtype)


def _buyer_slice(env: MarketEnv, i: int) -> slice:
    per = 1 + (env.m if _theta_varies(env) else 0)
    return slice(i * per, (i + 1) * per)


@dataclass
class MarketTrainConfig:
    """Training knobs; `mode` is "ex_post" or "interim"."""

    mode: str = "ex_post"
    iterations: int = 8000
    batch: int = 512
    misreport_inits: int = 24
    interim_samples: int = 128
    hidden: tuple[int, ...] = (100, 100)
    lr: float = 1e-3
    lr_decay: float = 0.3  # one-shot learning-rate multiplier late in training
    lr_decay_at: float = 0.75  # fraction of iterations after which it applies
    lambda_init: float = 10.0
    penalty_coeff: float = 1.0
    penalty_growth: float = 2.0  # multiplies the penalty every penalty_every iterations
    penalty_every: int = 1000
    penalty_cap: float = 256.0
    update_period: int = 100
    log_every: int = 500
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in ("ex_post", "interim"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.iterations, self.batch, self.misreport_inits, self.interim_samples) < 1:
            raise ValueError("counts must be positive")


DESK_EXPOST = MarketTrainConfig(mode="ex_post", iterations=12000, batch=512, misreport_inits=24)
DESK_INTERIM = MarketTrainConfig(mode="interim", iterations=12000, batch=64, interim_samples=128)
PAPER_EXPOST = MarketTrainConfig(
    mode="ex_post",
    iterations=20000,
    batch=1024,
    misreport_inits=100,
    hidden=(200, 200, 200),
    lr_decay=1.0,
    penalty_growth=1.0,
)
PAPER_INTERIM = MarketTrainConfig(
    mode="interim",
    iterations=20000,
    batch=128,
    interim_samples=512,
    hidden=(200, 200, 200),
    lr_decay=1.0,
    penalty_growth=1.0,
)


@dataclass
class LagrangianState:
    lam: np.ndarray  # one multiplier per buyer
    penalty_coeff: float
    update_period: int

    def __post_init__(self):
        if self.penalty_coeff <= 0:
            raise ValueError("penalty coefficient must be positive")


@dataclass
class MarketWeights:
    """Network parameters plus the architecture they were built for."""

    n: int
    m: int
    mode: str
    varies_theta: bool
    arch_exp: list[int]
    arch_pay: list[int]
    params: ParamVector

    @classmethod
    def build(cls, env: MarketEnv, mode: str, hidden: tuple[int, ...], seed: int, dtype="float64") -> "MarketWeights":
        in_dim = profile_width(env)
        arch_exp = [in_dim, *hidden, env.n * env.m * env.m]
        segments: dict[str, np.ndarray] = {}
        segments.update(ad.init_mlp_params(arch_exp, seed, prefix="exp.").segments())
        if mode == "ex_post":
            arch_pay = [in_dim, *hidden, env.n]
            segments.update(ad.init_mlp_params(arch_pay, seed + 1, prefix="pay.").segments())
        else:
            arch_pay = [own_width(env), *hidden, 1]
            for i in range(env.n):
                segments.update(ad.init_mlp_params(arch_pay, seed + 1 + i, prefix=f"pay{i}.").segments())
        params = ParamVector.from_segments(segments, dtype=np.dtype(dtype))
        return cls(
            n=env.n,
            m=env.m,
            mode=mode,
            varies_theta=_theta_varies(env),
            arch_exp=arch_exp,
            arch_pay=arch_pay,
            params=params,
        )

    # -- plain numpy forward (search paths) -----------------------------
    def experiments_at(self, x: np.ndarray) -> np.ndarray:
        logits = ad.mlp_forward(self.params, self.arch_exp, x, prefix="exp.")
        logits = logits.reshape(x.shape[0], self.n, self.m, self.m)
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def tnorm_at(self, x: np.ndarray) -> np.ndarray:
        if self.mode != "ex_post":
            raise ShapeError("profile-level normalized payments exist in ex post mode only")
        return ad._sigmoid(ad.mlp_forward(self.params, self.arch_pay, x, prefix="pay."))

    def tnorm_own_at(self, i: int, own: np.ndarray) -> np.ndarray:
        if self.mode != "interim":
            raise ShapeError("per-buyer payment heads exist in interim mode only")
        return ad._sigmoid(ad.mlp_forward(self.params, self.arch_pay, own, prefix=f"pay{i}.")[:, 0])


def _forward_graph(weights: MarketWeights, leaves: dict[str, Tensor], x) -> Tensor:
    """Taped experiment forward: row-stochastic (B, n, m, m)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    logits = ad.mlp_apply(leaves, weights.arch_exp, x, prefix="exp.")
    logits = ad.reshape(logits, (x.data.shape[0], weights.n, weights.m, weights.m))
    return ad.softmax(logits, axis=-1)


def _tnorm_graph(weights: MarketWeights, leaves: dict[str, Tensor], x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return ad.sigmoid(ad.mlp_apply(leaves, weights.arch_pay, x, prefix="pay."))


def _tnorm_own_graph(weights: MarketWeights, leaves: dict[str, Tensor], i: int, own: np.ndarray) -> Tensor:
    out = ad.mlp_apply(leaves, weights.arch_pay, Tensor(own), prefix=f"pay{i}.")
    return ad.sigmoid(ad.reshape(out, (own.shape[0],)))


# ---------------------------------------------------------------------------
# spec-facing operations (plain numpy)
# ---------------------------------------------------------------------------


def forward_market(weights: MarketWeights, v: np.ndarray, theta: np.ndarray, env: MarketEnv):
    """Experiments (B, n, m, m) and normalized payments (B, n) for a batch of profiles."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 2:
        theta = theta[None, :, :]
    if v.shape[1] != env.n:
        raise ShapeError(f"profile has {v.shape[1]} buyers, env has {env.n}")
    x = encode_profile(env, v, theta)
    pi = weights.experiments_at(x)
    if weights.mode == "ex_post":
        tnorm = weights.tnorm_at(x)
    else:
        tnorm = np.stack(
            [weights.tnorm_own_at(i, x[:, _buyer_slice(env, i)]) for i in range(env.n)], axis=1
        )
    return pi, tnorm


def _diag_match(pi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """sum_k pi[..., k, k] * theta[..., k] for stacked experiments."""
    return np.einsum("...kk,...k->...", pi, theta)


def payment_scale(pi: np.ndarray, theta: np.ndarray, env: MarketEnv) -> np.ndarray:
    """Truthful-obedient utility minus opt-out, per buyer: the IR-safe payment scale."""
    d = _diag_match(pi, theta)  # (B, n)
    total = d.sum(axis=-1, keepdims=True)
    outside = theta.max(axis=-1) - env.alpha
    return d - env.alpha_bar * (total - d) - outside


def payment_expost(v: np.ndarray, theta: np.ndarray, pi: np.ndarray, tnorm: np.ndarray, env: MarketEnv) -> np.ndarray:
    """t_i = tnorm_i * v_i * (own match - alpha_bar * rivals' match - opt-out gap)."""
    return tnorm * v * payment_scale(pi, theta, env)


def payment_interim(
    weights: MarketWeights,
    i: int,
    v_i: float,
    theta_i: np.ndarray,
    other_v: np.ndarray,
    other_theta: np.ndarray,
    env: MarketEnv,
) -> float:
    """Interim payment: normalized head on own type times the mean IR-safe scale
    over sampled competitor profiles."""
    k = other_v.shape[0]
    v = np.empty((k, env.n))
    theta = np.empty((k, env.n, env.m))
    v[:, i] = v_i
    theta[:, i, :] = theta_i
    others = [j for j in range(env.n) if j != i]
    v[:, others] = other_v
    theta[:, others, :] = other_theta
    x = encode_profile(env, v, theta)
    pi = weights.experiments_at(x)
    scale = payment_scale(pi, theta, env)[:, i].mean()
    own = x[0:1, _buyer_slice(env, i)]
    tnorm = weights.tnorm_own_at(i, own)[0]
    return float(tnorm * v_i * scale)


def _mechanism_respond(mechanism, v: np.ndarray, theta: np.ndarray, env: MarketEnv):
    """(pi, t) from either MarketWeights (ex post) or a respond()-style mechanism."""
    if isinstance(mechanism, MarketWeights):
        pi, tnorm = forward_market(mechanism, v, theta, env)
        return pi, payment_expost(v, theta, pi, tnorm, env)
    return mechanism.respond(v, theta)


def expost_regret(mechanism, v: np.ndarray, theta: np.ndarray, mis_v: float, mis_theta, i: int, env: MarketEnv) -> float:
    """Best deviation gain of buyer i from reporting (mis_v, mis_theta) and then
    best-responding, against truthful-obedient play, for one realized profile."""
    v = np.asarray(v, dtype=float)[None, :]
    theta = np.asarray(theta, dtype=float)[None, :, :]
    pi_t, t_t = _mechanism_respond(mechanism, v, theta, env)
    v_mis = v.copy()
    theta_mis = theta.copy()
    v_mis[0, i] = mis_v
    theta_mis[0, i, :] = np.asarray(mis_theta, dtype=float)
    pi_m, t_m = _mechanism_respond(mechanism, v_mis, theta_mis, env)

    th_i = theta[0, i]
    mis_br = (pi_m[0, i] * th_i[:, None]).max(axis=0).sum()
    d_t = _diag_match(pi_t[0], theta[0])
    d_m = _diag_match(pi_m[0], theta[0])
    ext_m = d_m.sum() - d_m[i]
    ext_t = d_t.sum() - d_t[i]
    gain = v[0, i] * (mis_br - env.alpha_bar * ext_m) - t_m[0, i]
    truthful = v[0, i] * (d_t[i] - env.alpha_bar * ext_t) - t_t[0, i]
    return float(gain - truthful)


def interim_regret(
    weights: MarketWeights,
    i: int,
    v_i: float,
    theta_i: np.ndarray,
    mis_v: float,
    mis_theta: np.ndarray,
    other_v: np.ndarray,
    other_theta: np.ndarray,
    env: MarketEnv,
) -> float:
    """Interim misreport gain with the per-recommendation max taken outside the
    empirical competitor expectation."""
    a_true, e_true, t_true = _interim_quantities(weights, i, v_i, theta_i, other_v, other_theta, env)
    a_mis, e_mis, t_mis = _interim_quantities(weights, i, mis_v, mis_theta, other_v, other_theta, env)
    th = np.asarray(theta_i, dtype=float)
    bracket = a_mis * th[:, None] - env.alpha_bar * e_mis[None, :]  # (k', k)
    gain = v_i * bracket.max(axis=0).sum() - t_mis
    truthful = v_i * ((np.diag(a_true) * th).sum() - env.alpha_bar * e_true.sum()) - t_true
    return float(gain - truthful)


def _interim_quantities(weights, i, v_i, theta_i, other_v, other_theta, env):
    """(mean own experiment (m, m), mean rival diag term per column (m,), interim payment)."""
    k = other_v.shape[0]
    v = np.empty((k, env.n))
    theta = np.empty((k, env.n, env.m))
    v[:, i] = v_i
    theta[:, i, :] = theta_i
    others = [j for j in range(env.n) if j != i]
    v[:, others] = other_v
    theta[:, others, :] = other_theta
    x = encode_profile(env, v, theta)
    pi = weights.experiments_at(x)
    a_bar = pi[:, i].mean(axis=0)
    diag = np.einsum("bnkk->bnk", pi) * theta
    e_bar = (diag.sum(axis=1) - diag[:, i, :]).mean(axis=0)
    scale = payment_scale(pi, theta, env)[:, i].mean()
    tnorm = weights.tnorm_own_at(i, x[0:1, _buyer_slice(env, i)])[0]
    return a_bar, e_bar, float(tnorm * v_i * scale)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _diag_weighted_graph(pi: Tensor, theta: np.ndarray, m: int) -> Tensor:
    """Taped sum_k pi[..., k, k] theta[..., k] via a diagonal mask."""
    mask = (np.eye(m, dtype=theta.dtype) * theta[..., :, None]).astype(pi.data.dtype)
    return ad.tsum(pi * mask, axis=(-2, -1))


def _expost_batch_graph(weights, leaves, env, v, theta, x):
    """Taped truthful pass: (pi, d, payments (B, n), revenue scalar)."""
    pi = _forward_graph(weights, leaves, x)
    d = _diag_weighted_graph(pi, theta, env.m)  # (B, n)
    total = ad.tsum(d, axis=1, keepdims=True)
    outside = (theta.max(axis=-1) - env.alpha).astype(x.dtype)
    scale = d - env.alpha_bar * (total - d) - outside
    tnorm = _tnorm_graph(weights, leaves, x)
    pay = tnorm * (v.astype(x.dtype) * scale)
    revenue = ad.tmean(ad.tsum(pay, axis=1))
    return pi, d, pay, revenue


def _expost_misreport_search(weights, env, v, theta, x, truth_partial, d_true, cfg, rng):
    """Best-of-candidates misreport per (sample, buyer); truth always competes.

    Candidates are ranked on the misreport gain minus the truthful utility
    gross of the truthful payment (a per-sample constant), so the ranking
    equals the full-regret ranking.
    """
    n_batch = v.shape[0]
    r = cfg.misreport_inits
    dtype = x.dtype
    best_v = v.copy()
    best_theta = theta.copy()
    best_gap = truth_partial.copy()  # (B, n)
    for i in range(env.n):
        cand_v = env.v_dists[i]._draw(n_batch * r, rng)
        if _theta_varies(env):
            cand_t = belief_from_scalar(env.theta_dists[i]._draw(n_batch * r, rng), env.m)
        else:
            cand_t = np.broadcast_to(theta[0, i], (n_batch * r, env.m))
        x_rep = np.repeat(x, r, axis=0)
        sl = _buyer_slice(env, i)
        x_rep[:, sl.start : sl.start + 1] = cand_v[:, None]
        if _theta_varies(env):
            x_rep[:, sl.start + 1 : sl.stop] = cand_t
        x_rep = x_rep.astype(dtype)
        pi_m = weights.experiments_at(x_rep)
        tnorm_m = weights.tnorm_at(x_rep)
        theta_rep = np.repeat(theta, r, axis=0)
        th_i = theta_rep[:, i, :]
        mis_br = (pi_m[:, i] * th_i[:, :, None]).max(axis=1).sum(axis=1)
        theta_mis = theta_rep.copy()
        theta_mis[:, i, :] = cand_t
        d_m = _diag_match(pi_m, theta_rep)
        ext_m = d_m.sum(axis=1) - d_m[:, i]
        scale_m = payment_scale(pi_m, theta_mis, env)[:, i]
        t_m = tnorm_m[:, i] * cand_v * scale_m
        v_rep = np.repeat(v[:, i], r)
        ext_t = np.repeat(d_true.sum(axis=1) - d_true[:, i], r)
        d_t_own = np.repeat(d_true[:, i], r)
        gain = v_rep * (mis_br - env.alpha_bar * ext_m) - t_m
        truthful_base = v_rep * (d_t_own - env.alpha_bar * ext_t)
        rgt = (gain - truthful_base).reshape(n_batch, r)  # payment at truth added later
        pick = rgt.argmax(axis=1)
        picked = rgt[np.arange(n_batch), pick]
        better = picked > best_gap[:, i]
        best_gap[better, i] = picked[better]
        rows = np.arange(n_batch)[better]
        best_v[rows, i] = cand_v.reshape(n_batch, r)[rows, pick[better]]
        if _theta_varies(env):
            best_theta[rows, i, :] = cand_t.reshape(n_batch, r, env.m)[rows, pick[better]]
    return best_v, best_theta


def _expost_regret_graph(weights, leaves, env, v, theta, x, d_true, pay_true, mis_v, mis_theta):
    """Taped per-buyer regret tensors at fixed misreport values."""
    rgt_list = []
    dtype = x.dtype
    for i in range(env.n):
        sl = _buyer_slice(env, i)
        x_mis = x.copy()
        x_mis[:, sl.start] = mis_v[:, i]
        if _theta_varies(env):
            x_mis[:, sl.start + 1 : sl.stop] = mis_theta[:, i, :]
        pi_m = _forward_graph(weights, leaves, x_mis.astype(dtype))
        th_i = theta[:, i, :].astype(dtype)
        pi_m_i = ad.reshape(
            ad.take_rows(ad.reshape(pi_m, (x.shape[0] * env.n, env.m, env.m)),
                         np.arange(x.shape[0]) * env.n + i),
            (x.shape[0], env.m, env.m),
        )
        mis_br = ad.tsum(ad.tmax(pi_m_i * th_i[:, :, None], axis=1), axis=1)
        d_m = _diag_weighted_graph(pi_m, theta, env.m)  # rivals use true thetas
        ext_m = ad.tsum(d_m, axis=1) - _col(d_m, i)
        theta_mis = theta.copy()
        theta_mis[:, i, :] = mis_theta[:, i, :]
        d_mis_all = _diag_weighted_graph(pi_m, theta_mis, env.m)
        total_mis = ad.tsum(d_mis_all, axis=1)
        outside_mis = (theta_mis.max(axis=-1) - env.alpha).astype(dtype)
        scale_m = d_mis_all - env.alpha_bar * (ad.reshape(total_mis, (x.shape[0], 1)) - d_mis_all) - outside_mis
        tnorm_m = _tnorm_graph(weights, leaves, x_mis.astype(dtype))
        t_m = _col(tnorm_m, i) * (mis_v[:, i].astype(dtype) * _col(scale_m, i))
        v_i = v[:, i].astype(dtype)
        gain = v_i * (mis_br - env.alpha_bar * ext_m) - t_m
        truthful = v_i * (_col(d_true, i) - env.alpha_bar * (ad.tsum(d_true, axis=1) - _col(d_true, i)))
        truthful = truthful - _col(pay_true, i)
        rgt_list.append(gain - truthful)
    return rgt_list


def _col(t: Tensor, i: int) -> Tensor:
    """Column i of a (B, n) tensor."""
    n = t.data.shape[1]
    flat = ad.reshape(t, (t.data.size,))
    idx = np.arange(t.data.shape[0]) * n + i
    return ad.take_rows(flat, idx)


def lagrangian_loss(revenue: Tensor, rgt_means: list[Tensor], lagr: LagrangianState) -> Tensor:
    """-revenue + sum_i lam_i RGT_i + (c/2) sum_i RGT_i^2."""
    loss = -revenue
    for i, rgt in enumerate(rgt_means):
        loss = loss + float(lagr.lam[i]) * rgt + 0.5 * lagr.penalty_coeff * rgt * rgt
    return loss


def train_market(env: MarketEnv, cfg: MarketTrainConfig, seed: int) -> tuple[MarketWeights, list[dict]]:
    """Augmented-Lagrangian training; deterministic given seed.

    Multipliers follow lam_i <- lam_i + penalty_coeff * RGT_i every
    `update_period` iterations, using the current batch regret estimate.
    """
    weights = MarketWeights.build(env, cfg.mode, cfg.hidden, seed, dtype=cfg.dtype)
    opt = ad.AdamState.for_params(weights.params, lr=cfg.lr)
    lagr = LagrangianState(
        lam=np.full(env.n, cfg.lambda_init), penalty_coeff=cfg.penalty_coeff, update_period=cfg.update_period
    )
    rng = np.random.Generator(np.random.Philox(seed + 7919))
    log: list[dict] = []
    step = _train_step_expost if cfg.mode == "ex_post" else _train_step_interim
    decay_at = int(cfg.iterations * cfg.lr_decay_at)
    for it in range(cfg.iterations):
        loss, revenue, rgt = step(weights, env, cfg, lagr, rng)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at iteration {it}")
        if (it + 1) % lagr.update_period == 0:
            lagr.lam = lagr.lam + lagr.penalty_coeff * rgt
        if (it + 1) % cfg.penalty_every == 0:
            lagr.penalty_coeff = min(cfg.penalty_cap, lagr.penalty_coeff * cfg.penalty_growth)
        if it + 1 == decay_at and cfg.lr_decay != 1.0:
            opt.lr *= cfg.lr_decay
        if (it + 1) % cfg.log_every == 0 or it == 0:
            log.append(
                {
                    "iteration": it + 1,
                    "loss": float(loss),
                    "revenue": float(revenue),
                    **{f"regret_{i}": float(r) for i, r in enumerate(rgt)},
                    **{f"lambda_{i}": float(l) for i, l in enumerate(lagr.lam)},
                }
            )
        _adam_on(weights, opt)
    return weights, log


_PENDING_GRAD: dict = {}


def _adam_on(weights: MarketWeights, opt: ad.AdamState) -> None:
    g = _PENDING_GRAD.pop(id(weights))
    ad.adam_step(opt, weights.params, g)


def _train_step_expost(weights, env, cfg, lagr, rng):
    dtype = np.dtype(cfg.dtype)
    v, theta = env.sample_profiles(cfg.batch, int(rng.integers(2**62)))
    x = encode_profile(env, v, theta, dtype=dtype)
    leaves = weights.params.leaves()
    pi, d_true, pay, revenue = _expost_batch_graph(weights, leaves, env, v, theta, x)
    # obedience gap of the truthful report = regret of the "misreport = truth" candidate
    br_true = (pi.data * theta[:, :, :, None].astype(dtype)).max(axis=2).sum(axis=2)
    truth_gap = (v.astype(dtype) * (br_true - d_true.data)).astype(np.float64)
    truth_partial = truth_gap - pay.data.astype(np.float64)
    mis_v, mis_theta = _expost_misreport_search(
        weights, env, v, theta, x, truth_partial, d_true.data.astype(np.float64), cfg, rng
    )
    rgt_tensors = _expost_regret_graph(weights, leaves, env, v, theta, x, d_true, pay, mis_v, mis_theta)
    rgt_means = [ad.tmean(r) for r in rgt_tensors]
    loss = lagrangian_loss(revenue, rgt_means, lagr)
    ad.backward(loss)
    _PENDING_GRAD[id(weights)] = ad.gather_grads(leaves, weights.params)
    return float(loss.data), float(revenue.data), np.array([float(r.data) for r in rgt_means])


def _train_step_interim(weights, env, cfg, lagr, rng):
    dtype = np.dtype(cfg.dtype)
    n, m = env.n, env.m
    n_batch = cfg.batch
    k = cfg.interim_samples
    v, theta = env.sample_profiles(n_batch, int(rng.integers(2**62)))
    leaves = weights.params.leaves()
    revenue = None
    rgt_means = []
    for i in range(n):
        ov, ot = env.sample_profiles(k, int(rng.integers(2**62)))
        others = [j for j in range(n) if j != i]
        v_full = np.empty((n_batch, k, n))
        t_full = np.empty((n_batch, k, n, m))
        v_full[:, :, i] = v[:, i : i + 1]
        t_full[:, :, i, :] = theta[:, None, i, :]
        v_full[:, :, others] = ov[None, :, others]
        t_full[:, :, others, :] = ot[None, :, others, :]
        x = encode_profile(env, v_full.reshape(-1, n), t_full.reshape(-1, n, m), dtype=dtype)
        pi = _forward_graph(weights, leaves, x)  # (B*K, n, m, m)
        th_flat = t_full.reshape(-1, n, m).astype(dtype)
        diag = ad.tsum(pi * np.eye(m, dtype=dtype)[None, None], axis=-1)  # (B*K, n, m)
        diag_w = diag * th_flat
        ext = ad.tsum(diag_w, axis=(1, 2)) - ad.tsum(_rows3(diag_w, i, n, m), axis=1)  # (B*K,)
        pi_i = _rows4(pi, i, n, m)  # (B*K, m, m)
        a_bar = ad.tmean(ad.reshape(pi_i, (n_batch, k, m, m)), axis=1)  # (B, m, m)
        e_bar_k = ad.tmean(
            ad.reshape(ad.tsum(diag_w, axis=1) - _rows3(diag_w, i, n, m), (n_batch, k, m)), axis=1
        )  # (B, m): mean rival diag per recommendation column
        ext_bar = ad.tmean(ad.reshape(ext, (n_batch, k)), axis=1)
        th_i = theta[:, i, :].astype(dtype)
        own_bar = ad.tsum(a_bar * (np.eye(m, dtype=dtype) * th_i[:, :, None]), axis=(1, 2))
        outside = (theta[:, i].max(axis=-1) - env.alpha).astype(dtype)
        scale = own_bar - env.alpha_bar * ext_bar - outside
        own_x = x.reshape(n_batch, k, -1)[:, 0, _buyer_slice(env, i)]
        tnorm = _tnorm_own_graph(weights, leaves, i, own_x)
        t_i = tnorm * (v[:, i].astype(dtype) * scale)  # (B,)
        rev_i = ad.tmean(t_i)
        revenue = rev_i if revenue is None else revenue + rev_i

        # candidate misreports = other batch members (interim values already computed)
        bracket = (
            a_bar.data[None, :, :, :] * th_i[:, None, :, None]
            - env.alpha_bar * e_bar_k.data[None, :, None, :]
        )  # (true b, cand c, k', k)
        mis_gain = v[:, i, None] * bracket.max(axis=2).sum(axis=2) - t_i.data[None, :]
        truthful_np = (
            v[:, i] * (own_bar.data - env.alpha_bar * ext_bar.data) - t_i.data
        )
        pick = (mis_gain - truthful_np[:, None]).argmax(axis=1)
        a_win = ad.take_rows(a_bar, pick)
        e_win = ad.take_rows(e_bar_k, pick)
        t_win = ad.take_rows(t_i, pick)
        mis_br = ad.tsum(ad.tmax(a_win * th_i[:, :, None] - env.alpha_bar * _unsq(e_win, m), axis=1), axis=1)
        gain = v[:, i].astype(dtype) * mis_br - t_win
        truthful = v[:, i].astype(dtype) * (own_bar - env.alpha_bar * ext_bar) - t_i
        rgt_means.append(ad.tmean(gain - truthful))
    loss = lagrangian_loss(revenue, rgt_means, lagr)
    ad.backward(loss)
    _PENDING_GRAD[id(weights)] = ad.gather_grads(leaves, weights.params)
    return float(loss.data), float(revenue.data), np.array([float(r.data) for r in rgt_means])


def _rows3(t: Tensor, i: int, n: int, m: int) -> Tensor:
    """Slice buyer i out of a (B, n, m) tensor -> (B, m)."""
    b = t.data.shape[0]
    flat = ad.reshape(t, (b * n, m))
    return ad.take_rows(flat, np.arange(b) * n + i)


def _rows4(t: Tensor, i: int, n: int, m: int) -> Tensor:
    """Slice buyer i out of a (B, n, m, m) tensor -> (B, m, m)."""
    b = t.data.shape[0]
    flat = ad.reshape(t, (b * n, m, m))
    return ad.take_rows(flat, np.arange(b) * n + i)


def _unsq(t: Tensor, m: int) -> Tensor:
    return ad.reshape(t, (t.data.shape[0], 1, m))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class LearnedMechanism:
    """respond() adapter so learned weights plug into evaluators and oracles' slots."""

    weights: MarketWeights
    env: MarketEnv

    def respond(self, v: np.ndarray, theta: np.ndarray):
        pi, tnorm = forward_market(self.weights, v, theta, self.env)
        if self.weights.mode == "ex_post":
            return pi, payment_expost(v, theta, pi, tnorm, self.env)
        scale = payment_scale(pi, theta, self.env)
        return pi, tnorm * v * scale  # per-profile scale; interim revenue uses evaluate_revenue


def evaluate_revenue(
    weights: MarketWeights,
    env: MarketEnv,
    test_size: int,
    seed: int,
    interim_samples: int = 64,
) -> tuple[float, float]:
    """Test revenue and its standard error.

    Interim payments are linear in the competitor expectation, so a small
    fresh sample per test point gives an unbiased estimate.
    """
    v, theta = env.sample_profiles(test_size, seed)
    if weights.mode == "ex_post":
        pi, tnorm = forward_market(weights, v, theta, env)
        pay = payment_expost(v, theta, pi, tnorm, env).sum(axis=1)
    else:
        rng = np.random.Generator(np.random.Philox(seed + 1))
        pay = np.zeros(test_size)
        chunk = max(1, 2**18 // interim_samples)
        for i in range(env.n):
            own_cols = encode_profile(env, v, theta)[:, _buyer_slice(env, i)]
            tnorm = weights.tnorm_own_at(i, own_cols)
            for start in range(0, test_size, chunk):
                stop = min(start + chunk, test_size)
                b = stop - start
                ov, ot = env.sample_profiles(b * interim_samples, int(rng.integers(2**62)))
                others = [j for j in range(env.n) if j != i]
                v_full = np.empty((b, interim_samples, env.n))
                t_full = np.empty((b, interim_samples, env.n, env.m))
                v_full[:, :, i] = v[start:stop, i : i + 1]
                t_full[:, :, i, :] = theta[start:stop, None, i, :]
                v_full[:, :, others] = ov.reshape(b, interim_samples, env.n)[:, :, others]
                t_full[:, :, others, :] = ot.reshape(b, interim_samples, env.n, env.m)[:, :, others, :]
                x = encode_profile(env, v_full.reshape(-1, env.n), t_full.reshape(-1, env.n, env.m))
                pi = weights.experiments_at(x)
                scale = payment_scale(pi, t_full.reshape(-1, env.n, env.m), env)[:, i]
                scale = scale.reshape(b, interim_samples).mean(axis=1)
                pay[start:stop] += tnorm[start:stop] * v[start:stop, i] * scale
    return float(pay.mean()), float(pay.std(ddof=1) / np.sqrt(test_size))


def estimate_regret_test(
    mechanism,
    env: MarketEnv,
    test_size: int,
    seed: int,
    mode: str = "ex_post",
    candidates: int = 100,
    ascent_steps: int = 100,
    ascent_lr: float = 0.005,
    sample_cap: int | None = None,
    interim_samples: int = 128,
) -> np.ndarray:
    """Per-buyer mean regret on a fresh test set.

    Warm-starts from the best of `candidates` sampled misreports (minibatch
    reuse in interim mode, fresh draws ex post; the truthful report always
    competes), then runs projected gradient ascent on the misreport when the
    mechanism exposes trainable weights.  Misreports stay clamped to the box
    support of the type distribution.
    """
    v, theta = env.sample_profiles(test_size, seed)
    if sample_cap is not None and test_size > sample_cap:
        v, theta = v[:sample_cap], theta[:sample_cap]
    if mode == "ex_post":
        return _regret_test_expost(mechanism, env, v, theta, seed, candidates, ascent_steps, ascent_lr)
    if not isinstance(mechanism, MarketWeights):
        raise ShapeError("interim regret estimation needs weight-backed mechanisms")
    return _regret_test_interim(mechanism, env, v, theta, seed, ascent_steps, ascent_lr, interim_samples)


def _regret_test_expost(mechanism, env, v, theta, seed, candidates, ascent_steps, ascent_lr):
    n_batch = v.shape[0]
    rng = np.random.Generator(np.random.Philox(seed + 13))
    pi_t, t_t = _mechanism_respond(mechanism, v, theta, env)
    d_true = _diag_match(pi_t, theta)
    br_true = (pi_t * theta[:, :, :, None]).max(axis=2).sum(axis=2)
    truth_util = v * (d_true - env.alpha_bar * (d_true.sum(axis=1, keepdims=True) - d_true)) - t_t
    out = np.zeros(env.n)
    for i in range(env.n):
        best_gap = v[:, i] * (br_true[:, i] - d_true[:, i])  # truth candidate
        best_v = v[:, i].copy()
        best_t = theta[:, i, :].copy()
        chunk = max(1, 2**17 // n_batch)
        for start in range(0, candidates, chunk):
            r = min(chunk, candidates - start)
            cv = env.v_dists[i]._draw(n_batch * r, rng)
            if _theta_varies(env):
                ct = belief_from_scalar(env.theta_dists[i]._draw(n_batch * r, rng), env.m)
            else:
                ct = np.broadcast_to(theta[0, i], (n_batch * r, env.m)).copy()
            gap = _expost_gap_batch(mechanism, env, v, theta, i, cv, ct, r, truth_util[:, i])
            pick = gap.argmax(axis=1)
            picked = gap[np.arange(n_batch), pick]
            better = picked > best_gap
            rows = np.arange(n_batch)[better]
            best_gap[better] = picked[better]
            best_v[rows] = cv.reshape(n_batch, r)[rows, pick[better]]
            best_t[rows] = ct.reshape(n_batch, r, env.m)[rows, pick[better]]
        if ascent_steps > 0 and isinstance(mechanism, MarketWeights):
            best_gap = _ascend_expost(
                mechanism, env, v, theta, i, best_v, best_t, best_gap, truth_util[:, i], ascent_steps, ascent_lr
            )
        out[i] = best_gap.mean()
    return out


def _expost_gap_batch(mechanism, env, v, theta, i, cand_v, cand_t, r, truth_util_i):
    n_batch = v.shape[0]
    v_rep = np.repeat(v, r, axis=0)
    t_rep = np.repeat(theta, r, axis=0)
    v_mis = v_rep.copy()
    t_mis = t_rep.copy()
    v_mis[:, i] = cand_v
    t_mis[:, i, :] = cand_t
    pi_m, t_m = _mechanism_respond(mechanism, v_mis, t_mis, env)
    th_i = t_rep[:, i, :]
    mis_br = (pi_m[:, i] * th_i[:, :, None]).max(axis=1).sum(axis=1)
    d_m = _diag_match(pi_m, t_rep)
    ext_m = d_m.sum(axis=1) - d_m[:, i]
    gain = v_rep[:, i] * (mis_br - env.alpha_bar * ext_m) - t_m[:, i]
    return (gain - np.repeat(truth_util_i, r)).reshape(n_batch, r)


def _ascend_expost(weights, env, v, theta, i, mis_v, mis_t, best_gap, truth_util_i, steps, lr):
    lo, hi = env.v_dists[i].bounded_support()
    cur_v = mis_v.copy()
    cur_t1 = mis_t[:, 0].copy()
    for _ in range(steps):
        leaves = weights.params.leaves()
        grad_v, grad_t1, gap = _expost_gap_input_grad(weights, leaves, env, v, theta, i, cur_v, cur_t1, truth_util_i)
        improved = gap > best_gap
        best_gap = np.where(improved, gap, best_gap)
        cur_v = np.clip(cur_v + lr * grad_v, lo, hi)
        if _theta_varies(env):
            cur_t1 = np.clip(cur_t1 + lr * grad_t1, 0.0, 1.0)
    leaves = weights.params.leaves()
    _, _, gap = _expost_gap_input_grad(weights, leaves, env, v, theta, i, cur_v, cur_t1, truth_util_i)
    return np.maximum(best_gap, gap)


def _expost_gap_input_grad(weights, leaves, env, v, theta, i, mis_v, mis_t1, truth_util_i):
    """Gradient of the summed misreport gain w.r.t. buyer i's reported coordinates."""
    n_batch = v.shape[0]
    dtype = weights.params.data.dtype
    sl = _buyer_slice(env, i)
    x = encode_profile(env, v, theta, dtype=dtype)
    v_leaf = Tensor(mis_v[:, None].astype(dtype))
    parts = [Tensor(x[:, : sl.start]), v_leaf]
    t_leaf = None
    if _theta_varies(env):
        t_leaf = Tensor(np.stack([mis_t1, 1.0 - mis_t1], axis=1).astype(dtype))
        parts.append(t_leaf)
    parts.append(Tensor(x[:, sl.stop :]))
    x_mis = ad.concat([p for p in parts if p.data.shape[1] > 0], axis=1)
    pi_m = _forward_graph(weights, leaves, x_mis)
    th_i = theta[:, i, :].astype(dtype)
    pi_m_i = _rows4(pi_m, i, env.n, env.m)
    mis_br = ad.tsum(ad.tmax(pi_m_i * th_i[:, :, None], axis=1), axis=1)
    d_m = _diag_weighted_graph(pi_m, theta.astype(dtype), env.m)
    ext_m = ad.tsum(d_m, axis=1) - _col(d_m, i)
    theta_mis = theta.copy()
    if _theta_varies(env):
        theta_mis[:, i, 0] = mis_t1
        theta_mis[:, i, 1] = 1.0 - mis_t1
    d_mis = _diag_weighted_graph(pi_m, theta_mis.astype(dtype), env.m)
    total_mis = ad.tsum(d_mis, axis=1, keepdims=True)
    outside = (theta_mis.max(axis=-1) - env.alpha).astype(dtype)
    scale = d_mis - env.alpha_bar * (total_mis - d_mis) - outside
    tnorm = _tnorm_graph(weights, leaves, x_mis)
    t_m = _col(tnorm, i) * (ad.reshape(v_leaf, (n_batch,)) * _col(scale, i))
    gain = v[:, i].astype(dtype) * (mis_br - env.alpha_bar * ext_m) - t_m
    total = ad.tsum(gain)
    ad.backward(total)
    gv = v_leaf.grad[:, 0].astype(np.float64)
    gt = np.zeros(n_batch) if t_leaf is None else (t_leaf.grad[:, 0] - t_leaf.grad[:, 1]).astype(np.float64)
    gap = gain.data.astype(np.float64) - truth_util_i
    return gv, gt, gap


def _regret_test_interim(weights, env, v, theta, seed, ascent_steps, ascent_lr, k):
    """Pool-reuse candidates: every test point's interim quantities serve as
    misreport candidates for every other point, then projected ascent on v'."""
    n_batch = v.shape[0]
    rng = np.random.Generator(np.random.Philox(seed + 17))
    out = np.zeros(env.n)
    for i in range(env.n):
        ov, ot = env.sample_profiles(k, int(rng.integers(2**62)))
        others = [j for j in range(env.n) if j != i]
        a_bar, e_bar, t_int, own_bar, ext_bar = _interim_pool(weights, env, i, v, theta, ov, ot)
        th_i = theta[:, i, :]
        bracket = a_bar[None, :, :, :] * th_i[:, None, :, None] - env.alpha_bar * e_bar[None, :, None, :]
        mis_gain = v[:, i, None] * bracket.max(axis=2).sum(axis=2) - t_int[None, :]
        truthful = v[:, i] * (own_bar - env.alpha_bar * ext_bar) - t_int
        gap = mis_gain - truthful[:, None]
        pick = gap.argmax(axis=1)
        best_gap = gap[np.arange(n_batch), pick]
        best_v = v[pick, i]
        if ascent_steps > 0:
            lo, hi = env.v_dists[i].bounded_support()
            cur_v = best_v.copy()
            for _ in range(ascent_steps):
                gv, gap_now = _interim_gap_input_grad(weights, env, i, v, theta, cur_v, ov, ot, truthful)
                best_gap = np.maximum(best_gap, gap_now)
                cur_v = np.clip(cur_v + ascent_lr * gv, lo, hi)
            _, gap_now = _interim_gap_input_grad(weights, env, i, v, theta, cur_v, ov, ot, truthful)
            best_gap = np.maximum(best_gap, gap_now)
        out[i] = best_gap.mean()
    return out


def _interim_pool(weights, env, i, v, theta, ov, ot):
    """Interim quantities for every pool member's type as a report of buyer i."""
    n_batch, k = v.shape[0], ov.shape[0]
    others = [j for j in range(env.n) if j != i]
    v_full = np.empty((n_batch, k, env.n))
    t_full = np.empty((n_batch, k, env.n, env.m))
    v_full[:, :, i] = v[:, i : i + 1]
    t_full[:, :, i, :] = theta[:, None, i, :]
    v_full[:, :, others] = ov[None, :, others]
    t_full[:, :, others, :] = ot[None, :, others, :]
    x = encode_profile(env, v_full.reshape(-1, env.n), t_full.reshape(-1, env.n, env.m))
    pi = weights.experiments_at(x)
    th_flat = t_full.reshape(-1, env.n, env.m)
    diag = np.einsum("bnkk->bnk", pi) * th_flat
    rival = diag.sum(axis=1) - diag[:, i, :]
    a_bar = pi[:, i].reshape(n_batch, k, env.m, env.m).mean(axis=1)
    e_bar = rival.reshape(n_batch, k, env.m).mean(axis=1)
    ext_bar = e_bar.sum(axis=1)
    own_bar = np.einsum("bkk,bk->b", a_bar, theta[:, i, :])
    scale = own_bar - env.alpha_bar * ext_bar - (theta[:, i].max(axis=-1) - env.alpha)
    own_cols = encode_profile(env, v, theta)[:, _buyer_slice(env, i)]
    tnorm = weights.tnorm_own_at(i, own_cols)
    t_int = tnorm * v[:, i] * scale
    return a_bar, e_bar, t_int, own_bar, ext_bar


def _interim_gap_input_grad(weights, env, i, v, theta, mis_v, ov, ot, truthful):
    """Ascent direction for the interim misreport payoff coordinate."""
    n_batch, k = v.shape[0], ov.shape[0]
    dtype = weights.params.data.dtype
    others = [j for j in range(env.n) if j != i]
    v_full = np.empty((n_batch, k, env.n))
    t_full = np.empty((n_batch, k, env.n, env.m))
    v_full[:, :, i] = mis_v[:, None]
    t_full[:, :, i, :] = theta[:, None, i, :]
    v_full[:, :, others] = ov[None, :, others]
    t_full[:, :, others, :] = ot[None, :, others, :]
    x = encode_profile(env, v_full.reshape(-1, env.n), t_full.reshape(-1, env.n, env.m), dtype=dtype)
    sl = _buyer_slice(env, i)
    leaves = weights.params.leaves()
    v_leaf = Tensor(np.repeat(mis_v, k)[:, None].astype(dtype))
    parts = [Tensor(x[:, : sl.start]), v_leaf]
    if _theta_varies(env):
        parts.append(Tensor(x[:, sl.start + 1 : sl.stop]))
    parts.append(Tensor(x[:, sl.stop :]))
    x_mis = ad.concat([p for p in parts if p.data.shape[1] > 0], axis=1)
    if _theta_varies(env):
        raise ShapeError("interim misreport ascent supports fixed-belief environments only")
    pi = _forward_graph(weights, leaves, x_mis)
    th_flat = t_full.reshape(-1, env.n, env.m).astype(dtype)
    diag = ad.tsum(pi * np.eye(env.m, dtype=dtype)[None, None], axis=-1)
    diag_w = diag * th_flat
    rival = ad.tsum(diag_w, axis=1) - _rows3(diag_w, i, env.n, env.m)
    a_bar = ad.tmean(ad.reshape(_rows4(pi, i, env.n, env.m), (n_batch, k, env.m, env.m)), axis=1)
    e_bar = ad.tmean(ad.reshape(rival, (n_batch, k, env.m)), axis=1)
    th_i = theta[:, i, :].astype(dtype)
    mis_br = ad.tsum(ad.tmax(a_bar * th_i[:, :, None] - env.alpha_bar * _unsq(e_bar, env.m), axis=1), axis=1)
    own_bar = ad.tsum(a_bar * (np.eye(env.m, dtype=dtype) * th_i[:, :, None]), axis=(1, 2))
    ext_bar = ad.tsum(e_bar, axis=1)
    outside = (theta[:, i].max(axis=-1) - env.alpha).astype(dtype)
    scale = own_bar - env.alpha_bar * ext_bar - outside
    own_first = ad.take_rows(v_leaf, np.arange(n_batch) * k)
    tnorm = ad.sigmoid(ad.reshape(ad.mlp_apply(leaves, weights.arch_pay, own_first, prefix=f"pay{i}."), (n_batch,)))
    v_mis_row = ad.reshape(ad.take_rows(ad.reshape(v_leaf, (n_batch * k,)), np.arange(n_batch) * k), (n_batch,))
    t_mis = tnorm * (v_mis_row * scale)
    gain = v[:, i].astype(dtype) * mis_br - t_mis
    total = ad.tsum(gain)
    ad.backward(total)
    gv = v_leaf.grad.reshape(n_batch, k).sum(axis=1).astype(np.float64)
    gap = gain.data.astype(np.float64) - truthful
    return gv, gap
