"""Input-concave surrogate ensembles with heteroscedastic training.

Each member network predicts a mean and a variance for the objective at a
policy vector. Hidden-to-hidden weights are constrained nonnegative and the
activation is convex and nondecreasing, so the (negated) mean head is concave
in the input by construction; the variance head hangs off the last hidden
layer with unconstrained weights and can be arbitrary. Members are trained
independently (lockstep-vectorized over a leading ensemble axis) by
stochastic gradient descent on the Gaussian negative log-likelihood, and
their predictions combine as a uniformly weighted Gaussian mixture. New
policies are proposed by projected gradient ascent on the mixture's upper
confidence bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class TrainingFailedError(RuntimeError):
    """Raised when training diverges (non-finite loss or parameters)."""


def _elu(x: np.ndarray, gamma: float) -> np.ndarray:
    out = np.array(x, dtype=float, copy=True)
    neg = x < 0
    out[neg] = gamma * np.expm1(x[neg])
    return out


def _elu_grad(x: np.ndarray, gamma: float) -> np.ndarray:
    out = np.ones_like(x)
    neg = x < 0
    out[neg] = gamma * np.exp(x[neg])
    return out


def _sigma2_from_s(s: np.ndarray, gamma: float) -> np.ndarray:
    """log(1 + gamma + elu(s)) in overflow-safe form; infimum 0, always > 0."""
    out = np.empty_like(s)
    neg = s < 0
    out[neg] = np.log1p(gamma * np.exp(s[neg]))
    out[~neg] = np.log1p(gamma + s[~neg])
    return out


def _sigma2_grad_s(s: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty_like(s)
    neg = s < 0
    e = gamma * np.exp(s[neg])
    out[neg] = e / (1.0 + e)
    out[~neg] = 1.0 / (1.0 + gamma + s[~neg])
    return out


@dataclass
class IcnnParams:
    """One member's parameters.

    For hidden widths (h1..hH) over n inputs: w_p holds the pass-through
    matrices for every layer including the output, w_z the nonnegative
    hidden-to-hidden (and hidden-to-output) matrices, b the biases;
    (w_sigma, b_sigma) form the variance head on the last hidden layer.
    """

    w_p: list
    w_z: list
    b: list
    w_sigma: np.ndarray
    b_sigma: np.ndarray
    gamma: float = 1.0

    @property
    def n_inputs(self) -> int:
        return self.w_p[0].shape[0]

    @property
    def hidden(self) -> tuple:
        return tuple(w.shape[1] for w in self.w_p[:-1])

    def nonneg_ok(self, tol: float = 0.0) -> bool:
        return all((w >= -tol).all() for w in self.w_z)

    def to_json(self) -> str:
        def arr(a):
            return {"shape": list(a.shape), "data": np.asarray(a).ravel().tolist()}

        return json.dumps(
            {
                "gamma": self.gamma,
                "w_p": [arr(w) for w in self.w_p],
                "w_z": [arr(w) for w in self.w_z],
                "b": [arr(v) for v in self.b],
                "w_sigma": arr(self.w_sigma),
                "b_sigma": arr(self.b_sigma),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "IcnnParams":
        doc = json.loads(text)

        def arr(d):
            return np.array(d["data"], dtype=float).reshape(d["shape"])

        return cls(
            w_p=[arr(d) for d in doc["w_p"]],
            w_z=[arr(d) for d in doc["w_z"]],
            b=[arr(d) for d in doc["b"]],
            w_sigma=arr(doc["w_sigma"]),
            b_sigma=arr(doc["b_sigma"]),
            gamma=float(doc["gamma"]),
        )


# ---------------------------------------------------------------------------
# stacked internals: every array carries a leading ensemble axis E


class _Stacked(NamedTuple):
    w_p: list
    w_z: list
    b: list
    w_sigma: np.ndarray
    b_sigma: np.ndarray
    gamma: float


def _stack(members: Sequence[IcnnParams]) -> _Stacked:
    return _Stacked(
        w_p=[np.stack([m.w_p[l] for m in members]) for l in range(len(members[0].w_p))],
        w_z=[np.stack([m.w_z[l] for m in members]) for l in range(len(members[0].w_z))],
        b=[np.stack([m.b[l][None, :] for m in members]) for l in range(len(members[0].b))],
        w_sigma=np.stack([m.w_sigma for m in members]),
        b_sigma=np.stack([m.b_sigma[None, :] for m in members]),
        gamma=members[0].gamma,
    )


def _unstack(stk: _Stacked) -> list:
    e = stk.w_sigma.shape[0]
    return [
        IcnnParams(
            w_p=[w[m] for w in stk.w_p],
            w_z=[w[m] for w in stk.w_z],
            b=[v[m, 0] for v in stk.b],
            w_sigma=stk.w_sigma[m],
            b_sigma=stk.b_sigma[m, 0],
            gamma=stk.gamma,
        )
        for m in range(e)
    ]


def icnn_init(
    n_inputs: int,
    hidden: Sequence[int] = (128, 128, 128),
    seed=0,
    gamma: float = 1.0,
) -> IcnnParams:
    """Fan-in uniform init; nonnegative weights start at the absolute value
    of the same draw so the start is feasible. Biases start at zero."""
    rng = np.random.default_rng(seed)
    widths = list(hidden) + [1]

    def uniform(shape, fan_in):
        a = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    w_p = [uniform((n_inputs, w), n_inputs) for w in widths]
    w_z = [
        np.abs(uniform((widths[l], widths[l + 1]), widths[l]))
        for l in range(len(widths) - 1)
    ]
    b = [np.zeros(w) for w in widths]
    w_sigma = uniform((widths[-2], 1), widths[-2])
    b_sigma = np.zeros(1)
    return IcnnParams(w_p, w_z, b, w_sigma, b_sigma, gamma)


def _forward(stk: _Stacked, x: np.ndarray, need_cache: bool = False):
    """Stacked forward pass. x is (B, n) shared or (E, B, n) per member."""
    n_hidden = len(stk.w_z)
    pre = []
    z = []
    a = x @ stk.w_p[0] + stk.b[0]
    pre.append(a)
    z.append(_elu(a, stk.gamma))
    for l in range(1, n_hidden):
        a = z[l - 1] @ stk.w_z[l - 1] + x @ stk.w_p[l] + stk.b[l]
        pre.append(a)
        z.append(_elu(a, stk.gamma))
    f = z[-1] @ stk.w_z[-1] + x @ stk.w_p[-1] + stk.b[-1]
    s = z[-1] @ stk.w_sigma + stk.b_sigma
    mu = -f[..., 0]
    sig2 = _sigma2_from_s(s[..., 0], stk.gamma)
    if not need_cache:
        return mu, sig2, None
    return mu, sig2, {"x": x, "pre": pre, "z": z, "s": s[..., 0]}


def _backward(stk: _Stacked, cache, gmu: np.ndarray, gsig2: np.ndarray):
    """Backprop cotangents (gmu, gsig2) of shape (E, B) [or broadcastable].

    Returns (parameter gradients as a _Stacked, input gradients (E, B, n)).
    """
    x = cache["x"]
    pre, z, s = cache["pre"], cache["z"], cache["s"]
    n_hidden = len(stk.w_z)

    gf = -np.asarray(gmu, dtype=float)[..., None]
    gs = (np.asarray(gsig2, dtype=float) * _sigma2_grad_s(s, stk.gamma))[..., None]

    def t(a):
        return np.swapaxes(a, -1, -2)

    g_wp = [None] * len(stk.w_p)
    g_wz = [None] * len(stk.w_z)
    g_b = [None] * len(stk.b)

    g_wz[-1] = t(z[-1]) @ gf
    g_wp[-1] = t(x) @ gf
    g_b[-1] = gf.sum(axis=-2, keepdims=True)
    g_wsigma = t(z[-1]) @ gs
    g_bsigma = gs.sum(axis=-2, keepdims=True)

    gz = gf @ t(stk.w_z[-1]) + gs @ t(stk.w_sigma)
    gx = gf @ t(stk.w_p[-1])
    for l in range(n_hidden - 1, 0, -1):
        ga = gz * _elu_grad(pre[l], stk.gamma)
        g_wz[l - 1] = t(z[l - 1]) @ ga
        g_wp[l] = t(x) @ ga
        g_b[l] = ga.sum(axis=-2, keepdims=True)
        gx = gx + ga @ t(stk.w_p[l])
        gz = ga @ t(stk.w_z[l - 1])
    ga = gz * _elu_grad(pre[0], stk.gamma)
    g_wp[0] = t(x) @ ga
    g_b[0] = ga.sum(axis=-2, keepdims=True)
    gx = gx + ga @ t(stk.w_p[0])

    grads = _Stacked(g_wp, g_wz, g_b, g_wsigma, g_bsigma, stk.gamma)
    return grads, gx


def icnn_forward(params: IcnnParams, p):
    """Predicted (mean, variance) at one policy or a (B, n) batch."""
    p_arr = np.asarray(p, dtype=float)
    single = p_arr.ndim == 1
    batch = p_arr[None, :] if single else p_arr
    if batch.ndim != 2 or batch.shape[1] != params.n_inputs:
        raise ValueError(
            f"input width {batch.shape[-1]} does not match network width {params.n_inputs}"
        )
    stk = _stack([params])
    mu, sig2, _ = _forward(stk, batch)
    if single:
        return float(mu[0, 0]), float(sig2[0, 0])
    return mu[0], sig2[0]


def nll_loss(params: IcnnParams, policies, objectives) -> float:
    """Gaussian negative log-likelihood of the dataset under the network:
    (1/2) sum_k [(y_k - mu(p_k))^2 / sigma^2(p_k)] + (1/2) sum_k log sigma^2(p_k).
    """
    x = np.asarray(policies, dtype=float)
    y = np.asarray(objectives, dtype=float)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    mu, sig2 = icnn_forward(params, x)
    return float(0.5 * np.sum((y - mu) ** 2 / sig2) + 0.5 * np.sum(np.log(sig2)))


def nll_parameter_gradients(params: IcnnParams, policies, objectives):
    """Analytic gradients of nll_loss w.r.t. every parameter (same layout)."""
    x = np.asarray(policies, dtype=float)
    y = np.asarray(objectives, dtype=float)
    stk = _stack([params])
    mu, sig2, cache = _forward(stk, x, need_cache=True)
    err = mu - y[None, :]
    gmu = err / sig2
    gsig2 = 0.5 * (1.0 / sig2 - err**2 / sig2**2)
    grads, _ = _backward(stk, cache, gmu, gsig2)
    return IcnnParams(
        w_p=[g[0] for g in grads.w_p],
        w_z=[g[0] for g in grads.w_z],
        b=[g[0, 0] for g in grads.b],
        w_sigma=grads.w_sigma[0],
        b_sigma=grads.b_sigma[0, 0],
        gamma=params.gamma,
    )


def icnn_input_gradients(params: IcnnParams, policies):
    """(mu, sigma2, dmu/dp, dsigma2/dp) at a (B, n) batch of policies."""
    x = np.asarray(policies, dtype=float)
    stk = _stack([params])
    mu, sig2, cache = _forward(stk, x, need_cache=True)
    ones = np.ones_like(mu)
    zeros = np.zeros_like(mu)
    _, dmu = _backward(stk, cache, ones, zeros)
    _, dsig2 = _backward(stk, cache, zeros, ones)
    return mu[0], sig2[0], dmu[0], dsig2[0]


@dataclass
class CentralizedConfig:
    """Budget and hyperparameters for the surrogate-driven optimizer.

    rounds/samples_per_round/ensemble_size set the sampling budget; the
    exploration weights default to beta_t = (10 - t)/9, reaching zero at
    round ten. Training is plain minibatch SGD with a fixed step.
    """

    ensemble_size: int = 10
    rounds: int = 10
    samples_per_round: int = 100
    initial_samples: int = 100
    beta_schedule: Optional[Sequence[float]] = None
    hidden: Sequence[int] = (128, 128, 128)
    epochs: int = 500
    step_size: float = 1e-3
    minibatch: int = 32
    gamma: float = 1.0
    eps_p: float = 1e-3
    acquisition_iters: int = 200
    dedup_distance: float = 1e-3
    #: global-norm gradient clip per member; the likelihood's mean-head
    #: gradient scales like err/sigma^2 and blows up as the fit tightens,
    #: so plain fixed-step SGD needs the cap to stay stable. None disables.
    grad_clip: Optional[float] = 5.0
    #: linearly decay the step to this fraction of step_size by the final
    #: epoch (1.0 keeps a truly fixed step); shrinks the SGD noise ball.
    final_step_fraction: float = 0.1

    def __post_init__(self):
        if self.ensemble_size < 1 or self.rounds < 1:
            raise ValueError("ensemble_size and rounds must be >= 1")
        if self.initial_samples < 1 or self.samples_per_round < 1:
            raise ValueError("sample counts must be >= 1")
        if self.epochs < 1 or self.minibatch < 1 or self.step_size <= 0:
            raise ValueError("bad training hyperparameters")
        if self.beta_schedule is not None:
            if len(self.beta_schedule) < self.rounds:
                raise ValueError("beta_schedule shorter than rounds")
            if any(b < 0 for b in self.beta_schedule):
                raise ValueError("beta values must be nonnegative")

    def beta(self, t: int) -> float:
        if self.beta_schedule is not None:
            return float(self.beta_schedule[t - 1])
        return max(0.0, (10.0 - t) / 9.0)


def _train_stacked(x: np.ndarray, y: np.ndarray, config: CentralizedConfig, seed, e: int):
    """Train e members in lockstep; returns (stacked params, per-member ok)."""
    n, dim = x.shape
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in ss.spawn(e)]
    members = [
        icnn_init(dim, config.hidden, seed=rngs[m], gamma=config.gamma)
        for m in range(e)
    ]
    for m in members:  # start the negated mean head at the data mean
        m.b[-1][:] = -float(y.mean())
    stk = _stack(members)

    batch = min(config.minibatch, n)
    n_batches = (n + batch - 1) // batch
    for epoch in range(config.epochs):
        frac = epoch / max(config.epochs - 1, 1)
        lr = config.step_size * (1.0 - (1.0 - config.final_step_fraction) * frac)
        perms = np.stack([rng.permutation(n) for rng in rngs])
        for bi in range(n_batches):
            idx = perms[:, bi * batch : (bi + 1) * batch]
            xb = x[idx]  # (E, b, dim)
            yb = y[idx]
            mu, sig2, cache = _forward(stk, xb, need_cache=True)
            scale = 1.0 / idx.shape[1]
            err = mu - yb
            gmu = err / sig2 * scale
            gsig2 = 0.5 * (1.0 / sig2 - err**2 / sig2**2) * scale
            grads, _ = _backward(stk, cache, gmu, gsig2)
            all_grads = list(grads.w_p) + list(grads.w_z) + list(grads.b)
            all_grads += [grads.w_sigma, grads.b_sigma]
            if config.grad_clip is not None:
                sq = sum((g**2).sum(axis=(1, 2)) for g in all_grads)
                norm = np.sqrt(sq)
                member_scale = np.minimum(1.0, config.grad_clip / np.maximum(norm, 1e-30))
                for g in all_grads:
                    g *= member_scale[:, None, None]
            for l in range(len(stk.w_p)):
                stk.w_p[l] -= lr * grads.w_p[l]
                stk.b[l] -= lr * grads.b[l]
            for l in range(len(stk.w_z)):
                stk.w_z[l] -= lr * grads.w_z[l]
                np.maximum(stk.w_z[l], 0.0, out=stk.w_z[l])
            stk.w_sigma[...] -= lr * grads.w_sigma
            stk.b_sigma[...] -= lr * grads.b_sigma

    ok = np.ones(e, dtype=bool)
    for l in range(len(stk.w_p)):
        ok &= np.isfinite(stk.w_p[l]).all(axis=(1, 2))
    for l in range(len(stk.w_z)):
        ok &= np.isfinite(stk.w_z[l]).all(axis=(1, 2))
    ok &= np.isfinite(stk.w_sigma).all(axis=(1, 2))
    ok &= np.isfinite(stk.b_sigma).all(axis=(1, 2))
    return stk, ok


def train_icnn(policies, objectives, config: CentralizedConfig, seed=0) -> IcnnParams:
    """Fit one network by minibatch SGD on the negative log-likelihood.

    Nonnegative weights are re-projected after every step, so the concavity
    constraint holds at all times. Deterministic for a fixed seed.
    """
    x = np.asarray(policies, dtype=float)
    y = np.asarray(objectives, dtype=float)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    stk, ok = _train_stacked(x, y, config, seed, 1)
    if not ok[0]:
        raise TrainingFailedError("training diverged (non-finite parameters)")
    return _unstack(stk)[0]


class EnsemblePrediction(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray


class IcnnEnsemble:
    """A uniformly weighted Gaussian mixture over member predictions."""

    def __init__(self, members: Sequence[IcnnParams]):
        if len(members) == 0:
            raise ValueError("ensemble needs at least one member")
        self.members = list(members)
        self._stk = _stack(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def predict(self, policies) -> EnsemblePrediction:
        x = np.asarray(policies, dtype=float)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        mu, sig2, _ = _forward(self._stk, batch)
        mean = mu.mean(axis=0)
        var = (sig2 + mu**2).mean(axis=0) - mean**2
        if np.any(var < -1e-10):
            raise AssertionError("mixture variance fell below -1e-10")
        var = np.maximum(var, 0.0)
        if single:
            return EnsemblePrediction(float(mean[0]), float(var[0]))
        return EnsemblePrediction(mean, var)

    def mean_var_grad(self, policies):
        """Mixture mean/variance and their input gradients at a (B, n) batch."""
        x = np.asarray(policies, dtype=float)
        mu, sig2, cache = _forward(self._stk, x, need_cache=True)
        ones = np.ones_like(mu)
        zeros = np.zeros_like(mu)
        _, dmu_m = _backward(self._stk, cache, ones, zeros)
        _, dsig2_m = _backward(self._stk, cache, zeros, ones)
        mean = mu.mean(axis=0)
        var = np.maximum((sig2 + mu**2).mean(axis=0) - mean**2, 0.0)
        dmean = dmu_m.mean(axis=0)
        dvar = (dsig2_m + 2.0 * mu[..., None] * dmu_m).mean(axis=0) - 2.0 * mean[
            :, None
        ] * dmean
        return mean, var, dmean, dvar

    def to_json(self) -> str:
        return json.dumps([json.loads(m.to_json()) for m in self.members])

    @classmethod
    def from_json(cls, text: str) -> "IcnnEnsemble":
        docs = json.loads(text)
        return cls([IcnnParams.from_json(json.dumps(d)) for d in docs])


def train_ensemble(policies, objectives, config: CentralizedConfig, seed=0) -> IcnnEnsemble:
    """Train the configured number of members; drop any diverged member.

    Raises TrainingFailedError only if no member survives.
    """
    x = np.asarray(policies, dtype=float)
    y = np.asarray(objectives, dtype=float)
    stk, ok = _train_stacked(x, y, config, seed, config.ensemble_size)
    members = [m for m, good in zip(_unstack(stk), ok) if good]
    if not members:
        raise TrainingFailedError("every ensemble member diverged")
    return IcnnEnsemble(members)


def ensemble_predict(ensemble: IcnnEnsemble, p) -> EnsemblePrediction:
    return ensemble.predict(p)


def ucb_maximize(
    ensemble,
    beta: float,
    starts: int,
    seed=0,
    eps_p: float = 1e-3,
    max_iters: int = 200,
    dedup_distance: float = 1e-3,
) -> list:
    """Projected gradient ascent on mean + beta * std over [eps_p, 1]^n.

    Runs every start in one batch with per-start adaptive steps (grow on
    accepted uphill moves, halve on rejections). Returns the distinct local
    maximizers found, best acquisition value first, deduplicated at
    `dedup_distance` in Euclidean norm.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    rng = np.random.default_rng(seed)
    n = ensemble.members[0].n_inputs if hasattr(ensemble, "members") else ensemble.n_inputs
    x = rng.uniform(eps_p, 1.0, size=(starts, n))

    def acquisition(points):
        pred = ensemble.predict(points)
        return pred.mean + beta * np.sqrt(np.maximum(pred.variance, 0.0))

    fx = acquisition(x)
    step = np.full(starts, 0.1)
    for _ in range(max_iters):
        mean, var, dmean, dvar = ensemble.mean_var_grad(x)
        sigma = np.sqrt(np.maximum(var, 0.0))
        grad = dmean.copy()
        if beta > 0:
            safe = sigma > 1e-12
            grad[safe] += beta * dvar[safe] / (2.0 * sigma[safe, None])
        cand = np.clip(x + step[:, None] * grad, eps_p, 1.0)
        fc = acquisition(cand)
        accept = fc >= fx
        x[accept] = cand[accept]
        fx[accept] = fc[accept]
        step[accept] *= 1.2
        step[~accept] *= 0.5
        if step.max() < 1e-9:
            break

    order = np.argsort(-fx)
    kept = []
    for idx in order:
        point = x[idx]
        if all(np.linalg.norm(point - q) > dedup_distance for q in kept):
            kept.append(point.copy())
    return kept


@dataclass
class CentralizedResult:
    policy: np.ndarray
    objective: float
    history: list = field(default_factory=list)  # (round, policy, objective, std_error)
    n_evaluations: int = 0
    surviving_members: int = 0

    def history_csv_rows(self):
        header = ("round", "policy", "objective", "std_error")
        rows = [
            (t, json.dumps(list(np.round(p, 12))), obj, se)
            for (t, p, obj, se) in self.history
        ]
        return header, rows


def run_centralized_optimization(env, config: CentralizedConfig, seed=0) -> CentralizedResult:
    """Round-based surrogate optimization of the environment objective.

    Seeds an initial uniform design, then per round: train the ensemble on
    everything seen, propose samples_per_round points by UCB ascent (topped
    up with uniform draws after deduplication), evaluate them, and augment
    the dataset. Returns the best evaluated policy; exactly
    initial_samples + rounds * samples_per_round evaluations are spent.
    """
    ss = np.random.SeedSequence(seed)
    seeds = ss.spawn(2 * config.rounds + 1)
    rng0 = np.random.default_rng(seeds[0])
    n = env.n_devices

    x = rng0.uniform(config.eps_p, 1.0, size=(config.initial_samples, n))
    history = []
    y = []
    for k in range(len(x)):
        value, se = env.objective_with_error(x[k])
        y.append(value)
        history.append((0, x[k].copy(), value, se))
    y = list(y)

    surviving = 0
    for t in range(1, config.rounds + 1):
        ensemble = train_ensemble(np.asarray(x), np.asarray(y), config, seeds[2 * t - 1])
        surviving = len(ensemble)
        beta_t = config.beta(t)
        rng_t = np.random.default_rng(seeds[2 * t])
        candidates = ucb_maximize(
            ensemble,
            beta_t,
            starts=config.samples_per_round,
            seed=rng_t,
            eps_p=config.eps_p,
            max_iters=config.acquisition_iters,
            dedup_distance=config.dedup_distance,
        )
        candidates = candidates[: config.samples_per_round]
        while len(candidates) < config.samples_per_round:
            candidates.append(rng_t.uniform(config.eps_p, 1.0, size=n))
        new_x = []
        for point in candidates:
            value, se = env.objective_with_error(point)
            new_x.append(point)
            y.append(value)
            history.append((t, point.copy(), value, se))
        x = np.vstack([x, np.asarray(new_x)])

    y_arr = np.asarray(y)
    best = int(np.argmax(y_arr))
    return CentralizedResult(
        policy=np.asarray(x)[best].copy(),
        objective=float(y_arr[best]),
        history=history,
        n_evaluations=len(y),
        surviving_members=surviving,
    )
