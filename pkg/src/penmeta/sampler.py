"""Hierarchical priors and Metropolis-within-Gibbs sampling.

Model::

    kappa_s ~ Gamma(shape=a, scale=b)      lambda_s ~ Gamma(shape=c, scale=d)
    a ~ U(l_a, u_a)   b ~ U(l_b, u_b)   c ~ U(l_c, u_c)   d ~ U(l_d, u_d)

Each sweep updates every kappa_s, then every lambda_s, then a, b, c, d.  The
study-level updates use Gamma random-walk proposals centred on the current
value with modality-dependent variances.  Given (lambda, a, b) the kappa_s
are conditionally independent, so all studies are proposed and accepted in
one vectorised step; this is the same chain as updating them one by one.
Hyper-parameters use a uniform window clipped to the prior bounds, with the
Hastings ratio for the clipped window.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from .dist import weibull_cdf_values
from .studies import OR, PENETRANCE, LikelihoodInputs

DEFAULT_AGES = (40.0, 50.0, 60.0, 70.0, 80.0)
LOG_500 = math.log(500.0)
STALL_SWEEPS = 1000

# proposal kinds
KIND_PENETRANCE, KIND_RR, KIND_OR = 0, 1, 2


class MCMCStallError(RuntimeError):
    pass


@dataclass(frozen=True)
class HyperPriorConfig:
    """Uniform hyper-prior bounds and hyper-parameter proposal half-widths."""

    a: tuple[float, float] = (7.5, 27.5)
    b: tuple[float, float] = (0.15, 0.25)
    c: tuple[float, float] = (43.0, 63.0)
    d: tuple[float, float] = (1.32, 2.02)
    windows: tuple[float, float, float, float] = (9.0, 0.04, 8.0, 0.22)

    def __post_init__(self):
        for name in "abcd":
            lo, hi = getattr(self, name)
            if not (0 < lo < hi):
                raise ValueError(f"bounds for {name} must satisfy 0 < lower < upper, got {(lo, hi)}")
        if any(w <= 0 for w in self.windows):
            raise ValueError("proposal windows must be positive")

    def bounds(self, name: str) -> tuple[float, float]:
        return getattr(self, name)

    def window(self, name: str) -> float:
        return self.windows["abcd".index(name)]

    def midpoint(self) -> dict[str, float]:
        return {n: 0.5 * sum(getattr(self, n)) for n in "abcd"}


@dataclass(frozen=True)
class HyperState:
    a: float
    b: float
    c: float
    d: float
    kappa: np.ndarray
    lam: np.ndarray
    # cached per-study log-likelihood at (kappa, lam); None until computed
    study_loglik: np.ndarray | None = field(default=None, compare=False)

    @property
    def n_studies(self) -> int:
        return len(self.kappa)

    @property
    def consensus_shape(self) -> float:
        return self.a * self.b

    @property
    def consensus_scale(self) -> float:
        return self.c * self.d


def proposal_kinds(studies: Sequence[LikelihoodInputs]) -> np.ndarray:
    kinds = []
    for s in studies:
        if s.modality == PENETRANCE:
            kinds.append(KIND_PENETRANCE)
        elif s.modality == OR:
            kinds.append(KIND_OR)
        else:
            kinds.append(KIND_RR)
    return np.array(kinds, dtype=int)


_KAPPA_OFFSET = np.array([0.01, 2000.0, 200000.0])
_LAMBDA_POWER = np.array([0.4, 0.9, 1.2])


def kappa_proposal_variance(kappa, kinds):
    """log base 500 of (kappa + 0.01 | 2000 | 200000) for penetrance | RR/SIR | OR studies."""
    return np.log(np.asarray(kappa, float) + _KAPPA_OFFSET[kinds]) / LOG_500


def lambda_proposal_variance(lam, kinds):
    return np.power(np.asarray(lam, float), _LAMBDA_POWER[kinds])


def gamma_logpdf(x, shape, scale):
    """Gamma(shape, scale) log-density, written out to avoid scipy call overhead."""
    x = np.asarray(x, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (shape - 1.0) * np.log(x) - x / scale - gammaln(shape) - shape * np.log(scale)


def _gamma_params(mean, variance):
    # mean = shape * scale, variance = shape * scale**2
    with np.errstate(divide="ignore", invalid="ignore"):
        return mean * mean / variance, variance / mean


def log_prior(state: HyperState, config: HyperPriorConfig) -> float:
    """Gamma log-densities of all kappa_s and lambda_s; the uniform hyper-priors enter as 0 / -inf indicators."""
    for name in "abcd":
        lo, hi = config.bounds(name)
        if not lo < getattr(state, name) < hi:
            return -math.inf
    lp = 0.0
    if state.n_studies:
        lp += float(np.sum(gamma_logpdf(state.kappa, state.a, state.b)))
        lp += float(np.sum(gamma_logpdf(state.lam, state.c, state.d)))
    return lp


def study_log_acceptance(current, proposal, ll_current, ll_prop, prior_shape, prior_scale, variance_fn, kinds):
    """Log MH ratio for Gamma proposals centred on the current value.

    Includes the prior ratio and the Hastings correction
    ``q(current | proposal) / q(proposal | current)``.
    """
    alpha, beta = _gamma_params(current, variance_fn(current, kinds))
    alpha_b, beta_b = _gamma_params(proposal, variance_fn(proposal, kinds))
    with np.errstate(invalid="ignore"):
        return (
            ll_prop
            - ll_current
            + gamma_logpdf(proposal, prior_shape, prior_scale)
            - gamma_logpdf(current, prior_shape, prior_scale)
            + gamma_logpdf(current, alpha_b, beta_b)
            - gamma_logpdf(proposal, alpha, beta)
        )


def _study_block(current, other, prior_shape, prior_scale, variance_fn, kinds, loglik, ll_current, rng, update_kappa):
    """Vectorised Gamma-proposal MH step; arrays are (slots, studies), priors (slots, 1)."""
    var = variance_fn(current, kinds)
    alpha, beta = _gamma_params(current, var)
    valid = np.isfinite(alpha) & np.isfinite(beta) & (alpha > 0) & (beta > 0)
    draw = rng.gamma(np.where(valid, alpha, 1.0), np.where(valid, beta, 1.0))
    u = rng.random(current.shape)
    proposal = np.where(valid & (draw > 0), draw, current)
    alpha_b, beta_b = _gamma_params(proposal, variance_fn(proposal, kinds))
    valid &= (draw > 0) & np.isfinite(alpha_b) & np.isfinite(beta_b) & (alpha_b > 0) & (beta_b > 0)
    proposal = np.where(valid, proposal, current)

    ll_prop = loglik(proposal, other) if update_kappa else loglik(other, proposal)
    log_ratio = study_log_acceptance(
        current, proposal, ll_current, ll_prop, prior_shape, prior_scale, variance_fn, kinds
    )
    ok = valid & np.isfinite(ll_prop) & np.isfinite(log_ratio)
    with np.errstate(divide="ignore"):
        accept = ok & (np.log(u) < log_ratio)
    new = np.where(accept, proposal, current)
    new_ll = np.where(accept, ll_prop, ll_current)
    return new, new_ll, accept, int(np.count_nonzero(~valid))


def _ensure_loglik(state: HyperState, loglik: Callable) -> np.ndarray:
    if state.study_loglik is not None:
        return state.study_loglik
    return np.asarray(loglik(state.kappa, state.lam), float)


def mh_update_kappa(state: HyperState, loglik: Callable, rng: np.random.Generator, kinds):
    """One MH step for every kappa_s; returns (new state, per-study accept flags).

    ``loglik(kappa, lam)`` must return the per-study log-likelihood vector.
    Invalid Gamma proposal parameters are rejected outright.
    """
    kinds = np.asarray(kinds, dtype=int)
    ll = _ensure_loglik(state, loglik)
    new, new_ll, accept, _ = _study_block(
        state.kappa, state.lam, state.a, state.b, kappa_proposal_variance, kinds, loglik, ll, rng, True
    )
    return replace(state, kappa=new, study_loglik=new_ll), accept


def mh_update_lambda(state: HyperState, loglik: Callable, rng: np.random.Generator, kinds):
    """As :func:`mh_update_kappa` for the scale parameters."""
    kinds = np.asarray(kinds, dtype=int)
    ll = _ensure_loglik(state, loglik)
    new, new_ll, accept, _ = _study_block(
        state.lam, state.kappa, state.c, state.d, lambda_proposal_variance, kinds, loglik, ll, rng, False
    )
    return replace(state, lam=new, study_loglik=new_ll), accept


def _log_conditional(which, value, S, shape, scale, sum_log, sum_x):
    """Log full conditional of a hyper-parameter up to a constant; broadcasts over slots."""
    if S == 0:
        return np.zeros_like(value)
    if which in "ac":
        return -S * (gammaln(value) + value * np.log(scale)) + (value - 1.0) * sum_log
    return -S * shape * np.log(value) - sum_x / value


def hyper_log_conditional(state: HyperState, which: str, value: float) -> float:
    """Log full conditional of one hyper-parameter at ``value`` (inside its bounds), up to a constant."""
    x = state.kappa if which in "ab" else state.lam
    shape, scale = (state.a, state.b) if which in "ab" else (state.c, state.d)
    return float(_log_conditional(which, np.float64(value), state.n_studies, shape, scale,
                                  float(np.sum(np.log(x))), float(np.sum(x))))


def _hyper_block(h: dict, which: str, kappa, lam, config: HyperPriorConfig, rng):
    lo, hi = config.bounds(which)
    w = config.window(which)
    x = h[which]
    left = np.maximum(lo, x - w)
    right = np.minimum(x + w, hi)
    prop = rng.uniform(left, right)
    u = rng.random(x.shape)
    back_left = np.maximum(lo, prop - w)
    back_right = np.minimum(prop + w, hi)
    vals = kappa if which in "ab" else lam
    S = vals.shape[1]
    shape, scale = (h["a"], h["b"]) if which in "ab" else (h["c"], h["d"])
    sum_log = np.sum(np.log(vals), axis=1) if S else 0.0
    sum_x = np.sum(vals, axis=1) if S else 0.0
    if which in "ac":
        new_c = _log_conditional(which, prop, S, shape, scale, sum_log, sum_x)
        old_c = _log_conditional(which, x, S, shape, scale, sum_log, sum_x)
    else:
        new_c = _log_conditional(which, prop, S, shape, prop, sum_log, sum_x)
        old_c = _log_conditional(which, x, S, shape, x, sum_log, sum_x)
    # q(x | prop) / q(prop | x) = (right - left) / (back_right - back_left)
    log_ratio = new_c - old_c + np.log(right - left) - np.log(back_right - back_left)
    with np.errstate(divide="ignore"):
        accept = (prop > lo) & (prop < hi) & (np.log(u) < log_ratio)
    h[which] = np.where(accept, prop, x)
    return accept


def mh_update_hyper(state: HyperState, which: str, config: HyperPriorConfig, rng: np.random.Generator):
    """Clipped-uniform-window MH step for one of a, b, c, d; returns (new state, accepted)."""
    h = {n: np.array([getattr(state, n)], dtype=float) for n in "abcd"}
    accept = _hyper_block(h, which, state.kappa[None, :], state.lam[None, :], config, rng)
    if accept[0]:
        return replace(state, **{which: float(h[which][0])}), True
    return state, False


# --- chains ---------------------------------------------------------------------

@dataclass
class ChainTrace:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    kappa: np.ndarray  # (draws, S)
    lam: np.ndarray  # (draws, S)
    penetrance: np.ndarray  # (draws, len(ages))
    acceptance: dict[str, float]
    rejected_invalid: int = 0

    def parameter(self, name: str) -> np.ndarray:
        if name in ("a", "b", "c", "d"):
            return getattr(self, name)
        if name == "kappa":
            return self.a * self.b
        if name == "lambda":
            return self.c * self.d
        kind, _, idx = name.partition("_")
        if kind == "kappa":
            return self.kappa[:, int(idx)]
        if kind == "lambda":
            return self.lam[:, int(idx)]
        raise KeyError(name)


@dataclass
class PosteriorDraws:
    chains: list[ChainTrace]
    ages: tuple[float, ...]
    iterations: int
    burn_in: int
    thin: int
    seed: int | None
    study_ids: tuple[str, ...] = ()

    @property
    def n_studies(self) -> int:
        return len(self.study_ids)

    def parameter_names(self) -> list[str]:
        names = ["a", "b", "c", "d"]
        names += [f"kappa_{i}" for i in range(self.n_studies)]
        names += [f"lambda_{i}" for i in range(self.n_studies)]
        return names

    def pooled(self, name: str) -> np.ndarray:
        return np.concatenate([ch.parameter(name) for ch in self.chains])

    @property
    def penetrance_samples(self) -> np.ndarray:
        return np.concatenate([ch.penetrance for ch in self.chains], axis=0)

    def acceptance_rates(self) -> dict[str, float]:
        keys = self.chains[0].acceptance.keys()
        return {k: float(np.mean([ch.acceptance[k] for ch in self.chains])) for k in keys}

    def gelman_rubin(self) -> dict[str, float]:
        if len(self.chains) < 2:
            raise ValueError("Gelman-Rubin needs at least two chains")
        return {
            name: gelman_rubin(np.stack([ch.parameter(name) for ch in self.chains]))
            for name in self.parameter_names()
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "chain", "a", "b", "c", "d", "kappa", "lambda"]
                   + [f"penetrance_{_fmt_age(x)}" for x in self.ages])
        for ci, ch in enumerate(self.chains):
            for t in range(len(ch.a)):
                it = self.burn_in + (t + 1) * self.thin
                vals = [ch.a[t], ch.b[t], ch.c[t], ch.d[t], ch.a[t] * ch.b[t], ch.c[t] * ch.d[t], *ch.penetrance[t]]
                w.writerow([it, ci] + [repr(float(v)) for v in vals])
        return buf.getvalue()


def _fmt_age(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else str(x)


def initial_state(n_studies: int, config: HyperPriorConfig, rng: np.random.Generator | None) -> HyperState:
    """Midpoint start when ``rng`` is None, otherwise hyper-parameters drawn uniformly within bounds."""
    if rng is None:
        h = config.midpoint()
    else:
        h = {n: float(rng.uniform(*config.bounds(n))) for n in "abcd"}
    return HyperState(
        a=h["a"], b=h["b"], c=h["c"], d=h["d"],
        kappa=np.full(n_studies, h["a"] * h["b"]),
        lam=np.full(n_studies, h["c"] * h["d"]),
    )


def run_chains(
    loglik: Callable,
    kinds,
    config: HyperPriorConfig,
    iterations: int,
    burn_in: int,
    rng: np.random.Generator,
    starts: Sequence[HyperState],
    ages: Sequence[float] = DEFAULT_AGES,
    thin: int = 1,
) -> list[ChainTrace]:
    """Advance several independent chains in lock-step.

    Chain ``i`` targets the posterior defined by slot ``i`` of ``loglik``,
    which maps (slots, studies) arrays of kappa and lambda to per-study
    log-likelihoods of the same shape.  Every ``thin``-th post-burn-in sweep
    is kept.
    """
    if not iterations > burn_in >= 0:
        raise ValueError("need iterations > burn_in >= 0")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    kinds = np.asarray(kinds, dtype=int)
    S = len(kinds)
    C = len(starts)
    h = {n: np.array([getattr(st, n) for st in starts], dtype=float) for n in "abcd"}
    kappa = np.array([st.kappa for st in starts], dtype=float).reshape(C, S)
    lam = np.array([st.lam for st in starts], dtype=float).reshape(C, S)
    ages_arr = np.asarray(ages, float)
    n_keep = (iterations - burn_in) // thin
    out = {n: np.empty((C, n_keep)) for n in "abcd"}
    kappa_out = np.empty((C, n_keep, S))
    lam_out = np.empty((C, n_keep, S))
    pen_out = np.empty((C, n_keep, len(ages_arr)))
    acc = {n: np.zeros(C) for n in ("kappa", "lambda", "a", "b", "c", "d")}
    invalid = 0
    last_accept = np.zeros(C, dtype=int)
    ll = np.asarray(loglik(kappa, lam), float).reshape(C, S) if S else np.zeros((C, 0))
    if not np.all(np.isfinite(ll)):
        raise MCMCStallError("starting values give a degenerate likelihood")
    k = 0
    for it in range(1, iterations + 1):
        any_accept = np.zeros(C, dtype=bool)
        if S:
            kappa, ll, accept, bad = _study_block(
                kappa, lam, h["a"][:, None], h["b"][:, None], kappa_proposal_variance, kinds, loglik, ll, rng, True)
            acc["kappa"] += accept.sum(axis=1)
            any_accept |= accept.any(axis=1)
            invalid += bad
            lam, ll, accept, bad = _study_block(
                lam, kappa, h["c"][:, None], h["d"][:, None], lambda_proposal_variance, kinds, loglik, ll, rng, False)
            acc["lambda"] += accept.sum(axis=1)
            any_accept |= accept.any(axis=1)
            invalid += bad
        for name in "abcd":
            accept = _hyper_block(h, name, kappa, lam, config, rng)
            acc[name] += accept
            any_accept |= accept
        last_accept[any_accept] = it
        if np.any(it - last_accept >= STALL_SWEEPS):
            raise MCMCStallError(f"no proposal accepted in {STALL_SWEEPS} sweeps (iteration {it})")
        if it > burn_in and (it - burn_in) % thin == 0:
            for n in "abcd":
                out[n][:, k] = h[n]
            kappa_out[:, k] = kappa
            lam_out[:, k] = lam
            pen_out[:, k] = weibull_cdf_values(ages_arr[None, :], (h["a"] * h["b"])[:, None], (h["c"] * h["d"])[:, None])
            k += 1
    traces = []
    for ci in range(C):
        rates = {
            "kappa": acc["kappa"][ci] / (iterations * S) if S else float("nan"),
            "lambda": acc["lambda"][ci] / (iterations * S) if S else float("nan"),
        }
        rates.update({n: acc[n][ci] / iterations for n in "abcd"})
        traces.append(ChainTrace(out["a"][ci], out["b"][ci], out["c"][ci], out["d"][ci],
                                 kappa_out[ci], lam_out[ci], pen_out[ci], rates, invalid))
    return traces


def chain_starts(n_studies: int, chains: int, config: HyperPriorConfig, rng: np.random.Generator) -> list[HyperState]:
    """Chain 0 at the hyper-prior midpoints, the rest drawn uniformly within the bounds."""
    return [initial_state(n_studies, config, None if i == 0 else rng) for i in range(chains)]


def run_mcmc(
    studies,
    baseline=None,
    config: HyperPriorConfig | None = None,
    iterations: int = 30_000,
    burn_in: int = 15_000,
    chains: int = 2,
    seed: int | None = None,
    ages: Sequence[float] = DEFAULT_AGES,
    thin: int = 1,
) -> PosteriorDraws:
    """Metropolis-within-Gibbs posterior sampling for the hierarchical model.

    ``studies`` is a list of :class:`LikelihoodInputs` (used with
    ``baseline``) or a single-slot :class:`~penmeta.likelihood.StudyBatch`.
    All chains run in lock-step from one generator seeded with ``seed``.
    """
    from .likelihood import StudyBatch

    config = config or HyperPriorConfig()
    if chains < 1:
        raise ValueError("need at least one chain")
    studies = studies.studies if isinstance(studies, StudyBatch) else list(studies)
    batch = StudyBatch([studies] * chains, baseline)
    rng = np.random.default_rng(seed)
    starts = chain_starts(batch.size, chains, config, rng)
    traces = run_chains(batch.loglik, proposal_kinds(studies), config, iterations, burn_in, rng, starts, ages, thin)
    return PosteriorDraws(
        chains=traces,
        ages=tuple(float(x) for x in ages),
        iterations=iterations,
        burn_in=burn_in,
        thin=thin,
        seed=seed,
        study_ids=tuple(s.id for s in studies),
    )


@dataclass(frozen=True)
class PenetranceSummary:
    ages: tuple[float, ...]
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def rows(self):
        return [(a, float(m), float(l), float(u)) for a, m, l, u in zip(self.ages, self.mean, self.lower, self.upper)]


def consensus_penetrance(draws: PosteriorDraws, ages: Sequence[float] | None = None, level: float = 0.95) -> PenetranceSummary:
    """Posterior mean and equal-tailed interval of the Weibull(a*b, c*d) cdf at each age.

    Draws from all chains are pooled.
    """
    if ages is None:
        samples = draws.penetrance_samples
        ages = draws.ages
    else:
        shape = draws.pooled("kappa")
        scale = draws.pooled("lambda")
        samples = weibull_cdf_values(np.asarray(ages, float)[None, :], shape[:, None], scale[:, None])
    if samples.shape[0] == 0:
        raise ValueError("no posterior draws")
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(samples, [tail, 100.0 - tail], axis=0)
    return PenetranceSummary(tuple(float(a) for a in ages), samples.mean(axis=0), lo, hi)


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor for one parameter.

    ``chains`` has shape (n_chains, n_draws).  Uses
    ``V = (n - 1)/n * W + B/n`` and returns ``sqrt(V / W)``.
    """
    x = np.asarray(chains, float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("Gelman-Rubin needs at least two chains of equal length")
    m, n = x.shape
    if n < 2:
        raise ValueError("chains need at least two draws")
    W = float(np.mean(np.var(x, axis=1, ddof=1)))
    B = n * float(np.var(np.mean(x, axis=1), ddof=1))
    V = (n - 1) / n * W + B / n
    if W == 0:
        return 1.0 if B == 0 else math.inf
    return math.sqrt(V / W)
