"""Simulated factor-level combinations (FLCs) with exact conditional truth.

Uncensored FLCs are numbered 1..108; censored FLCs are labelled c1..c96.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, special, stats

from .data import ColumnSpec, Dataset

SIGMA = 1.2
WEIBULL_SHAPE = 2.7
WEIBULL_LAMBDA = 0.8
TEST_SIZE = 1000

R2_TARGETS = {"high": 0.75, "medium": 0.50, "low": 0.25}
COV_TYPES = ("categorical", "continuous", "mixed")
SIGNALS = ("even", "concentrated")
SNRS = ("high", "medium", "low")

# marginal distributions of the categorical covariates X1..X10
CATEGORICAL_PROBS = (
    (0.5, 0.5),
    (0.6, 0.4),
    (0.3, 0.7),
    (0.3, 0.7),
    (0.2, 0.25, 0.55),
    (0.2, 0.35, 0.45),
    (0.6, 0.4),
    (0.2, 0.35, 0.45),
    (0.55, 0.45),
    (0.45, 0.55),
)

_HIGH_BETA = {
    ("categorical", "even", 4): 0.64 * np.array([5, 4, -2.5, -2.3]),
    ("categorical", "even", 10): 0.445 * np.array(
        [5, 4, -2.5, -2.3, -3, 2, -1.5, 1, -2, -3, 2.2, -0.8, 2.5]),
    ("categorical", "concentrated", 4): np.array([4.5, 0, 0, 0]),
    ("categorical", "concentrated", 10): np.array([4.4, 1] + [0] * 11),
    ("continuous", "even", 4): np.array([5, 4, -2.5, -3.7]),
    ("continuous", "even", 10): 0.73 * np.array([5, 4, -2.5, -4, -5, 0.5, 1.5, -3, 3, 2.5]),
    ("continuous", "concentrated", 4): np.array([7.8, 0, 0, 0]),
    ("continuous", "concentrated", 10): np.array([7.6, 2] + [0] * 8),
    ("mixed", "even", 4): 0.66 * np.array([5, 4, -2.5, -3.7]),
    ("mixed", "even", 10): 0.515 * np.array([5, 4, -2.5, -2.3, -3, 2, 0.5, 1.5, -3, 3, 2.5]),
    ("mixed", "concentrated", 4): np.array([4.5, 0, 0, 0]),
    ("mixed", "concentrated", 10): np.array([4.4, 0, 0, 0, 0, 0, 1.7, 0, 0, 0, 0]),
}

# (medium, low) multipliers of the high-SNR vector; each even/concentrated pair shares one set
_SNR_MULT = {
    ("categorical", "even"): (0.575, 0.33),
    ("categorical", "concentrated"): (0.58, 0.335),
    ("continuous", "even"): (0.58, 0.335),
    ("continuous", "concentrated"): (0.575, 0.335),
    ("mixed", "even"): (0.575, 0.33),
    ("mixed", "concentrated"): (0.575, 0.33),
}


def coefficients(cov_type: str, signal: str, p: int, snr: str) -> np.ndarray:
    """Tabulated linear-predictor coefficients for one setting."""
    b = _HIGH_BETA[(cov_type, signal, p)].astype(float)
    if snr == "high":
        return b
    med, low = _SNR_MULT[(cov_type, signal)]
    return (med if snr == "medium" else low) * b


def covariate_columns(cov_type: str, p: int) -> tuple[ColumnSpec, ...]:
    if cov_type == "categorical":
        n_cat = p
    elif cov_type == "continuous":
        n_cat = 0
    else:
        n_cat = p // 2
    cols = [ColumnSpec(f"x{j + 1}", "categorical", len(CATEGORICAL_PROBS[j])) for j in range(n_cat)]
    cols += [ColumnSpec(f"x{j + 1}") for j in range(n_cat, p)]
    return tuple(cols)


def design_matrix(columns, X) -> np.ndarray:
    """Dummy-encode categorical columns (level 0 is the reference)."""
    X = np.atleast_2d(np.asarray(X, float))
    parts = []
    for j, c in enumerate(columns):
        if c.is_categorical:
            for lev in range(1, c.levels):
                parts.append((X[:, j] == lev).astype(float))
        else:
            parts.append(X[:, j])
    return np.column_stack(parts)


def sample_covariates(columns, m: int, rng: np.random.Generator) -> np.ndarray:
    X = np.empty((m, len(columns)))
    for j, c in enumerate(columns):
        if c.is_categorical:
            X[:, j] = rng.choice(c.levels, size=m, p=CATEGORICAL_PROBS[j])
        else:
            X[:, j] = rng.uniform(size=m)
    return X


@dataclass(frozen=True)
class FLCConfig:
    """One simulation setting.

    For Weibull responses ``beta`` is the tabulated vector and
    ``beta_scale`` the multiplier that brings the pseudo-R^2 to target;
    the linear predictor uses ``beta_scale * beta``.
    """

    label: str
    n: int
    p: int
    cov_type: str
    snr: str
    signal: str
    family: str = "normal"
    censoring: float = 0.0
    beta: np.ndarray = field(default=None, compare=False)
    beta_scale: float = 1.0
    sigma: float = SIGMA
    shape: float = WEIBULL_SHAPE
    lam: float = WEIBULL_LAMBDA

    def __post_init__(self):
        if self.n not in (300, 1200, 2500):
            raise ValueError("n must be 300, 1200 or 2500")
        if self.p not in (4, 10):
            raise ValueError("p must be 4 or 10")
        if self.cov_type not in COV_TYPES or self.signal not in SIGNALS or self.snr not in SNRS:
            raise ValueError("unknown factor level")
        if self.family not in ("normal", "weibull"):
            raise ValueError("family must be normal or weibull")
        if self.censoring not in (0.0, 0.1, 0.3):
            raise ValueError("censoring target must be 0, 0.10 or 0.30")
        if self.family == "normal" and self.censoring:
            raise ValueError("normal responses are never censored")
        b = self.beta
        if b is None:
            b = coefficients(self.cov_type, self.signal, self.p, self.snr)
        b = np.asarray(b, float)
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)
        width = sum(max(c.levels - 1, 1) for c in self.columns)
        if b.shape != (width,):
            raise ValueError(f"beta has length {b.size} but the design has {width} columns")

    @property
    def r2_target(self) -> float:
        return R2_TARGETS[self.snr]

    @property
    def columns(self) -> tuple[ColumnSpec, ...]:
        return covariate_columns(self.cov_type, self.p)

    @property
    def effective_beta(self) -> np.ndarray:
        return self.beta_scale * self.beta

    @property
    def censored(self) -> bool:
        return self.family == "weibull"

    def linear_predictor(self, X) -> np.ndarray:
        return design_matrix(self.columns, X) @ self.effective_beta

    def to_dict(self) -> dict:
        return {
            "label": self.label, "n": self.n, "p": self.p, "cov_type": self.cov_type,
            "snr": self.snr, "signal": self.signal, "family": self.family,
            "censoring": self.censoring, "beta": self.beta.tolist(), "beta_scale": self.beta_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FLCConfig":
        d = dict(d)
        d["beta"] = np.asarray(d["beta"], float) if d.get("beta") is not None else None
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TrueConditional:
    """Exact conditional distribution of T given x for each row of a dataset."""

    family: str
    eta: np.ndarray
    sigma: float = SIGMA
    shape: float = WEIBULL_SHAPE
    lam: float = WEIBULL_LAMBDA

    @property
    def n(self) -> int:
        return self.eta.size

    @property
    def location(self) -> np.ndarray:
        """Mean (normal) or scale (Weibull) per row."""
        return self.eta if self.family == "normal" else self.lam * np.exp(self.eta)

    def cdf(self, values, rows=None) -> np.ndarray:
        loc = self.location if rows is None else self.location[rows]
        v = np.asarray(values, float)
        if self.family == "normal":
            return stats.norm.cdf((v - loc) / self.sigma)
        with np.errstate(invalid="ignore"):
            z = np.where(v > 0, np.maximum(v, 0) / loc, 0.0)
            out = -np.expm1(-(z ** self.shape))
        return np.where(np.isposinf(v), 1.0, out)

    def quantile(self, tau: float, rows=None) -> np.ndarray:
        loc = self.location if rows is None else self.location[rows]
        if self.family == "normal":
            return loc + self.sigma * stats.norm.ppf(tau)
        return loc * (-math.log1p(-tau)) ** (1.0 / self.shape)

    def mean(self) -> np.ndarray:
        if self.family == "normal":
            return self.eta.copy()
        return self.location * special.gamma(1 + 1 / self.shape)

    def variance(self) -> np.ndarray:
        if self.family == "normal":
            return np.full(self.n, self.sigma ** 2)
        g1 = special.gamma(1 + 1 / self.shape)
        g2 = special.gamma(1 + 2 / self.shape)
        return self.location ** 2 * (g2 - g1 ** 2)

    def to_dict(self) -> dict:
        d = {"family": self.family}
        if self.family == "normal":
            d.update(sigma=self.sigma, mean=self.eta.tolist())
        else:
            d.update(shape=self.shape, scale=self.location.tolist())
        return d


def true_coverage(tc: TrueConditional, x, value) -> np.ndarray | float:
    """F_T(value | x) for the test row(s) x (index, slice or None for all)."""
    out = tc.cdf(value, None if x is None else x)
    return float(out) if np.ndim(out) == 0 else out


def truth_for(config: FLCConfig, X) -> TrueConditional:
    return TrueConditional(
        "normal" if config.family == "normal" else "weibull",
        config.linear_predictor(X), config.sigma, config.shape, config.lam,
    )


# -- SNR ------------------------------------------------------------------------------


def _pseudo_r2(eta: np.ndarray, shape: float, lam: float) -> float:
    g1 = special.gamma(1 + 1 / shape)
    g2 = special.gamma(1 + 2 / shape)
    # scale-free: work with exp(eta - max) to avoid overflow
    s = np.exp(eta - eta.max())
    v_mean = g1 ** 2 * s.var()
    e_var = (g2 - g1 ** 2) * np.mean(s ** 2)
    tot = v_mean + e_var
    return float(v_mean / tot) if tot > 0 else 0.0


def implied_r2(config: FLCConfig, draws: int = 10**6, seed: int = 20240) -> float:
    """Monte Carlo R^2 (normal) or pseudo-R^2 (Weibull) over the covariate distribution."""
    rng = np.random.default_rng(seed)
    eta = config.linear_predictor(sample_covariates(config.columns, draws, rng))
    if config.family == "normal":
        v = eta.var()
        return float(v / (v + config.sigma ** 2))
    return _pseudo_r2(eta, config.shape, config.lam)


def verify_snr(config: FLCConfig, draws: int = 10**6, seed: int = 20240) -> float:
    """Achieved SNR = R^2 / (1 - R^2)."""
    r2 = implied_r2(config, draws, seed)
    return r2 / (1.0 - r2)


@functools.lru_cache(maxsize=None)
def weibull_beta_scale(cov_type: str, signal: str, p: int, snr: str, draws: int = 200_000) -> float:
    """Multiplier on the high-SNR vector giving the target pseudo-R^2."""
    cols = covariate_columns(cov_type, p)
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, p, COV_TYPES.index(cov_type)]))
    base = design_matrix(cols, sample_covariates(cols, draws, rng)) @ coefficients(cov_type, signal, p, "high")
    target = R2_TARGETS[snr]
    return float(optimize.brentq(lambda c: _pseudo_r2(c * base, WEIBULL_SHAPE, WEIBULL_LAMBDA) - target,
                                 1e-6, 5.0, xtol=1e-10))


# -- censoring -----------------------------------------------------------------------------


class CalibrationError(RuntimeError):
    pass


_RATE_CACHE: dict = {}


def _censoring_rate(config: FLCConfig, target: float, draws: int, seed: int) -> float:
    if target <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    tc = truth_for(config, sample_covariates(config.columns, draws, rng))
    T = tc.location * rng.weibull(config.shape, draws)

    # P(C < T) for C ~ Exp(rate), averaged over the simulated T
    def frac(rate):
        return float(np.mean(-np.expm1(-rate * T))) - target

    hi = 1.0 / np.median(T)
    for _ in range(200):
        if frac(hi) > 0:
            break
        hi *= 2.0
    else:
        raise CalibrationError("could not bracket the censoring rate")
    try:
        return float(optimize.brentq(frac, 0.0, hi, xtol=1e-14, rtol=1e-12, maxiter=500))
    except (RuntimeError, ValueError) as e:
        raise CalibrationError(str(e)) from e


def calibrate_censoring(config: FLCConfig, target: float | None = None, draws: int = 10**5,
                        seed: int = 7) -> float:
    """Exponential censoring rate whose average censoring proportion equals ``target``."""
    if config.family != "weibull":
        raise ValueError("censoring applies to survival configs only")
    if target is None:
        target = config.censoring
    if not 0.0 <= target < 1.0:
        raise ValueError("target must lie in [0, 1)")
    key = (tuple(config.effective_beta), config.cov_type, config.p, config.shape, config.lam,
           float(target), int(draws), int(seed))
    if key not in _RATE_CACHE:
        _RATE_CACHE[key] = _censoring_rate(config, float(target), int(draws), int(seed))
    return _RATE_CACHE[key]


def censoring_proportion(config: FLCConfig, rate: float, draws: int = 10**5, seed: int = 11) -> float:
    """Fraction censored among ``draws`` fresh (T, C) pairs."""
    rng = np.random.default_rng(seed)
    tc = truth_for(config, sample_covariates(config.columns, draws, rng))
    T = tc.location * rng.weibull(config.shape, draws)
    if rate <= 0:
        return 0.0
    C = rng.exponential(1.0 / rate, draws)
    return float(np.mean(C < T))


# -- table and generation ----------------------------------------------------------------------


def builtin_flc_table() -> list[FLCConfig]:
    """108 uncensored settings (labels '1'..'108') then 96 censored ('c1'..'c96')."""
    out = []
    k = 0
    for cov in COV_TYPES:
        for sig in SIGNALS:
            for snr in SNRS:
                for p in (4, 10):
                    for n in (300, 1200, 2500):
                        k += 1
                        out.append(FLCConfig(str(k), n, p, cov, snr, sig))
    k = 0
    for cens in (0.1, 0.3):
        for cov in ("categorical", "continuous"):
            for sig in SIGNALS:
                for snr in SNRS:
                    for p in (4, 10):
                        for n in (300, 1200):
                            k += 1
                            out.append(FLCConfig(
                                f"c{k}", n, p, cov, snr, sig, family="weibull", censoring=cens,
                                beta=coefficients(cov, sig, p, "high"),
                                beta_scale=weibull_beta_scale(cov, sig, p, snr),
                            ))
    return out


@functools.lru_cache(maxsize=1)
def _table_index() -> dict:
    return {c.label: c for c in builtin_flc_table()}


def get_flc(label) -> FLCConfig:
    """Look up a built-in FLC by label ('37', 37 or 'c5')."""
    key = str(label).strip().lower()
    try:
        return _table_index()[key]
    except KeyError:
        raise KeyError(f"unknown FLC {label!r}") from None


def generate(config: FLCConfig, seed: int, test_size: int = TEST_SIZE):
    """Draw (train, test, truth) for one replicate.

    Censored configs censor the training set only; the test set holds
    failure times (all events observed). ``truth`` describes the test rows.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cols = config.columns
    rate = calibrate_censoring(config) if config.censored else 0.0

    def draw(m):
        X = sample_covariates(cols, m, rng)
        tc = truth_for(config, X)
        if config.family == "normal":
            y = tc.eta + config.sigma * rng.standard_normal(m)
        else:
            y = tc.location * rng.weibull(config.shape, m)
        return X, y, tc

    Xtr, ytr, _ = draw(config.n)
    if config.censored:
        C = rng.exponential(1.0 / rate, config.n) if rate > 0 else np.full(config.n, np.inf)
        events = (ytr <= C).astype(np.int8)
        train = Dataset(Xtr, np.minimum(ytr, C), cols, events=events)
    else:
        train = Dataset(Xtr, ytr, cols)
    Xte, yte, truth = draw(test_size)
    test = Dataset(Xte, yte, cols, events=np.ones(test_size, np.int8) if config.censored else None)
    return train, test, truth


def with_overrides(config: FLCConfig, **kw) -> FLCConfig:
    return replace(config, **kw)
