"""Tree-structured Parzen Estimator search over the dense-head and
optimiser hyperparameters.

Trials with an objective in the top ``gamma`` quantile form the "good"
set. Each dimension gets a Parzen density for the good set (``l``) and the
rest (``g``); candidates drawn from ``l`` are ranked by ``log l - log g``
summed over dimensions. Continuous dimensions use truncated Gaussian
kernels whose bandwidth is the larger gap to a sorted neighbour;
categorical ones use smoothed frequencies.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NoSuccessfulTrialError

logger = logging.getLogger(__name__)

GAMMA = 0.25
N_CANDIDATES = 24
N_STARTUP = 10
PRIOR_WEIGHT = 1.0


@dataclass(frozen=True)
class SearchSpace:
    categorical: Mapping[str, tuple] = field(
        default_factory=lambda: {
            "num_dense_layers": (1, 2, 3),
            "units": (16, 32, 64, 128, 256, 512, 1024),
            "optimizer": ("adam", "sgd"),
        }
    )
    # name -> (low, high, log_scale)
    continuous: Mapping[str, tuple[float, float, bool]] = field(
        default_factory=lambda: {"learning_rate": (0.0005, 0.9, True)}
    )

    def __post_init__(self):
        for name, choices in self.categorical.items():
            if len(choices) == 0:
                raise ConfigError(f"categorical dimension {name!r} has no choices")
        for name, (lo, hi, log) in self.continuous.items():
            if not (lo < hi) or (log and lo <= 0):
                raise ConfigError(f"continuous dimension {name!r} has invalid bounds ({lo}, {hi})")
        if not self.categorical and not self.continuous:
            raise ConfigError("search space has no dimensions")

    def contains(self, config: Mapping[str, Any]) -> bool:
        for name, choices in self.categorical.items():
            if config.get(name) not in choices:
                return False
        for name, (lo, hi, _) in self.continuous.items():
            v = config.get(name)
            if v is None or not (lo <= v <= hi):
                return False
        return True


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    objective: float | None
    status: str = "ok"
    error: str | None = None

    def __post_init__(self):
        if self.status not in ("ok", "failed"):
            raise ValueError(f"unknown trial status {self.status!r}")
        if self.status == "ok" and (self.objective is None or not math.isfinite(self.objective)):
            raise ValueError("ok trials need a finite objective")

    def to_json(self) -> str:
        return json.dumps(
            {"trial_id": self.trial_id, "config": self.config, "objective": self.objective,
             "status": self.status, "error": self.error},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        d = json.loads(line)
        return cls(int(d["trial_id"]), dict(d["config"]), d.get("objective"), d.get("status", "ok"), d.get("error"))


def _to_internal(value: float, lo: float, hi: float, log: bool):
    return (math.log(value), math.log(lo), math.log(hi)) if log else (value, lo, hi)


def sample_prior(space: SearchSpace, rng: np.random.Generator) -> dict:
    config = {}
    for name, choices in space.categorical.items():
        config[name] = _native(choices[int(rng.integers(len(choices)))])
    for name, (lo, hi, log) in space.continuous.items():
        if log:
            config[name] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        else:
            config[name] = float(rng.uniform(lo, hi))
        config[name] = min(max(config[name], lo), hi)
    return config


def _native(v):
    return v.item() if isinstance(v, np.generic) else v


class ParzenEstimator:
    """Truncated Gaussian mixture over ``[low, high]`` with one kernel per
    observation plus a broad prior kernel."""

    def __init__(self, observations: Sequence[float], low: float, high: float, prior_weight: float = PRIOR_WEIGHT):
        self.low, self.high = low, high
        span = high - low
        obs = np.asarray(observations, dtype=np.float64)
        prior_mu = 0.5 * (low + high)
        mus = np.append(obs, prior_mu)
        order = np.argsort(mus, kind="stable")
        sorted_mus = mus[order]
        left = np.diff(np.concatenate([[low], sorted_mus]))
        right = np.diff(np.concatenate([sorted_mus, [high]]))
        sigma_sorted = np.maximum(left, right)
        sigmas = np.empty_like(sigma_sorted)
        sigmas[order] = sigma_sorted
        min_sigma = span / min(100.0, len(mus) + 1.0)
        sigmas = np.clip(sigmas, min_sigma, span)
        sigmas[-1] = span  # prior kernel
        weights = np.ones(len(mus))
        weights[-1] = prior_weight
        self.mus = mus
        self.sigmas = sigmas
        self.weights = weights / weights.sum()
        self._mass = _normal_cdf((high - mus) / sigmas) - _normal_cdf((low - mus) / sigmas)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comps = rng.choice(len(self.mus), size=n, p=self.weights)
        out = np.empty(n)
        for i, c in enumerate(comps):
            for _ in range(100):
                x = rng.normal(self.mus[c], self.sigmas[c])
                if self.low <= x <= self.high:
                    break
            else:
                x = rng.uniform(self.low, self.high)
            out[i] = x
        return out

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.mus) / self.sigmas
        comp = -0.5 * z**2 - np.log(self.sigmas * math.sqrt(2 * math.pi) * self._mass)
        return _logsumexp(comp + np.log(self.weights), axis=1)


_erf = np.vectorize(math.erf)


def _normal_cdf(z):
    return 0.5 * (1.0 + _erf(np.asarray(z) / math.sqrt(2.0)))


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def _categorical_probs(values: Sequence, choices: tuple, prior_weight: float = PRIOR_WEIGHT) -> np.ndarray:
    counts = np.array([sum(1 for v in values if v == c) for c in choices], dtype=np.float64)
    counts += prior_weight
    return counts / counts.sum()


def split_history(history: Sequence[TrialRecord], gamma: float = GAMMA):
    """Partition completed trials into (good, bad) by descending objective."""
    done = [r for r in history if r.status == "ok"]
    ranked = sorted(done, key=lambda r: -r.objective)
    n_good = min(len(ranked), max(1, math.ceil(gamma * len(ranked)))) if ranked else 0
    return ranked[:n_good], ranked[n_good:]


def tpe_suggest(
    history: Sequence[TrialRecord],
    space: SearchSpace = SearchSpace(),
    seed: int | Sequence[int] = 0,
    gamma: float = GAMMA,
    n_candidates: int = N_CANDIDATES,
    n_startup: int = N_STARTUP,
) -> dict:
    """Propose the next configuration. Falls back to a prior sample until
    ``n_startup`` trials have completed; failed trials are ignored."""
    rng = np.random.default_rng(seed)
    good, bad = split_history(history, gamma)
    if len(good) + len(bad) < n_startup or not bad:
        return sample_prior(space, rng)

    candidates: list[dict] = [{} for _ in range(n_candidates)]
    score = np.zeros(n_candidates)
    for name, choices in space.categorical.items():
        p_good = _categorical_probs([r.config[name] for r in good], choices)
        p_bad = _categorical_probs([r.config[name] for r in bad], choices)
        picks = rng.choice(len(choices), size=n_candidates, p=p_good)
        for cand, k in zip(candidates, picks):
            cand[name] = _native(choices[k])
        score += np.log(p_good[picks]) - np.log(p_bad[picks])
    for name, (lo, hi, log) in space.continuous.items():
        def internal(r):
            return _to_internal(r.config[name], lo, hi, log)[0]

        _, ilo, ihi = _to_internal(lo, lo, hi, log)
        l_est = ParzenEstimator([internal(r) for r in good], ilo, ihi)
        g_est = ParzenEstimator([internal(r) for r in bad], ilo, ihi)
        xs = l_est.sample(rng, n_candidates)
        score += l_est.log_pdf(xs) - g_est.log_pdf(xs)
        for cand, x in zip(candidates, xs):
            value = math.exp(x) if log else float(x)
            cand[name] = min(max(value, lo), hi)
    return candidates[int(np.argmax(score))]


def read_trials(path: str | os.PathLike) -> list[TrialRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [TrialRecord.from_json(line) for line in path.read_text().splitlines() if line.strip()]


def best_so_far(records: Sequence[TrialRecord]) -> list[float]:
    out, best = [], -math.inf
    for r in records:
        if r.status == "ok":
            best = max(best, r.objective)
        out.append(best)
    return out


def _run_trial(trial_id: int, config: dict, objective: Callable[[dict], float]) -> TrialRecord:
    try:
        value = float(objective(dict(config)))
    except Exception as exc:  # a failing trial must not kill the search
        logger.warning("trial %d failed: %s", trial_id, exc)
        return TrialRecord(trial_id, config, None, "failed", f"{type(exc).__name__}: {exc}")
    if not math.isfinite(value):
        return TrialRecord(trial_id, config, None, "failed", f"non-finite objective {value}")
    return TrialRecord(trial_id, config, value)


def run_hpo(
    space: SearchSpace,
    budget: int,
    objective: Callable[[dict], float],
    seed: int = 0,
    log_path: str | os.PathLike | None = None,
    jobs: int = 1,
    **tpe_kwargs,
) -> tuple[dict, list[TrialRecord]]:
    """Maximise ``objective`` over ``space`` with ``budget`` trials.

    Trial ``i`` draws its suggestion from a generator seeded with
    ``(seed, i)``, so a run resumed from ``log_path`` continues exactly as an
    uninterrupted one would. With ``jobs > 1`` trials run in waves of
    ``jobs``; every suggestion in a wave sees only trials finished before it
    started.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    records = read_trials(log_path) if log_path is not None else []
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    jobs = max(1, jobs)

    while len(records) < budget:
        start = len(records)
        wave = range(start, min(start + jobs, budget))
        configs = [tpe_suggest(records, space, seed=[seed, i], **tpe_kwargs) for i in wave]
        if jobs == 1:
            results = [_run_trial(wave[0], configs[0], objective)]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(lambda a: _run_trial(*a, objective), zip(wave, configs)))
        for rec in results:
            records.append(rec)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(rec.to_json() + "\n")
            logger.info("trial %d %s objective=%s config=%s", rec.trial_id, rec.status, rec.objective, rec.config)

    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise NoSuccessfulTrialError(f"all {len(records)} trials failed")
    best = max(ok, key=lambda r: r.objective)
    return dict(best.config), records


def apply_trial(config: Mapping[str, Any], model_config, train_config):
    """Map a search-space point onto model and training configs."""
    model_config = replace(
        model_config,
        dense_layers=int(config.get("num_dense_layers", model_config.dense_layers)),
        dense_units=int(config.get("units", model_config.dense_units)),
    )
    train_config = replace(
        train_config,
        learning_rate=float(config.get("learning_rate", train_config.learning_rate)),
        optimizer=str(config.get("optimizer", train_config.optimizer)).lower(),
    )
    return model_config, train_config


def random_search(space: SearchSpace, budget: int, objective: Callable[[dict], float], seed: int = 0):
    """Uniform prior sampling with the same bookkeeping as :func:`run_hpo`."""
    records = []
    for i in range(budget):
        cfg = sample_prior(space, np.random.default_rng([seed, i]))
        records.append(_run_trial(i, cfg, objective))
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise NoSuccessfulTrialError(f"all {budget} trials failed")
    return dict(max(ok, key=lambda r: r.objective).config), records
