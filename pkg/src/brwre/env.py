"""Quenched random environments: i.i.d. bounded split rates on Z."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from numba import njit

from .rng import STAGE_ENV, STAGE_ENV_REPLICA, derive_key, site_uniform

FAMILIES = ("constant", "two_point", "uniform")
FAMILY_CODE = {name: i for i, name in enumerate(FAMILIES)}


class InvalidEnvironment(ValueError):
    """Invalid environment specification."""


@dataclass(frozen=True)
class EnvironmentSpec:
    """Law of the split rates plus the seed fixing one realization.

    ``constant`` uses ``lo == hi == r``; ``p_lo`` only matters for
    ``two_point`` (probability of the low rate).
    """

    family: str
    lo: float
    hi: float
    p_lo: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILY_CODE:
            raise InvalidEnvironment(f"unknown family {self.family!r}")
        if not (self.lo > 0 and np.isfinite(self.hi)):
            raise InvalidEnvironment(f"need 0 < lo and finite hi, got lo={self.lo}, hi={self.hi}")
        if self.family == "constant":
            if self.lo != self.hi:
                raise InvalidEnvironment("constant family needs lo == hi")
        else:
            if not self.lo < self.hi:
                raise InvalidEnvironment(f"{self.family} needs lo < hi")
            if self.family == "two_point" and not 0 < self.p_lo < 1:
                raise InvalidEnvironment(f"p_lo must lie in (0, 1), got {self.p_lo}")
        if int(self.seed) < 0 or int(self.seed) >= 2**64:
            raise InvalidEnvironment("seed must be an unsigned 64-bit integer")

    @classmethod
    def constant(cls, r: float, seed: int = 0) -> "EnvironmentSpec":
        return cls("constant", r, r, 0.5, seed)

    @classmethod
    def two_point(cls, lo: float, hi: float, p_lo: float, seed: int = 0) -> "EnvironmentSpec":
        return cls("two_point", lo, hi, p_lo, seed)

    @classmethod
    def uniform(cls, lo: float, hi: float, seed: int = 0) -> "EnvironmentSpec":
        return cls("uniform", lo, hi, 0.5, seed)

    @property
    def ei(self) -> float:
        return float(self.lo)

    @property
    def es(self) -> float:
        return float(self.hi)

    @property
    def mean_rate(self) -> float:
        if self.family == "two_point":
            return self.p_lo * self.lo + (1 - self.p_lo) * self.hi
        return 0.5 * (self.lo + self.hi)

    def with_seed(self, seed: int) -> "EnvironmentSpec":
        return replace(self, seed=int(seed))

    def for_replica(self, replica: int) -> "EnvironmentSpec":
        """Fresh environment of the same family for annealed replica ``replica``."""
        return self.with_seed(derive_key(self.seed, STAGE_ENV_REPLICA, replica))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seed"] = int(d["seed"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        family = d["family"]
        if family == "constant" and "hi" not in d:
            d = {**d, "hi": d["lo"]}
        return cls(family, float(d["lo"]), float(d["hi"]), float(d.get("p_lo", 0.5)), int(d.get("seed", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EnvironmentSpec":
        return cls.from_dict(json.loads(text))


@njit(cache=True)
def rate_from_key(family, lo, hi, p_lo, key, site):
    if family == 0:
        return lo
    u = site_uniform(key, site)
    if family == 1:
        return lo if u < p_lo else hi
    return lo + (hi - lo) * u


@njit(cache=True)
def _fill_rates(family, lo, hi, p_lo, key, first, out):
    for i in range(out.shape[0]):
        out[i] = rate_from_key(family, lo, hi, p_lo, key, first + i)


class Environment:
    """One realization of the split rates, materialized lazily per site.

    Rates are a pure function of ``(seed, site)``, so the memo below only
    saves work; concurrent or reordered queries return identical values.
    """

    def __init__(self, spec: EnvironmentSpec):
        self.spec = spec
        self.key = derive_key(spec.seed, STAGE_ENV)
        self._memo: dict[int, float] = {}

    def __repr__(self):
        return f"Environment({self.spec!r})"

    @property
    def ei(self) -> float:
        return self.spec.ei

    @property
    def es(self) -> float:
        return self.spec.es

    def kernel_args(self) -> tuple:
        s = self.spec
        return (FAMILY_CODE[s.family], float(s.lo), float(s.hi), float(s.p_lo), np.uint64(self.key))

    def rate_at(self, x: int) -> float:
        x = int(x)
        r = self._memo.get(x)
        if r is None:
            r = float(rate_from_key(*self.kernel_args(), x))
            self._memo[x] = r
        return r

    def rates(self, first: int, last: int) -> np.ndarray:
        """Rates on the inclusive window ``first..last``."""
        out = np.empty(int(last) - int(first) + 1)
        _fill_rates(*self.kernel_args(), int(first), out)
        return out

    def export_csv(self, path, first: int, last: int) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", "rate"])
            for x, r in zip(range(first, last + 1), self.rates(first, last)):
                w.writerow([x, repr(float(r))])


def sample_environment(spec: EnvironmentSpec) -> Environment:
    return Environment(spec)


def rate_at(env: Environment, x: int) -> float:
    return env.rate_at(x)


def bounding_environments(env) -> tuple[Environment, Environment]:
    """Homogeneous comparison environments at the infimum and supremum rate."""
    s = env.spec if isinstance(env, Environment) else env
    return (Environment(EnvironmentSpec.constant(s.ei, s.seed)),
            Environment(EnvironmentSpec.constant(s.es, s.seed)))
