"""Seeded synthetic cohort with a planted severity -> anterior atrophy -> hazard signal.

Each subject has a latent severity ``s ~ U(0, 1)``. Both hippocampal volumes
are a smooth ellipsoid of intensity ``base_intensity`` minus
``s * atrophy * A(p)``, where ``A`` is a bump over the anterior third of the
long (z) axis, plus Gaussian noise. Event times are exponential with hazard
``lambda0 * exp(theta * s)``, censored uniformly on ``censor_window`` and
rounded up to a 6-month visit grid.

Randomness comes from numpy's PCG64 generator. Subject ``i`` draws from its
own stream seeded with the sequence ``(seed, i)``, so a cohort is
reproducible from ``seed`` alone and subjects can be generated in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import concordance_index
from .records import SubjectRecord
from .volume import Volume

SEMI_AXES = (10.0, 7.0, 22.0)
# raised-cosine edge: full intensity inside r < 1 - EDGE, zero outside r > 1 + EDGE
EDGE = 0.25
VISIT_MONTHS = 6.0


@dataclass(frozen=True)
class GenConfig:
    n: int = 100
    seed: int = 0
    dims: tuple = (29, 21, 55)
    base_intensity: float = 100.0
    noise_std: float = 5.0
    atrophy: float = 60.0
    lambda0: float = 0.01
    theta: float = 6.0
    censor_window: tuple = (12.0, 72.0)
    nc_below: float = 0.3
    ad_above: float = 0.7
    clinical: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "censor_window", tuple(float(c) for c in self.censor_window))
        if self.n < 0 or min(self.dims) < 1:
            raise ConfigError("n must be >= 0 and dims positive")
        if self.base_intensity <= 0 or self.noise_std < 0 or self.atrophy < 0 or self.lambda0 <= 0 or self.theta < 0:
            raise ConfigError("intensity, noise, atrophy, lambda0 and theta must be non-negative (base, lambda0 positive)")
        lo, hi = self.censor_window
        if not 0 < lo <= hi:
            raise ConfigError("censor window must satisfy 0 < low <= high")
        if not 0 < self.nc_below <= self.ad_above < 1:
            raise ConfigError("class thresholds must satisfy 0 < NC threshold <= AD threshold < 1")

    def label_for(self, s: float) -> str:
        if s < self.nc_below:
            return "NC"
        if s > self.ad_above:
            return "AD"
        return "MCI"


def _grid(dims):
    center = [(d - 1) / 2.0 for d in dims]
    return np.meshgrid(*[np.arange(d) - c for d, c in zip(dims, center)], indexing="ij")


def _raised_cosine(r, lo, hi):
    """1 below ``lo``, 0 above ``hi``, half-cosine in between."""
    u = np.clip((r - lo) / (hi - lo), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * u))


def template(dims) -> np.ndarray:
    """Unit-height ellipsoid with a soft edge, centered in the box."""
    gx, gy, gz = _grid(dims)
    r = np.sqrt((gx / SEMI_AXES[0]) ** 2 + (gy / SEMI_AXES[1]) ** 2 + (gz / SEMI_AXES[2]) ** 2)
    return _raised_cosine(r, 1 - EDGE, 1 + EDGE)


def anterior_bump(dims) -> np.ndarray:
    """Atrophy profile in [0, 1]: the template restricted to the anterior third of z.

    Anterior is the low-z end. The bump peaks at the center of the first third
    of the long axis and falls to zero at its boundary.
    """
    gz = np.arange(dims[2], dtype=np.float64)
    third = dims[2] / 3.0
    center = third / 2.0
    along = _raised_cosine(np.abs(gz + 0.5 - center) / (third / 2.0), 0.0, 1.0)
    return template(dims) * along[None, None, :]


def anterior_mask(dims, level=0.5) -> np.ndarray:
    """Voxels where the planted atrophy profile is at least ``level`` of its peak."""
    a = anterior_bump(dims)
    return a >= level * a.max()


def _subject(i, cfg: GenConfig, tmpl, bump, s=None, rng=None):
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, i])
    if s is None:
        s = float(rng.random())
    mean = cfg.base_intensity * tmpl - s * cfg.atrophy * bump
    left = mean + cfg.noise_std * rng.standard_normal(cfg.dims)
    right = mean + cfg.noise_std * rng.standard_normal(cfg.dims)
    u = 1.0 - rng.random()  # in (0, 1]
    T = -math.log(u) / (cfg.lambda0 * math.exp(cfg.theta * s))
    C = rng.uniform(*cfg.censor_window)
    time = math.ceil(min(T, C) / VISIT_MONTHS) * VISIT_MONTHS
    event = int(T <= C)
    clinical = _clinical(rng, s) if cfg.clinical else {}
    return SubjectRecord(
        subject_id=f"S{i:05d}", left=Volume(left), right=Volume(right), label=cfg.label_for(s),
        time=float(max(time, VISIT_MONTHS)), event=event, clinical=clinical, severity=s,
    )


def _clinical(rng, s):
    """Loosely severity-linked demographics and cognition; not used by the hazard."""
    return {
        "age": round(float(70 + 6 * s + 6 * rng.standard_normal()), 1),
        "sex": int(rng.random() < 0.5),
        "education": int(np.clip(round(16 + 3 * rng.standard_normal()), 6, 22)),
        "apoe4": int(rng.choice(3, p=[0.6 - 0.3 * s, 0.3 + 0.15 * s, 0.1 + 0.15 * s])),
        "mmse": float(np.clip(round(29.5 - 6 * s + rng.standard_normal()), 0, 30)),
    }


def generate(config: GenConfig) -> list[SubjectRecord]:
    """``config.n`` subjects with severity drawn uniformly on (0, 1)."""
    tmpl = template(config.dims)
    bump = anterior_bump(config.dims)
    return [_subject(i, config, tmpl, bump) for i in range(config.n)]


def generate_cohort(config: GenConfig, n_adnc: int, n_mci: int) -> list[SubjectRecord]:
    """Draw subjects in order, keeping each only while its class quota is open.

    The quotas are ``n_adnc`` NC/AD subjects (split as they come) and
    ``n_mci`` MCI subjects. Subject ids keep the draw index.
    """
    tmpl = template(config.dims)
    bump = anterior_bump(config.dims)
    kept, need = [], {"ADNC": n_adnc, "MCI": n_mci}
    i = 0
    while need["ADNC"] > 0 or need["MCI"] > 0:
        rng = np.random.default_rng([config.seed, i])
        s = float(rng.random())
        key = "MCI" if config.label_for(s) == "MCI" else "ADNC"
        if need[key] > 0:
            kept.append(_subject(i, config, tmpl, bump, s=s, rng=rng))
            need[key] -= 1
        i += 1
    return kept


def oracle_c_index(records, tie_rule="strict") -> float:
    """C-index of the true severity as the risk marker."""
    s = [r.severity for r in records]
    if any(v is None for v in s):
        raise ConfigError("oracle C-index needs records with a true severity")
    return concordance_index(s, [r.time for r in records], [r.event for r in records], tie_rule).c_index
