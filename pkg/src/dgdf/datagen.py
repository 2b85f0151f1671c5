"""Synthetic delayed-feedback click-log generation and CSV ingestion.

Clicks are drawn from latent user/item vectors; the conversion probability
is a squashed, optionally time-drifting affinity, and conversion delays come
from a two-component exponential mixture whose parameters can be calibrated
to hit two target CDF points (e.g. published fractions converting within
0.25h and 24h).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ConfigError, DataError
from .pipeline import ClickSample

HOUR = 3600.0


@dataclass
class DelayMixture:
    """P(delay <= t) = w (1 - exp(-r1 t)) + (1 - w)(1 - exp(-r2 t)); rates per hour."""

    weight_fast: float
    rate_fast: float
    rate_slow: float

    def __post_init__(self):
        if not (0.0 <= self.weight_fast <= 1.0):
            raise ConfigError(f"mixture weight must be in [0, 1], got {self.weight_fast}")
        if self.rate_fast <= 0 or self.rate_slow <= 0:
            raise ConfigError("mixture rates must be positive")

    def cdf(self, t_hours: float) -> float:
        w = self.weight_fast
        return w * (1.0 - math.exp(-self.rate_fast * t_hours)) + (1.0 - w) * (
            1.0 - math.exp(-self.rate_slow * t_hours)
        )

    def sample_seconds(self, rng: np.random.Generator, n: int) -> np.ndarray:
        fast = rng.random(n) < self.weight_fast
        rates = np.where(fast, self.rate_fast, self.rate_slow)
        return rng.exponential(1.0 / rates) * HOUR


def calibrate_delay_mixture(
    target_a: tuple[float, float], target_b: tuple[float, float]
) -> DelayMixture:
    """Fit the mixture to two CDF targets (t_hours, fraction), t_a < t_b.

    The fast rate is pinned so the fast component saturates by t_a; the
    weight then follows from the first target and the slow rate is solved by
    root-finding on the second. A single exponential cannot hit both targets
    unless they happen to lie on one curve, hence the mixture.
    """
    (t1, f1), (t2, f2) = target_a, target_b
    if not (0 < t1 < t2):
        raise ConfigError(f"need 0 < t1 < t2, got {t1}, {t2}")
    if not (0 < f1 < f2 < 1):
        raise ConfigError(f"need 0 < F1 < F2 < 1, got {f1}, {f2}")

    for fast_rate in (8.0 / t1, 16.0 / t1, 4.0 / t1):
        g1_t1 = 1.0 - math.exp(-fast_rate * t1)
        g1_t2 = 1.0 - math.exp(-fast_rate * t2)

        def weight_for(rate_slow: float) -> float:
            g2_t1 = 1.0 - math.exp(-rate_slow * t1)
            return (f1 - g2_t1) / (g1_t1 - g2_t1)

        def residual(rate_slow: float) -> float:
            w = weight_for(rate_slow)
            g2_t2 = 1.0 - math.exp(-rate_slow * t2)
            return w * g1_t2 + (1.0 - w) * g2_t2 - f2

        lo, hi = 1e-9, fast_rate * 0.5
        try:
            if residual(lo) * residual(hi) > 0:
                continue
            rate_slow = brentq(residual, lo, hi, xtol=1e-12)
        except ValueError:
            continue
        w = weight_for(rate_slow)
        if not (0.0 <= w <= 1.0):
            continue
        mixture = DelayMixture(w, fast_rate, rate_slow)
        if abs(mixture.cdf(t1) - f1) < 1e-4 and abs(mixture.cdf(t2) - f2) < 1e-4:
            return mixture
    raise ConfigError(
        f"no two-component exponential mixture matches CDF({t1}h)={f1}, "
        f"CDF({t2}h)={f2}; targets may be infeasible"
    )


@dataclass
class GeneratorConfig:
    n_users: int = 1000
    n_items: int = 200
    latent_dim: int = 8
    n_clicks: int = 10000
    base_cvr: float = 0.1
    duration_hours: float = 48.0
    delay: DelayMixture = field(default_factory=lambda: DelayMixture(0.5, 8.0, 0.05))
    drift_amplitude: float = 0.0  # global sinusoidal drift, logit units
    drift_period_hours: float = 12.0
    item_drift_amplitude: float = 0.0  # per-item random-phase drift, logit units
    bias_scale: float = 1.0  # user/item main-effect strength
    feature_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.base_cvr < 1.0):
            raise ConfigError(f"base_cvr must be in (0, 1), got {self.base_cvr}")
        if min(self.n_users, self.n_items, self.latent_dim, self.n_clicks) < 1:
            raise ConfigError("counts and dims must be positive")
        if self.duration_hours <= 0 or self.drift_period_hours <= 0:
            raise ConfigError("durations must be positive")

    def to_json(self) -> str:
        d = self.__dict__.copy()
        d["delay"] = self.delay.__dict__
        return json.dumps(d, indent=2, sort_keys=True)


def _substream(seed: int, name: str) -> np.random.Generator:
    digest = int.from_bytes(name.encode(), "big") % (2**31)
    return np.random.default_rng(np.random.SeedSequence([seed, digest]))


def generate(cfg: GeneratorConfig) -> list[ClickSample]:
    """Deterministic synthetic click log, sorted by click time."""
    rng_latent = _substream(cfg.seed, "latents")
    rng_click = _substream(cfg.seed, "clicks")
    rng_conv = _substream(cfg.seed, "conversions")
    rng_feat = _substream(cfg.seed, "features")

    # latent vectors carry a bias coordinate each (paired with a constant on
    # the other side), so the affinity dot product decomposes into
    # interactions plus user/item main effects
    user_core = rng_latent.normal(size=(cfg.n_users, cfg.latent_dim))
    item_core = rng_latent.normal(size=(cfg.n_items, cfg.latent_dim))
    user_bias = cfg.bias_scale * rng_latent.normal(size=cfg.n_users)
    item_bias = cfg.bias_scale * rng_latent.normal(size=cfg.n_items)
    user_latent = np.concatenate([user_core, user_bias[:, None]], axis=1)
    item_latent = np.concatenate([item_core, item_bias[:, None]], axis=1)

    n = cfg.n_clicks
    users = rng_click.integers(0, cfg.n_users, size=n)
    items = rng_click.integers(0, cfg.n_items, size=n)
    times = np.sort(rng_click.uniform(0.0, cfg.duration_hours * HOUR, size=n))

    affinity = (
        np.einsum("nd,nd->n", user_core[users], item_core[items]) / math.sqrt(cfg.latent_dim)
        + user_bias[users]
        + item_bias[items]
    )
    affinity = (affinity - affinity.mean()) / max(affinity.std(), 1e-12)
    drift = cfg.drift_amplitude * np.sin(2.0 * math.pi * times / (cfg.drift_period_hours * HOUR))
    # squashing a noisy logit shifts the mean; solve the intercept so the
    # average conversion probability hits base_cvr exactly
    intercept = brentq(
        lambda c: expit(affinity + drift + c).mean() - cfg.base_cvr, -20.0, 20.0, xtol=1e-10
    )
    probs = expit(affinity + drift + intercept)

    converted = rng_conv.random(n) < probs
    delays = cfg.delay.sample_seconds(rng_conv, n)

    width = cfg.latent_dim + 1
    user_feats = user_latent[users] + cfg.feature_noise * rng_feat.normal(size=(n, width))
    item_feats = item_latent[items] + cfg.feature_noise * rng_feat.normal(size=(n, width))

    out = []
    for j in range(n):
        conv_time = float(times[j] + delays[j]) if converted[j] else None
        out.append(
            ClickSample(
                sample_id=j,
                user_id=int(users[j]),
                item_id=int(items[j]),
                click_time=float(times[j]),
                conversion_time=conv_time,
                user_dense=tuple(float(v) for v in user_feats[j]),
                user_cats=(int(users[j]),),
                item_dense=tuple(float(v) for v in item_feats[j]),
                item_cats=(int(items[j]),),
            )
        )
    return out


# ---------------------------------------------------------------------------
# click log CSV


def _header(n_user_dense: int, n_item_dense: int, n_user_cats: int, n_item_cats: int) -> list[str]:
    cols = ["sample_id", "user_id", "item_id", "click_ts", "conversion_ts"]
    cols += [f"uf_{j}" for j in range(n_user_dense)]
    cols += [f"if_{j}" for j in range(n_item_dense)]
    cols += [f"uc_{j}" for j in range(n_user_cats)]
    cols += [f"ic_{j}" for j in range(n_item_cats)]
    return cols


def write_click_log(path, samples: Sequence[ClickSample]) -> None:
    if not samples:
        raise DataError("refusing to write an empty click log")
    first = samples[0]
    header = _header(
        len(first.user_dense), len(first.item_dense), len(first.user_cats), len(first.item_cats)
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in samples:
            row = [
                s.sample_id,
                s.user_id,
                s.item_id,
                repr(s.click_time),
                "" if s.conversion_time is None else repr(s.conversion_time),
            ]
            row += [repr(v) for v in s.user_dense]
            row += [repr(v) for v in s.item_dense]
            row += list(s.user_cats)
            row += list(s.item_cats)
            writer.writerow(row)


def ingest_csv(path) -> list[ClickSample]:
    """Parse and validate a click log; errors carry 1-based line numbers."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file (header row is mandatory)")
        fixed = ["sample_id", "user_id", "item_id", "click_ts", "conversion_ts"]
        if header[: len(fixed)] != fixed:
            raise DataError(f"{path}: bad header {header[:5]} (expected {fixed}...)")
        counts = {"uf": 0, "if": 0, "uc": 0, "ic": 0}
        for col in header[len(fixed) :]:
            prefix = col.split("_")[0]
            if prefix not in counts:
                raise DataError(f"{path}: unexpected column {col!r}")
            counts[prefix] += 1

        samples: list[ClickSample] = []
        prev_t = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                sid, uid, iid = int(row[0]), int(row[1]), int(row[2])
                click_ts = float(row[3])
                conv_ts = None if row[4] == "" else float(row[4])
                base = len(fixed)
                uf = tuple(float(v) for v in row[base : base + counts["uf"]])
                base += counts["uf"]
                itf = tuple(float(v) for v in row[base : base + counts["if"]])
                base += counts["if"]
                uc = tuple(int(v) for v in row[base : base + counts["uc"]])
                base += counts["uc"]
                ic = tuple(int(v) for v in row[base : base + counts["ic"]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed value: {exc}") from None
            if conv_ts is not None and conv_ts < click_ts:
                raise DataError(
                    f"{path}:{lineno}: conversion_ts {conv_ts} precedes click_ts {click_ts}"
                )
            if click_ts < prev_t:
                raise DataError(f"{path}:{lineno}: click_ts not sorted ({click_ts} < {prev_t})")
            prev_t = click_ts
            samples.append(ClickSample(sid, uid, iid, click_ts, conv_ts, uf, uc, itf, ic))
    seen = set()
    for s in samples:
        if s.sample_id in seen:
            raise DataError(f"{path}: duplicate sample_id {s.sample_id}")
        seen.add(s.sample_id)
    return samples
