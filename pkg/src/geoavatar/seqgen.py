"""Graph-walk with a guide: Markov sampling on a life pattern, reweighted by a history model."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import HOURS, LifePattern, RoleSequence
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

GUIDE_FORMAT = "geoavatar-guide-v1"


class GuideModel:
    """Hour-stratified backoff n-gram over role histories.

    ``counts[m]`` has shape ``(24,) + (L,) * m + (L,)``: hour of the current
    role, the last ``m`` roles (oldest first), then the next role. The
    conditional at order ``m`` uses Dirichlet smoothing whose pseudo-counts
    (``smoothing`` per role) are spread according to order ``m - 1``, so the
    chain always bottoms out at a smoothed hourly marginal.
    """

    def __init__(self, counts: list[np.ndarray], smoothing: float):
        self.counts = [np.asarray(c, dtype=float) for c in counts]
        self.order = len(self.counts) - 1
        self.L = self.counts[0].shape[-1]
        self.smoothing = float(smoothing)
        self.tables = self._conditionals()

    def _conditionals(self) -> list[np.ndarray]:
        kL = self.smoothing * self.L
        tables = []
        for m, c in enumerate(self.counts):
            tot = c.sum(axis=-1, keepdims=True)
            if m == 0:
                base = np.full_like(c, 1.0 / self.L)
            else:
                base = np.expand_dims(tables[m - 1], axis=1)
            if kL == 0:
                with np.errstate(invalid="ignore", divide="ignore"):
                    p = np.where(tot > 0, c / np.where(tot > 0, tot, 1.0), base)
            else:
                p = (c + kL * base) / (tot + kL)
            p = np.broadcast_to(p, c.shape).copy()
            p.setflags(write=False)
            tables.append(p)
        return tables

    def backoff_weight(self, m: int, hour: int, context=()) -> float:
        """Share of the order-``m`` conditional inherited from order ``m - 1``."""
        kL = self.smoothing * self.L
        tot = self.counts[m][(hour, *context)].sum()
        return 1.0 if tot + kL == 0 else kL / (tot + kL)

    def conditional(self, hour: int, history) -> np.ndarray:
        """P(next role | last roles in ``history``, hour of the last role)."""
        history = tuple(int(r) for r in history)
        m = min(self.order, len(history))
        ctx = history[len(history) - m:] if m else ()
        return self.tables[m][(hour % HOURS, *ctx)]

    def conditional_batch(self, hour: int, history: np.ndarray) -> np.ndarray:
        """Rows of :meth:`conditional` for a ``(N, k)`` history matrix."""
        m = min(self.order, history.shape[1])
        idx = (hour % HOURS,) + tuple(history[:, history.shape[1] - m + a] for a in range(m))
        out = self.tables[m][idx]
        if out.ndim == 1:
            out = np.broadcast_to(out, (history.shape[0], self.L))
        return out

    def to_dict(self) -> dict:
        tables = []
        for m, c in enumerate(self.counts):
            entries = {}
            ctx_shape = c.shape[:-1]
            for idx in zip(*np.nonzero(c.sum(axis=-1))):
                hour, ctx = int(idx[0]), tuple(int(x) for x in idx[1:])
                key = f"{hour}|{','.join(map(str, ctx))}"
                entries[key] = {
                    "counts": c[idx].tolist(),
                    "backoff": self.backoff_weight(m, hour, ctx),
                }
            tables.append({"order": m, "shape": list(ctx_shape), "entries": entries})
        return {"format": GUIDE_FORMAT, "order": self.order, "L": self.L,
                "smoothing": self.smoothing, "tables": tables}

    @classmethod
    def from_dict(cls, d: dict) -> "GuideModel":
        if d.get("format") != GUIDE_FORMAT:
            raise DataError(f"not a guide file (format={d.get('format')!r})")
        L = int(d["L"])
        counts = []
        for t in d["tables"]:
            m = int(t["order"])
            c = np.zeros((HOURS,) + (L,) * m + (L,))
            for key, entry in t["entries"].items():
                hour, ctx = key.split("|")
                ctx = tuple(int(x) for x in ctx.split(",")) if ctx else ()
                c[(int(hour), *ctx)] = entry["counts"]
            counts.append(c)
        return cls(counts, d["smoothing"])


class UniformGuide:
    """Guide that never corrects the walk."""

    def __init__(self, L: int):
        self.L = L
        self.order = 0

    def conditional(self, hour, history):
        return np.full(self.L, 1.0 / self.L)

    def conditional_batch(self, hour, history):
        return np.full((history.shape[0], self.L), 1.0 / self.L)


def fit_guide(role_sequences, order: int = 2, smoothing: float = 0.01) -> GuideModel:
    role_sequences = list(role_sequences)
    if not role_sequences:
        raise DataError("cannot fit a guide on an empty corpus")
    if order < 0 or order > 4:
        raise ConfigError(f"guide order must be in [0, 4], got {order}")
    if smoothing < 0:
        raise ConfigError("guide smoothing must be non-negative")
    L = role_sequences[0].L
    counts = [np.zeros((HOURS,) + (L,) * m + (L,)) for m in range(order + 1)]
    for seq in role_sequences:
        if seq.L != L:
            raise DataError("role sequences use different alphabets")
        v = seq.values
        n = v.shape[0]
        t = np.arange(n - 1)
        hours = t % HOURS
        for m in range(order + 1):
            ok = t - m + 1 >= 0
            idx = (hours[ok],) + tuple(v[t[ok] - m + 1 + a] for a in range(m)) + (v[t[ok] + 1],)
            np.add.at(counts[m], idx, 1.0)
    return GuideModel(counts, smoothing)


@dataclass(frozen=True)
class GwgConfig:
    alpha: float = 0.5
    days: int = 7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.days < 1:
            raise ConfigError("days must be >= 1")


def next_distribution(base: np.ndarray, guide: np.ndarray, alpha: float) -> np.ndarray:
    """Log-linear pooling ``base^alpha * guide^(1 - alpha)``, renormalised row-wise.

    Rows whose pooled mass vanishes fall back to ``base``.
    """
    base = np.atleast_2d(base)
    guide = np.atleast_2d(guide)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.power(base, alpha) * np.power(guide, 1.0 - alpha)
    z = w.sum(axis=1, keepdims=True)
    dead = ~(z[:, 0] > 1e-300) | ~np.isfinite(z[:, 0])
    if np.any(dead):
        log.debug("GWG: %d rows with zero normaliser fell back to the base chain", int(dead.sum()))
        w[dead] = base[dead]
        z[dead] = base[dead].sum(axis=1, keepdims=True)
    return w / z


def _draw(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), p.shape[1] - 1)


def gwg_sample_batch(pis: np.ndarray, Ts: np.ndarray, guide, alpha: float, days: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Walk ``N`` patterns at once; returns an ``(N, 24 * days)`` role array."""
    pis = np.asarray(pis, dtype=float)
    Ts = np.asarray(Ts, dtype=float)
    N, L = pis.shape
    n = HOURS * days
    out = np.empty((N, n), dtype=np.int64)
    if N == 0:
        return out
    out[:, 0] = _draw(pis, rng)
    rows = np.arange(N)
    order = getattr(guide, "order", 0)
    for t in range(n - 1):
        h = t % HOURS
        base = Ts[rows, h, out[:, t]]
        if alpha >= 1.0 or guide is None:
            p = base
        else:
            k = min(order, t + 1)
            g = guide.conditional_batch(h, out[:, t + 1 - k: t + 1])
            p = next_distribution(base, g, alpha)
        out[:, t + 1] = _draw(p, rng)
    return out


def gwg_sample(pattern: LifePattern, guide, cfg: GwgConfig, rng: np.random.Generator,
               user_id: str = "", start_day: int = 0) -> RoleSequence:
    if guide is not None and getattr(guide, "L", pattern.L) != pattern.L:
        raise DataError(f"guide alphabet {guide.L} != pattern alphabet {pattern.L}")
    values = gwg_sample_batch(pattern.pi[None], pattern.T[None], guide, cfg.alpha, cfg.days, rng)[0]
    return RoleSequence(user_id, start_day, values, L=pattern.L)
