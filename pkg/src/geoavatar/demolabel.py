"""Demographic labelling from pattern features and aggregate census marginals."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import LifePattern, vectorize
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SEGMENTS = ("worker", "student", "home-based", "other")
_EPS = 1e-12


# ---------------------------------------------------------------------------
# NMF
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class NmfModel:
    H: np.ndarray  # (d, M) basis

    @property
    def rank(self) -> int:
        return self.H.shape[0]

    def to_dict(self) -> dict:
        return {"format": "geoavatar-nmf-v1", "rank": self.rank, "H": self.H.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NmfModel":
        return cls(np.asarray(d["H"], dtype=float))


def nmf_objective(V, W, H) -> float:
    return float(np.sum((V - W @ H) ** 2))


def fit_nmf(V, d: int, iters: int = 500, seed: int = 0, trace: list | None = None):
    """Lee-Seung multiplicative updates for ``min ||V - W H||_F^2``, ``W, H >= 0``.

    If ``trace`` is a list the objective after every iteration is appended.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise DataError("NMF input must be a matrix")
    if np.any(V < 0):
        raise DataError("NMF input must be non-negative")
    N, M = V.shape
    if d < 1 or d > min(N, M):
        raise ConfigError(f"NMF rank {d} must be in [1, min(N, M) = {min(N, M)}]")
    rng = np.random.default_rng(seed)
    scale = np.sqrt(max(V.mean(), _EPS) / d)
    W = rng.uniform(0.1, 1.0, (N, d)) * scale
    H = rng.uniform(0.1, 1.0, (d, M)) * scale
    for _ in range(iters):
        H *= (W.T @ V) / (W.T @ W @ H + _EPS)
        W *= (V @ H.T) / (W @ (H @ H.T) + _EPS)
        if trace is not None:
            trace.append(nmf_objective(V, W, H))
    return W, NmfModel(H)


def project_features(pattern, nmf: NmfModel, iters: int = 200) -> np.ndarray:
    """Non-negative least-squares coefficients of a pattern on the fixed basis."""
    v = vectorize(pattern) if isinstance(pattern, LifePattern) else np.asarray(pattern, dtype=float)
    return project_matrix(v[None], nmf, iters)[0]


def project_matrix(V, nmf: NmfModel, iters: int = 200) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    H = nmf.H
    HHt = H @ H.T
    VHt = V @ H.T
    # homogeneous start keeps the map degree-1 in the input scale
    mass = V.sum(axis=1, keepdims=True) / max(H.sum(), _EPS)
    W = np.repeat(mass, H.shape[0], axis=1)
    for _ in range(iters):
        W *= VHt / (W @ HHt + _EPS)
    return W


# ---------------------------------------------------------------------------
# Census-pinned Gaussian mixture
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class DemographicProfile:
    segment: int
    posterior: np.ndarray


@dataclass(frozen=True, eq=False)
class LabelerModel:
    means: np.ndarray  # (S, d)
    variances: np.ndarray  # (S, d)
    zone_priors: dict  # zone -> (S,) array
    default_prior: np.ndarray  # population-weighted prior for persons without a zone
    log_likelihood: tuple = ()

    @property
    def n_segments(self) -> int:
        return self.means.shape[0]

    def prior(self, zone=None) -> np.ndarray:
        if zone is None:
            return self.default_prior
        if zone not in self.zone_priors:
            raise DataError(f"no census prior for zone {zone!r}")
        return self.zone_priors[zone]

    def to_dict(self) -> dict:
        return {
            "format": "geoavatar-labeler-v1",
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "zone_priors": {str(z): p.tolist() for z, p in sorted(self.zone_priors.items(), key=lambda kv: str(kv[0]))},
            "default_prior": self.default_prior.tolist(),
            "log_likelihood": list(self.log_likelihood),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelerModel":
        return cls(
            np.asarray(d["means"], dtype=float),
            np.asarray(d["variances"], dtype=float),
            {z: np.asarray(p, dtype=float) for z, p in d["zone_priors"].items()},
            np.asarray(d["default_prior"], dtype=float),
            tuple(d.get("log_likelihood", ())),
        )


def _log_gauss(X, means, variances):
    # (N, S) diagonal-Gaussian log densities
    diff = X[:, None, :] - means[None]
    return -0.5 * (np.sum(diff**2 / variances[None], axis=2)
                   + np.sum(np.log(2 * np.pi * variances), axis=1)[None])


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def fit_labeler(features, home_zones, census_marginals: dict, max_iter: int = 200, tol: float = 1e-6,
                seed: int = 0, var_floor: float = 1e-6) -> LabelerModel:
    """EM for a diagonal Gaussian mixture whose per-zone weights are the census fractions.

    No individual labels are used: segment identity is anchored only by how
    the census mix varies across zones.
    """
    X = np.asarray(features, dtype=float)
    zones = list(home_zones)
    if X.ndim != 2 or X.shape[0] != len(zones):
        raise DataError("features and home_zones must describe the same users")
    missing = sorted({z for z in zones if z not in census_marginals}, key=str)
    if missing:
        raise DataError(f"zones {missing} have users but no census marginal")
    priors = {z: np.asarray(p, dtype=float) for z, p in census_marginals.items()}
    S = len(next(iter(priors.values())))
    for z, p in priors.items():
        if p.shape != (S,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-6:
            raise DataError(f"census marginal of zone {z!r} is not a distribution over {S} segments")
        priors[z] = p / p.sum()
    N, d = X.shape
    Pi = np.stack([priors[z] for z in zones])  # (N, S)
    with np.errstate(divide="ignore"):
        logPi = np.log(Pi)

    floor = var_floor * max(float(X.var(axis=0).mean()), _EPS)
    rng = np.random.default_rng(seed)
    # prior-weighted means break symmetry toward census-consistent components
    wsum = Pi.sum(axis=0)
    means = (Pi.T @ X) / np.maximum(wsum, _EPS)[:, None]
    spread = X.std(axis=0) + _EPS
    means = means + 0.1 * spread * rng.standard_normal((S, d))
    variances = np.tile(np.maximum(X.var(axis=0), floor), (S, 1))

    lls = []
    for it in range(max_iter):
        logp = logPi + _log_gauss(X, means, variances)
        norm = _logsumexp(logp, axis=1)
        ll = float(norm.sum())
        lls.append(ll)
        R = np.exp(logp - norm[:, None])
        Nk = R.sum(axis=0)
        live = Nk > _EPS
        means[live] = (R.T @ X)[live] / Nk[live, None]
        diff2 = (X[:, None, :] - means[None]) ** 2
        var_new = np.einsum("ns,nsd->sd", R, diff2)
        variances[live] = np.maximum(var_new[live] / Nk[live, None], floor)
        if it > 0 and abs(lls[-1] - lls[-2]) < tol:
            break
    logp = logPi + _log_gauss(X, means, variances)
    lls.append(float(_logsumexp(logp, axis=1).sum()))

    counts = {}
    for z in zones:
        counts[z] = counts.get(z, 0) + 1
    default = sum(counts[z] * priors[z] for z in counts) / len(zones)
    return LabelerModel(means, variances, priors, default / default.sum(), tuple(lls))


def posterior(features, labeler: LabelerModel, zone=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    with np.errstate(divide="ignore"):
        logp = np.log(labeler.prior(zone))[None] + _log_gauss(x, labeler.means, labeler.variances)
    post = np.exp(logp - _logsumexp(logp, axis=1)[:, None])
    return post[0] if np.ndim(features) == 1 else post


def label(pattern, nmf: NmfModel, labeler: LabelerModel, zone=None) -> DemographicProfile:
    """Segment posterior ``prior(zone) * N(features; mu_s, Sigma_s)``, normalised.

    ``zone=None`` uses the population-weighted prior, which is what pseudo
    persons get since their home is drawn after labelling.
    """
    post = posterior(project_features(pattern, nmf), labeler, zone)
    return DemographicProfile(int(np.argmax(post)), post)
