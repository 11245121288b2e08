"""Stage orchestration: configuration, seeding, ingest, training, generation, baselines, evaluation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import fem_fit, fem_generate, timegeo_fit, timegeo_generate
from .core import DEFAULT_L, HOME, HOURS, Grid, RoleSequence, build_grid, vectorize
from .demolabel import SEGMENTS, fit_labeler, fit_nmf, posterior, project_matrix
from .errors import ConfigError, DataError, InsufficientDataError
from .fixture import FIXTURE_EPOCH_DAY, zone_of_cell
from .ingest import (detect_staypoints, extract_life_pattern, extract_significant_places, roles_from_cells,
                     to_hourly_roles)
from .keyloc import anchors_from_places, fit_spatial_priors, geocode_sequence, sample_key_table
from .lifegen import TrainConfig, sample_life_patterns, train_wgan
from .metrics import (MetricReport, RankedPresence, _paired_r2, activity_mae, activity_profile, aggregate_pair,
                      daily_visit_counts, hourly_js_by_hour, jump_sizes, ks_statistic, natural_fluctuation,
                      pattern_distribution_js, per_hour_r2, to_hourly)
from .seqgen import fit_guide, gwg_sample_batch

log = logging.getLogger(__name__)

DAY_S = 86400

STAGES = ("ingest", "gan", "nmf", "labeler", "generate", "fem", "timegeo", "evaluate", "fixture", "reconstruct")

DEFAULT_CONFIG = {
    "paths": {"trajectories": "trajectories.csv", "census": "census.csv", "out_dir": "run"},
    "grid": {"lat_min": None, "lat_max": None, "lon_min": None, "lon_max": None, "cell_size_m": 1000.0},
    "L": DEFAULT_L,
    "tz_offset_s": 0,
    "staypoint": {"dist_m": 200.0, "min_stay_s": 1800, "merge_radius_m": 300.0, "smoothing": 0.01},
    "gan": {
        "lambda_gp": 10.0, "n_critic": 5, "batch_size": 32, "epochs": 200, "lr": 3e-4, "betas": [0.5, 0.9],
        "z_dim": 64, "gen_hidden": [256, 256], "critic_hidden": [256, 256],
    },
    "gwg": {"alpha": 0.5, "order": 2, "smoothing": 0.01},
    "demolabel": {"d": 8, "segments": len(SEGMENTS), "nmf_iters": 500, "em_iters": 200},
    "keyloc": {"decay_km": 3.0, "jitter_m": 50.0, "smoothing": 0.5},
    "generate": {"n_users": 1000, "days": 7, "start_day": FIXTURE_EPOCH_DAY},
    "baselines": {"fem": True, "timegeo": True},
    "metrics": {"bins": 20, "bins_per_dim": 10, "pattern_d": 3, "split_seed": 0,
                "N_list": list(range(1, 21))},
    "seed": 0,
    "threads": 1,
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def parse_assignment(text: str) -> dict:
    """``a.b=value`` into ``{"a": {"b": value}}``; values are JSON when they parse."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file, then overrides (flag > file > default)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        cfg = _merge(cfg, data)
        base = path.parent
        for k in ("trajectories", "census", "out_dir"):
            p = cfg["paths"][k]
            if p is not None and not Path(p).is_absolute():
                cfg["paths"][k] = str(base / p)
    for o in overrides:
        cfg = _merge(cfg, o)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    g = cfg["grid"]
    if any(g[k] is None for k in ("lat_min", "lat_max", "lon_min", "lon_max")):
        raise ConfigError("grid bounding box (lat_min, lat_max, lon_min, lon_max) must be set")
    if g["cell_size_m"] is None or float(g["cell_size_m"]) <= 0:
        raise ConfigError("grid.cell_size_m must be positive")
    if int(cfg["L"]) < 2:
        raise ConfigError("L must be >= 2")
    if int(cfg["threads"]) < 1:
        raise ConfigError("threads must be >= 1")
    if not 0 <= float(cfg["gwg"]["alpha"]) <= 1:
        raise ConfigError("gwg.alpha must lie in [0, 1]")
    if not 0 <= int(cfg["gwg"]["order"]) <= 4:
        raise ConfigError("gwg.order must lie in [0, 4]")
    if int(cfg["generate"]["n_users"]) < 0 or int(cfg["generate"]["days"]) < 1:
        raise ConfigError("generate.n_users must be >= 0 and generate.days >= 1")
    if any(int(n) < 1 for n in cfg["metrics"]["N_list"]) or not cfg["metrics"]["N_list"]:
        raise ConfigError("metrics.N_list must hold positive integers")
    if float(cfg["keyloc"]["decay_km"]) <= 0:
        raise ConfigError("keyloc.decay_km must be positive")
    gan_config(cfg)


def require_path(cfg: dict, key: str) -> Path:
    p = Path(cfg["paths"][key])
    if not p.exists():
        raise ConfigError(f"paths.{key} = {p} does not exist")
    return p


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def gan_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["gan"], seed=int(cfg["seed"]))


def grid_from_config(cfg: dict) -> Grid:
    g = cfg["grid"]
    return build_grid((g["lat_min"], g["lat_max"], g["lon_min"], g["lon_max"]), float(g["cell_size_m"]))


def stage_rng(cfg: dict, stage: str) -> np.random.Generator:
    """Independent stream per stage, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(cfg["seed"]), STAGES.index(stage)]))


def set_threads(cfg: dict) -> None:
    import torch

    torch.set_num_threads(int(cfg["threads"]))


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------
@dataclass
class IngestedUser:
    user_id: str
    places: list
    roles: RoleSequence
    pattern: object = None


def day_range(traj, tz_offset_s: int = 0) -> tuple[int, int]:
    d0 = int((traj.timestamps[0] + tz_offset_s) // DAY_S)
    d1 = int((traj.timestamps[-1] + tz_offset_s) // DAY_S)
    return d0, d1 - d0 + 1


def ingest_user(traj, st: dict, L: int, tz_offset_s: int = 0, keep_all: bool = False) -> IngestedUser | None:
    if len(traj) == 0:
        return None
    sps = detect_staypoints(traj, st["dist_m"], int(st["min_stay_s"]))
    if not sps:
        log.info("user %s has no staypoints; skipped", traj.user_id)
        return None
    places = extract_significant_places(sps, st["merge_radius_m"], L, tz_offset_s, keep_all=keep_all)
    alphabet = max(L, max(p.role for p in places) + 1)
    roles = to_hourly_roles(sps, places, day_range(traj, tz_offset_s), alphabet, tz_offset_s)
    pattern = None
    if not keep_all:
        try:
            pattern = extract_life_pattern(roles, st["smoothing"])
        except InsufficientDataError as exc:
            log.info("%s; skipped", exc)
            return None
    return IngestedUser(traj.user_id, places, roles, pattern)


def _ingest_job(args):
    return ingest_user(*args)


def ingest_corpus(trajectories, cfg: dict, keep_all: bool = False) -> list[IngestedUser]:
    jobs = [(t, cfg["staypoint"], int(cfg["L"]), int(cfg["tz_offset_s"]), keep_all) for t in trajectories]
    threads = int(cfg["threads"])
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_ingest_job, jobs, chunksize=16))
    else:
        results = [_ingest_job(j) for j in jobs]
    return [r for r in results if r is not None]


def home_cell(places, grid: Grid):
    for p in places:
        if p.role == HOME:
            return grid.locate(p.lat, p.lon)
    return None


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
@dataclass
class TrainedModels:
    gan: object
    history: list
    guide: object
    nmf: object
    labeler: object
    priors: object
    segments: dict = field(default_factory=dict)


def train_models(users: list[IngestedUser], census: dict, grid: Grid, cfg: dict) -> TrainedModels:
    users = [u for u in users if u.pattern is not None]
    if not users:
        raise DataError("no ingested users with a life pattern")
    set_threads(cfg)
    V = np.stack([vectorize(u.pattern) for u in users])
    gan, history = train_wgan(V, gan_config(cfg), rng=stage_rng(cfg, "gan"))
    guide = fit_guide([u.roles for u in users], int(cfg["gwg"]["order"]), float(cfg["gwg"]["smoothing"]))

    dl = cfg["demolabel"]
    nmf_seed = int(stage_rng(cfg, "nmf").integers(2**31))
    _, nmf = fit_nmf(V, int(dl["d"]), int(dl["nmf_iters"]), seed=nmf_seed)
    feats = project_matrix(V, nmf)
    kept, zones = [], []
    for k, u in enumerate(users):
        cell = home_cell(u.places, grid)
        if cell is None:
            log.info("user %s has no on-grid HOME; excluded from labelling", u.user_id)
            continue
        kept.append(k)
        zones.append(str(int(zone_of_cell(grid, cell))))
    if not kept:
        raise DataError("no user has a HOME inside the grid")
    lab_seed = int(stage_rng(cfg, "labeler").integers(2**31))
    labeler = fit_labeler(feats[kept], zones, census, max_iter=int(dl["em_iters"]), seed=lab_seed)
    if labeler.n_segments != int(dl["segments"]):
        raise ConfigError(f"census has {labeler.n_segments} segments but demolabel.segments = {dl['segments']}")
    segments = {}
    anchors = []
    for k, z in zip(kept, zones):
        post = posterior(feats[k], labeler, z)
        seg = int(np.argmax(post))
        segments[users[k].user_id] = seg
        a = anchors_from_places(users[k].places, seg, grid)
        if a is not None:
            anchors.append(a)
    kl = cfg["keyloc"]
    priors = fit_spatial_priors(anchors, grid, labeler.n_segments, float(kl["smoothing"]), float(kl["decay_km"]))
    return TrainedModels(gan, history, guide, nmf, labeler, priors, segments)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------
@dataclass
class PseudoPopulation:
    trajectories: list
    roles: list
    patterns: list
    segments: np.ndarray
    tables: dict


def generate_population(models: TrainedModels, grid: Grid, cfg: dict) -> PseudoPopulation:
    """Sample patterns, label them, walk the guided chain, pick key locations and geocode."""
    gen = cfg["generate"]
    n, days, start_day = int(gen["n_users"]), int(gen["days"]), int(gen["start_day"])
    if n == 0:
        return PseudoPopulation([], [], [], np.empty(0, dtype=np.int64), {})
    set_threads(cfg)
    rng = stage_rng(cfg, "generate")
    patterns = sample_life_patterns(models.gan, n, rng)
    V = np.stack([vectorize(p) for p in patterns])
    post = posterior(project_matrix(V, models.nmf), models.labeler, None)
    segments = np.argmax(post, axis=1)
    pis = np.stack([p.pi for p in patterns])
    Ts = np.stack([p.T for p in patterns])
    values = gwg_sample_batch(pis, Ts, models.guide, float(cfg["gwg"]["alpha"]), days, rng)
    width = len(str(n - 1))
    trajs, seqs, tables = [], [], {}
    jitter = float(cfg["keyloc"]["jitter_m"])
    tz = int(cfg["tz_offset_s"])
    for i in range(n):
        pid = f"p{i:0{width}d}"
        seq = RoleSequence(pid, start_day, values[i], L=patterns[i].L)
        table = sample_key_table(int(segments[i]), models.priors, patterns[i], grid, rng,
                                 extra_roles=np.unique(values[i]))
        trajs.append(geocode_sequence(seq, table, grid, jitter, rng, tz))
        seqs.append(seq)
        tables[pid] = table
    return PseudoPopulation(trajs, seqs, patterns, segments, tables)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------
def run_fem(users: list[IngestedUser], grid: Grid, cfg: dict) -> list:
    """One FEM clone per training user, geocoded to that user's own places."""
    rng = stage_rng(cfg, "fem")
    gen = cfg["generate"]
    days, start_day = int(gen["days"]), int(gen["start_day"])
    out = []
    for u in users:
        cells, dwell = {}, {}
        for p in u.places:
            c = grid.locate(p.lat, p.lon)
            if c is not None:
                cells[p.role] = c
                dwell[p.role] = p.total_dwell_s
        if HOME not in cells or u.roles.days < 2:
            continue
        model = fem_fit(u.roles, cells, dwell, float(cfg["staypoint"]["smoothing"]))
        traj, _ = fem_generate(model, days, rng, start_day, float(cfg["keyloc"]["jitter_m"]), grid,
                               int(cfg["tz_offset_s"]))
        out.append(traj)
    return out


def cell_series(trajectories, grid: Grid, tz_offset_s: int = 0):
    """``(start_day, hourly cells)`` per trajectory, whole local days."""
    from .ingest import hourly_cells

    out = []
    for t in trajectories:
        if len(t) == 0:
            continue
        d0, nd = day_range(t, tz_offset_s)
        out.append((t.user_id, d0, hourly_cells(t, grid, d0 * DAY_S - tz_offset_s, nd * HOURS)))
    return out


def run_timegeo(trajectories, grid: Grid, cfg: dict):
    """Fit on the hourly cells of the training corpus; one walker per training user's home."""
    rng = stage_rng(cfg, "timegeo")
    series = cell_series(trajectories, grid, int(cfg["tz_offset_s"]))
    params = timegeo_fit([(d, c) for _, d, c in series], grid)
    gen = cfg["generate"]
    days, start_day = int(gen["days"]), int(gen["start_day"])
    out = []
    L = int(cfg["L"])
    for uid, d0, cells in series:
        _, role_cell = roles_from_cells(uid, cells, d0, L, int(cfg["tz_offset_s"]))
        if HOME not in role_cell:
            continue
        out.append(timegeo_generate(params, role_cell[HOME], days, grid, rng, start_day, uid,
                                    float(cfg["keyloc"]["jitter_m"]), int(cfg["tz_offset_s"])))
    return params, out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def cell_roles(trajectories, grid: Grid, L: int, tz_offset_s: int = 0) -> list[RoleSequence]:
    return [roles_from_cells(uid, cells, d0, L, tz_offset_s)[0]
            for uid, d0, cells in cell_series(trajectories, grid, tz_offset_s)]


def evaluate_corpora(gen_trajs, truth_trajs, grid: Grid, cfg: dict):
    """Full metric battery; returns ``(MetricReport, curves)`` where curves are CSV-ready rows."""
    m = cfg["metrics"]
    L = int(cfg["L"])
    tz = int(cfg["tz_offset_s"])
    gen_h = [to_hourly(t, grid) for t in gen_trajs]
    truth_h = [to_hourly(t, grid) for t in truth_trajs]

    jg, jt = jump_sizes(gen_h, grid), jump_sizes(truth_h, grid)
    dg, dt = daily_visit_counts(gen_h, grid, tz), daily_visit_counts(truth_h, grid, tz)
    ks_jump = ks_statistic(jg, jt) if jg.size and jt.size else float("nan")
    ks_daily = ks_statistic(dg, dt)

    rg = cell_roles(gen_trajs, grid, L, tz)
    rt = cell_roles(truth_trajs, grid, L, tz)
    prof_g, prof_t = activity_profile(rg), activity_profile(rt)
    js_home = hourly_js_by_hour(rg, rt, 0, int(m["bins"]))
    js_work = hourly_js_by_hour(rg, rt, 1, int(m["bins"]))
    pg = [extract_life_pattern(s) for s in rg if s.days >= 2]
    pt = [extract_life_pattern(s) for s in rt if s.days >= 2]
    pat_js = pattern_distribution_js(pg, pt, int(m["pattern_d"]), int(m["bins_per_dim"]),
                                     seed=int(stage_rng(cfg, "evaluate").integers(2**31)))

    pop_g, pop_t = aggregate_pair(gen_h, truth_h, grid, "grid", tz_offset_s=tz)
    od_g, od_t = aggregate_pair(gen_h, truth_h, grid, "od", tz_offset_s=tz)
    grid_r2 = _paired_r2(pop_g, pop_t)
    od_r2 = _paired_r2(od_g, od_t)
    nat_grid, nat_od = natural_fluctuation(truth_h, grid, int(m["split_seed"]), tz_offset_s=tz)
    per_hour = {
        "grid_r2": per_hour_r2(pop_g, pop_t),
        "od_r2": per_hour_r2(od_g, od_t),
        "js_home": js_home.tolist(),
        "js_work": js_work.tolist(),
    }
    report = MetricReport(
        ks_jump=ks_jump, ks_daily_visits=ks_daily, activity_mae=activity_mae(prof_g, prof_t),
        hourly_js=float((js_home.mean() + js_work.mean()) / 2), pattern_js_3d=pat_js,
        grid_r2=grid_r2, od_r2=od_r2, natural_grid_r2=nat_grid, natural_od_r2=nat_od,
        hourly_js_by_role={"home": float(js_home.mean()), "work": float(js_work.mean())},
        per_hour=per_hour,
        constants={"js_units": "nats", "prob_bins": int(m["bins"]), "pattern_bins_per_dim": int(m["bins_per_dim"]),
                   "pattern_d": int(m["pattern_d"]), "split_seed": int(m["split_seed"]),
                   "n_gen": len(gen_h), "n_truth": len(truth_h)},
    )
    edges = np.unique(np.concatenate([[0.0], np.logspace(-1, 2, 31)]))
    hist_g = np.histogram(jg, edges)[0]
    hist_t = np.histogram(jt, edges)[0]
    curves = {
        "jump_hist": [{"lo_km": a, "hi_km": b, "gen": int(x), "truth": int(y)}
                      for a, b, x, y in zip(edges[:-1], edges[1:], hist_g, hist_t)],
        "activity_profile": [{"hour": h, "role": r, "gen": float(prof_g[h, r]), "truth": float(prof_t[h, r])}
                             for h in range(HOURS) for r in range(L)],
        "daily_visits": [{"count": int(c), "gen": int((dg == c).sum()), "truth": int((dt == c).sum())}
                         for c in range(1, int(max(dg.max(initial=1), dt.max(initial=1))) + 1)],
    }
    return report, curves


# ---------------------------------------------------------------------------
# Long-tail reconstruction
# ---------------------------------------------------------------------------
def ranked_presence(user: IngestedUser, grid: Grid, tz_offset_s: int = 0) -> RankedPresence:
    """Hourly place rank (the role under ``keep_all`` ranking) and the cell of that place."""
    cell_of = {p.role: grid.locate(p.lat, p.lon) for p in user.places}
    v = user.roles.values
    cells = np.array([-1 if cell_of.get(int(r)) is None else cell_of[int(r)] for r in v], dtype=np.int64)
    ranks = np.where(cells >= 0, v, -1)
    start_hour = (user.roles.start_day * DAY_S - tz_offset_s) // 3600
    return RankedPresence(user.user_id, int(start_hour), cells, ranks)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------
class StageTimer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = round(time.perf_counter() - self.t0, 3)

        return _Ctx()


def update_manifest(out_dir, command: str, cfg: dict, timings: dict, artifacts: list) -> Path:
    from .formats import read_json, write_json

    path = Path(out_dir) / "manifest.json"
    manifest = read_json(path) if path.exists() else {"runs": {}}
    manifest["tool_version"] = __version__
    manifest["config_hash"] = config_hash(cfg)
    manifest["runs"][command] = {
        "config_hash": config_hash(cfg),
        "timings_s": timings,
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
    }
    return write_json(path, manifest)
