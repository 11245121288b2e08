"""``geoavatar`` command line: fixture, ingest, train, generate, baseline, evaluate, reconstruct."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .errors import ConfigError, GeoAvatarError
from .ingest import SignificantPlace
from .formats import (patterns_from_json, patterns_to_json, read_census, read_json, read_places, read_role_sequences,
                      read_trajectories, write_census, write_curve, write_json, write_key_tables, write_places,
                      write_role_sequences, write_trajectories)

log = logging.getLogger("geoavatar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _out(cfg) -> Path:
    p = Path(cfg["paths"]["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_fixture(args) -> int:
    from .fixture import make_fixture, make_heavy_tail_fixture

    out = Path(args.out)
    timer = pl.StageTimer()
    with timer("fixture"):
        if args.heavy_tail:
            fx = make_heavy_tail_fixture(args.n_users, args.days, args.seed)
        else:
            fx = make_fixture(args.n_users, args.days, args.seed)
    g = fx.grid
    cfg = {
        "paths": {"trajectories": "trajectories.csv", "census": "census.csv", "out_dir": "run"},
        "grid": {"lat_min": g.lat_min, "lat_max": g.lat_max, "lon_min": g.lon_min, "lon_max": g.lon_max,
                 "cell_size_m": g.cell_size_m},
        "generate": {"n_users": args.n_users, "days": args.days, "start_day": fx.start_day},
        "seed": args.seed,
    }
    arts = [write_trajectories(out / "trajectories.csv", fx.trajectories), write_json(out / "config.json", cfg)]
    if fx.census:
        arts.append(write_census(out / "census.csv", fx.census))
    full = pl.load_config(out / "config.json")
    pl.update_manifest(out, "fixture", full, timer.timings, arts)
    print(f"fixture: {len(fx.trajectories)} users -> {out}")
    return EXIT_OK


def cmd_ingest(cfg) -> int:
    out = _out(cfg)
    timer = pl.StageTimer()
    with timer("read"):
        trajs = read_trajectories(pl.require_path(cfg, "trajectories"))
    with timer("ingest"):
        users = pl.ingest_corpus(trajs, cfg)
    arts = [
        write_places(out / "places.csv", {u.user_id: u.places for u in users}),
        write_json(out / "patterns.json", patterns_to_json({u.user_id: u.pattern for u in users})),
        write_role_sequences(out / "roles.csv", [u.roles for u in users]),
    ]
    pl.update_manifest(out, "ingest", cfg, timer.timings, arts)
    print(f"ingest: {len(users)} of {len(trajs)} users")
    return EXIT_OK


def load_ingested(out: Path) -> list:
    places = read_places(out / "places.csv", producer="ingest")
    patterns = patterns_from_json(read_json(out / "patterns.json", producer="ingest"))
    roles = {s.user_id: s for s in read_role_sequences(out / "roles.csv", producer="ingest")}
    by_user: dict[str, list] = {}
    for r in places.itertuples(index=False):
        by_user.setdefault(r.user_id, []).append(
            SignificantPlace(r.user_id, int(r.role), float(r.lat), float(r.lon), int(r.visits), int(r.dwell_s), ()))
    return [pl.IngestedUser(uid, by_user.get(uid, []), roles[uid], patterns.get(uid)) for uid in sorted(roles)]


def cmd_train(cfg) -> int:
    from .lifegen import model_to_dict

    out = _out(cfg)
    census = read_census(pl.require_path(cfg, "census"))
    grid = pl.grid_from_config(cfg)
    timer = pl.StageTimer()
    users = load_ingested(out)
    with timer("train"):
        models = pl.train_models(users, census, grid, cfg)
    arts = [
        write_json(out / "gan.json", model_to_dict(models.gan)),
        write_json(out / "guide.json", models.guide.to_dict()),
        write_json(out / "nmf.json", models.nmf.to_dict()),
        write_json(out / "labeler.json", models.labeler.to_dict()),
        write_json(out / "priors.json", models.priors.to_dict()),
        write_curve(out / "train_history.csv", models.history,
                    ["epoch", "wasserstein", "critic_loss", "generator_loss"]),
        write_curve(out / "train_segments.csv",
                    [{"user_id": u, "segment": s} for u, s in sorted(models.segments.items())],
                    ["user_id", "segment"]),
    ]
    pl.update_manifest(out, "train", cfg, timer.timings, arts)
    print(f"train: {len(users)} users, final W={models.history[-1]['wasserstein']:.4f}"
          if models.history else f"train: {len(users)} users")
    return EXIT_OK


def load_models(out: Path) -> pl.TrainedModels:
    from .demolabel import LabelerModel, NmfModel
    from .keyloc import SpatialPriors
    from .lifegen import model_from_dict
    from .seqgen import GuideModel

    return pl.TrainedModels(
        gan=model_from_dict(read_json(out / "gan.json", producer="train")),
        history=[],
        guide=GuideModel.from_dict(read_json(out / "guide.json", producer="train")),
        nmf=NmfModel.from_dict(read_json(out / "nmf.json", producer="train")),
        labeler=LabelerModel.from_dict(read_json(out / "labeler.json", producer="train")),
        priors=SpatialPriors.from_dict(read_json(out / "priors.json", producer="train")),
    )


def cmd_generate(cfg) -> int:
    out = _out(cfg)
    grid = pl.grid_from_config(cfg)
    timer = pl.StageTimer()
    if int(cfg["generate"]["n_users"]) == 0:
        pop = pl.PseudoPopulation([], [], [], np.empty(0), {})
    else:
        models = load_models(out)
        with timer("generate"):
            pop = pl.generate_population(models, grid, cfg)
    arts = [
        write_trajectories(out / "pseudo_trajectories.csv", pop.trajectories),
        write_role_sequences(out / "pseudo_roles.csv", pop.roles),
        write_key_tables(out / "pseudo_key_tables.csv", pop.tables),
    ]
    pl.update_manifest(out, "generate", cfg, timer.timings, arts)
    print(f"generate: {len(pop.trajectories)} pseudo persons")
    return EXIT_OK


def cmd_baseline(cfg, which: str) -> int:
    out = _out(cfg)
    grid = pl.grid_from_config(cfg)
    timer = pl.StageTimer()
    if which == "fem":
        users = load_ingested(out)
        with timer("fem"):
            trajs = pl.run_fem(users, grid, cfg)
        arts = [write_trajectories(out / "fem_trajectories.csv", trajs)]
    else:
        truth = read_trajectories(pl.require_path(cfg, "trajectories"))
        with timer("timegeo"):
            params, trajs = pl.run_timegeo(truth, grid, cfg)
        arts = [write_trajectories(out / "timegeo_trajectories.csv", trajs),
                write_json(out / "timegeo_params.json", params.to_dict())]
    pl.update_manifest(out, f"baseline-{which}", cfg, timer.timings, arts)
    print(f"baseline {which}: {len(trajs)} trajectories")
    return EXIT_OK


def cmd_evaluate(cfg, gen_path, truth_path, name: str) -> int:
    out = _out(cfg)
    grid = pl.grid_from_config(cfg)
    gen_path = Path(gen_path) if gen_path else out / "pseudo_trajectories.csv"
    truth_path = Path(truth_path) if truth_path else pl.require_path(cfg, "trajectories")
    timer = pl.StageTimer()
    gen = read_trajectories(gen_path, producer="generate")
    truth = read_trajectories(truth_path)
    with timer("evaluate"):
        report, curves = pl.evaluate_corpora(gen, truth, grid, cfg)
    arts = [write_json(out / f"{name}.json", report.to_dict())]
    for key, rows in curves.items():
        arts.append(write_curve(out / f"{name}_{key}.csv", rows, list(rows[0]) if rows else []))
    pl.update_manifest(out, f"evaluate-{name}", cfg, timer.timings, arts)
    for k in ("ks_jump", "ks_daily_visits", "activity_mae", "hourly_js", "pattern_js_3d", "grid_r2", "od_r2",
              "natural_grid_r2", "natural_od_r2"):
        print(f"{k:>16s}  {getattr(report, k):.4f}")
    return EXIT_OK


def cmd_reconstruct(cfg, n_list) -> int:
    from .metrics import reconstruction_experiment

    out = _out(cfg)
    grid = pl.grid_from_config(cfg)
    timer = pl.StageTimer()
    trajs = read_trajectories(pl.require_path(cfg, "trajectories"))
    tz = int(cfg["tz_offset_s"])
    with timer("ingest"):
        users = pl.ingest_corpus(trajs, cfg, keep_all=True)
    with timer("reconstruct"):
        rows = reconstruction_experiment([pl.ranked_presence(u, grid, tz) for u in users], grid.n_cells,
                                         n_list or cfg["metrics"]["N_list"])
    arts = [write_curve(out / "reconstruction.csv", rows,
                        ["N", "static_r2", "static_mse", "dynamic_r2", "dynamic_mse"])]
    pl.update_manifest(out, "reconstruct", cfg, timer.timings, arts)
    for r in rows:
        print(f"N={r['N']:3d}  static r2={r['static_r2']:.4f}  dynamic r2={r['dynamic_r2']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set gwg.alpha=0.3 (repeatable)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="intra-stage parallelism (1 = bit-deterministic)")
    p.add_argument("--out-dir", help="run directory for artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoavatar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="write a seeded synthetic corpus with census and config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-users", type=int, default=200)
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heavy-tail", action="store_true", help="many low-frequency places per user")

    for name, text in [("ingest", "staypoints, places, role sequences and life patterns"),
                       ("train", "fit GAN, guide, NMF, labeler and spatial priors"),
                       ("generate", "emit pseudo trajectories")]:
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "generate":
            p.add_argument("--n-users", type=int)
            p.add_argument("--days", type=int)

    p = sub.add_parser("baseline", help="FEM or TimeGeo reference trajectories")
    p.add_argument("which", choices=["fem", "timegeo"])
    _common(p)

    p = sub.add_parser("evaluate", help="metric report of a generated corpus against ground truth")
    _common(p)
    p.add_argument("--gen", help="generated trajectory CSV (default: run dir pseudo_trajectories.csv)")
    p.add_argument("--truth", help="ground-truth trajectory CSV (default: paths.trajectories)")
    p.add_argument("--name", default="report")

    p = sub.add_parser("reconstruct", help="top-N place reconstruction curves")
    _common(p)
    p.add_argument("--n-list", help="comma-separated N values")
    return parser


def config_from_args(args) -> dict:
    overrides = [pl.parse_assignment(s) for s in args.set]
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    if args.threads is not None:
        overrides.append({"threads": args.threads})
    if args.out_dir is not None:
        overrides.append({"paths": {"out_dir": args.out_dir}})
    gen = {}
    if getattr(args, "n_users", None) is not None:
        gen["n_users"] = args.n_users
    if getattr(args, "days", None) is not None:
        gen["days"] = args.days
    if gen:
        overrides.append({"generate": gen})
    return pl.load_config(args.config, overrides)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fixture":
            return cmd_fixture(args)
        cfg = config_from_args(args)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "baseline":
            return cmd_baseline(cfg, args.which)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.gen, args.truth, args.name)
        if args.command == "reconstruct":
            try:
                n_list = [int(x) for x in args.n_list.split(",")] if args.n_list else None
            except ValueError as exc:
                raise ConfigError(f"--n-list must be comma-separated integers: {args.n_list!r}") from exc
            return cmd_reconstruct(cfg, n_list)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeoAvatarError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
