"""Command line entry point: ``kgmpc <subcommand> ...``.

Exit codes: 0 success, 1 other failure, 2 qualitative-ordering failure,
3 divergence, 4 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import load_config, section
from .datagen import (CampaignConfig, job_count, load_dataset, prediction_rmse, read_manifest, run_campaign,
                      assemble_snapshots, save_dataset)
from .errors import ConfigError, DivergenceError, KgmpcError
from .harness import build_variant, compare, plot_data_csv, run_scenario, series_csv, setup_from_config, write_report
from .koopman import DelaySpec, fit, load_predictor, save_predictor
from .mpc import write_log

EXIT_OK, EXIT_FAIL, EXIT_ORDER, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2, 3, 4


def _config(path):
    return load_config(path)


def _campaign(cfg, **overrides) -> CampaignConfig:
    sec = section(cfg, "campaign")
    sec.update({k: v for k, v in overrides.items() if v is not None})
    return CampaignConfig.from_config(sec, section(cfg, "measurement"))


def _delay_spec(cfg, nd=None, ts=None) -> DelaySpec:
    sec = section(cfg, "koopman")
    return DelaySpec(nd=int(nd or sec.get("nd", 5)), ts=float(ts or section(cfg, "campaign").get("ts", 0.05)),
                     norm_index=int(sec.get("norm_index", 1)))


def _storage_variant(cfg):
    base, dsms, _, _, slot = setup_from_config(cfg)
    return build_variant(base, "C", dsms, slot=slot), dsms


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    base, dsms, mpc, sc, slot = setup_from_config(cfg)
    sc = replace(sc, variant=args.variant, fault=args.fault or sc.fault, t_end=args.t_end or sc.t_end)
    pred = load_predictor(args.predictor) if args.predictor else None
    if pred is not None:
        mpc = replace(mpc, ts=pred.spec.ts)
    bundle = run_scenario(sc, build_variant(base, args.variant, dsms, slot=slot), predictor=pred, mpc=mpc)
    text = series_csv(bundle)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_DIVERGED if bundle.diverged else EXIT_OK


def cmd_datagen(args) -> int:
    cfg = _config(args.config)
    camp = _campaign(cfg, trajectories=args.trajectories, seed=args.seed)
    variant, dsms = _storage_variant(cfg)
    ds = run_campaign(camp, variant.model, dsms, jobs=job_count(args.jobs))
    spec = _delay_spec(cfg, ts=camp.ts)
    ds.manifest["koopman.nd"] = spec.nd
    save_dataset(ds, args.out, spec)
    print(f"{len(ds.records)} trajectories ({ds.manifest['truncated']} truncated) -> {args.out}")
    print(f"hash {ds.manifest['hash']}")
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = load_dataset(args.dataset)
    manifest = read_manifest(args.dataset)
    spec = DelaySpec(nd=args.nd, ts=float(manifest.get("campaign.ts", 0.05)), norm_index=args.norm_index)
    pred = fit(assemble_snapshots(ds, spec), spec, rcond=args.rcond)
    save_predictor(pred, args.out)
    print(f"nd={spec.nd} N={pred.n} residual={pred.residual:.6g} condition={pred.condition:.3g} -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args.config)
    pred = load_predictor(args.predictor)
    camp = _campaign(cfg, trajectories=args.trials, seed=args.seed)
    camp = replace(camp, ts=pred.spec.ts)
    variant, dsms = _storage_variant(cfg)
    ds = run_campaign(camp, variant.model, dsms, jobs=job_count(args.jobs))
    rmse, used = prediction_rmse(pred, ds, args.steps)
    print(f"relative RMSE {rmse:.4f} % over {used} trials ({args.steps}-step horizon, nd={pred.spec.nd})")
    return EXIT_OK


def cmd_control(args) -> int:
    cfg = _config(args.scenario)
    base, dsms, mpc, sc, slot = setup_from_config(cfg)
    pred = load_predictor(args.predictor) if args.predictor else None
    if pred is None and sc.variant == "C" and sc.predictor:
        pred = load_predictor(Path(args.scenario).parent / sc.predictor)
    bundle = run_scenario(sc, build_variant(base, sc.variant, dsms, slot=slot), predictor=pred, mpc=mpc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{sc.fault}_{sc.variant}.csv").write_text(series_csv(bundle))
    (out / f"{sc.fault}_{sc.variant}_plot.csv").write_text(plot_data_csv(bundle))
    if bundle.controller is not None:
        write_log(bundle.controller, out / "control_log.csv", timing=not args.no_timing)
    print(f"{sc.variant}/{sc.fault}: {len(bundle.t)} samples -> {out}")
    return EXIT_DIVERGED if bundle.diverged else EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args.config)
    base, dsms, mpc, sc, slot = setup_from_config(cfg)
    tags = [v.strip() for v in args.variants.split(",") if v.strip()]
    pred = load_predictor(args.predictor) if args.predictor else None
    if "C" in tags and pred is None:
        raise ConfigError("variant C needs --predictor")
    cmp = compare(args.fault, tags, base, dsms=dsms, predictor=pred, mpc=mpc, scenario=sc,
                  jobs=job_count(args.jobs), slot=slot)
    if args.out:
        write_report(cmp, args.out, plot_data=args.plot_data)
    for tag, m in cmp.metrics.items():
        print(f"{tag}: peak {m.peak:.6g} rms {m.rms:.6g} settling {m.settling_time:.3g} s")
    for tag, err in cmp.errors.items():
        print(f"{tag}: {err}")
    for name, ok in cmp.ordering.items():
        print(f"{name}: {'ok' if ok else 'FAILED'}")
    return cmp.exit_code()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgmpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one system variant under a fault script")
    s.add_argument("--config")
    s.add_argument("--variant", default="A", choices=("A", "B", "C"))
    s.add_argument("--fault", choices=("fault1", "fault2", "none"))
    s.add_argument("--t-end", type=float)
    s.add_argument("--predictor", help="predictor file (variant C)")
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("datagen", help="run an identification campaign")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--trajectories", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("fit", help="fit a lifted linear predictor to a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--nd", type=int, default=5)
    s.add_argument("--norm-index", type=int, default=1)
    s.add_argument("--rcond", type=float, default=1e-10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("evaluate", help="multi-step prediction error on fresh trajectories")
    s.add_argument("--config")
    s.add_argument("--predictor", required=True)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--seed", type=int, default=77)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("control", help="closed-loop run described by a scenario file")
    s.add_argument("--scenario", required=True)
    s.add_argument("--predictor")
    s.add_argument("--out", default="control_out")
    s.add_argument("--no-timing", action="store_true", help="zero wall-clock columns in the log")
    s.set_defaults(func=cmd_control)

    s = sub.add_parser("compare", help="run variants side by side and check their ordering")
    s.add_argument("--config")
    s.add_argument("--fault", default="fault1", choices=("fault1", "fault2"))
    s.add_argument("--variants", default="A,B,C")
    s.add_argument("--predictor")
    s.add_argument("--out")
    s.add_argument("--plot-data", action="store_true")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except KgmpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
