"""Command-line entry points: simulate, survey, run and eval."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .anchors import SurveyError, self_localize, survey_from_network
from .config import (
    ConfigError,
    dump_all,
    load_kv,
    parse_kv,
    pipeline_for_scenario,
    pipeline_from_kv,
    scenario_from_kv,
)
from .dataio import (
    CONFIG_NAME,
    DataError,
    anchors_csv,
    atomic_write,
    csv_text,
    fmt_num,
    fmt_stamp,
    read_dataset,
    read_estimates,
    read_survey,
    write_dataset,
    write_estimates,
    write_json,
    write_jsonl,
)
from .evaluation import PLOT_HEADER, EvaluationError, evaluate, plot_rows
from .pipeline import dataset_records, run
from .sim import simulate

ERRORS = (DataError, ConfigError, EvaluationError, SurveyError)


def cmd_simulate(args):
    kv, source = load_kv(args.spec) if args.spec else ({}, "<defaults>")
    scenario = scenario_from_kv(kv, source)
    pipeline_from_kv(kv, source)  # reject bad estimator keys before the slow part
    dataset = simulate(scenario, seed=args.seed)
    write_dataset(dataset, args.out, dump_all(scenario, pipeline_for_scenario(scenario)))
    print(f"wrote {args.out} ({len(dataset.imu.stamps)} IMU, {len(dataset.uwb.stamp)} UWB samples)")
    return 0


def cmd_survey(args):
    samples = read_survey(args.input)
    ids = tuple(int(x) for x in args.ids.split(","))
    if len(ids) != 3:
        raise SurveyError("--ids needs three anchor ids")
    survey = survey_from_network(samples, args.min_samples, ids, args.height)
    anchors = self_localize(survey)
    atomic_write(args.out, anchors_csv({str(k): v for k, v in anchors.positions.items()}))
    print(f"wrote {args.out}: d01={survey.d01:.3f} d02={survey.d02:.3f} d12={survey.d12:.3f}")
    return 0


def _run_config(bundle, config_path):
    kv, source = {}, "<defaults>"
    if bundle.config_text:
        kv, source = parse_kv(bundle.config_text, str(bundle.root / CONFIG_NAME)), str(bundle.root / CONFIG_NAME)
    cfg, antennas = pipeline_from_kv(kv, source)
    if config_path:
        kv2, source2 = load_kv(config_path)
        cfg, antennas2 = pipeline_from_kv(kv2, source2, base=cfg)
        if any(k.startswith("rig.antenna.") for k in kv2):
            antennas = antennas2
    return cfg, antennas


def cmd_run(args):
    bundle = read_dataset(args.dataset)
    cfg, antennas = _run_config(bundle, args.config)
    if bundle.uwb is None or args.no_uwb:
        cfg.use_uwb = False
    if cfg.use_uwb:
        used = {f"{n}.{a}" for n, a in zip(bundle.uwb.node_id, bundle.uwb.antenna_id)}
        missing = sorted(used - set(antennas))
        if missing:
            raise ConfigError(f"no body offset configured for antennas {', '.join(missing)}")
    records = dataset_records(bundle, include_uwb=cfg.use_uwb)
    result = run(records, cfg, bundle.anchors, antennas)
    write_estimates(args.out, [(e.stamp, e.state) for e in result.estimates])
    log = Path(args.log) if args.log else Path(args.out).with_suffix(".jsonl")
    rows = [{"stamp": fmt_stamp(t), **rep.as_dict()} for t, rep in result.reports]
    write_jsonl(log, rows)
    if not result.estimates:
        print("warning: estimator never initialized; no estimates written", file=sys.stderr)
    print(f"wrote {args.out} ({len(result.estimates)} states) and {log}")
    return 0


def cmd_eval(args):
    est = read_estimates(args.est)
    gt = read_estimates(args.gt)
    report, errors = evaluate(est, gt, align=args.align, tol=args.tol)
    write_json(args.out, report)
    plot = Path(args.plot) if args.plot else Path(args.out).with_name("plotdata.csv")
    rows = [[fmt_stamp(r[0]), *map(fmt_num, r[1:])] for r in plot_rows(errors)]
    atomic_write(plot, csv_text(PLOT_HEADER, rows))
    print(
        f"rmse_pos {report['rmse_pos_m']:.4f} m  rmse_rot {report['rmse_rot_deg']:.3f} deg  "
        f"pairs {report['matched_pairs']}"
    )
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="viral-fusion", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize a dataset bundle")
    s.add_argument("--spec", help="key = value scenario file (defaults when omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("survey", help="self-localize three anchors from inter-anchor ranges")
    s.add_argument("--in", dest="input", required=True, help="CSV anchor_i,anchor_j,distance,stamp")
    s.add_argument("--out", required=True, help="anchors.csv to write")
    s.add_argument("--ids", default="100,101,102", help="anchor ids 0,1,2 of the deployment frame")
    s.add_argument("--height", type=float, default=1.0, help="common anchor height in m")
    s.add_argument("--min-samples", type=int, default=1)
    s.set_defaults(func=cmd_survey)

    s = sub.add_parser("run", help="run the estimator on a dataset bundle")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config", help="key = value overrides on top of the bundle's config.txt")
    s.add_argument("--out", required=True, help="estimate CSV")
    s.add_argument("--log", help="per-step solver log (JSON lines); default next to --out")
    s.add_argument("--no-uwb", action="store_true", help="ignore uwb.csv even when present")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="RMSE of an estimate against ground truth")
    s.add_argument("--est", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True, help="report.json")
    s.add_argument("--plot", help="per-axis error CSV; default plotdata.csv next to --out")
    s.add_argument("--align", choices=("none", "yaw-trans"), default="none")
    s.add_argument("--tol", type=float, default=0.01, help="stamp matching tolerance in s")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
