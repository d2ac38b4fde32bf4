"""Command-line entry point: ``weightmask <subcommand> --config FILE ...``.

Each subcommand runs one pipeline for every configured seed (or just
``--seed``), writes ``report.json`` plus CSV tables under ``--out`` and,
with ``--assert``, exits with status 1 when a pipeline check fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as E
from . import report as R
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, from_dict, load_config, to_toml_dict, tomllib

log = logging.getLogger("weightmask")

CHECKPOINT_NAME = "checkpoint.wmk"


# config handling

def apply_overrides(cfg: ExperimentConfig, items: list[str]) -> ExperimentConfig:
    """``section.key=value`` overrides, values parsed as TOML (``mask.steps=200``, ``experiment.seeds=[1]``)."""
    if not items:
        return cfg
    raw = to_toml_dict(cfg)
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        section, field = key.strip().split(".", 1)
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value
        raw.setdefault(section, {})[field] = parsed
    return from_dict(raw)


def resolve(args) -> tuple[ExperimentConfig, list[int], Path]:
    if args.config is None:
        raise ConfigError("--config is required for this subcommand")
    cfg = apply_overrides(load_config(args.config), args.set)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    out = Path(args.out) if args.out else Path(cfg.out) / (cfg.name or cfg.task)
    return cfg, seeds, out


def checkpoint_path(args, out: Path, seed: int, n_seeds: int) -> Path:
    if args.checkpoint and n_seeds == 1:
        return Path(args.checkpoint)
    return out / f"seed{seed}" / CHECKPOINT_NAME


def open_session(cfg: ExperimentConfig, path: Path, seed: int, train_if_missing: bool = True,
                 task=None) -> E.Session:
    if path.exists():
        s = E.Session.from_checkpoint(cfg, load_checkpoint(path), task)
        if s.meta.get("weights") is not None or not train_if_missing:
            return s
    elif not train_if_missing:
        raise FileNotFoundError(f"checkpoint {path} not found; run `train` first")
    else:
        s = E.Session(cfg, seed, task)
    log.info("no trained weights for seed %d; training them first", seed)
    E.train_weights_stage(s)
    save_checkpoint(s.to_checkpoint(), path)
    return s


# subcommands

def cmd_train(args, cfg, seeds, out):
    runs, checks = {}, []
    for seed in seeds:
        s = E.Session(cfg, seed)
        path = checkpoint_path(args, out, seed, len(seeds))
        if path.exists():
            s = E.Session.from_checkpoint(cfg, load_checkpoint(path), s.task)
        runs[seed] = E.train_weights_stage(s, None if args.steps is None else args.steps)
        save_checkpoint(s.to_checkpoint(), path)
        if cfg.task == "addmul":
            checks.append(E.check(f"seed {seed}: unmasked accuracy >= 99%", runs[seed]["accuracy"] >= 0.99,
                                  runs[seed]["accuracy"]))
    return {"weights": runs}, {}, checks


def _task_for(cfg, seeds):
    # share one task object (and its eval set) across seeds
    return E.build_task(cfg)


def cmd_mask(args, cfg, seeds, out):
    task = _task_for(cfg, seeds)
    runs, tables, checks = {}, {}, []
    for seed in seeds:
        path = checkpoint_path(args, out, seed, len(seeds))
        s = open_session(cfg, path, seed, task=task)
        if cfg.task == "mnist-leave-one-out":
            res = E.leave_one_out(s)
            for c, d in res["deltas"].items():
                tables[f"seed{seed}_confusion_delta_class{c}"] = R.matrix_rows(d["delta"])
            checks.append(E.check(f"seed {seed}: removed class is the largest drop for >= 8 of "
                                  f"{len(res['deltas'])} classes", res["largest_drop_count"] >= 8,
                                  res["largest_drop_count"]))
            checks.append(E.check(f"seed {seed}: delta rows sum to 0", max(
                d["max_row_sum_error"] for d in res["deltas"].values()) <= 1e-6, None))
        else:
            names = args.stage or None
            res = E.run_stages(s, names, force=args.force)
            if "full" in s.bits:
                base = s.meta["weights"]["accuracy"]
                acc = res["full"]["accuracy"] if "full" in res else s.meta["stages"]["full"]["accuracy"]
                checks.append(E.check(f"seed {seed}: control mask drop <= 5 points", base - acc <= 0.05,
                                      {"unmasked": base, "masked": acc}))
        checks.append(E.check(f"seed {seed}: frozen weights unchanged by every stage",
                              all(x["frozen_weights_unchanged"] for x in s.meta["integrity"]),
                              len(s.meta["integrity"])))
        save_checkpoint(s.to_checkpoint(), path)
        runs[seed] = res
    return {"stages": runs}, tables, checks


def cmd_eval(args, cfg, seeds, out):
    task = _task_for(cfg, seeds)
    grids, sharing, behavior, checks, tables = [], {}, {}, [], {}
    for seed in seeds:
        s = open_session(cfg, checkpoint_path(args, out, seed, len(seeds)), seed, train_if_missing=False, task=task)
        grid = E.evaluate_matrix(s)
        grids.append(grid["accuracy"])
        checks += [dict(c, check=f"seed {seed}: {c['check']}") for c in E.partition_checks(grid)]
        if "behavior" in grid:
            behavior[seed] = grid["behavior"]
        pairs = {"addmul": ("add", "mul"), "double-add": ("pair1", "pair2")}.get(cfg.task)
        if pairs and all(p in s.bits for p in pairs):
            sh = E.sharing_table(s, *pairs)
            sharing[seed] = sh
            tables[f"seed{seed}_sharing"] = R.sharing_rows(sh["per_layer"], f"{pairs[0]}-{pairs[1]}")
            fn = E.addmul_checks if cfg.task == "addmul" else E.double_add_checks
            checks += [dict(c, check=f"seed {seed}: {c['check']}") for c in fn(s, grid, sh)]
    agg = R.aggregate_grids(grids)
    tables["accuracy"] = R.accuracy_rows(agg)
    return {"accuracy_pct": agg, "sharing": sharing, "behavior": behavior}, tables, checks


def cmd_transfer(args, cfg, seeds, out):
    data = E.load_mnist_data(cfg)
    runs, tables, checks = {}, {}, []
    variants = (False, True) if args.compare_biased else (cfg.transfer.biased,)
    for seed in seeds:
        for biased in variants:
            key = f"seed{seed}_{'biased' if biased else 'unbiased'}"
            res = E.transfer_sequence(cfg, seed, biased, data)
            runs[key] = res
            acc0 = res["tasks"][0]["accuracy"]
            checks.append(E.check(f"seed {seed} {key.split('_')[1]}: task 0 test accuracy >= 95%", acc0 >= 0.95, acc0))
            rows = []
            for t in res["tasks"]:
                for i, (layer, v) in enumerate(t["shared_with_previous"].items()):
                    rows.append({"pair": f"task{t['task']}", "layer_index": i, "layer": layer, "shared_fraction": v})
            tables[f"{key}_transfer_sharing"] = rows
        checks += E.transfer_checks(runs.get(f"seed{seed}_unbiased"), runs.get(f"seed{seed}_biased"),
                                    prefix=f"seed {seed}: ")
    return {"runs": runs}, tables, checks


def cmd_sweep(args, cfg, seeds, out):
    task = _task_for(cfg, seeds)
    runs, tables, checks = {}, {}, []
    for seed in seeds:
        s = open_session(cfg, checkpoint_path(args, out, seed, len(seeds)), seed, task=task)
        res = E.alpha_sweep(s)
        runs[seed] = res
        tables[f"seed{seed}_alpha_sweep"] = res["rows"]
        low = res["rows"][0]
        checks.append(E.check(f"seed {seed}: smallest alpha keeps >= 95% of unmasked accuracy",
                              low["accuracy"] >= 0.95 * res["unmasked_accuracy"], low["accuracy"]))
    return {"sweeps": runs}, tables, checks


def cmd_copy_io(args, cfg, seeds, out):
    task = _task_for(cfg, seeds)
    runs, tables, checks = {}, {}, []
    for seed in seeds:
        s = open_session(cfg, checkpoint_path(args, out, seed, len(seeds)), seed, task=task)
        res = E.copy_io_sanity(s)
        runs[seed] = res
        per = res["sharing"]["per_layer"]
        tables[f"seed{seed}_copy_io_sharing"] = R.sharing_rows(per, "pair1-pair2 (copied I/O)")
        layers = list(per)
        for h in layers[1:-1]:
            checks.append(E.check(f"seed {seed}: {h} shared fraction >= 90% after copy",
                                  per[h]["shared_fraction"] >= 0.9, per[h]["shared_fraction"]))
        for h in (layers[0], layers[-1]):
            checks.append(E.check(f"seed {seed}: {h} stays unshared", per[h]["shared_fraction"] <= 0.02,
                                  per[h]["shared_fraction"]))
        for p, a in res["accuracy_after_copy"].items():
            checks.append(E.check(f"seed {seed}: {p} accuracy >= 95% after copy", a >= 0.95, a))
    return {"runs": runs}, tables, checks


def cmd_half_mask(args, cfg, seeds, out):
    task = _task_for(cfg, seeds)
    stage = args.stage[0] if args.stage else cfg.stages[0].name
    runs, checks = {}, []
    for seed in seeds:
        path = checkpoint_path(args, out, seed, len(seeds))
        s = open_session(cfg, path, seed, task=task)
        E.train_mask_stage(s, cfg.stage(stage))
        save_checkpoint(s.to_checkpoint(), path)
        res = E.half_mask(s, stage)
        runs[seed] = res
        late, early = res["mask-late"]["drop"], res["mask-early"]["drop"]
        checks.append(E.check(f"seed {seed}: mask-late drop <= 15 points", late <= 0.15, late))
        checks.append(E.check(f"seed {seed}: mask-early drop > mask-late drop", early > late,
                              {"early": early, "late": late}))
    rows = [{"seed": sd, "side": side, **{k: v for k, v in r[side].items() if k != "side"}}
            for sd, r in runs.items() for side in ("mask-late", "mask-early")]
    return {"runs": runs}, {"half_mask": rows}, checks


def cmd_stability(args, cfg, seeds, out):
    task = _task_for(cfg, seeds)
    stage = args.stage[0] if args.stage else cfg.stages[0].name
    runs, checks = {}, []
    for seed in seeds:
        s = open_session(cfg, checkpoint_path(args, out, seed, len(seeds)), seed, task=task)
        res = E.stability(s, stage, tuple(args.mask_seeds))
        runs[seed] = res
        checks.append(E.check(f"seed {seed}: IoU between mask seeds >= 0.85", res["iou"] >= 0.85, res["iou"]))
    rows = [{"seed": sd, "stage": r["stage"], "iou": r["iou"], "iomin": r["iomin"]} for sd, r in runs.items()]
    return {"runs": runs}, {"stability": rows}, checks


def cmd_report(args):
    out = Path(args.out) if args.out else None
    if out is None:
        if args.config is None:
            raise ConfigError("report needs --out or --config")
        _, _, out = resolve(args)
    reports = sorted(out.rglob("report.json"))
    if not reports:
        raise FileNotFoundError(f"no report.json under {out}")
    summary, failed = [], 0
    for path in reports:
        data = json.loads(path.read_text())
        checks = data.get("checks", [])
        failed += sum(not c["passed"] for c in checks)
        summary.append({"report": str(path.relative_to(out)), "command": data.get("command"),
                        "checks": len(checks), "failed": sum(not c["passed"] for c in checks)})
        R.render_svgs(path.parent)
    R.write_csv(out / "summary.csv", summary)
    for row in summary:
        print(f"{row['report']}: {row['checks'] - row['failed']}/{row['checks']} checks passed")
    return failed


COMMANDS = {
    "train": cmd_train,
    "mask": cmd_mask,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "sweep-alpha": cmd_sweep,
    "sanity-copy-io": cmd_copy_io,
    "sanity-half-mask": cmd_half_mask,
    "stability": cmd_stability,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment TOML file")
    common.add_argument("--seed", type=int, help="run only this seed (default: the config's seed list)")
    common.add_argument("--out", type=Path, help="output directory (default: <experiment.out>/<name>)")
    common.add_argument("--checkpoint", type=Path, help="checkpoint file (single-seed runs)")
    common.add_argument("--precision", type=int, choices=(32, 64), default=32)
    common.add_argument("--assert", dest="assert_", action="store_true",
                        help="exit with status 1 if any pipeline check fails")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="weightmask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train the network weights, then freeze them")
    p.add_argument("--steps", type=int, help="override weights.steps")
    p = sub.add_parser("mask", parents=[common], help="train the configured mask stages")
    p.add_argument("--stage", action="append", help="only this stage (repeatable)")
    p.add_argument("--force", action="store_true", help="retrain stages already in the checkpoint")
    sub.add_parser("eval", parents=[common], help="accuracy grid over mask variants and splits")
    p = sub.add_parser("transfer", parents=[common], help="permuted-MNIST transfer sequence")
    p.add_argument("--compare-biased", action="store_true", help="run unbiased and biased variants")
    sub.add_parser("sweep-alpha", parents=[common], help="regularization sensitivity sweep")
    sub.add_parser("sanity-copy-io", parents=[common], help="copied input/output weights sanity check")
    p = sub.add_parser("sanity-half-mask", parents=[common], help="mask only early or late layers")
    p.add_argument("--stage", action="append")
    p = sub.add_parser("stability", parents=[common], help="IoU of masks trained from two mask seeds")
    p.add_argument("--stage", action="append")
    p.add_argument("--mask-seeds", type=int, nargs=2, default=(1, 2))
    sub.add_parser("report", parents=[common], help="summarize reports and render SVG charts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    with T.precision(args.precision):
        return _run(args)


def _run(args) -> int:
    try:
        if args.command == "report":
            failed = cmd_report(args)
            return 1 if args.assert_ and failed else 0
        cfg, seeds, out = resolve(args)
        result, tables, checks = COMMANDS[args.command](args, cfg, seeds, out)
    except (ConfigError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        # frozen-weight violations surface here
        print(f"integrity failure: {exc}", file=sys.stderr)
        return 1
    report = {"command": args.command, "config": cfg.to_dict(), "config_digest": cfg.digest(),
              "seeds": seeds, "precision": args.precision, "result": result, "checks": checks}
    dest = out / args.command
    R.write_report(dest, report, tables)
    R.render_svgs(dest)
    failed = [c for c in checks if not c["passed"]]
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['check']}  ({c['value']})")
    print(f"report written to {dest / 'report.json'}")
    return 1 if args.assert_ and failed else 0


if __name__ == "__main__":
    sys.exit(main())
