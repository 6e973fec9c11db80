"""Command-line entry point: ``semaug <command> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .checkpoint import CheckpointError, load_model, load_router, save_model, save_router
from .config import Config, ConfigError, describe_keys, load_default
from .gradcheck import format_table, run_all

log = logging.getLogger("semaug")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

COMMANDS = {
    "gen-data": "render general and vertical train/eval/calib splits",
    "pretrain": "train the base detector on the general domain",
    "peft": "train LoRA adapters and the prompt bank on the vertical domain",
    "train-router": "train the SAR and DDAS autoencoders on vertical images",
    "calibrate-tau": "select tau for each router on the calibration splits",
    "eval": "evaluate every arm on both eval splits and write report.json",
    "run-experiment": "run the full protocol end to end",
    "gradcheck": "compare analytic gradients with finite differences",
    "route-analyze": "write router error histograms",
}


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (dotted path, default, range):\n" + describe_keys()
    parser = argparse.ArgumentParser(
        prog="semaug", description="Toy hierarchical semantic augmentation for open-vocabulary detection.",
        epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=keys,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON config (default: bundled default.json)")
        p.add_argument("--seed", type=_seed, help="u64 seed, overrides the config")
        p.add_argument("--out", help="output directory (default: paths.out_dir)")
        if name == "gradcheck":
            p.add_argument("--instances", type=int, default=20, help="instances per suite")
    return parser


def resolve_config(path: str | None, seed: int | None) -> Config:
    cfg = Config.from_file(path) if path else load_default()
    return cfg.with_seed(seed)


def _data_root(cfg: Config, out: Path) -> Path:
    return Path(cfg.paths.data_dir) if cfg.paths.data_dir else out / "data"


def _datasets(cfg: Config, out: Path):
    """Datasets written by gen-data when present, otherwise rendered in memory
    (the two are identical)."""
    root = _data_root(cfg, out)
    if (root / "general" / "train" / "manifest.json").exists():
        return ex.read_datasets(root)
    return ex.build_datasets(cfg)


def _base_estimator(cfg: Config, datasets, out: Path):
    model, _, _ = load_model(out / "base.ckpt")
    det = ex.make_base(cfg, datasets)
    det.model_ = model
    return det


def _routers(out: Path) -> dict:
    return {kind: load_router(out / f"router_{kind}.ckpt") for kind in ("sar", "ddas")
            if (out / f"router_{kind}.ckpt").exists()}


def cmd_gen_data(cfg, out):
    root = _data_root(cfg, out)
    ex.write_datasets(ex.build_datasets(cfg), root)
    log.info("datasets written to %s", root)


def cmd_pretrain(cfg, out):
    datasets = _datasets(cfg, out)
    det = ex.pretrain(cfg, datasets)
    save_model(out / "base.ckpt", det.model_)
    (out / "loss_pretrain.csv").write_text(ex.loss_curves_csv({"pretrain": det.loss_curve_}))
    ds = datasets[("general", "eval")]
    log.info("base hash %s, general eval mAP %.4f", det.model_.parameter_hash(),
             det.score(ds.images, ds.annotations, ds.categories))


def cmd_peft(cfg, out):
    datasets = _datasets(cfg, out)
    base = _base_estimator(cfg, datasets, out)
    before = base.model_.parameter_hash()
    peft = ex.peft_finetune(cfg, base, datasets)
    save_model(out / "peft.ckpt", base.model_, peft.adapters_)
    (out / "loss_peft.csv").write_text(ex.loss_curves_csv({"peft": peft.loss_curve_}))
    log.info("base hash unchanged: %s", base.model_.parameter_hash() == before)


def cmd_train_router(cfg, out):
    routers = ex.train_routers(cfg, _datasets(cfg, out))
    for kind, r in routers.items():
        save_router(out / f"router_{kind}.ckpt", r)
        log.info("router %s: final reconstruction loss %.6g", kind, r.loss_curve_[-1])


def cmd_calibrate_tau(cfg, out):
    routers = _routers(out)
    if not routers:
        raise FileNotFoundError(f"no router checkpoints in {out}; run train-router first")
    taus = ex.calibrate_routers(cfg, routers, _datasets(cfg, out))
    for kind, r in routers.items():
        save_router(out / f"router_{kind}.ckpt", r)
        log.info("router %s: tau %.6g", kind, taus[kind])


def cmd_eval(cfg, out):
    datasets = _datasets(cfg, out)
    ckpt = out / "peft.ckpt" if (out / "peft.ckpt").exists() else out / "base.ckpt"
    model, adapters, _ = load_model(ckpt)
    evaluation = ex.evaluate(cfg, model, adapters, _routers(out), datasets, out)
    files = {name: f"{name}.csv" for name in ("router_errors", "router_trace_sar", "router_trace_ddas")
             if (out / f"{name}.csv").exists()}
    report = ex.build_report(cfg, evaluation, files)
    ex.write_json(out / "report.json", report)
    _log_arms(report)


def cmd_run_experiment(cfg, out):
    _log_arms(ex.run_experiment(cfg, out))


def cmd_gradcheck(cfg, out, instances=20):
    results = run_all(cfg.seed, instances)
    print(format_table(results))
    if not all(r.passed for r in results):
        raise RuntimeError("gradient check failed")


def cmd_route_analyze(cfg, out):
    routers = _routers(out)
    if not routers:
        raise FileNotFoundError(f"no router checkpoints in {out}; run train-router first")
    datasets = _datasets(cfg, out)
    v, g = datasets[("vertical", "eval")].images, datasets[("general", "eval")].images
    errors = {kind: (r.score_samples(v), r.score_samples(g)) for kind, r in routers.items()}
    (out / "router_histogram.csv").write_text(ex.histogram_csv(errors))
    for kind, (e_in, e_out) in errors.items():
        log.info("router %s: overlap %.4f accuracy %.4f at tau %.6g", kind,
                 ex.overlap_coefficient(e_in, e_out),
                 ex.routing_accuracy(e_in, e_out, routers[kind].tau), routers[kind].tau)


def _log_arms(report):
    for arm, r in report["arms"].items():
        log.info("%-10s map_tgt %.4f map_general %.4f H %.4f", arm, r["map_tgt"],
                 r["map_general"], r["h"])
    rt = report["routing"]
    if rt.get("tau") is not None:
        log.info("routing: tau %.6g accuracy %.4f overlap SAR %.4f DDAS %.4f", rt["tau"],
                 rt["accuracy"], rt["overlap_sar"], rt["overlap_ddas"])


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "peft": cmd_peft,
    "train-router": cmd_train_router,
    "calibrate-tau": cmd_calibrate_tau,
    "eval": cmd_eval,
    "run-experiment": cmd_run_experiment,
    "gradcheck": cmd_gradcheck,
    "route-analyze": cmd_route_analyze,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args.config, args.seed)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out = Path(args.out or cfg.paths.out_dir)
    if args.command != "run-experiment":
        log.info("resolved config:\n%s", cfg.to_json())
    try:
        out.mkdir(parents=True, exist_ok=True)
        handler = HANDLERS[args.command]
        if args.command == "gradcheck":
            handler(cfg, out, args.instances)
        else:
            handler(cfg, out)
    except (ex.PhaseError, CheckpointError, OSError, RuntimeError, ValueError,
            FloatingPointError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
