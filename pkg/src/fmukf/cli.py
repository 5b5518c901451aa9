"""Command-line entry point: ``fmukf <verb> [options]``.

Verbs: sample-instances, generate, train-fm, train-e2e, evaluate, report.
Global flags ``--config``, ``--seed``, ``--threads`` and ``--out`` go before
or after the verb.  Exit codes: 0 success, 2 configuration or input-data error, 3 more
estimator failures than the configured threshold.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, FMUKFError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

log = logging.getLogger("fmukf")


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        return json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc


def _opt(args, cfg, key, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return cfg.get(key, default)


def _need(value, what):
    if value is None:
        raise ConfigError(f"missing {what}")
    return value


# ------------------------------------------------------------ verbs

def cmd_sample_instances(args) -> int:
    from . import ship
    from .instances import DsimConfig, build_pool

    cfg = _read_json(args.config)
    seed = _opt(args, cfg, "seed", 0)
    base = ship.load_params(cfg["base"]) if "base" in cfg else ship.base_params()
    dsim = DsimConfig(**cfg["dsim"], seed=seed) if "dsim" in cfg else DsimConfig(seed=seed)
    pool = build_pool(base, int(_opt(args, cfg, "count", 1000)), seed, dsim_cfg=dsim,
                      probe_count=int(cfg.get("probe_count", 8)),
                      probe_length=int(cfg.get("probe_length", 384)))
    out = Path(_need(_opt(args, cfg, "out", None), "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    pool.save(out)
    print(f"{len(pool)} instances -> {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .dataset import build_dataset
    from .instances import InstancePool

    cfg = _read_json(args.config)
    pool_path = _need(_opt(args, cfg, "pool", None), "--pool")
    pool = InstancePool.load(pool_path)
    out = _need(_opt(args, cfg, "out", None), "--out")
    m = build_dataset(pool, int(_opt(args, cfg, "per_instance", 20)),
                      int(_opt(args, cfg, "length", 384)), int(_opt(args, cfg, "seed", 0)), out,
                      train_fraction=float(cfg.get("train_fraction", 0.9)))
    print(f"{len(m.records)} trajectories, {len(m.train_ids)} train / {len(m.test_ids)} test "
          f"instances -> {out}")
    return EXIT_OK


def _train_configs(args, kind):
    from .seqmodel.model import SeqModelConfig
    from .seqmodel.train import TrainConfig

    cfg = _read_json(args.config)
    mcfg = _read_json(args.model_config) if args.model_config else cfg.get("model", {})
    tcfg = _read_json(args.train_config) if args.train_config else cfg.get("train", {})
    seed = _opt(args, cfg, "seed", None)
    if seed is not None:
        tcfg = dict(tcfg, seed=seed)
    try:
        train_cfg = TrainConfig(**tcfg)
        if kind == "fm":
            model_cfg = SeqModelConfig(**{"input_dim": 14, "output_dim": 12,
                                          **SeqModelConfig.desk().__dict__, **mcfg})
        else:
            model_cfg = mcfg
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = _need(_opt(args, cfg, "manifest", None), "--manifest")
    out = _need(_opt(args, cfg, "out", None), "--out")
    return manifest, model_cfg, train_cfg, out


def cmd_train_fm(args) -> int:
    from .dataset import DatasetManifest
    from .seqmodel.train import train

    manifest, model_cfg, train_cfg, out = _train_configs(args, "fm")
    res = train(DatasetManifest.load_file(manifest), model_cfg, train_cfg, out)
    print(f"validation loss {res.initial_val_loss:.4g} -> {res.final_val_loss:.4g}; model -> {out}")
    return EXIT_OK


def cmd_train_e2e(args) -> int:
    from .dataset import DatasetManifest
    from .estimators import E2EEncoding, train_e2e
    from .seqmodel.features import NormStats
    from .seqmodel.model import SeqModelConfig

    manifest, mcfg, train_cfg, out = _train_configs(args, "e2e")
    m = DatasetManifest.load_file(manifest)
    model_cfg = None
    if mcfg:
        stats = NormStats.load(m.resolve(m.norm_stats)) if m.norm_stats else None
        if stats is None:
            raise ConfigError("manifest has no norm_stats to size the End2End model")
        enc = E2EEncoding(stats)
        try:
            model_cfg = SeqModelConfig(**{**SeqModelConfig.desk().__dict__, **mcfg,
                                          "input_dim": enc.input_dim, "output_dim": enc.output_dim})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    res = train_e2e(m, model_cfg, train_cfg, out_dir=out)
    print(f"validation loss {res.initial_val_loss:.4g} -> {res.final_val_loss:.4g}; model -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .bench import ExperimentConfig, evaluate

    if args.config is None:
        raise ConfigError("evaluate needs --config")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(Path(args.out).resolve())
    if args.skip_warmup is not None:
        cfg.skip_warmup = args.skip_warmup
    report = evaluate(cfg, threads=args.threads or 1, use_cache=not args.no_cache)
    out = report.write(cfg.resolve(cfg.out))
    for s in report.sensors:
        ranks = report.ranks(s)
        print(s, " ".join(f"{e}={r:.2f}" for e, r in ranks.items()))
    frac = report.failure_fraction()
    print(f"report -> {out} (failed runs: {frac:.1%})")
    if frac > cfg.failure_threshold:
        log.error("failure fraction %.3f exceeds threshold %.3f", frac, cfg.failure_threshold)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args) -> int:
    from .bench import EvalReport

    src = args.report or args.out
    if src is None:
        raise ConfigError("report needs --report <dir or report.json>")
    try:
        rep = EvalReport.load(src)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read report {src}: {exc}") from exc
    if args.quantiles:
        text = rep.quantile_table()
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "quantiles.csv").write_text(text)
            print(f"quantiles -> {Path(args.out) / 'quantiles.csv'}")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    for s in rep.sensors:
        med = rep.medians(s)
        ranks = rep.ranks(s)
        feats = list(next(iter(med.values())))
        print(f"[{s}]")
        print("feature".ljust(10) + "".join(e[:18].rjust(20) for e in med))
        for f in feats:
            print(f.ljust(10) + "".join(f"{med[e][f]:20.3e}" for e in med))
        print("mean rank".ljust(10) + "".join(f"{ranks[e]:20.2f}" for e in med))
    return EXIT_OK


VERBS = {
    "sample-instances": cmd_sample_instances,
    "generate": cmd_generate,
    "train-fm": cmd_train_fm,
    "train-e2e": cmd_train_e2e,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="fmukf", parents=[common],
                                description="Ship state estimation benchmark with FM-UKF.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("sample-instances", parents=[common], help="sample and filter ship instances")
    s.add_argument("--count", type=int)

    g = sub.add_parser("generate", parents=[common], help="roll out trajectories for a pool")
    g.add_argument("--pool")
    g.add_argument("--per-instance", dest="per_instance", type=int)
    g.add_argument("--length", type=int)

    for verb in ("train-fm", "train-e2e"):
        t = sub.add_parser(verb, parents=[common], help=f"train the {verb[6:]} model")
        t.add_argument("--manifest")
        t.add_argument("--model-config", dest="model_config")
        t.add_argument("--train-config", dest="train_config")

    e = sub.add_parser("evaluate", parents=[common], help="run an experiment config")
    e.add_argument("--skip-warmup", dest="skip_warmup", type=int)
    e.add_argument("--no-cache", dest="no_cache", action="store_true")

    r = sub.add_parser("report", parents=[common], help="print medians and ranks of a report")
    r.add_argument("--report")
    r.add_argument("--quantiles", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    for k in ("config", "seed", "threads", "out", "verbose"):
        if not hasattr(args, k):
            setattr(args, k, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    try:
        return VERBS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FMUKFError as exc:
        # bad data or artifacts behind a valid config are still input problems
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
