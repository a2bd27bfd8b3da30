"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 validation or missing input,
3 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import __version__
from .checkpoint import CheckpointError
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_dict,
    format_config,
    load_config,
)
from .training import NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log(msg: str):
    print(msg, flush=True)


def _load_cfg(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out_dir is not None:
        overrides.append(f"out_dir={json.dumps(args.out_dir)}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    if not args.quiet:
        _log("effective config:")
        _log(format_config(cfg))
    return cfg


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="path to a JSON run configuration")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config value by dotted path, e.g. world.n_trials=200",
    )
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--out-dir", help="override the artifact directory")
    p.add_argument("--quiet", action="store_true", help="suppress the config echo")


def build_parser() -> _Parser:
    parser = _Parser(prog="braintext", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _add_common(p)

    p = sub.add_parser("pretrain-lm", help="pretrain the text decoder")
    _add_common(p)

    p = sub.add_parser("train", help="two-phase fusion training")
    _add_common(p)
    p.add_argument("--control", action="store_true", help="train the shuffled-data control")
    p.add_argument(
        "--holdout",
        metavar="CATEGORY[,CATEGORY...]",
        help="retrain with the named categories' trials withheld",
    )

    p = sub.add_parser("eval", help="score a trained model on the test split")
    _add_common(p)
    p.add_argument("--stem", default="model", help="checkpoint stem to evaluate")
    p.add_argument(
        "--with-control",
        action="store_true",
        help="also run the control checkpoint for comparative statistics",
    )

    p = sub.add_parser("zeroshot", help="probe holdout models on withheld trials")
    _add_common(p)
    p.add_argument(
        "--categories",
        default=None,
        metavar="CATEGORY[,CATEGORY...]",
        help="holdout models to probe (default: configured list)",
    )

    p = sub.add_parser("microstim", help="stimulation-strength sweep on the trained model")
    _add_common(p)
    p.add_argument("--fraction", type=float, default=None, help="mask fraction (default: first configured)")
    p.add_argument("--stem", default="model", help="checkpoint stem to stimulate")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _add_common(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--stem", default="model", help="checkpoint stem to serve")
    p.add_argument("--cors", action="store_true", help="allow cross-origin requests")

    p = sub.add_parser("ask", help="answer one question about one trial")
    _add_common(p)
    p.add_argument("--trial", required=True, help="trial id")
    p.add_argument("--question", required=True)
    p.add_argument("--beta", type=float, default=0.0, help="stimulation strength")
    p.add_argument("--mask-fraction", type=float, default=None, help="stimulation mask fraction")
    p.add_argument("--stem", default="model", help="checkpoint stem to query")
    return parser


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    from . import pipeline

    cfg = _load_cfg(args)
    pipeline.run_synth(cfg, log=_log)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from . import pipeline

    cfg = _load_cfg(args)
    world_cfg, _, trials = pipeline.load_world(cfg)
    _log(
        f"lm pretraining: epochs {cfg.lm.epochs} lr {cfg.lm.lr:g} "
        f"batch {cfg.lm.batch_size} jitter {cfg.position_jitter}"
    )
    pipeline.run_pretrain(cfg, trials, world_cfg, log=_log)
    _log(f"wrote {pipeline.checkpoint_path(cfg.out_dir, 'base')}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import pipeline

    cfg = _load_cfg(args)
    if args.holdout:
        categories = [c.strip() for c in args.holdout.split(",") if c.strip()]
        if not categories:
            raise ConfigError("--holdout needs at least one category")
        _, filt, _ = pipeline.run_holdout_train(cfg, categories, log=_log)
        _log(f"wrote {pipeline.checkpoint_path(cfg.out_dir, f'holdout-{filt.category}')}")
    else:
        pipeline.run_train(cfg, log=_log, control=args.control)
        stem = "control" if args.control else "model"
        _log(f"wrote {pipeline.checkpoint_path(cfg.out_dir, stem)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import pipeline

    cfg = _load_cfg(args)
    world_cfg, _, trials = pipeline.load_world(cfg)
    groups = pipeline.split_trials(trials, world_cfg)
    model = pipeline.load_model(cfg, args.stem)
    control_model = None
    if args.with_control:
        control_model = pipeline.load_model(cfg, "control")
    report = pipeline.run_eval(
        cfg,
        model,
        groups["test"],
        label=args.stem,
        control_model=control_model,
    )
    pipeline.save_report(cfg, report, f"eval_{args.stem}")
    _log(report.summary_table())
    _log(f"wrote {pipeline.report_path(cfg.out_dir, f'eval_{args.stem}')}")
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    from . import pipeline

    cfg = _load_cfg(args)
    raw = args.categories or ",".join(cfg.experiments.holdout_categories)
    categories = [c.strip() for c in raw.split(",") if c.strip()]
    world_cfg, _, trials = pipeline.load_world(cfg)
    full_model = pipeline.load_model(cfg, "model")
    from .experiments import DEFAULT_FILTERS, merge_filters

    for spec in categories:
        parts = spec.split("+")
        filters = []
        for c in parts:
            if c not in DEFAULT_FILTERS:
                raise ConfigError(f"no holdout filter for category {c!r}")
            filters.append(DEFAULT_FILTERS[c])
        filt = filters[0] if len(filters) == 1 else merge_filters(filters)
        stem = f"holdout-{filt.category}"
        path = pipeline.checkpoint_path(cfg.out_dir, stem)
        if not os.path.exists(path):
            raise ConfigError(
                f"missing {path}; run: braintext train --holdout {spec.replace('+', ',')}"
            )
        holdout_model = pipeline.load_model(cfg, stem)
        report = pipeline.run_zeroshot_eval(
            cfg, holdout_model, filt, full_model, trials, world_cfg, log=_log
        )
        out = {
            "category": report.category,
            "withheld": report.withheld,
            "emitted_withheld": report.emitted_withheld,
            "captions": asdict(report.captions),
            "choice": asdict(report.choice) if report.choice else None,
        }
        pipeline._write_json(pipeline.report_path(cfg.out_dir, f"zeroshot_{filt.category}"), out)
        _log(f"wrote {pipeline.report_path(cfg.out_dir, f'zeroshot_{filt.category}')}")
    return EXIT_OK


def cmd_microstim(args) -> int:
    from . import pipeline

    cfg = _load_cfg(args)
    world_cfg, _, trials = pipeline.load_world(cfg)
    model = pipeline.load_model(cfg, args.stem)
    report = pipeline.run_microstim(
        cfg, model, trials, world_cfg, fraction=args.fraction, log=_log
    )
    out = {
        "fraction": report.fraction,
        "n_active": report.n_active,
        "rho_excitatory": report.rho_excitatory,
        "rho_inhibitory": report.rho_inhibitory,
        "excitatory": asdict(report.excitatory),
        "inhibitory": asdict(report.inhibitory),
    }
    pipeline._write_json(pipeline.report_path(cfg.out_dir, "microstim"), out)
    _log(f"wrote {pipeline.report_path(cfg.out_dir, 'microstim')}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import pipeline

    cfg = _load_cfg(args)
    worst = pipeline.run_gradcheck(seed=cfg.seed)
    width = max(len(g) for g in worst) + 2
    ok = True
    for group in sorted(worst):
        status = "ok" if worst[group] < GRADCHECK_TOLERANCE else "FAIL"
        ok = ok and status == "ok"
        _log(f"{group:<{width}}{worst[group]:.3e}  {status}")
    if not ok:
        _log(f"gradient check FAILED at tolerance {GRADCHECK_TOLERANCE:g}")
        return EXIT_NUMERICAL
    _log(f"gradient check passed at tolerance {GRADCHECK_TOLERANCE:g}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from . import pipeline
    from .server import build_app

    cfg = _load_cfg(args)
    app = build_app(
        checkpoint=pipeline.checkpoint_path(cfg.out_dir, args.stem),
        dataset=pipeline.dataset_path(cfg.out_dir),
        cors=args.cors,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def cmd_ask(args) -> int:
    from . import pipeline
    from .experiments import build_stim_mask, stimulate
    from .world import localizer_ttest

    cfg = _load_cfg(args)
    world_cfg, _, trials = pipeline.load_world(cfg)
    model = pipeline.load_model(cfg, args.stem)
    by_id = {t.trial_id: t for t in trials}
    if args.trial not in by_id:
        raise ConfigError(f"unknown trial {args.trial!r}")
    trial = by_id[args.trial]
    betas = trial.betas
    if args.beta != 0.0:
        fraction = args.mask_fraction or cfg.experiments.mask_fractions[0]
        groups = pipeline.split_trials(trials, world_cfg)
        localizer = localizer_ttest(groups["train"])
        mask = build_stim_mask(localizer.t_values, fraction, source="face-localizer")
        betas = stimulate(betas, mask, args.beta)
    text = pipeline.answer_question(model, betas, args.question, cfg.generation)
    _log(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-lm": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "zeroshot": cmd_zeroshot,
    "microstim": cmd_microstim,
    "gradcheck": cmd_gradcheck,
    "serve": cmd_serve,
    "ask": cmd_ask,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
