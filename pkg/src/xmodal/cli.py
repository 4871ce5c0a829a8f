"""Command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 verification failure.
"""

import argparse
import json
import sys

from .data import DataError, generate_synthetic, load_dataset, save_dataset
from .evaluation import EvalProtocol
from .harness import (
    ConfigError,
    TrainConfig,
    ablation_text,
    evaluate,
    gradcheck,
    gradcheck_text,
    load_checkpoint,
    parse_synth_config,
    run_ablation,
    save_checkpoint,
    train,
)
from .losses import THERMAL, VISIBLE


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _cmd_synth(args):
    cfg, _ = parse_synth_config(_load_json(args.config))
    dataset = generate_synthetic(cfg)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.samples)} samples to {args.out}")
    return 0


def _cmd_train(args):
    config = TrainConfig.from_dict(_load_json(args.config))
    dataset = load_dataset(args.data)
    params, enc_cfg, report = train(dataset, config)
    save_checkpoint(params, enc_cfg, args.out)
    if args.report:
        _write(args.report, report.to_json())
    print(report.to_text(), end="")
    return 0


def _cmd_eval(args):
    params, enc_cfg, = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    query = args.query_modality
    protocol = EvalProtocol(
        query_modality=query,
        gallery_modality=THERMAL if query == VISIBLE else VISIBLE,
        trials=args.trials,
        single_shot=args.single_shot,
        seed=args.seed,
    )
    fragment = evaluate(params, enc_cfg, dataset, protocol)
    text = json.dumps(fragment, indent=2, sort_keys=True) + "\n"
    if args.report:
        _write(args.report, text)
    print(text, end="")
    return 0


def _cmd_ablation(args):
    synth_cfg, train_fraction = parse_synth_config(_load_json(args.data_config))
    base = TrainConfig.from_dict(_load_json(args.config))
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    table = run_ablation(synth_cfg, base, seeds, train_fraction=train_fraction)
    if args.report:
        _write(args.report, json.dumps(table, indent=2, sort_keys=True) + "\n")
    print(ablation_text(table), end="")
    return 0


def _cmd_gradcheck(args):
    report, ok = gradcheck(trials=args.trials, seed=args.seed)
    print(gradcheck_text(report), end="")
    return 0 if ok else 3


def build_parser():
    parser = _Parser(prog="xmodal", description="Cross-modality retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-modality dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train an encoder on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--query-modality", choices=[VISIBLE, THERMAL], default=VISIBLE)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--single-shot", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablation", help="run the four-arm ablation over seeds")
    p.add_argument("--data-config", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--report")
    p.set_defaults(func=_cmd_ablation)

    p = sub.add_parser("gradcheck", help="verify all backward paths by finite differences")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
