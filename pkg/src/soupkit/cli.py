"""The `soupkit` command.

Subcommands cover the whole pipeline: create an ancestor checkpoint, generate
synthetic meta sets, finetune base variants, build fixed-ratio and trained
soups, evaluate, sweep, and render reports. Exit codes: 0 success, 1 usage
error, 2 data or validation error, 3 numeric abort during training.

Every command is a pure function of its flags and input files. Stochastic
commands take a mandatory --seed; nothing reads the clock.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import Mapping, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import bench as B
from . import data as D
from . import model as M
from . import report as R
from . import soup as S
from .ioutil import fmt17


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the exit-code contract."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _load_pair(a_path: str, b_path: str) -> tuple[M.Checkpoint, M.Checkpoint]:
    return M.load_checkpoint(a_path), M.load_checkpoint(b_path)


def _parse_dev_arg(arg: str) -> tuple[str, int | None]:
    """`path` or `path:count`, where count takes the first rows of the file."""
    head, sep, tail = arg.rpartition(":")
    if sep and tail.isdigit():
        return head, int(tail)
    return arg, None


def _load_dev_rows(dev_args: Sequence[str]) -> D.Dataset:
    samples: list[D.Sample] = []
    for arg in dev_args:
        path, count = _parse_dev_arg(arg)
        loaded = D.load_samples_jsonl(path)
        if count is not None:
            if count < 1 or count > len(loaded):
                raise ValueError(
                    f"{path}: asked for {count} samples but the file has {len(loaded)}"
                )
            loaded = loaded[:count]
        samples.extend(loaded)
    return D.rows_from_samples(samples)


def _require(config: Mapping, key: str, path: str):
    if key not in config:
        raise ValueError(f"{path}: missing required key {key!r}")
    return config[key]


def _axis(config: Mapping, key: str, cast, default=None):
    if key not in config:
        if default is None:
            raise ValueError(f"sweep config: missing required axis {key!r}")
        return default
    values = config[key]
    if not isinstance(values, list) or not values:
        raise ValueError(f"sweep config: {key!r} must be a non-empty array")
    return tuple(cast(v) for v in values)


def _load_sets(data_dir: str, names: Sequence[str]) -> dict[str, D.MetaSet]:
    return {name: D.load_meta_set(data_dir, name) for name in names}


def _spec_names(train_specs) -> list[str]:
    names: list[str] = []
    for components in train_specs:
        for name, _ in components:
            if name not in names:
                names.append(name)
    return names


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_init(args) -> int:
    config = M.ModelConfig(
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        vocab_size=D.VOCAB_SIZE,
        max_seq_len=args.max_seq_len,
    )
    ckpt = M.init_ancestor(config, args.seed)
    M.save_checkpoint(ckpt, args.out)
    print(f"wrote ancestor checkpoint to {args.out}")
    return 0


def _cmd_gen_data(args) -> int:
    if args.task == "reverse":
        ms = D.gen_task_reverse(
            seed=args.seed,
            n_train=args.n_train,
            n_eval=args.n_eval,
            len_range=(args.len_min, args.len_max),
            max_seq_len=args.max_seq_len,
        )
    else:
        ms = D.gen_task_modadd(
            seed=args.seed, n_train=args.n_train, n_eval=args.n_eval, modulus=args.modulus
        )
    if args.name:
        ms = dataclasses.replace(ms, name=args.name)
    os.makedirs(args.out_dir, exist_ok=True)
    train_path, eval_path = D.save_meta_set(ms, args.out_dir)
    print(f"wrote {train_path} and {eval_path}")
    return 0


def _cmd_finetune(args) -> int:
    ckpt = M.load_checkpoint(args.ckpt)
    ms = D.load_meta_set(args.data_dir, args.set)
    cfg = M.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
    )
    trained, history = M.train_weights(
        ckpt, D.rows_from_samples(ms.train), cfg, tag=ms.name, pad_id=D.PAD_ID
    )
    M.save_checkpoint(trained, args.out)
    print(f"trained {len(history)} steps; final loss {fmt17(history[-1][1])}")
    print(f"wrote {args.out}")
    return 0


def _cmd_soup_vanilla(args) -> int:
    a, b = _load_pair(args.a, args.b)
    M.save_checkpoint(S.vanilla_soup(a, b, args.alpha), args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_soup_learn(args) -> int:
    if not args.out_alpha and not args.out_ckpt:
        raise ValueError("soup-learn needs --out-alpha or --out-ckpt (or both)")
    a, b = _load_pair(args.a, args.b)
    dev = _load_dev_rows(args.dev)
    cfg = S.SoupTrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        activation=args.activation,
        lambda_l1=args.lambda_l1,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    alpha_set, history = S.train_alpha(a, b, dev, cfg, D.PAD_ID)
    if args.out_alpha:
        R.dump_alpha(alpha_set, args.out_alpha)
        print(f"wrote {args.out_alpha}")
    if args.out_ckpt:
        M.save_checkpoint(S.apply_alpha(a, b, alpha_set), args.out_ckpt)
        print(f"wrote {args.out_ckpt}")
    print(f"trained {len(history)} steps; final data loss {fmt17(history[-1].data_loss)}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = M.load_checkpoint(args.ckpt)
    print("eval_set,nll,ppl,exact_match")
    for name in args.set:
        met = B.evaluate(ckpt, D.load_meta_set(args.data_dir, name))
        print(f"{name},{fmt17(met.nll)},{fmt17(met.ppl)},{fmt17(met.exact_match)}")
    return 0


def _build_grid_spec(config: Mapping, train_specs) -> B.GridSpec:
    return B.GridSpec(
        train_specs=tuple(train_specs),
        epochs=_axis(config, "epochs", int),
        learning_rates=_axis(config, "learning_rates", float),
        activations=_axis(config, "activations", str, default=("softmax",)),
        lambdas=_axis(config, "lambdas", float, default=(0.0,)),
        batch_size=int(config.get("batch_size", 8)),
    )


def _cmd_sweep(args) -> int:
    with open(args.config, "rb") as fh:
        config = tomllib.load(fh)
    mode = _require(config, "mode", args.config)
    if mode not in ("vanilla", "grid", "ratio"):
        raise ValueError(f"{args.config}: unknown sweep mode {mode!r}")
    a, b = _load_pair(_require(config, "a", args.config), _require(config, "b", args.config))
    data_dir = _require(config, "data_dir", args.config)
    eval_names = list(_require(config, "eval_sets", args.config))

    if mode == "vanilla":
        sets = _load_sets(data_dir, eval_names)
        records = B.run_vanilla_sweep(a, b, [sets[name] for name in eval_names])
    else:
        if mode == "grid":
            specs = [D.parse_mix_text(text) for text in _require(config, "train_specs", args.config)]
        else:
            specs = list(
                B.ratio_components(
                    _require(config, "set_a", args.config),
                    _require(config, "set_b", args.config),
                    total=int(config.get("total", 100)),
                )
            )
        grid = _build_grid_spec(config, specs)
        names = _spec_names(specs)
        names.extend(n for n in eval_names if n not in names)
        sets = _load_sets(data_dir, names)
        records = B.run_grid(
            a, b, grid, sets, eval_names,
            global_seed=int(_require(config, "seed", args.config)),
            jobs=args.jobs,
        )
    B.save_records_csv(records, args.out, eval_order=eval_names)
    print(f"wrote {len(records)} records to {args.out}")
    if args.summary_out:
        B.save_summary_csv(B.summarize(records), args.summary_out)
        print(f"wrote {args.summary_out}")
    return 0


def _cmd_alpha_dump(args) -> int:
    alpha_set = S.load_alpha_csv(args.alpha)
    pairs = alpha_set.pairs()
    print("unit,alpha1,alpha2")
    for unit in S._canonical_units(alpha_set.raw):
        a1, a2 = pairs[unit]
        print(f"{unit.tensor_name()},{fmt17(a1)},{fmt17(a2)}")
    return 0


def _parse_named_alpha(args_alpha: Sequence[str]) -> dict[str, S.AlphaSet]:
    out: dict[str, S.AlphaSet] = {}
    for arg in args_alpha:
        if "=" not in arg:
            raise ValueError(f"--alpha expects NAME=FILE, got {arg!r}")
        name, path = arg.split("=", 1)
        if name in out:
            raise ValueError(f"duplicate run name {name!r}")
        out[name] = S.load_alpha_csv(path)
    return out


def _filter_records(records, args) -> list[B.SweepRecord]:
    out = list(records)
    if args.train_spec is not None:
        out = [r for r in out if r.train_spec == args.train_spec]
    if args.activation is not None:
        out = [r for r in out if r.activation == args.activation]
    if args.lambda_l1 is not None:
        out = [r for r in out if r.lambda_l1 == args.lambda_l1]
    return out


def _cmd_report(args) -> int:
    if args.report_kind == "alpha-strip":
        R.alpha_strip_svg(_parse_named_alpha(args.alpha), args.kind, args.out)
        print(f"wrote {args.out}")
    elif args.report_kind == "grid-heatmap":
        records = _filter_records(B.load_records_csv(args.records), args)
        R.grid_heatmap_svg(records, args.eval_set, args.out)
        print(f"wrote {args.out}")
    elif args.report_kind == "vanilla-curve":
        R.vanilla_curve_svg(B.load_records_csv(args.records), args.eval_set, args.out)
        print(f"wrote {args.out}")
    else:
        if not args.out_csv and not args.out_svg:
            raise ValueError("summary-table needs --out-csv or --out-svg (or both)")
        table = B.summarize(B.load_records_csv(args.records))
        for path, save in ((args.out_csv, B.save_summary_csv), (args.out_svg, R.summary_table_svg)):
            if path:
                save(table, path)
                print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="soupkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="create a randomly initialized ancestor checkpoint")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("gen-data", help="generate a synthetic meta set as JSONL files")
    p.add_argument("--task", choices=("reverse", "modadd"), required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-eval", type=int, required=True)
    p.add_argument("--len-min", type=int, default=3)
    p.add_argument("--len-max", type=int, default=6)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--modulus", type=int, default=47)
    p.add_argument("--name", default=None, help="store under this name instead of the task name")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("finetune", help="finetune checkpoint weights on a meta set's train split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--set", required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("soup-vanilla", help="merge two sibling checkpoints at a fixed ratio")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--alpha", type=float, required=True, help="share of model A in the merge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_soup_vanilla)

    p = sub.add_parser("soup-learn", help="train per-unit mixing weights on dev samples")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument(
        "--dev", action="append", required=True, metavar="FILE[:COUNT]",
        help="sample JSONL; repeat to concatenate, :COUNT takes the first rows",
    )
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--activation", choices=S.ACTIVATION_KINDS, default="softmax")
    p.add_argument("--lambda", dest="lambda_l1", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-alpha", default=None)
    p.add_argument("--out-ckpt", default=None)
    p.set_defaults(func=_cmd_soup_learn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on meta sets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--set", action="append", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="run a sweep described by a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary-out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("alpha-dump", help="print activated mixing weights from an alpha CSV")
    p.add_argument("--alpha", required=True)
    p.set_defaults(func=_cmd_alpha_dump)

    p = sub.add_parser("report", help="render SVG and CSV reports")
    report_sub = p.add_subparsers(dest="report_kind", required=True, parser_class=_Parser)

    q = report_sub.add_parser("alpha-strip", help="dominance strip for one unit kind")
    q.add_argument("--alpha", action="append", required=True, metavar="NAME=FILE")
    q.add_argument("--kind", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_report)

    q = report_sub.add_parser("grid-heatmap", help="exact-match heatmap over epochs and lr")
    q.add_argument("--records", required=True)
    q.add_argument("--eval-set", required=True)
    q.add_argument("--train-spec", default=None)
    q.add_argument("--activation", default=None)
    q.add_argument("--lambda", dest="lambda_l1", type=float, default=None)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_report)

    q = report_sub.add_parser("vanilla-curve", help="exact match against mixing ratio")
    q.add_argument("--records", required=True)
    q.add_argument("--eval-set", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=_cmd_report)

    q = report_sub.add_parser("summary-table", help="mean/max summary per train spec")
    q.add_argument("--records", required=True)
    q.add_argument("--out-csv", default=None)
    q.add_argument("--out-svg", default=None)
    q.set_defaults(func=_cmd_report)

    return parser


def run_command(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        code = exc.code
        return 0 if code in (0, None) else 1
    try:
        return args.func(args)
    except M.NonFiniteLossError as exc:
        print(f"soupkit: numeric abort: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"soupkit: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
