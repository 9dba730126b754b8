"""``swagmos`` command line.

Subcommands: gen-synth, train, swag, predict, influence, filter, evaluate.
Every subcommand writes a ``manifest-<command>.json`` next to its outputs
holding the fully resolved argument list, so a run can be repeated with
``swagmos <argv from manifest>``.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numerical, 4 internal.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import __version__
from . import model as mdl
from .dataio import Dataset, Standardizer, filter_by_ids, load_dataset, load_labels, save_dataset
from .errors import DataError, MissingArtifactError, SwagmosError
from .influence import InfluenceConfig, debug_rank
from .metrics import evaluate
from .model import Loss, ModelSpec
from .store import (
    dumps_json,
    read_checkpoint,
    read_posterior,
    write_checkpoint,
    write_posterior,
)
from .swag import MODES, BmaConfig, bma_predict_batch
from .synth import generate
from .trainer import SwagCollectConfig, TrainConfig, dev_report, select_checkpoint, train

log = logging.getLogger("swagmos")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_INTERNAL = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers -------------------------------------------------------------

def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _read_id_list(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"id list {path} does not exist")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def _load(table, features, name=None) -> Dataset:
    for p in (table, features):
        if not Path(p).exists():
            raise MissingArtifactError(f"{p} does not exist")
    return load_dataset(table, features, name)


def _parse_hidden(text: str) -> tuple[int, ...]:
    text = (text or "").strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _format_predictions(ids, preds) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utterance_id", "prediction"])
    for uid, p in zip(ids, preds):
        w.writerow([uid, repr(float(p))])
    return buf.getvalue()


def read_predictions(path) -> dict[str, float]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["utterance_id", "prediction"]:
            raise DataError(f"{path}: header must be utterance_id,prediction")
        try:
            return {row[0]: float(row[1]) for row in reader if row}
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}: malformed prediction row ({exc})") from None


def resolved_argv(parser: argparse.ArgumentParser, command: str, args: argparse.Namespace) -> list[str]:
    argv = [command]
    for action in parser._actions:
        if not action.option_strings or action.dest in ("help", "config"):
            continue
        value = getattr(args, action.dest, None)
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
        elif value is not None:
            argv += [flag, str(value)]
    return argv


def _finish(args, out_dir: Path, artifacts: dict, summary: dict | None = None) -> Path:
    missing = [str(p) for p in artifacts.values() if not Path(p).exists()]
    if missing:
        raise SwagmosError(f"artifacts missing when finalising manifest: {missing}")
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config", "_parser", "verbose")}
    manifest = {
        "tool": "swagmos",
        "version": __version__,
        "command": args.command,
        "argv": resolved_argv(args._parser, args.command, args),
        "config": config,
        "seed": getattr(args, "seed", None),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    if summary is not None:
        manifest["summary"] = summary
    path = out_dir / f"manifest-{args.command}.json"
    _write_text(path, dumps_json(manifest))
    return path


def _standardize(d: Dataset, std: Standardizer | None) -> Dataset:
    return std.apply(d) if std is not None else d


# --- subcommands ---------------------------------------------------------

def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate(
        args.n_systems, args.utts_per_system, args.feature_dim, args.noise, args.corrupt, args.seed,
        dev_systems=args.dev_systems, test_systems=args.test_systems,
    )
    artifacts = {}
    for name, d in corpus.splits.items():
        save_dataset(d, out / f"{name}.csv", out / f"{name}.swgf")
        artifacts[f"{name}_table"] = out / f"{name}.csv"
        artifacts[f"{name}_features"] = out / f"{name}.swgf"
    _write_text(out / "corrupted.txt", "".join(f"{u}\n" for u in corpus.corrupted))
    artifacts["corrupted"] = out / "corrupted.txt"
    _finish(args, out, artifacts, {"records": {k: len(v) for k, v in corpus.splits.items()}})
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in corpus.splits.items())} records to {out}")
    return 0


def cmd_train(args) -> int:
    run = Path(args.out)
    data = _load(args.train_table, args.train_features, "train")
    if args.exclude:
        data = filter_by_ids(data, _read_id_list(args.exclude))
    dev = _load(args.dev_table, args.dev_features, "dev") if args.dev_table else None
    std = Standardizer.fit(data.labeled()) if args.standardize else None
    data, dev = _standardize(data, std), (_standardize(dev, std) if dev is not None else None)

    spec = ModelSpec(data.feature_dim, _parse_hidden(args.hidden), args.activation, bounded=not args.unbounded)
    cfg = TrainConfig(
        iterations=args.iterations, lr=args.lr, lr_min=args.lr_min, momentum=args.momentum,
        schedule=args.schedule, period=args.period, batch_size=args.batch_size,
        accumulation_steps=args.accum_steps, seed=args.seed, loss=str(Loss.parse(args.loss)),
        checkpoint_interval=args.checkpoint_interval,
    )
    checkpoints = train(spec, data, dev, cfg)

    ckdir = run / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    history = []
    for ck in checkpoints:
        path = ckdir / f"ckpt-{ck.iteration:07d}.swgc"
        write_checkpoint(path, spec, ck.params, iteration=ck.iteration, seed=args.seed,
                         loss=cfg.loss, standardizer=std)
        history.append({
            "iteration": ck.iteration,
            "path": path.name,
            "train_loss": ck.train_loss,
            "dev": ck.dev_metrics.to_dict() if ck.dev_metrics else None,
        })
    final = checkpoints[-1]
    write_checkpoint(run / "final.swgc", spec, final.params, iteration=final.iteration,
                     seed=args.seed, loss=cfg.loss, standardizer=std)
    summary = {"train_config": cfg.to_dict(), "model": spec.to_dict(), "checkpoints": history}
    _write_text(run / "train.json", dumps_json(summary))
    _finish(args, run, {"final": run / "final.swgc", "history": run / "train.json"})
    dm = final.dev_metrics
    msg = f"trained {final.iteration} steps"
    if dm:
        msg += f"; dev system SRCC {dm.system['srcc']:.4f}, utterance MSE {dm.utterance['mse']:.4f}"
    print(msg)
    return 0


def cmd_swag(args) -> int:
    run = Path(args.run)
    source = run / "final.swgc"
    if not source.exists():
        raise MissingArtifactError(f"no trained checkpoint at {source}; run `swagmos train` first")
    head, params = read_checkpoint(source)
    spec, std = head.spec, head.standardizer
    data = _standardize(_load(args.train_table, args.train_features, "train"), std)
    if args.exclude:
        data = filter_by_ids(data, _read_id_list(args.exclude))
    dev = _standardize(_load(args.dev_table, args.dev_features, "dev"), std)
    if args.from_init:
        params = mdl.init_params(spec, args.seed)
    loss = args.loss or head.header.get("loss", "l1")
    cfg = TrainConfig(
        iterations=args.iterations, lr=args.lr, momentum=args.momentum, schedule="constant",
        batch_size=args.batch_size, accumulation_steps=args.accum_steps, seed=args.seed,
        loss=str(Loss.parse(loss)), checkpoint_interval=args.checkpoint_interval,
    )
    collect = SwagCollectConfig(args.collect_every, args.rank_max)
    checkpoints = train(spec, data, dev, cfg, init=params, collect=collect)
    posteriors = [ck.posterior for ck in checkpoints]
    best = select_checkpoint(spec, checkpoints, posteriors, dev, args.min_samples)

    sdir = run / "swag"
    sdir.mkdir(parents=True, exist_ok=True)
    history = []
    for i, ck in enumerate(checkpoints):
        post = ck.posterior
        entry = {"iteration": ck.iteration, "n_collected": post.n_collected,
                 "sgd_dev": ck.dev_metrics.to_dict() if ck.dev_metrics else None, "swa_mean_dev": None}
        if post.n_collected >= 1:
            path = sdir / f"posterior-{ck.iteration:07d}.swgp"
            write_posterior(path, spec, post, mode=args.mode, standardizer=std,
                            extra={"iteration": ck.iteration})
            entry["path"] = path.name
            rep = dev_report(spec, post.mean, dev)
            entry["swa_mean_dev"] = rep.to_dict() if rep else None
        history.append(entry)
    chosen = checkpoints[best]
    write_posterior(run / "posterior.swgp", spec, chosen.posterior, mode=args.mode,
                    standardizer=std, extra={"iteration": chosen.iteration})
    write_checkpoint(run / "swag-sgd.swgc", spec, chosen.params, iteration=chosen.iteration,
                     seed=args.seed, loss=cfg.loss, standardizer=std)
    summary = {
        "selected_index": best,
        "selected_iteration": chosen.iteration,
        "start": "init" if args.from_init else "trained",
        "checkpoints": history,
    }
    _write_text(run / "swag.json", dumps_json(summary))
    _finish(args, run, {"posterior": run / "posterior.swgp", "sgd_checkpoint": run / "swag-sgd.swgc",
                        "history": run / "swag.json"})
    print(f"selected checkpoint {best} (iteration {chosen.iteration}, "
          f"{chosen.posterior.n_collected} SWAG samples)")
    return 0


def cmd_predict(args) -> int:
    sources = [s for s in (args.posterior, args.checkpoint) if s]
    if len(sources) > 1:
        raise UsageError("give at most one of --posterior / --checkpoint")
    if not sources:
        if not args.run:
            raise UsageError("need --run, --posterior or --checkpoint")
        run = Path(args.run)
        path = run / "posterior.swgp"
        if not path.exists():
            path = run / "final.swgc"
        sources = [str(path)]
    src = Path(sources[0])
    if not src.exists():
        raise MissingArtifactError(f"{src} does not exist")
    data = _load(args.table, args.features)
    if src.suffix == ".swgp" or src.read_bytes()[:4] == b"SWGP":
        head, post = read_posterior(src)
        x = _standardize(data, head.standardizer).features()
        mode = args.mode or head.header.get("mode", "diag+lowrank")
        preds, _ = bma_predict_batch(head.spec, post, x, BmaConfig(args.samples, args.seed, mode))
    else:
        head, params = read_checkpoint(src)
        x = _standardize(data, head.standardizer).features()
        preds = mdl.predict(head.spec, params, x)
    out = Path(args.out)
    _write_text(out, _format_predictions(data.ids, preds))
    _finish(args, out.parent, {"predictions": out})
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


def cmd_influence(args) -> int:
    ck = args.checkpoint or (str(Path(args.run) / "final.swgc") if args.run else None)
    if ck is None:
        raise UsageError("need --checkpoint or --run")
    head, params = read_checkpoint(ck)
    std = head.standardizer
    train_set = _standardize(_load(args.train_table, args.train_features, "train"), std)
    test = None
    if args.test_table:
        test = _standardize(_load(args.test_table, args.test_features, "test"), std)
    test_ids = tuple(_read_id_list(args.test_ids)) if args.test_ids else None
    cfg = InfluenceConfig(
        damping=args.damping,
        curvature=args.curvature,
        grad_loss=args.grad_loss or head.header.get("loss", "l1"),
        worst_k=args.worst_k,
        test_ids=test_ids,
    )
    report = debug_rank(head.spec, params, train_set, cfg, test=test)
    out = Path(args.out)
    _write_text(out, dumps_json(report.to_dict()))
    _finish(args, out.parent, {"report": out})
    harm = dict(zip(report.train_ids, report.harmfulness))
    print(f"test points: {', '.join(report.test_ids)}")
    print("most harmful training points (i_up_loss):")
    for uid in report.top(args.top):
        print(f"  {uid}\t{harm[uid]:.6g}")
    print("largest neg_i_up_loss:")
    for uid in report.ranking_neg[: args.top]:
        print(f"  {uid}\t{-harm[uid]:.6g}")
    return 0


def cmd_filter(args) -> int:
    data = _load(args.table, args.features)
    exclude = list(args.ids.split(",")) if args.ids else []
    if args.exclude:
        exclude += _read_id_list(args.exclude)
    exclude = [e.strip() for e in exclude if e.strip()]
    unknown = sorted(set(exclude).difference(data.ids))
    kept = filter_by_ids(data, exclude)
    out_table, out_features = Path(args.out_table), Path(args.out_features)
    out_table.parent.mkdir(parents=True, exist_ok=True)
    out_features.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(kept, out_table, out_features)
    _finish(args, out_table.parent, {"table": out_table, "features": out_features},
            {"kept": len(kept), "removed": len(data) - len(kept), "unknown_ids": unknown})
    print(f"kept {len(kept)} of {len(data)} records ({len(unknown)} unknown id(s) ignored)")
    return 0


def cmd_evaluate(args) -> int:
    preds = read_predictions(args.pred)
    if not Path(args.table).exists():
        raise MissingArtifactError(f"{args.table} does not exist")
    report = evaluate(preds, load_labels(args.table))
    out = Path(args.out)
    text_path = Path(args.out_text) if args.out_text else out.with_suffix(".txt")
    _write_text(out, dumps_json(report.to_dict()))
    table = report.format_table(args.label)
    _write_text(text_path, table)
    _finish(args, out.parent, {"report": out, "table": text_path})
    print(table, end="")
    return 0


# --- parser --------------------------------------------------------------

def _add_train_opts(p, *, iterations, lr, batch_size, accum, schedule=True):
    p.add_argument("--iterations", type=int, default=iterations)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    if schedule:
        p.add_argument("--schedule", choices=("cosine", "constant"), default="cosine")
        p.add_argument("--period", type=int, default=100, help="cosine half-cycle in optimizer steps")
        p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=batch_size)
    p.add_argument("--accum-steps", type=int, default=accum)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="swagmos", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"swagmos {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; command-line flags take precedence")
        p.set_defaults(func=func, _parser=p)
        return p

    p = add("gen-synth", cmd_gen_synth, "generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-systems", type=int, default=20)
    p.add_argument("--utts-per-system", type=int, default=10)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--corrupt", type=int, default=0)
    p.add_argument("--dev-systems", type=int, default=0)
    p.add_argument("--test-systems", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train a prediction head with SGD")
    p.add_argument("--train-table", required=True)
    p.add_argument("--train-features", required=True)
    p.add_argument("--dev-table")
    p.add_argument("--dev-features")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--exclude", help="file of utterance ids to drop before training")
    p.add_argument("--hidden", default="", help="comma-separated hidden widths, empty for a linear head")
    p.add_argument("--activation", choices=mdl.ACTIVATIONS, default="tanh")
    p.add_argument("--unbounded", action="store_true", help="skip the sigmoid output scaling")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--loss", default="l1", help="l1, mse or huber[:delta]")
    p.add_argument("--checkpoint-interval", type=int, default=500)
    _add_train_opts(p, iterations=30000, lr=0.001, batch_size=8, accum=1)

    p = add("swag", cmd_swag, "collect a SWAG posterior with constant-lr SGD")
    p.add_argument("--run", required=True)
    p.add_argument("--train-table", required=True)
    p.add_argument("--train-features", required=True)
    p.add_argument("--dev-table", required=True)
    p.add_argument("--dev-features", required=True)
    p.add_argument("--exclude")
    p.add_argument("--from-init", action="store_true",
                   help="start collection from a fresh initialisation instead of the trained head")
    p.add_argument("--loss", default=None, help="defaults to the loss the head was trained with")
    p.add_argument("--collect-every", type=int, default=None, help="optimizer steps per snapshot (default: one epoch)")
    p.add_argument("--rank-max", type=int, default=20)
    p.add_argument("--checkpoint-interval", type=int, default=100)
    p.add_argument("--min-samples", type=int, default=5)
    p.add_argument("--mode", choices=MODES, default="diag+lowrank")
    _add_train_opts(p, iterations=2000, lr=0.001, batch_size=4, accum=2, schedule=False)

    p = add("predict", cmd_predict, "score utterances with a checkpoint or by SWAG model averaging")
    p.add_argument("--table", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--run")
    p.add_argument("--posterior")
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("influence", cmd_influence, "rank training points by influence on the worst test points")
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--train-table", required=True)
    p.add_argument("--train-features", required=True)
    p.add_argument("--test-table", help="draw test points from this set instead of the training set")
    p.add_argument("--test-features")
    p.add_argument("--test-ids", help="file of explicit test utterance ids")
    p.add_argument("--worst-k", type=int, default=5)
    p.add_argument("--damping", type=float, default=0.01)
    p.add_argument("--curvature", default="mse", help="mse or huber[:delta]")
    p.add_argument("--grad-loss", default=None, help="defaults to the checkpoint's training loss")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", required=True)

    p = add("filter", cmd_filter, "drop utterances by id")
    p.add_argument("--table", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--exclude", help="file with one utterance id per line")
    p.add_argument("--ids", help="comma-separated utterance ids")
    p.add_argument("--out-table", required=True)
    p.add_argument("--out-features", required=True)

    p = add("evaluate", cmd_evaluate, "utterance- and system-level MSE/LCC/SRCC/KTAU")
    p.add_argument("--pred", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-text")
    p.add_argument("--label", default="model")
    parser.commands = sub.choices
    return parser


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file {path} does not exist")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(value) if action.type else value
        # file values satisfy required options; explicit flags still win
        action.required = False
    sub.set_defaults(**defaults)


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command = next((t for t in argv if t in parser.commands), None)
        config = _config_path(argv)
        if command and config:
            _apply_config(parser.commands[command], read_config_file(config))
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"swagmos: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SwagmosError as exc:
        kind = {EXIT_DATA: "data error", EXIT_NUMERICAL: "numerical error"}.get(exc.exit_code, "error")
        print(f"swagmos: {kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        print(f"swagmos: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"swagmos: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"swagmos: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
