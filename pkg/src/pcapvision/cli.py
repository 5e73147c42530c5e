"""``pcapvision`` command line: convert, train, infer, eval, simulate, bench, generate.

Exit codes: 0 ok, 2 I/O or format error, 3 invalid arguments, 4 numeric
failure, 5 single-class data, 6 model/manifest mismatch.

A config file of ``key = value`` lines (``--config`` or ``$PCAPVISION_CONFIG``)
supplies defaults; command-line flags always win.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import byte_image, synth
from .errors import (
    FormatError,
    InvalidArgument,
    IoError,
    ModelFormatError,
    NotFound,
    NumericError,
    PcapVisionError,
    SingleClassError,
    Unsupported,
)

log = logging.getLogger("pcapvision")

EXIT_OK, EXIT_IO, EXIT_ARGS, EXIT_NUMERIC, EXIT_SINGLE_CLASS, EXIT_MODEL = 0, 2, 3, 4, 5, 6
CONFIG_ENV = "PCAPVISION_CONFIG"
_BOOL_KEYS = {"quiet", "json"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which we reserve for I/O
    def error(self, message):
        raise _UsageError(message)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (_UsageError, InvalidArgument, Unsupported)):
        return EXIT_ARGS
    if isinstance(exc, ModelFormatError):
        return EXIT_MODEL
    if isinstance(exc, SingleClassError):
        return EXIT_SINGLE_CLASS
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (NotFound, IoError, FormatError, OSError)):
        return EXIT_IO
    return 1


def read_config(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise NotFound(f"config file not found: {path}")
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# ---------------------------------------------------------------- data helpers

def read_manifest(path: str | os.PathLike, split: str | None = None) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise NotFound(f"manifest not found: {p}")
    recs = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            r["label"] = int(r["label"])
            r["path"]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{p}:{n}: bad manifest record ({exc})")
        if split is None or r.get("split") == split:
            if not os.path.isabs(r["path"]) and not os.path.exists(r["path"]):
                r["path"] = str(p.parent / r["path"])
            recs.append(r)
    return recs


def _labeled(records: list[dict], split: str):
    from .trainer import LabeledSet

    return LabeledSet([(r["path"], r["label"]) for r in records], split)


def _input_files(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return sorted(f for f in p.iterdir() if f.is_file())
    if not p.exists():
        raise NotFound(f"no such file or directory: {p}")
    return [p]


def _emit(args, payload, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


# ------------------------------------------------------------------- commands

def cmd_convert(args) -> int:
    img = byte_image.convert_file(args.input, args.width, args.height)
    byte_image.write_pgm(img, args.out)
    _emit(
        args,
        {"input": args.input, "out": args.out, "width": img.width, "height": img.height,
         "source_len": img.source_len, "truncated": img.truncated},
        f"{args.out}: {img.width}x{img.height} from {img.source_len} bytes" + (" (truncated)" if img.truncated else ""),
    )
    return EXIT_OK


def _arch(name: str):
    from .model_zoo import DESK, FULL, build_variant

    if name.endswith("-desk"):
        base = name[: -len("-desk")]
        return build_variant(name if base == "pcapvision" else base, DESK)
    return build_variant(name, FULL)


def cmd_train(args) -> int:
    from .model_zoo import save_model
    from .trainer import TrainConfig, train_and_calibrate

    spec = _arch(args.arch)
    recs = read_manifest(args.data)
    train_recs = [r for r in recs if r.get("split", "train") == "train"]
    val_recs = [r for r in recs if r.get("split") in ("val", "validation")]
    if not val_recs:
        # no validation split: hold out a seeded 20% of train
        rng = np.random.default_rng([args.seed, 1])
        order = rng.permutation(len(train_recs))
        k = max(1, len(train_recs) // 5)
        val_recs = [train_recs[i] for i in sorted(order[:k])]
        train_recs = [train_recs[i] for i in sorted(order[k:])]
    cfg = TrainConfig(
        max_epochs=args.epochs, patience=args.patience, learning_rate=args.lr,
        batch_size=args.batch, seed=args.seed,
    )
    model, history = train_and_calibrate(spec, _labeled(train_recs, "train"), _labeled(val_recs, "validation"), cfg)
    model.metadata["arch"] = args.arch
    out = save_model(model, args.out)
    (out / "history.jsonl").write_text(history.to_jsonl())
    _emit(
        args,
        {"model": str(out), "version_id": model.version_id, "threshold": model.calibrated_threshold,
         "best_epoch": history.best_epoch, "epochs_run": history.epochs_run, "learning_rate": cfg.learning_rate},
        f"saved {model.version_id} to {out}  threshold={model.calibrated_threshold:.6g}  "
        f"best_epoch={history.best_epoch}  epochs={history.epochs_run}",
    )
    return EXIT_OK


def _load(path):
    from .model_zoo import load_model

    return load_model(path)


def cmd_infer(args) -> int:
    from .model_zoo import predict_scores

    model = _load(args.model)
    files = _input_files(args.input)
    h, w = model.spec.input_height, model.spec.input_width
    threshold = model.calibrated_threshold if model.calibrated_threshold is not None else 0.5
    rows = []
    if files:
        images = np.stack([byte_image.convert_file(f, w, h).pixels for f in files])
        scores = predict_scores(model, images)
        rows = [{"path": str(f), "score": float(s), "label": int(s >= threshold)} for f, s in zip(files, scores)]
    if args.json:
        print(json.dumps(rows, sort_keys=True))
    else:
        for r in rows:
            print(f"{r['path']}\t{r['score']:.6f}\t{r['label']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate

    model = _load(args.model)
    recs = read_manifest(args.data, args.split)
    if not recs:
        raise InvalidArgument("no records selected from manifest")
    if args.threshold is not None and not 0 <= args.threshold <= 1:
        raise InvalidArgument("--threshold must be in [0, 1]")
    rep = evaluate(model, _labeled(recs, args.split or "eval"), args.threshold)
    if args.json:
        print(rep.to_json())
    else:
        for k, v in rep.to_dict().items():
            print(f"{k}: {v}")
    return EXIT_OK


def _load_scenario(args) -> synth.Scenario:
    if args.profile:
        d = json.loads(Path(args.profile).read_text())
        sc = synth.Scenario.from_dict(d) if "profile" in d else synth.Scenario(
            synth.CorpusProfile.from_dict(d), synth.build_pcapvision(synth.DESK)
        )
        return dataclasses.replace(sc, days=args.days)
    return synth.default_scenario(args.seed, args.days, args.drift_day)


def cmd_simulate(args) -> int:
    from . import continual
    from .trainer import TrainConfig

    if args.days < 0:
        raise InvalidArgument("--days must be >= 0")
    sc = _load_scenario(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        # only ever replace a previous simulate run
        if not (out / "scenario.json").exists():
            raise InvalidArgument(f"{out} is not empty and is not a previous simulate run")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = continual.ContinualConfig(
        seed=args.seed,
        finetune=TrainConfig(max_epochs=args.finetune_epochs, patience=min(6, max(0, args.finetune_epochs - 1))),
        initial=TrainConfig(max_epochs=args.initial_epochs, patience=min(16, max(0, args.initial_epochs - 1))),
    )
    (out / "scenario.json").write_text(json.dumps(sc.to_dict(), sort_keys=True, indent=1) + "\n")
    if sc.days == 0:
        records, timeline, n_champ = [], "", 0
    else:
        res = continual.run_scenario(sc, None, cfg, out / "registry")
        records = [dataclasses.asdict(r) for r in res.log.records]
        timeline = res.timeline()
        n_champ = len(res.registry.champion_history())
    with open(out / "daily_log.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "timeline.txt").write_text(timeline)
    if args.json:
        print(json.dumps({"out": str(out), "days": sc.days, "champions": n_champ, "log": records}, sort_keys=True))
    else:
        sys.stdout.write(timeline)
        print(f"{sc.days} days, {n_champ} champion(s); run written to {out}")
    return EXIT_OK


def bench_files(model, files, repeat: int = 1) -> dict:
    """Mean per-file wall time split at the image/forward boundary."""
    from .model_zoo import forward

    h, w = model.spec.input_height, model.spec.input_width
    pre, inf = [], []
    for f in files:
        for _ in range(repeat):
            t0 = time.perf_counter()
            x = byte_image.to_unit_tensor(byte_image.encode_image(byte_image.load_capture(f), w, h))
            t1 = time.perf_counter()
            forward(model, x)
            t2 = time.perf_counter()
            pre.append(t1 - t0)
            inf.append(t2 - t1)
    pre_m, inf_m = float(np.mean(pre)), float(np.mean(inf))
    return {
        "files": len(files),
        "repeat": repeat,
        "total_s": pre_m + inf_m,
        "preprocessing_s": pre_m,
        "inference_s": inf_m,
        "preprocessing_share": pre_m / (pre_m + inf_m),
    }


def cmd_bench(args) -> int:
    from .model_zoo import FULL, build_pcapvision, init_params

    if args.repeat < 1:
        raise InvalidArgument("--repeat must be >= 1")
    model = _load(args.model) if args.model else init_params(build_pcapvision(FULL), np.random.default_rng(args.seed))
    files = _input_files(args.input)
    if not files:
        raise InvalidArgument(f"no input files under {args.input}")
    rep = bench_files(model, files, args.repeat)
    _emit(
        args,
        rep,
        f"files: {rep['files']}  repeat: {rep['repeat']}\n"
        f"total per file:         {rep['total_s']:.4f} s\n"
        f"preprocessing per file: {rep['preprocessing_s']:.4f} s\n"
        f"inference per file:     {rep['inference_s']:.4f} s\n"
        f"preprocessing share:    {rep['preprocessing_share']:.1%}",
    )
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.scale == "desk":
        profile, _ = synth.scaled_profile(args.seed)
    else:
        profile = synth.CorpusProfile(seed=args.seed)
    if args.profile:
        profile = synth.CorpusProfile.from_dict(json.loads(Path(args.profile).read_text()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    manifest.write_text("")
    recs = []
    for stream, (split, n) in enumerate((("train", args.train), ("validation", args.val), ("test", args.test))):
        if n:
            items = synth.generate(profile, n - n // 2, n // 2, day=args.day, stream=stream)
            recs += synth.write_corpus(items, out, split, args.day, manifest)
    _emit(args, {"manifest": str(manifest), "files": len(recs)}, f"wrote {len(recs)} files, manifest {manifest}")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--config", help=f"key=value defaults file (default: ${CONFIG_ENV})")

    p = _Parser(prog="pcapvision", description="Classify packet captures from their raw bytes rendered as images.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("convert", parents=[common], help="render a capture as a PGM image")
    c.add_argument("--input", required=True)
    c.add_argument("--width", type=int, default=byte_image.DEFAULT_WIDTH)
    c.add_argument("--height", type=int, default=byte_image.DEFAULT_HEIGHT)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", parents=[common], help="train from scratch and calibrate the threshold")
    t.add_argument("--data", required=True, help="JSON-lines manifest {path,label,day,split}")
    t.add_argument("--arch", default="pcapvision", help="pcapvision, a conv variant name, or either with -desk")
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--patience", type=int, default=16)
    t.add_argument("--lr", type=float, default=0.0005)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="score files with a saved model")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True, help="file or directory")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="metrics for a model on a manifest")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default=None, help="only records with this split (default: all)")
    e.add_argument("--threshold", type=float, default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", parents=[common], help="run the continual-learning loop on synthetic days")
    s.add_argument("--days", type=int, default=30)
    s.add_argument("--profile", default=None, help="JSON scenario or corpus profile")
    s.add_argument("--drift-day", type=int, default=10)
    s.add_argument("--initial-epochs", type=int, default=100)
    s.add_argument("--finetune-epochs", type=int, default=40)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", parents=[common], help="time preprocessing vs inference per file")
    b.add_argument("--model", default=None, help="saved model (default: untrained full-size network)")
    b.add_argument("--input", required=True)
    b.add_argument("--repeat", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic corpus and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--scale", choices=("desk", "full"), default="desk")
    g.add_argument("--profile", default=None)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--val", type=int, default=50)
    g.add_argument("--test", type=int, default=50)
    g.add_argument("--day", type=int, default=0)
    g.set_defaults(func=cmd_generate)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if not path or args.command is None:
        return args
    conf = read_config(path)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for k, v in conf.items():
        if k not in known:
            continue  # keys for other subcommands
        defaults[k] = v.lower() in ("1", "true", "yes", "on") if k in _BOOL_KEYS else v
    sub.set_defaults(**defaults)
    # required flags satisfied by config must not fail the second parse
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_ARGS
        logging.basicConfig(
            level=logging.ERROR if args.quiet else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        return args.func(args)
    except (_UsageError, PcapVisionError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"pcapvision: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
