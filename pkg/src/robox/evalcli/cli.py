"""Command-line interface.

Every subcommand accepts ``--config FILE`` (YAML or JSON). Keys that match a
flag name set that flag's default; the remaining keys configure the
underlying routine. Flags given on the command line always win.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from ..geometry import Box, dice
from ..imageprior import PriorConfig
from ..model import ModelConfig, RoBoxModel
from ..pipeline import ABLATIONS, Flags, Pipeline
from ..training import PretrainConfig, TrainConfig, gen_dataset, load_split, pretrain, prior_stacks, train_robox
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluate import EvalConfig, EvalReport, PipelinePredictor, evaluate
from .report import combine, plot_degradation, table_csv

log = logging.getLogger("robox")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# keys of a config file that are not routine parameters
_SECTIONS = ("model", "prior")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def read_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a mapping")
    return data


def _flags_from_string(text: str) -> Flags:
    names = {"prm": "use_prm", "pem": "use_pem", "sie": "use_sie", "iter": "iterate"}
    chosen = [t.strip().lower() for t in text.split(",") if t.strip() and t.strip().lower() != "none"]
    bad = [t for t in chosen if t not in names]
    if bad:
        raise UsageError(f"unknown flags {bad}; choose from {sorted(names)} or 'none'")
    return Flags(**{names[t]: True for t in chosen})


def parse_box(text: str) -> Box:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--box expects x1,y1,x2,y2, got {text!r}") from None
    if len(vals) != 4:
        raise UsageError(f"--box expects 4 numbers, got {len(vals)}")
    return Box(*vals)


def _routine_dict(args, extra: dict, cls, overrides: dict) -> object:
    names = {f.name for f in dataclasses.fields(cls)}
    d = {k: v for k, v in extra.items() if k in names}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return cls.from_dict(d)


def _leftover(cfg: dict, parser: argparse.ArgumentParser, cls) -> None:
    dests = {a.dest for a in parser._actions}
    names = {f.name for f in dataclasses.fields(cls)} if cls else set()
    unknown = set(cfg) - dests - names - set(_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required options: " + ", ".join("--" + n.replace("_", "-") for n in missing))


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    _require(args, "out")
    path = gen_dataset(args.out, args.count, args.seed)
    print(f"wrote {args.count} samples; manifest {path}")
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    _require(args, "manifest", "out")
    pcfg = _routine_dict(args, cfg, PretrainConfig, {
        "max_epochs": args.epochs, "lr": args.lr, "seed": args.seed, "batch": args.batch,
        "target_dice": args.target_dice})
    mcfg = ModelConfig.from_dict(cfg.get("model"))
    train, val = load_split(args.manifest, "train"), load_split(args.manifest, "val")
    model = RoBoxModel(mcfg)
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    records = pretrain(model, train, val, pcfg, log_path)
    save_checkpoint(model, args.out, {"pretrain": dataclasses.asdict(pcfg)})
    print(f"epochs {len(records)} val_dice {records[-1]['val_dice']:.4f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    _require(args, "base", "manifest", "out")
    tcfg = _routine_dict(args, cfg, TrainConfig, {
        "epochs": args.epochs, "lr": args.lr, "seed": args.seed, "batch": args.batch})
    pcfg = PriorConfig.from_dict(cfg.get("prior"))
    model = load_checkpoint(args.base)
    model.reset_heads(tcfg.seed)
    train, val = load_split(args.manifest, "train"), load_split(args.manifest, "val")
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    records = train_robox(model, train, val, prior_stacks(train, pcfg), prior_stacks(val, pcfg), tcfg, log_path)
    extra = {"train": dataclasses.asdict(tcfg), "prior": dataclasses.asdict(pcfg)}
    save_checkpoint(model, args.out, extra)
    print(f"epochs {len(records)} val_dice {records[-1]['val_dice']:.4f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    _require(args, "checkpoint", "manifest", "out")
    overrides = {"seed": args.seed, "trials": args.trials}
    if args.methods:
        methods = args.methods.split(";") if isinstance(args.methods, str) else args.methods
        overrides["methods"] = [m.strip() for m in methods if m.strip()]
    ecfg = _routine_dict(args, cfg, EvalConfig, overrides)
    pcfg = PriorConfig.from_dict(cfg.get("prior"))
    model = load_checkpoint(args.checkpoint)
    data = load_split(args.manifest, args.split)
    if args.limit is not None:
        data = data.subset(np.arange(min(args.limit, len(data))))
    report = evaluate(PipelinePredictor(model, data, pcfg), data, ecfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".json").write_text(report.to_json())
    out.with_suffix(".csv").write_text(table_csv(combine([report])))
    out.with_suffix(".runtime.json").write_text(json.dumps(report.runtime, indent=1, sort_keys=True))
    sys.stdout.write(table_csv(combine([report])))
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    _require(args, "checkpoint", "image", "box")
    flags = ABLATIONS[args.method] if args.method else _flags_from_string(args.flags)
    box = parse_box(args.box)
    model = load_checkpoint(args.checkpoint)
    img = np.asarray(Image.open(args.image).convert("L"), dtype=np.float64) / 255.0
    size = model.cfg.image_size
    if img.shape != (size, size):
        raise ValueError(f"image must be {size}x{size}, got {img.shape}")
    pipe = Pipeline(model, PriorConfig.from_dict(cfg.get("prior")))
    mask, trace = pipe.segment(img, box, flags)
    print(f"selected_mask_index {trace.selected_index}")
    print(f"score {trace.score:.4f}")
    if args.gt_mask:
        gt = np.asarray(Image.open(args.gt_mask).convert("L")) > 127
        print(f"dice {100.0 * dice(mask, gt):.2f}")
    if args.out_mask:
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(args.out_mask)
    if args.out_trace:
        Path(args.out_trace).write_text(trace.to_json())
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    reports = [EvalReport.from_json(Path(p).read_text()) for p in args.inputs]
    rows = combine(reports)
    text = table_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if args.plot:
        plot_degradation(rows, args.plot)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="robox", description="Toy box-robust promptable segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(routine=None)

    sp = add("pretrain", cmd_pretrain, "train the base model with tight-box prompts")
    sp.add_argument("--manifest")
    sp.add_argument("--out", help="output checkpoint")
    sp.add_argument("--log", help="per-epoch JSONL log (default: next to the checkpoint)")
    for flag, typ in (("--epochs", int), ("--lr", float), ("--seed", int), ("--batch", int),
                      ("--target-dice", float)):
        sp.add_argument(flag, type=typ)
    sp.set_defaults(routine=PretrainConfig)

    sp = add("train", cmd_train, "train the refinement heads on a frozen base")
    sp.add_argument("--base", help="pretrained checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--out", help="output checkpoint")
    sp.add_argument("--log")
    for flag, typ in (("--epochs", int), ("--lr", float), ("--seed", int), ("--batch", int)):
        sp.add_argument(flag, type=typ)
    sp.set_defaults(routine=TrainConfig)

    sp = add("eval", cmd_eval, "run the perturbed-prompt evaluation")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", help="output prefix; writes .json, .csv and .runtime.json")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--methods", help="';'-separated method names")
    sp.add_argument("--limit", type=int, help="evaluate only the first N images")
    sp.set_defaults(routine=EvalConfig)

    sp = add("infer", cmd_infer, "segment one image from a box prompt")
    sp.add_argument("--checkpoint")
    sp.add_argument("--image")
    sp.add_argument("--box", help="x1,y1,x2,y2")
    sp.add_argument("--flags", default="prm,pem,sie", help="comma list of prm, pem, sie, iter (or none)")
    sp.add_argument("--method", choices=list(ABLATIONS), help="named flag set; overrides --flags")
    sp.add_argument("--gt-mask", help="ground-truth mask to score against")
    sp.add_argument("--out-mask")
    sp.add_argument("--out-trace")
    sp.set_defaults(routine=None)

    sp = add("report", cmd_report, "tabulate one or more evaluation outputs")
    sp.add_argument("inputs", nargs="+", help="evaluation JSON files")
    sp.add_argument("--out", help="CSV path")
    sp.add_argument("--plot", help="PNG path for the DICE-vs-bucket plot")
    sp.set_defaults(routine=None)
    return p


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = read_config(args.config)
        if cfg:
            sp = _subparser(parser, args.command)
            _leftover(cfg, sp, args.routine)
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items() if k.replace("-", "_") in dests})
            args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
        return args.func(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help exits 0 through argparse
        return int(exc.code or 0)
    except CheckpointError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
