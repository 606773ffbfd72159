"""Command-line interface.

Every option can come from a flag, from a ``--config`` file of flat
``key = value`` lines, or from the built-in default, in that order of
precedence. The fully resolved configuration is written next to the outputs
as ``config.resolved``, an INI file with one section per command that wrote
into the directory. Such a file is itself accepted by ``--config``: the
section named after the running command is used.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_features,
    load_labels,
    make_vocab,
    split,
    write_dataset,
)
from .fairness import FairnessConfig
from .metrics import MetricsReport, format_value, report
from .taxonomy import TaxonomyError, load_taxonomy, synthetic_taxonomy
from .trainer import NumericalError, TrainConfig, fit
from .ttc import ShapeError, Variant, load_checkpoint, predict_paths, save_checkpoint

log = logging.getLogger("dttc")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

VARIANTS = ("base", "d", "h", "hd")


class ConfigError(ValueError):
    """Bad configuration key or value."""


# -- option table ---------------------------------------------------------

def _csv_items(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_proportions(text: str) -> tuple[tuple[str, float], ...]:
    out = []
    for item in _csv_items(text):
        name, sep, p = item.partition(":")
        if not sep:
            raise ValueError(f"expected group:proportion, got {item!r}")
        out.append((name.strip(), float(p)))
    return tuple(out)


def _optional(parse):
    return lambda text: None if text.strip() == "" else parse(text)


def _choice(*allowed):
    def parse(text):
        t = text.strip().lower()
        if t == "":
            return None
        if t not in allowed:
            raise ValueError(f"{text!r} is not one of {', '.join(allowed)}")
        return t
    return parse


_PARSERS = {
    "str": str,
    "path": _optional(str),
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "floats": _optional(lambda t: tuple(float(v) for v in _csv_items(t))),
    "ints": lambda t: tuple(int(v) for v in _csv_items(t)),
    "strs": lambda t: tuple(_csv_items(t)),
    "proportions": _parse_proportions,
}

_TRAIN = TrainConfig()
_FAIR = FairnessConfig()
_SYN = SyntheticSpec()


@dataclasses.dataclass(frozen=True)
class Option:
    kind: str | tuple[str, ...]
    default: object
    help: str

    def parse(self, text: str):
        if isinstance(self.kind, tuple):
            return _choice(*self.kind)(text)
        return _PARSERS[self.kind](text)


OPTIONS: dict[str, Option] = {
    # files
    "taxonomy": Option("path", None, "taxonomy file (.tsv child<TAB>parent, or .json)"),
    "features": Option("path", None, "feature matrix (binary or CSV)"),
    "labels": Option("path", None, "labels CSV: id,level1,...,leveln"),
    "groups": Option("path", None, "groups CSV: id,group"),
    "checkpoint": Option("path", None, "model checkpoint (default: <out>/<name>/checkpoint)"),
    "out": Option("path", "out", "output root directory"),
    "name": Option("path", None, "run name, a subdirectory of --out"),
    "allow_childless": Option("bool", False, "pad childless inner classes instead of rejecting them"),
    # training
    "variant": Option(VARIANTS, _TRAIN.variant.value, "model variant"),
    "lr": Option("float", _TRAIN.lr, "learning rate"),
    "momentum": Option("float", _TRAIN.momentum, "SGD momentum"),
    "epochs": Option("int", _TRAIN.epochs, "training epochs"),
    "batch_size": Option("int", _TRAIN.batch_size, "mini-batch size"),
    "pi": Option("floats", _TRAIN.pi, "comma-separated level importance factors (default all 1)"),
    "seed": Option("int", _TRAIN.seed, "random seed"),
    "mask_gradient": Option(("detached", "full"), _TRAIN.mask_gradient, "gradient flow through the mask"),
    "tau": Option("float", _TRAIN.tau, "softmax temperature"),
    "epoch_counts": Option("bool", _TRAIN.epoch_counts, "count (group, class) cells over the epoch, not the batch"),
    # fairness
    "epsilon": Option("float", _FAIR.epsilon, "smoothing added to cell counts"),
    "sensitive": Option("strs", tuple(sorted(_FAIR.sensitive)), "comma-separated sensitive groups"),
    "neutral": Option("str", _FAIR.neutral, "neutral group name"),
    "normalize_weights": Option("bool", _FAIR.normalize_weights, "rescale batch weights to mean 1"),
    # splitting and evaluation
    "train_fraction": Option("float", 1.0, "fraction used for training; the rest is the test split"),
    "subset": Option(("train", "test", "all"), None, "split to evaluate (default: test if split, else all)"),
    "eo_aggregate": Option(("mean", "max"), "mean", "how per-level EO is aggregated"),
    "closure": Option("bool", False, "add predicted ancestors before hierarchical F1"),
    # synthetic data
    "branching": Option("ints", _SYN.branching, "classes per node per level, e.g. 2,2,2"),
    "samples_per_leaf": Option("int", _SYN.samples_per_leaf, "instances per leaf class"),
    "dim": Option("int", _SYN.dim, "feature dimension"),
    "separation": Option("float", _SYN.separation, "norm of level-1 class offsets"),
    "level_decay": Option("float", _SYN.level_decay, "offset norm ratio between consecutive levels"),
    "noise": Option("float", _SYN.noise, "per-coordinate noise standard deviation"),
    "bias_strength": Option("float", _SYN.bias_strength, "probability a biased-group sample is corrupted"),
    "bias_shift": Option("float", _SYN.bias_shift, "how far a corrupted sample moves toward the sibling mean"),
    "stereotype_skew": Option("float", _SYN.stereotype_skew, "probability a biased-group sample is drawn from the stereotype sibling"),
    "group_signal": Option("float", _SYN.group_signal, "norm of the per-group feature offset"),
    "group_proportions": Option(
        "proportions", _SYN.group_proportions, "comma-separated group:proportion pairs"),
    "biased_groups": Option("strs", _SYN.biased_groups, "comma-separated groups whose samples are corrupted"),
}

_FILES = ("taxonomy", "features", "labels", "groups", "out", "name", "allow_childless")
_TRAIN_KEYS = ("variant", "lr", "momentum", "epochs", "batch_size", "pi", "seed",
               "mask_gradient", "tau", "epoch_counts")
_FAIR_KEYS = ("epsilon", "sensitive", "neutral", "normalize_weights")
_EVAL_KEYS = ("checkpoint", "train_fraction", "subset", "seed", "eo_aggregate", "closure")
_SYN_KEYS = ("branching", "samples_per_leaf", "dim", "separation", "level_decay", "noise",
             "bias_strength", "bias_shift", "stereotype_skew", "group_signal",
             "group_proportions", "biased_groups")


def _unique(*groups):
    seen = []
    for g in groups:
        seen += [k for k in g if k not in seen]
    return tuple(seen)


COMMAND_KEYS = {
    "generate": _unique(("taxonomy", "out", "name", "seed", "allow_childless"), _SYN_KEYS),
    "train": _unique(_FILES, _TRAIN_KEYS, _FAIR_KEYS, ("train_fraction",)),
    "eval": _unique(_FILES, _EVAL_KEYS, _FAIR_KEYS, ("variant",)),
    "predict": ("taxonomy", "features", "labels", "checkpoint", "out", "name", "variant", "allow_childless"),
    "ablation": _unique(_FILES, _TRAIN_KEYS, _FAIR_KEYS, _EVAL_KEYS),
    "inspect": ("taxonomy", "allow_childless"),
}


def format_option(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{g}:{p!r}" for g, p in value)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- config resolution ----------------------------------------------------

def read_config_file(path, command: str) -> dict[str, object]:
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    try:
        try:
            parser.read_string(text)
        except configparser.MissingSectionHeaderError:
            parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
            parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if parser.has_section(command):
        section = parser[command]
    elif parser.sections() == ["run"]:
        section = parser["run"]
    else:
        raise ConfigError(f"{path}: no [{command}] section")
    values = {}
    for raw, text_value in section.items():
        key = raw.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}: unknown key {raw!r}")
        try:
            values[key] = OPTIONS[key].parse(text_value)
        except ValueError as exc:
            raise ConfigError(f"{path}: {raw}: {exc}") from None
    return values


def resolve(command: str, args: argparse.Namespace) -> dict[str, object]:
    """Merge flag values over config-file values over defaults."""
    from_file = read_config_file(args.config, command) if args.config else {}
    resolved = {}
    for key in COMMAND_KEYS[command]:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in from_file:
            resolved[key] = from_file[key]
        else:
            resolved[key] = OPTIONS[key].default
    return resolved


def write_resolved(run_dir: Path, command: str, cfg: dict) -> None:
    """Record ``cfg`` under ``[command]`` in run_dir/config.resolved, keeping other sections."""
    path = run_dir / "config.resolved"
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    if path.exists():
        parser.read_string(path.read_text(encoding="utf-8"))
    parser[command] = {k: format_option(v) for k, v in cfg.items()}
    buf = io.StringIO()
    parser.write(buf)
    path.write_text(buf.getvalue(), encoding="utf-8")


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"], momentum=cfg["momentum"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], pi=cfg["pi"], seed=cfg["seed"],
        mask_gradient=cfg["mask_gradient"], variant=cfg["variant"], tau=cfg["tau"],
        epoch_counts=cfg["epoch_counts"], fairness=fairness_config(cfg),
    )


def fairness_config(cfg: dict) -> FairnessConfig:
    return FairnessConfig(
        epsilon=cfg["epsilon"], sensitive=frozenset(cfg["sensitive"]),
        neutral=cfg["neutral"], normalize_weights=cfg["normalize_weights"],
    )


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(seed=cfg["seed"], **{k: cfg[k] for k in _SYN_KEYS})


# -- shared helpers -----------------------------------------------------------

def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _run_dir(cfg: dict, default_name: str | None) -> Path:
    name = cfg.get("name") or default_name
    run_dir = Path(cfg["out"]) / name if name else Path(cfg["out"])
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("dttc").addHandler(handler)
    return handler


def _taxonomy(cfg: dict):
    _require(cfg, "taxonomy")
    return load_taxonomy(cfg["taxonomy"], allow_childless=cfg.get("allow_childless", False))


def _dataset(cfg: dict, tax) -> Dataset:
    _require(cfg, "features", "labels", "groups")
    vocab = make_vocab(cfg["sensitive"], cfg["neutral"])
    return load_dataset(cfg["features"], cfg["labels"], cfg["groups"], tax, vocab)


def _portion(ds: Dataset, cfg: dict, subset: str) -> Dataset:
    f = cfg["train_fraction"]
    if f == 1.0:
        if subset == "test":
            raise ConfigError("--subset test needs --train-fraction below 1")
        return ds
    if subset == "all":
        return ds
    train, test = split(ds, f, cfg["seed"])
    return train if subset == "train" else test


def _eval_subset(cfg: dict) -> str:
    if cfg.get("subset"):
        return cfg["subset"]
    return "all" if cfg["train_fraction"] == 1.0 else "test"


def _train_into(run_dir: Path, ds: Dataset, tax, cfg: dict):
    params, rep = fit(_portion(ds, cfg, "train"), tax, train_config(cfg))
    save_checkpoint(run_dir / "checkpoint", params)
    (run_dir / "report.jsonl").write_text(rep.to_jsonl(), encoding="utf-8")
    for rec in rep.epochs:
        log.info("epoch %d loss %.6f accuracy %s", rec["epoch"], rec["loss"], rec["accuracy"])
    return params


def _evaluate_into(run_dir: Path, checkpoint: Path, ds: Dataset, tax, cfg: dict) -> MetricsReport:
    params = load_checkpoint(checkpoint)
    params.check(tax, ds.dim)
    part = _portion(ds, cfg, _eval_subset(cfg))
    if len(part) == 0:
        raise DataError("nothing to evaluate: the selected subset is empty")
    pred, _ = predict_paths(params, tax, part.features)
    rep = report(pred, part.labels, part.groups, tax, fairness_config(cfg),
                 eo_aggregate=cfg["eo_aggregate"], closure=cfg["closure"])
    (run_dir / "metrics.json").write_text(rep.to_json(), encoding="utf-8")
    (run_dir / "metrics.csv").write_text(rep.to_csv(), encoding="utf-8")
    return rep


# -- commands --------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    tax = (load_taxonomy(cfg["taxonomy"], allow_childless=cfg["allow_childless"])
           if cfg["taxonomy"] else synthetic_taxonomy(cfg["branching"]))
    spec = synthetic_spec(cfg)
    run_dir = _run_dir(cfg, None)
    ds = generate_synthetic(spec, tax)
    paths = write_dataset(ds, tax, run_dir)
    (run_dir / "taxonomy.tsv").write_text(tax.to_text(), encoding="utf-8")
    write_resolved(run_dir, "generate", cfg)
    print(f"wrote {len(ds)} instances to {run_dir}")
    for kind, p in paths.items():
        print(f"  {kind}: {p}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    tax = _taxonomy(cfg)
    ds = _dataset(cfg, tax)
    run_dir = _run_dir(cfg, cfg["variant"])
    handler = _attach_log(run_dir)
    try:
        _train_into(run_dir, ds, tax, cfg)
    finally:
        logging.getLogger("dttc").removeHandler(handler)
        handler.close()
    write_resolved(run_dir, "train", cfg)
    print(f"checkpoint: {run_dir / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    tax = _taxonomy(cfg)
    ds = _dataset(cfg, tax)
    run_dir = _run_dir(cfg, cfg["variant"])
    checkpoint = Path(cfg["checkpoint"]) if cfg["checkpoint"] else run_dir / "checkpoint"
    rep = _evaluate_into(run_dir, checkpoint, ds, tax, cfg)
    write_resolved(run_dir, "eval", cfg)
    sys.stdout.write(rep.to_csv())
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    tax = _taxonomy(cfg)
    _require(cfg, "features")
    run_dir = _run_dir(cfg, cfg["variant"])
    checkpoint = Path(cfg["checkpoint"]) if cfg["checkpoint"] else run_dir / "checkpoint"
    params = load_checkpoint(checkpoint)
    params.check(tax)
    x = load_features(cfg["features"])
    if x.shape[0] and x.shape[1] != params.dim:
        raise ShapeError(f"features have dimension {x.shape[1]}, model expects {params.dim}")
    if cfg["labels"]:
        ids, _ = load_labels(cfg["labels"], tax)
        if len(ids) != x.shape[0]:
            raise DataError(f"{len(ids)} label rows for {x.shape[0]} feature rows")
    else:
        ids = tuple(str(j) for j in range(x.shape[0]))
    pred, conf = predict_paths(params, tax, x)

    n = tax.n_levels
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", *(f"l{i + 1}" for i in range(n)), *(f"p{i + 1}" for i in range(n))])
    for rid, path, probs in zip(ids, pred, conf):
        w.writerow([rid, *(tax.levels[i][k] for i, k in enumerate(path)), *(repr(float(p)) for p in probs)])
    out = run_dir / "predictions.csv"
    out.write_text(buf.getvalue(), encoding="utf-8")
    write_resolved(run_dir, "predict", cfg)
    print(f"predictions: {out}")
    return EXIT_OK


def ablation_rows(reports: dict[str, MetricsReport]) -> str:
    """CSV with one row per variant and the difference to Base for every metric."""
    base = reports["base"]
    header = base.wide_header()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", *header, *(f"delta_{h}" for h in header)])
    for v in VARIANTS:
        if reports[v].wide_header() != header:
            raise DataError(f"variant {v} reports different columns than base")
        vals = reports[v].wide_values()
        deltas = [None if a is None or b is None else a - b for a, b in zip(vals, base.wide_values())]
        w.writerow([Variant(v).label, *map(format_value, vals), *map(format_value, deltas)])
    return buf.getvalue()


def cmd_ablation(cfg: dict) -> int:
    tax = _taxonomy(cfg)
    ds = _dataset(cfg, tax)
    root = _run_dir(cfg, "ablation")
    handler = _attach_log(root)
    reports = {}
    try:
        for v in VARIANTS:
            vcfg = dict(cfg, variant=v)
            run_dir = root / v
            run_dir.mkdir(exist_ok=True)
            log.info("training variant %s", v)
            _train_into(run_dir, ds, tax, vcfg)
            reports[v] = _evaluate_into(run_dir, run_dir / "checkpoint", ds, tax, vcfg)
            write_resolved(run_dir, "ablation", vcfg)
    finally:
        logging.getLogger("dttc").removeHandler(handler)
        handler.close()
    table = ablation_rows(reports)
    (root / "ablation.csv").write_text(table, encoding="utf-8")
    write_resolved(root, "ablation", cfg)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_inspect(cfg: dict) -> int:
    tax = _taxonomy(cfg)
    print(tax.summary())
    for i in range(tax.n_levels - 1):
        col = tax.transition_matrix(i).sum(axis=0)
        if not np.all(col == 1):
            raise TaxonomyError(f"transition matrix l{i + 1}->l{i + 2} has a column without exactly one parent")
    print(f"classes: {tax.n_classes}")
    print("valid: yes")
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, "write a seeded synthetic dataset"),
    "train": (cmd_train, "train one model variant"),
    "eval": (cmd_eval, "evaluate a checkpoint"),
    "predict": (cmd_predict, "write per-instance predictions"),
    "ablation": (cmd_ablation, "train and evaluate Base, D, H and HD"),
    "inspect": (cmd_inspect, "summarize and validate a taxonomy"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dttc", description="Hierarchical text classification with fairness reweighting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        for key in COMMAND_KEYS[name]:
            opt = OPTIONS[key]
            flag = "--" + key.replace("_", "-")
            default_text = format_option(opt.default) or "none"
            if opt.kind == "bool":
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None,
                               help=f"{opt.help} (default: {default_text})")
            else:
                choices = opt.kind if isinstance(opt.kind, tuple) else None
                p.add_argument(flag, dest=key, type=_arg_type(opt), default=None, choices=choices,
                               metavar=None if choices else key.upper(),
                               help=f"{opt.help} (default: {default_text})")
    return parser


def _arg_type(opt: Option):
    def convert(text):
        try:
            return opt.parse(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    convert.__name__ = str(opt.kind)
    return convert


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("dttc").setLevel(logging.INFO)
    func = COMMANDS[args.command][0]
    try:
        cfg = resolve(args.command, args)
        return func(cfg)
    except ConfigError as exc:
        print(f"dttc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dttc {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TaxonomyError, DataError, ShapeError, OSError, KeyError, ValueError) as exc:
        print(f"dttc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
