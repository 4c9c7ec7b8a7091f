"""Command-line entry point: ``opal {generate,train,evaluate,retrieve,diversity}``.

Every knob lives in one flat key=value namespace (training fields, synthetic
generator fields and paths). A ``--config`` file sets values, command-line
flags override it, and the effective configuration is written to
``<out>/config.txt`` so a run can be repeated with ``--config <out>/config.txt``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(divergence, unreadable or inconsistent files).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import (
    SyntheticSpec,
    build_split,
    generate_synthetic,
    ingest,
    write_interactions,
    write_labels,
)
from .embedding import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, OpalError
from .evaluation import KS, diversity_summary, evaluate, sppmi
from .interest import encode_user
from .retrieval import build_index, index_retrieve
from .trainer import TrainConfig, train

log = logging.getLogger("opal")

# keys that belong to neither TrainConfig nor SyntheticSpec
_EXTRA = {
    "data": "",  # interaction log (csv or jsonl)
    "out": ".",
    "checkpoint": "",
    "catalog": "",  # defaults to the catalog.csv next to the checkpoint
    "history": "",  # one item id per line, oldest first
    "top_k": 200,
    "eval_split": "test",
    "sppmi_shift": 1.0,
    "skip_pretrain": False,
    "skip_finetune": False,
}
# synthetic fields whose names are not already TrainConfig fields
_SYNTH = {f.name: f.default for f in fields(SyntheticSpec) if f.name not in ("dim", "category_sizes")}


def defaults() -> dict:
    out = {f.name: f.default for f in fields(TrainConfig)}
    for name, value in _SYNTH.items():
        out.setdefault(name, value)
    out.update(_EXTRA)
    return out


def _coerce(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def read_config(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment, unknown keys are errors."""
    base = defaults()
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in base:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, raw, base[key])
    return values


def write_config(config: dict, path: Path) -> None:
    lines = [f"{k} = {int(v) if isinstance(v, bool) else v}" for k, v in sorted(config.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def train_config(config: dict) -> TrainConfig:
    return TrainConfig(**{f.name: config[f.name] for f in fields(TrainConfig)})


def synthetic_spec(config: dict) -> SyntheticSpec:
    spec = SyntheticSpec(dim=config["d"], **{name: config[name] for name in _SYNTH})
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_knobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    for key, value in defaults().items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=key, default=None, metavar=type(value).__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opal", description="Multi-interest candidate matching.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("generate", "write a synthetic log and its planted labels"),
        ("train", "two-stage training; writes checkpoint, catalog and per-epoch log"),
        ("evaluate", "Recall/HitRate at K in {50, 100, 200} on the val or test split"),
        ("retrieve", "top-K items for one history with the recalling interest"),
        ("diversity", "SPPMI matrix of one user's top-K items and its summary"),
    ):
        _add_knobs(sub.add_parser(name, help=text, description=text))
    return parser


def resolve(args: argparse.Namespace) -> dict:
    config = defaults()
    if args.config:
        config.update(read_config(args.config))
    for key, like in defaults().items():
        raw = getattr(args, key)
        if raw is not None:
            config[key] = raw if isinstance(raw, bool) else _coerce(key, raw, like)
    return config


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _out_dir(config: dict) -> Path:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out / "config.txt")
    return out


def _require(config: dict, *keys: str) -> None:
    for key in keys:
        if not config[key]:
            raise ConfigError(f"--{key.replace('_', '-')} is required")


def _catalog_path(config: dict) -> Path:
    if config["catalog"]:
        return Path(config["catalog"])
    return Path(config["checkpoint"]).parent / "catalog.csv"


def write_catalog(catalog: list[str], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("index", "item_id"))
        w.writerows(enumerate(catalog))


def read_catalog(path: Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if [int(r["index"]) for r in rows] != list(range(len(rows))):
        raise OpalError(f"{path}: catalog indices must be 0..n-1 in order")
    return [r["item_id"] for r in rows]


def _load_model(config: dict) -> tuple[Checkpoint, list[str]]:
    _require(config, "checkpoint")
    ckpt = load_checkpoint(config["checkpoint"])
    catalog = read_catalog(_catalog_path(config))
    if len(catalog) != ckpt.catalog_size:
        raise OpalError(
            f"catalog lists {len(catalog)} items but the checkpoint has {ckpt.catalog_size}"
        )
    return ckpt, catalog


def _read_history(config: dict, catalog: list[str]) -> np.ndarray:
    _require(config, "history")
    index = {item: i for i, item in enumerate(catalog)}
    items = [ln.strip() for ln in Path(config["history"]).read_text(encoding="utf-8").splitlines()]
    items = [it for it in items if it]
    unknown = [it for it in items if it not in index]
    if unknown:
        raise OpalError(f"history items not in the catalog: {', '.join(unknown[:5])}")
    if not items:
        raise OpalError("history is empty")
    return np.array([index[it] for it in items], dtype=np.int64)


def cmd_generate(config: dict) -> None:
    spec = synthetic_spec(config)
    out = _out_dir(config)
    log_rows, labels = generate_synthetic(spec)
    write_interactions(log_rows, out / "interactions.csv")
    write_labels(labels, out / "labels.csv")
    print(f"wrote {len(log_rows)} interactions over {spec.n_items} items to {out}")


def cmd_train(config: dict) -> None:
    _require(config, "data")
    tc = train_config(config)
    tc.validate()
    if config["skip_pretrain"] and config["skip_finetune"]:
        raise ConfigError("--skip-pretrain and --skip-finetune together leave nothing to train")
    split = build_split(ingest(config["data"]), day_length=config["day_length"])
    out = _out_dir(config)
    with open(out / "train_log.csv", "w", encoding="utf-8") as stream:
        result = train(tc, split, config["skip_pretrain"], config["skip_finetune"], log_stream=stream)
    save_checkpoint(result.checkpoint(), out / "model.ckpt")
    write_catalog(split.catalog, out / "catalog.csv")
    for state in result.states:
        print(f"{state.stage}: {state.epoch} epochs, best val Recall@200 "
              f"{state.best_recall:.4f} at epoch {state.best_epoch}")


def cmd_evaluate(config: dict) -> None:
    _require(config, "data")
    if config["eval_split"] not in ("val", "test"):
        raise ConfigError("eval_split must be 'val' or 'test'")
    ckpt, catalog = _load_model(config)
    split = build_split(ingest(config["data"]), day_length=config["day_length"], catalog=catalog)
    records = split.test if config["eval_split"] == "test" else split.val
    report = evaluate(ckpt.store, ckpt.gru, records, config["epsilon"], ckpt.stage, KS, config["max_len"])
    out = _out_dir(config)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("K", "recall", "hitrate", "n_users"))
        for K, r, h, n in report.rows():
            w.writerow((K, f"{r:.6f}", f"{h:.6f}", n))
            print(f"K={K:3d} recall {r:.4f} hitrate {h:.4f}")


def _retrieve(config: dict, ckpt: Checkpoint, catalog: list[str]):
    history = _read_history(config, catalog)
    user = encode_user(ckpt.store, ckpt.gru, history[-config["max_len"]:], config["epsilon"], ckpt.stage)
    index = build_index(ckpt.store)
    return index_retrieve(index, user.fused, config["top_k"], history, catalog_size=len(catalog))


def cmd_retrieve(config: dict) -> None:
    ckpt, catalog = _load_model(config)
    res = _retrieve(config, ckpt, catalog)
    out = _out_dir(config)
    with open(out / "retrieved.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("rank", "item_id", "score", "interest_id"))
        for rank, (item, score, j) in enumerate(zip(res.items, res.scores, res.interests), start=1):
            w.writerow((rank, catalog[item], f"{score:.6f}", j))
    print(f"retrieved {len(res)} items; per interest: {res.per_interest_counts.tolist()}")


def cmd_diversity(config: dict) -> None:
    _require(config, "data")
    ckpt, catalog = _load_model(config)
    res = _retrieve(config, ckpt, catalog)
    split = build_split(ingest(config["data"]), day_length=config["day_length"], catalog=catalog)
    matrix = sppmi(split.train, res.items, shift=config["sppmi_shift"])
    summary = diversity_summary(matrix, res.interests)
    out = _out_dir(config)
    ids = [catalog[i] for i in res.items]
    with open(out / "sppmi.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["item_id", *ids])
        for item, row in zip(ids, matrix.values):
            w.writerow([item, *(f"{v:.6f}" for v in row)])
    with open(out / "diversity_summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("pairs", "mean_sppmi", "n_pairs"))
        w.writerow(("within_interest", summary.mean_within, summary.n_within))
        w.writerow(("cross_interest", summary.mean_cross, summary.n_cross))
        w.writerow(("all", summary.mean_all, summary.n_within + summary.n_cross))
    print(f"within-interest {summary.mean_within:.4f}, cross-interest {summary.mean_cross:.4f}")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "retrieve": cmd_retrieve,
    "diversity": cmd_diversity,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve(args)
        if config["top_k"] < 1:
            raise ConfigError("top_k must be >= 1")
        COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"opal: config error: {exc}", file=sys.stderr)
        return 1
    except (OpalError, OSError, ValueError) as exc:
        print(f"opal: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
