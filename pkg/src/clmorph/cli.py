"""Command-line entry points: gen, train, segment, register, eval, ablate, sweep.

Configuration is a flat namespace of ``key = value`` lines covering the
training, loss, network and synthetic-data settings.  A config file is read
first, then ``--key value`` options override it.  The fully resolved config
is written to the run directory before any work starts.  The training seed is
``seed``; the data-generation seed is ``data_seed`` (``gen --seed`` sets it).

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ClmorphError, ConfigurationError, FormatError
from .losses import LossConfig
from .metrics import RegionReport, dice, evaluate
from .network import Network, NetworkConfig, load_network
from .pipeline import register_volume, segment_volume
from .synthdata import SyntheticSpec, Volume, read_volume, sample_paths, write_dataset, write_volume
from .trainer import (
    LOG_COLUMNS,
    TrainConfig,
    TrainState,
    fit,
    init_parameters,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
)

log = logging.getLogger("clmorph")

CONFIG_NAME = "config.cfg"
CHECKPOINT_NAME = "checkpoint.clmp"

ABLATION_ROWS = (
    ("recon", dict(use_smooth=False, use_contrast=False)),
    ("recon+smooth", dict(use_smooth=True, use_contrast=False)),
    ("recon+contrast", dict(use_smooth=False, use_contrast=True)),
    ("full", dict(use_smooth=True, use_contrast=True)),
)


# -- configuration -------------------------------------------------------------


def _section_keys():
    """Map every config key to (section, field name, default)."""
    keys = {}
    sections = (
        ("train", TrainConfig()),
        ("loss", LossConfig()),
        ("network", NetworkConfig()),
        ("data", SyntheticSpec()),
    )
    for section, obj in sections:
        for f in fields(obj):
            if section == "train" and f.name in ("loss", "network"):
                continue
            key = "data_seed" if (section, f.name) == ("data", "seed") else f.name
            keys[key] = (section, f.name, getattr(obj, f.name))
    return keys


KEYS = _section_keys()

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, text: str):
    default = KEYS[key][2]
    text = text.strip()
    try:
        if key == "crop":
            if text.lower() in ("", "none"):
                return None
            return _parse_tuple(text, int, 3)
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return _parse_tuple(text, kind, len(default) if key != "channels" else None)
        return text
    except ValueError:
        raise ConfigurationError(f"invalid value {text!r} for key {key!r}") from None


def _parse_tuple(text: str, kind, length):
    parts = [p for p in text.replace("x", ",").replace(" ", ",").split(",") if p]
    values = tuple(kind(p) for p in parts)
    if length is not None and len(values) == 1 and length > 1:
        values = values * length
    if length is not None and len(values) != length:
        raise ValueError(text)
    return values


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Resolved settings; ``values`` holds every key."""

    values: dict

    @classmethod
    def defaults(cls) -> RunConfig:
        return cls({k: v[2] for k, v in KEYS.items()})

    def update(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        self.values[key] = _parse_value(key, value) if isinstance(value, str) else value

    def read(self, path) -> RunConfig:
        """Merge a ``key = value`` file; ``#`` starts a comment."""
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}") from None
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key = key.strip()
            if key not in KEYS:
                raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
            self.update(key, value)
        return self

    def dump(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.values.items())

    def write(self, directory) -> Path:
        path = Path(directory) / CONFIG_NAME
        path.write_text(self.dump())
        return path

    def _section(self, name: str) -> dict:
        return {fname: self.values[key] for key, (sec, fname, _) in KEYS.items() if sec == name}

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self._section("data"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            loss=LossConfig(**self._section("loss")),
            network=NetworkConfig(**self._section("network")),
            **self._section("train"),
        )


def _add_config_options(parser: argparse.ArgumentParser, keys) -> None:
    parser.add_argument("--config", help="key = value config file, applied before command-line options")
    group = parser.add_argument_group("config keys")
    for key in keys:
        group.add_argument(
            f"--{key.replace('_', '-')}",
            dest=f"cfg_{key}",
            metavar="VALUE",
            default=None,
            help=f"default {_format_value(KEYS[key][2])}",
        )
    for term in ("recon", "smooth", "contrast"):
        if f"use_{term}" in keys:
            group.add_argument(f"--no-{term}", dest=f"cfg_use_{term}", action="store_const", const="false")


def _resolve(args) -> RunConfig:
    cfg = RunConfig.defaults()
    if getattr(args, "config", None):
        cfg.read(args.config)
    for name, value in vars(args).items():
        if name.startswith("cfg_") and value is not None:
            cfg.update(name[4:], value)
    # validate every section up front so bad values fail before any work
    cfg.spec()
    cfg.train_config()
    return cfg


# -- helpers -------------------------------------------------------------------


def _sample_count(root: Path) -> int:
    n = 0
    while sample_paths(root, n)[0].exists():
        n += 1
    return n


def _split(root: Path, cfg: TrainConfig):
    """Training and test sample indices: the first ``train_samples`` train, the rest test."""
    total = _sample_count(root)
    if total == 0:
        raise FormatError(f"{root}: no samples found (expected {sample_paths(root, 0)[0].name})")
    n_train = total if cfg.train_samples <= 0 else min(cfg.train_samples, total)
    return list(range(n_train)), list(range(n_train, total))


class _LogWriter:
    """Space-separated training log on a stream plus a CSV copy."""

    def __init__(self, run_dir: Path, stream=None, append: bool = False):
        mode = "a" if append else "w"
        self.text = open(run_dir / "train.log", mode)
        self.csv_file = open(run_dir / "train_log.csv", mode, newline="")
        self.csv = csv.writer(self.csv_file, lineterminator="\n")
        self.stream = stream
        if not append:
            header = " ".join(LOG_COLUMNS)
            self.text.write(header + "\n")
            self.csv.writerow(LOG_COLUMNS)
            if stream is not None:
                print(header, file=stream, flush=True)

    def __call__(self, record: dict) -> None:
        cells = [str(record[c]) if c in ("epoch", "step") else repr(float(record[c])) for c in LOG_COLUMNS]
        line = " ".join(cells)
        self.text.write(line + "\n")
        self.csv.writerow(cells)
        if self.stream is not None:
            print(line, file=self.stream, flush=True)

    def close(self) -> None:
        self.text.close()
        self.csv_file.close()


def train_run(data_root, run_dir, config: TrainConfig, stream=None, resume=None) -> tuple[Network, TrainState]:
    """Train on the configured split, writing logs and the final checkpoint to ``run_dir``."""
    data_root, run_dir = Path(data_root), Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train_idx, _ = _split(data_root, config)
    dataset = load_dataset(data_root, train_idx)
    if resume is not None:
        network, state, saved = load_checkpoint(resume)
        config = replace(saved, epochs=config.epochs)
    else:
        network = init_parameters(Network(config.network), config.seed)
        state = TrainState.fresh(config.seed)
    writer = _LogWriter(run_dir, stream, append=resume is not None and (run_dir / "train.log").exists())
    try:
        fit(dataset, config, network, state, on_step=writer)
    finally:
        writer.close()
    save_checkpoint(run_dir / CHECKPOINT_NAME, network, state, config)
    return network, state


def segment_indices(network: Network, data_root, indices, zero_field: bool = False):
    """Predicted and reference label maps for the given samples."""
    data_root = Path(data_root)
    atlas = read_volume(data_root / "atlas.clmv").data
    atlas_labels = read_volume(data_root / "atlas_labels.clmv").data
    preds, gts = [], []
    for i in indices:
        img_path, lab_path, _ = sample_paths(data_root, i)
        preds.append(segment_volume(network, read_volume(img_path).data, atlas, atlas_labels, zero_field))
        gts.append(read_volume(lab_path).data)
    return preds, gts


def _score(network, data_root, indices, labels) -> tuple[RegionReport, float]:
    preds, gts = segment_indices(network, data_root, indices)
    report = evaluate(preds, gts, labels, names=[f"sample_{i:04d}" for i in indices])
    atlas_labels = read_volume(Path(data_root) / "atlas_labels.clmv").data
    baseline = float(np.mean([np.mean([dice(atlas_labels, g, k) for k in labels]) for g in gts]))
    return report, baseline


def _labels_of(data_root) -> list[int]:
    atlas_labels = read_volume(Path(data_root) / "atlas_labels.clmv").data
    return [int(v) for v in np.unique(atlas_labels) if v != 0]


def _write_table(path_stem: Path, header, rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header, *rows])
    path_stem.with_suffix(".csv").write_text(buf.getvalue())
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    text = "\n".join(" ".join(str(x).rjust(w) for x, w in zip(row, widths)) for row in [header, *rows]) + "\n"
    path_stem.with_suffix(".txt").write_text(text)
    return text


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.4f}"


# -- commands ------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    if args.n < 0:
        raise ConfigurationError(f"--n must be >= 0, got {args.n}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    write_dataset(out, cfg.spec(), args.n)
    print(f"wrote atlas and {args.n} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir)
    started = time.time()
    _, state = train_run(args.data, run_dir, cfg.train_config(), stream=sys.stdout, resume=args.resume)
    print(f"trained {state.step} steps in {time.time() - started:.1f}s; checkpoint {run_dir / CHECKPOINT_NAME}")
    return 0


def cmd_segment(args) -> int:
    atlas_labels = read_volume(args.atlas_labels)
    atlas = read_volume(args.atlas)
    image = read_volume(args.image)
    network = None if args.zero_field else load_network(args.checkpoint)
    labels = segment_volume(network, image.data, atlas.data, atlas_labels.data, zero_field=args.zero_field)
    write_volume(args.out, Volume(labels, image.spacing))
    print(f"wrote {args.out}")
    return 0


def cmd_register(args) -> int:
    network = load_network(args.checkpoint)
    atlas = read_volume(args.atlas)
    image = read_volume(args.image)
    result = register_volume(network, image.data, atlas.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "warped.clmv", Volume(result.warped, atlas.spacing))
    write_volume(out / "field.clmv", Volume(result.field, atlas.spacing))
    (out / "jacobian.txt").write_text(result.report())
    print(result.report(), end="")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.clmv"))
    if not names:
        raise FormatError(f"{pred_dir}: no .clmv label files")
    preds, gts = [], []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise FormatError(f"{gt_path}: reference for {name} not found")
        preds.append(read_volume(pred_dir / name).data)
        gts.append(read_volume(gt_path).data)
    report = evaluate(preds, gts, names=[n[: -len(".clmv")] for n in names])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = report.to_text()
    (out / "report.txt").write_text(text + "\n")
    (out / "report.csv").write_text(report.to_csv())
    print(text)
    return 0


def _seeds(text: str | None, default: int) -> list[int]:
    if text is None:
        return [default]
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigurationError("--seeds is empty")
    return seeds


def _evaluate_rows(args, cells):
    """Train every (name, config) cell over all seeds; returns per-cell metric means."""
    data_root, run_dir = Path(args.data), Path(args.run)
    labels = _labels_of(data_root)
    results = []
    baseline = None
    for name, tcfg, seeds in cells:
        _, test_idx = _split(data_root, tcfg)
        if not test_idx:
            raise ConfigurationError("no test samples: set train_samples below the number of samples")
        per_seed = []
        for seed in seeds:
            cell_dir = run_dir / f"{name}_seed{seed}"
            network, _ = train_run(data_root, cell_dir, replace(tcfg, seed=seed))
            report, baseline = _score(network, data_root, test_idx, labels)
            (cell_dir / "report.csv").write_text(report.to_csv())
            per_seed.append([report.macro(m)[0] for m in ("dice", "hd", "assd")])
            print(f"{name} seed {seed}: dice {per_seed[-1][0]:.4f}", flush=True)
        results.append((name, seeds, np.array(per_seed)))
    return results, baseline


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir)
    base = cfg.train_config()
    seeds = _seeds(args.seeds, base.seed)
    cells = [(name, replace(base, **toggles), seeds) for name, toggles in ABLATION_ROWS]
    results, baseline = _evaluate_rows(args, cells)
    header = ("losses", "seeds", "dice", "dice_std", "hd", "assd")
    rows = []
    for name, seeds_used, arr in results:
        mean = arr.mean(axis=0)
        rows.append((name, len(seeds_used), _fmt(mean[0]), _fmt(arr[:, 0].std()), _fmt(mean[1]), _fmt(mean[2])))
    text = _write_table(run_dir / "ablation", header, rows)
    print(text + f"no-registration baseline dice {baseline:.4f}")
    return 0


def _float_list(text: str, name: str) -> list[float]:
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--{name} expects comma-separated numbers, got {text!r}") from None
    if not values:
        raise ConfigurationError(f"--{name} is empty")
    return values


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir)
    base = cfg.train_config()
    alphas, betas = _float_list(args.alphas, "alphas"), _float_list(args.betas, "betas")
    cells = []
    for a in alphas:
        for b in betas:
            tcfg = replace(base, loss=replace(base.loss, alpha=a, beta=b))
            cells.append((f"alpha{a:g}_beta{b:g}", tcfg, [base.seed]))
    results, _ = _evaluate_rows(args, cells)
    header = ("alpha", "beta", "dice", "hd", "assd")
    rows = []
    for (_, tcfg, _), (_, _, arr) in zip(cells, results):
        mean = arr.mean(axis=0)
        rows.append((f"{tcfg.loss.alpha:g}", f"{tcfg.loss.beta:g}", _fmt(mean[0]), _fmt(mean[1]), _fmt(mean[2])))
    text = _write_table(run_dir / "sweep", header, rows)
    best = max(rows, key=lambda r: -math.inf if r[2] == "nan" else float(r[2]))
    print(text + f"best alpha {best[0]} beta {best[1]} dice {best[2]}")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clmorph", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log clipping and other details")
    sub = parser.add_subparsers(dest="command", required=True)
    data_keys = [k for k, v in KEYS.items() if v[0] == "data"]
    train_keys = [k for k, v in KEYS.items() if v[0] != "data"]

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20, help="number of deformed samples")
    p.add_argument("--seed", dest="cfg_data_seed", metavar="VALUE", help="alias of --data-seed")
    _add_config_options(p, data_keys)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a registration network")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run", required=True, help="run directory for config, logs and checkpoint")
    p.add_argument("--resume", help="training-state checkpoint to continue from")
    _add_config_options(p, train_keys)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment an unaligned volume by warping the atlas labels")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--atlas-labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--zero-field", action="store_true", help="skip the network and copy the atlas labels")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("register", help="warp an unaligned volume into atlas space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="score predicted label maps against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the four loss combinations")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--seeds", help="comma-separated training seeds (default: seed)")
    _add_config_options(p, train_keys)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over alpha and beta")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--alphas", default="0.01,0.1,1,10,100")
    p.add_argument("--betas", default="0.0001,0.001,0.01,0.1,1")
    _add_config_options(p, train_keys)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "segment" and not args.zero_field and not args.checkpoint:
            raise ConfigurationError("segment needs --checkpoint unless --zero-field is given")
        return args.func(args)
    except ClmorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: file not found", file=sys.stderr)
        return FormatError.exit_code


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
