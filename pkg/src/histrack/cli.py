"""Command-line interface: ``gen``, ``train``, ``track``, ``eval``, ``sweep``, ``replay``.

Configuration is an INI file with ``[model]``, ``[train]``, ``[scene]`` and
``[data]`` sections whose keys are the fields of :class:`Config`,
:class:`TrainConfig`, :class:`SceneSpec` and :class:`DataSpec`. Every command
writes ``manifest.json`` into its output directory; ``replay`` re-runs a
manifest's command line.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime as _dt
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence


from .benchmark import INFERENCE_FIELDS, SweepTable, sweep, track_videos, train_model
from .core import Config
from .metrics import evaluate
from .model import checkpoint_meta, load_checkpoint, save_checkpoint
from .synthgen import (Dataset, SceneSpec, VideoItem, dataset_fingerprint, downsample,
                       generate_dataset, load_dataset, load_motchallenge, save_dataset)
from .tracker import TrackFile
from .training import TrainConfig

log = logging.getLogger("histrack")

EXIT_OK = 0
EXIT_INVALID = 2


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 200
    n_val: int = 20
    train_seed: int = 0
    val_seed: int = 1


@dataclass
class RunConfig:
    model: Config = field(default_factory=Config)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataSpec = field(default_factory=DataSpec)

    def to_dict(self) -> dict:
        return {name: _jsonable(dataclasses.asdict(getattr(self, name)))
                for name in ("model", "train", "scene", "data")}


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_SECTIONS = {"model": Config, "train": TrainConfig, "scene": SceneSpec, "data": DataSpec}


def _parse_value(raw: str, default, name: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if default is None:
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValidationError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None
    if isinstance(default, tuple):
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return raw


def load_run_config(path: Optional[str]) -> RunConfig:
    """Read an INI config; unknown sections or keys are validation errors."""
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValidationError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _parse_value(raw, defaults[key], f"[{section}] {key}")
        try:
            values[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"[{section}]: {exc}") from None
    return RunConfig(**values)


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    checkpoint: Optional[str] = None
    dataset_fingerprint: Optional[str] = None
    outputs: list = field(default_factory=list)
    started: str = ""
    finished: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _load_videos(path: str) -> tuple[list[VideoItem], Optional[str]]:
    """A dataset archive, a MOT sequence directory, or a directory of sequences."""
    p = Path(path)
    if p.is_file():
        ds = load_dataset(p)
        return list(ds.items), dataset_fingerprint(ds)
    if (p / "gt" / "gt.txt").exists():
        return [load_motchallenge(p)], None
    if p.is_dir():
        seqs = sorted(d for d in p.iterdir() if (d / "gt" / "gt.txt").exists())
        if seqs:
            return [load_motchallenge(d) for d in seqs], None
    raise ValidationError(f"{path} is neither a dataset archive nor a MOTChallenge sequence")


def _load_model(path: str, run_cfg: RunConfig, explicit_config: bool, **overrides):
    try:
        meta = checkpoint_meta(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from None
    if explicit_config:
        stored = meta["config"]
        wanted = run_cfg.model.to_dict()
        diff = sorted(k for k in stored if k not in INFERENCE_FIELDS and stored[k] != wanted[k])
        if diff:
            raise ValidationError(f"checkpoint {path} incompatible with config: "
                                  + ", ".join(f"{k}={stored[k]} vs {wanted[k]}" for k in diff))
    return load_checkpoint(path, **overrides)


def _plot(path_stem: Path, draw) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    draw(ax)
    fig.tight_layout()
    outs = []
    for ext in ("png", "svg"):
        out = path_stem.with_suffix("." + ext)
        fig.savefig(out, **({"metadata": {"Date": None}} if ext == "svg" else {}))
        outs.append(str(out))
    plt.close(fig)
    return outs


# -- commands ----------------------------------------------------------------

def cmd_gen(args, run_cfg: RunConfig, manifest: RunManifest) -> None:
    data = run_cfg.data
    # --seed moves both splits together and keeps them disjoint
    train_seed, val_seed = (data.train_seed, data.val_seed) if args.seed is None else (args.seed, args.seed + 1)
    if train_seed == val_seed:
        raise ValidationError("train and val seeds must differ")
    train = generate_dataset(run_cfg.scene, data.n_train, train_seed, "train")
    val = generate_dataset(run_cfg.scene, data.n_val, val_seed, "val")
    out = Path(args.out)
    fp_train = save_dataset(out / "train.npz", train)
    fp_val = save_dataset(out / "val.npz", val)
    manifest.seeds = {"train": train_seed, "val": val_seed}
    manifest.dataset_fingerprint = fp_train
    manifest.outputs = [str(out / "train.npz"), str(out / "val.npz")]
    log.info("train fingerprint %s, val fingerprint %s", fp_train, fp_val)


def cmd_train(args, run_cfg: RunConfig, manifest: RunManifest) -> None:
    if args.data is None:
        raise ValidationError("train needs --data (a dataset archive from 'gen')")
    items, fp = _load_videos(args.data)
    model_cfg = run_cfg.model
    if args.n_max is not None:
        if len(args.n_max) != 1:
            raise ValidationError("train takes a single --n-max value")
        model_cfg = model_cfg.replace(n_max=args.n_max[0])
    tc = run_cfg.train
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    out = Path(args.out)

    def report(rec):
        if rec["step"] % 50 == 0:
            log.info("step %d loss %.3f", rec["step"], rec["loss"])

    model, history = train_model(model_cfg, tc, Dataset(items, "train"), report)
    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, model, {"train": dataclasses.asdict(tc), "dataset_fingerprint": fp})
    # elapsed times vary run to run, so they stay out of the reproducible history file
    (out / "history.json").write_text(json.dumps(
        [{k: v for k, v in r.items() if k != "elapsed"} for r in history], indent=1))
    steps = [r["step"] for r in history]
    losses = [r["loss"] for r in history]
    plots = _plot(out / "loss_curve", lambda ax: (ax.plot(steps, losses), ax.set_xlabel("step"),
                                                  ax.set_ylabel("clip loss"), ax.set_yscale("log")))
    manifest.config["model"] = _jsonable(model_cfg.to_dict())
    manifest.config["train"] = _jsonable(dataclasses.asdict(tc))
    manifest.seeds = {"train": tc.seed, "init": tc.seed}
    manifest.checkpoint = str(ckpt)
    manifest.dataset_fingerprint = fp
    manifest.outputs = [str(ckpt), str(out / "history.json")] + plots


def _single_checkpoint(args) -> str:
    if not args.checkpoint or len(args.checkpoint) != 1:
        raise ValidationError(f"{args.command} needs exactly one --checkpoint")
    return args.checkpoint[0][1]


def cmd_track(args, run_cfg: RunConfig, manifest: RunManifest) -> None:
    ckpt = _single_checkpoint(args)
    if args.data is None:
        raise ValidationError("track needs --data")
    overrides = {"n_max": args.n_max[0]} if args.n_max else {}
    model = _load_model(ckpt, run_cfg, args.config is not None, **overrides)
    items, fp = _load_videos(args.data)
    n = args.n[0] if args.n else 1
    pairs, fps = track_videos(model, items, n)
    out = Path(args.out)
    outputs = []
    for pred, gt in pairs:
        path = out / f"{gt.name}.txt"
        pred.write(path)
        outputs.append(str(path))
    log.info("tracked %d videos at n=%d, %.1f frames/s", len(pairs), n, fps)
    manifest.checkpoint = ckpt
    manifest.dataset_fingerprint = fp
    manifest.config["model"] = _jsonable(model.config.to_dict())
    manifest.config["n"] = n
    manifest.outputs = outputs


def cmd_eval(args, run_cfg: RunConfig, manifest: RunManifest) -> None:
    if args.data is None or args.pred is None:
        raise ValidationError("eval needs --pred (track output directory) and --data (ground truth)")
    items, fp = _load_videos(args.data)
    n = args.n[0] if args.n else 1
    pred_dir = Path(args.pred)
    pairs = []
    for item in items:
        gt = downsample(item, n)
        path = pred_dir / f"{item.name}.txt"
        if not path.exists():
            raise ValidationError(f"missing track file {path}")
        width, height = gt.image_size
        pairs.append((TrackFile.read(path, width, height), gt))
    report = evaluate(pairs)
    out = Path(args.out)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    manifest.dataset_fingerprint = fp
    manifest.config["n"] = n
    manifest.outputs = [str(out / "metrics.json"), str(out / "metrics.txt")]


def cmd_sweep(args, run_cfg: RunConfig, manifest: RunManifest) -> None:
    if not args.checkpoint:
        raise ValidationError("sweep needs at least one --checkpoint")
    if args.data is None:
        raise ValidationError("sweep needs --data")
    labels = [label for label, _ in args.checkpoint]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"checkpoint labels must be unique, got {labels}")
    models = {label: _load_model(path, run_cfg, args.config is not None) for label, path in args.checkpoint}
    items, fp = _load_videos(args.data)
    n_values = args.n or [1, 2, 3, 6, 10]
    table = sweep(models, items, n_values, args.n_max)
    out = Path(args.out)
    (out / "sweep.txt").write_text(table.to_text())
    (out / "sweep.json").write_text(json.dumps(table.to_records(), indent=1))
    print(table.to_text(), end="")
    plots = _plot(out / "sweep", lambda ax: _draw_sweep(ax, table, args.metric))
    manifest.checkpoint = ",".join(path for _, path in args.checkpoint)
    manifest.dataset_fingerprint = fp
    manifest.config["n"] = n_values
    manifest.config["n_max"] = args.n_max
    manifest.outputs = [str(out / "sweep.txt"), str(out / "sweep.json")] + plots


def _draw_sweep(ax, table: SweepTable, metric: str) -> None:
    curves: dict[tuple, list] = {}
    for r in table.rows:
        curves.setdefault((r.label, r.n_max), []).append((r.n, getattr(r.report, metric)))
    for (label, n_max), pts in curves.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{label} (n_max={n_max})")
    ax.set_xlabel("downsampling interval n")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "sweep": cmd_sweep}


def _checkpoint_arg(text: str) -> tuple[str, str]:
    """``path`` or ``label=path``; the label defaults to the file's parent directory name."""
    if "=" in text:
        label, path = text.split("=", 1)
    else:
        path = text
        label = Path(text).parent.name or Path(text).stem
    return label, path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histrack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "track", "eval", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [model] [train] [scene] [data] sections")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--data", help="dataset archive or MOTChallenge directory")
        p.add_argument("--n", type=_int_list, help="downsampling interval(s), comma-separated")
        p.add_argument("--n-max", dest="n_max", type=_int_list, help="feature bank size(s)")
        p.add_argument("--checkpoint", type=_checkpoint_arg, action="append",
                       help="checkpoint path, optionally label=path; repeat to compare")
        if name == "eval":
            p.add_argument("--pred", help="directory of track files from 'track'")
        if name == "sweep":
            p.add_argument("--metric", default="idf1", choices=("hota", "idf1", "mota"))
    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "replay":
        try:
            recorded = RunManifest.read(args.manifest)
        except (OSError, ValueError, TypeError) as exc:
            print(f"error: cannot read manifest: {exc}", file=sys.stderr)
            return EXIT_INVALID
        return main(recorded.argv)
    try:
        run_cfg = load_run_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, argv, run_cfg.to_dict(),
                               {"seed": args.seed}, started=_now())
        COMMANDS[args.command](args, run_cfg, manifest)
    except (ValueError, FileNotFoundError) as exc:
        # ValidationError, MOTFormatError and config checks are all ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    manifest.finished = _now()
    manifest.write(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
