"""Command-line entry point: ``flexroi {synth,train,eval,analyze} ...``.

Settings resolve as command-line flags > ``--config`` JSON file > built-in
defaults. Outputs are deterministic for a fixed seed; wall-clock timestamps
go only into ``*.meta.json`` sidecar files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import DEFAULT_KERNELS, blur_response, info_gain_curve, top_fraction_blur_response, write_report
from .errors import ConfigurationError, FlexError, UsageError
from .model import config_digest, parse_ablation
from .synthgen import SynthConfig, build_dataset, load_dataset
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train, write_metrics

log = logging.getLogger("flexroi")

CHECKPOINT_NAME = "checkpoint.flxc"
METRICS_NAME = "metrics.csv"


@dataclass
class RunConfig:
    """Everything a subcommand needs; mirrors TrainConfig plus paths and analysis knobs."""

    seed: int = 0
    threads: int = 1
    scenes: int = 200
    blur: int = 1
    data: Optional[str] = None
    eval_data: Optional[str] = None
    out: str = "out"
    checkpoint: Optional[str] = None
    kernels: List[int] = field(default_factory=lambda: list(DEFAULT_KERNELS))
    fraction: float = 0.1
    bins: int = 16
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @classmethod
    def from_dict(cls, document: dict) -> "RunConfig":
        if not isinstance(document, dict):
            raise ConfigurationError("config file must hold a JSON object")
        document = dict(document)
        known = {f.name for f in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        synth = document.pop("synth", {})
        if isinstance(synth, dict):
            bad = set(synth) - {f.name for f in fields(SynthConfig)}
            if bad:
                raise ConfigurationError(f"unknown synth config keys: {sorted(bad)}")
            synth = SynthConfig(**synth)
        train_doc = document.pop("train", {})
        train_cfg = TrainConfig.from_dict(train_doc) if isinstance(train_doc, dict) else train_doc
        return cls(synth=synth, train=train_cfg, **document)


# flag name -> where it lands; None values mean "not given"
_TOP_FLAGS = ("seed", "threads", "scenes", "blur", "data", "eval_data", "out", "checkpoint", "fraction", "bins")
_TRAIN_FLAGS = ("epochs", "batch_size", "lr")
_MODEL_FLAGS = ("gamma", "sigma", "delta", "parameterization", "cascade_depth", "num_classes", "levels",
                "channels", "hidden")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Apply precedence: flags > config file > defaults."""
    if args.config:
        try:
            document = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {args.config} is not valid JSON: {exc}") from exc
        cfg = RunConfig.from_dict(document)
    else:
        cfg = RunConfig()
    top = {k: getattr(args, k) for k in _TOP_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "kernels", None) is not None:
        top["kernels"] = args.kernels
    cfg = replace(cfg, **top)
    model_over = {k: getattr(args, k) for k in _MODEL_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "ablation", None) is not None:
        model_over["ablation"] = parse_ablation(args.ablation)
    train_over = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k, None) is not None}
    model = replace(cfg.train.model, **model_over)
    # the single --seed drives training as well as synthesis
    train_cfg = replace(cfg.train, model=model, seed=cfg.seed, **train_over)
    synth = cfg.synth
    if getattr(args, "image_size", None) is not None:
        size = args.image_size
        # object sizes scale with the image
        ratio = size / synth.image_size
        synth = replace(synth, image_size=size, min_scale=max(2.0, synth.min_scale * ratio),
                        max_scale=max(2.0, synth.max_scale * ratio))
    cfg = replace(cfg, train=train_cfg, synth=synth)
    if cfg.threads < 1:
        raise UsageError("--threads must be >= 1")
    train_cfg.validate()
    return cfg


def _write_meta(path: Path, command: str, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    meta = {"command": command, "version": __version__, "config_digest": cfg.digest(),
            "timestamp": datetime.now(timezone.utc).isoformat()}
    meta.update(extra or {})
    path.write_text(json.dumps(meta, indent=1, sort_keys=True))


def _require_data(path: Optional[str], flag: str = "--data"):
    if not path:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    return load_dataset(path)


def _require_checkpoint(cfg: RunConfig):
    path = cfg.checkpoint or str(Path(cfg.out) / CHECKPOINT_NAME)
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands
def cmd_synth(cfg: RunConfig) -> int:
    doc = build_dataset(cfg.scenes, cfg.blur, cfg.seed, cfg.out, cfg.synth)
    out = Path(cfg.out)
    _write_meta(out.with_name(out.name + ".meta.json"), "synth", cfg, {"digest": doc["digest"]})
    print(f"{out / 'index.json'} {doc['digest']}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    data = _require_data(cfg.data)
    eval_set = _require_data(cfg.eval_data, "--eval-data").scenes if cfg.eval_data else None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg.train, data.scenes, eval_set)
    write_metrics(out / METRICS_NAME, result.rows)
    ckpt = cfg.checkpoint or str(out / CHECKPOINT_NAME)
    digest = save_checkpoint(ckpt, result.model, cfg.train)
    _write_meta(out / "train.meta.json", "train", cfg, {"checkpoint_digest": digest, "dataset": data.digest})
    print(f"{ckpt} {digest}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    model, train_cfg, digest = _require_checkpoint(cfg)
    data = _require_data(cfg.data)
    report = evaluate(model, data.scenes, seed=cfg.train.eval_seed)
    lines = ["metric,value"] + [f"{k},{float(v):.10g}" for k, v in report.as_row().items()]
    lines += [f"AP_class_{c},{v:.10g}" for c, v in sorted(report.per_class.items())]
    lines += [f"AP_iou_{t:.2f},{v:.10g}" for t, v in sorted(report.per_threshold.items())]
    summary = dict(report.as_row(), checkpoint_digest=digest, dataset=data.digest, blur=data.blur)
    path = write_report(cfg.out, "eval", digest, f"blur{data.blur}", "\n".join(lines) + "\n", summary)
    _write_meta(path.with_suffix(".meta.json"), "eval", cfg)
    print(path)
    return 0


def cmd_analyze(cfg: RunConfig, kind: str) -> int:
    model, train_cfg, digest = _require_checkpoint(cfg)
    data = _require_data(cfg.data)
    meta = {"checkpoint_digest": digest, "dataset": data.digest, "config_digest": cfg.digest(),
            "untrained": train_cfg.epochs == 0}
    if kind == "blur":
        report = blur_response(model, data.scenes, cfg.kernels, meta)
        csv_text, summary = report.to_csv(), dict(meta, first=report.first, last=report.last)
    elif kind == "top":
        report = top_fraction_blur_response(model, data.scenes, cfg.fraction, cfg.kernels, meta)
        csv_text, summary = report.to_csv(), dict(report.metadata, first=report.first, last=report.last)
        if "warning" in report.metadata:
            log.warning(report.metadata["warning"])
    else:
        curve = info_gain_curve(model, data.scenes, cfg.bins, seed=cfg.train.eval_seed, metadata=meta)
        low, high = curve.quartile_means()
        csv_text, summary = curve.to_csv(), dict(meta, bottom_quartile=low, top_quartile=high)
    path = write_report(cfg.out, kind, digest, f"blur{data.blur}", csv_text, summary)
    _write_meta(path.with_suffix(".meta.json"), f"analyze {kind}", cfg)
    print(path)
    return 0


# ---------------------------------------------------------------- parsing
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags given here override its values")
    p.add_argument("--seed", type=int, help="single source of all randomness (default 0)")
    p.add_argument("--threads", type=int, help="BLAS threads (default 1)")
    p.add_argument("--out", help="output directory (default ./out)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ablation", help="baseline, multi-level, +cls or +cls+img (default +cls+img)")
    p.add_argument("--parameterization", choices=("interpolation", "direct", "gaussian"))
    p.add_argument("--cascade-depth", type=int, help="number of refine layers (default 1)")
    p.add_argument("--gamma", type=float, help="pre-classification loss weight (default 0.5)")
    p.add_argument("--sigma", type=float, help="Gaussian level-weight width (default 0.7071)")
    p.add_argument("--delta", type=float, help="canonical ROI size for the target level (default 56)")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--levels", type=int, help="pyramid levels N (default 5)")
    p.add_argument("--channels", type=int, help="pyramid channels C0 (default 64)")
    p.add_argument("--hidden", type=int, help="head hidden width (default 256)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flexroi", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"flexroi {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--scenes", type=int, help="number of scenes (default 200)")
    p.add_argument("--blur", type=int, help="odd mean-kernel size applied to every image (default 1)")
    p.add_argument("--image-size", type=int, help="square image side (default 256)")

    p = sub.add_parser("train", help="train a model and write checkpoint plus metrics CSV")
    _common(p)
    _model_flags(p)
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--eval-data", help="optional dataset evaluated after each epoch")
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.flxc)")

    p = sub.add_parser("eval", help="COCO-style AP of a checkpoint on a dataset")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.flxc)")

    p = sub.add_parser("analyze", help="image-feedback and information-gain analyses")
    asub = p.add_subparsers(dest="kind", parser_class=_Parser, required=True)
    for kind, text in (("blur", "mean image feedback per blur kernel"),
                       ("top", "blur response of the top fraction by first-level feedback"),
                       ("ig", "information gain binned by pre-classification entropy")):
        q = asub.add_parser(kind, help=text)
        _common(q)
        q.add_argument("--data", help="dataset directory")
        q.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.flxc)")
        if kind in ("blur", "top"):
            q.add_argument("--kernels", type=_int_list, help="comma-separated kernel sizes (default 1,5,9,21)")
        if kind == "top":
            q.add_argument("--fraction", type=float, help="fraction of scenes kept (default 0.1)")
        if kind == "ig":
            q.add_argument("--bins", type=int, help="entropy bins (default 16)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            if args.command == "synth":
                return cmd_synth(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "eval":
                return cmd_eval(cfg)
            return cmd_analyze(cfg, args.kind)
    except FlexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # malformed values inside a config file
        print(f"error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
