"""Command-line front door: ``asatse {gen,train,eval,extract,bench}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .adaptation import AsaConfig
from .data import gen_dataset, load_split
from .dsp import read_wav, write_wav
from .errors import AsaTseError, InvalidArgumentError, InvalidStateError
from .harness import TrainConfig, bench_attention, evaluate, train
from .network import NetConfig, load_checkpoint

log = logging.getLogger("asatse")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    root: Optional[str] = None
    num_speakers: int = 8
    utts_per_speaker: int = 24
    num_mixtures: int = 60
    channels: int = 1
    rt60_range: tuple = (0.2, 0.6)
    sir_range: tuple = (-5.0, 5.0)


@dataclass
class RunConfig:
    """Everything one invocation needs; built from a file, then flag overrides."""

    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    net: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def net_config(self) -> NetConfig:
        return _build(NetConfig, self.net, "net")

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, {**self.train, "seed": self.seed}, "train")


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _build(cls, values: dict, section: str):
    values = dict(values)
    if cls is NetConfig and "asa" in values:
        asa = values["asa"]
        if not isinstance(asa, dict):
            raise ConfigError("net.asa must be a mapping")
        _check_keys("net.asa", asa, _field_names(AsaConfig))
        values["asa"] = _build(AsaConfig, asa, "net.asa")
    _check_keys(section, values, _field_names(cls))
    try:
        return cls(**values)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    _check_keys("config", raw, {"seed", "data", "net", "train"})
    cfg = RunConfig()
    for key in ("data", "net", "train"):
        if key in raw and not isinstance(raw[key], dict):
            raise ConfigError(f"{key} must be a mapping")
    if "seed" in raw:
        cfg.seed = raw["seed"]
    data = raw.get("data", {})
    _check_keys("data", data, _field_names(DataConfig))
    cfg.data = DataConfig(**data)
    net = raw.get("net", {})
    _check_keys("net", net, _field_names(NetConfig))
    cfg.net = dict(net)
    tr = raw.get("train", {})
    _check_keys("train", tr, _field_names(TrainConfig) - {"seed"})
    cfg.train = dict(tr)
    return cfg


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply ``section.key=value`` (value parsed as YAML) to ``cfg``."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    dotted, text = assignment.split("=", 1)
    value = yaml.safe_load(text)
    parts = dotted.strip().split(".")
    if parts == ["seed"]:
        cfg.seed = value
        return
    if parts[0] == "data" and len(parts) == 2:
        _check_keys("data", {parts[1]: 0}, _field_names(DataConfig))
        setattr(cfg.data, parts[1], value)
    elif parts[0] == "net" and len(parts) == 2:
        _check_keys("net", {parts[1]: 0}, _field_names(NetConfig))
        cfg.net[parts[1]] = value
    elif parts[:2] == ["net", "asa"] and len(parts) == 3:
        _check_keys("net.asa", {parts[2]: 0}, _field_names(AsaConfig))
        cfg.net.setdefault("asa", {})[parts[2]] = value
    elif parts[0] == "train" and len(parts) == 2:
        _check_keys("train", {parts[1]: 0}, _field_names(TrainConfig) - {"seed"})
        cfg.train[parts[1]] = value
    else:
        raise ConfigError(f"unknown override target {dotted!r}")


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge the config file with command-line flags and validate the result."""
    cfg = load_run_config(getattr(args, "config", None))
    flag_map = {
        "seed": "seed",
        "data": "data.root",
        "speakers": "data.num_speakers",
        "mixtures": "data.num_mixtures",
        "mic_channels": "data.channels",
        "adaptation": "net.adaptation",
        "channels": "net.channels",
        "pool_size": "net.asa.pool_size",
        "num_speakers": "net.num_speakers",
        "alpha": "train.alpha",
        "epochs": "train.max_epochs",
        "batch_size": "train.batch_size",
        "lr": "train.lr",
    }
    for attr, target in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            apply_override(cfg, f"{target}={value}")
    for assignment in getattr(args, "set", None) or []:
        apply_override(cfg, assignment)
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg.seed!r}")
    cfg.net_config()
    cfg.train_config()
    return cfg


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _require_data_root(cfg: RunConfig) -> Path:
    if not cfg.data.root:
        raise ConfigError("no dataset given (use --data or data.root in the config)")
    root = Path(cfg.data.root)
    if not (root / "train.tsv").exists() and not (root / "test.tsv").exists():
        raise ConfigError(f"{root} does not look like a generated corpus (no manifests)")
    return root


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = resolve(args)
    out = _prepare_out(args.out)
    d = cfg.data
    try:
        records = gen_dataset(out, num_speakers=d.num_speakers, utts_per_speaker=d.utts_per_speaker,
                              num_mixtures=d.num_mixtures, seed=cfg.seed, channels=d.channels,
                              rt60_range=tuple(d.rt60_range), sir_range=tuple(d.sir_range))
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc
    counts = ", ".join(f"{k} {len(v)}" for k, v in records.items())
    print(f"wrote {sum(len(v) for v in records.values())} mixtures to {out} ({counts})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args)
    root = _require_data_root(cfg)
    out = _prepare_out(args.out)
    net_cfg, train_cfg = cfg.net_config(), cfg.train_config()
    train_set, val_set = load_split(root, "train"), load_split(root, "val")
    if train_set and len(train_set[0].mixture) != net_cfg.n_inputs:
        raise ConfigError(f"corpus has {len(train_set[0].mixture)} channel(s); "
                          f"net.channels={net_cfg.channels!r} needs {net_cfg.n_inputs}")
    result = train(net_cfg, train_cfg, train_set, val_set, out_dir=out)
    print(f"best epoch {result.best_epoch}: validation SiSDR improvement {result.best_val:.3f} dB")
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve(args)
    root = _require_data_root(cfg)
    out = _prepare_out(args.out)
    model = load_checkpoint(args.checkpoint)
    examples = load_split(root, args.split)
    if examples and len(examples[0].mixture) != model.cfg.n_inputs:
        raise InvalidStateError(f"corpus has {len(examples[0].mixture)} channel(s), "
                                f"checkpoint expects {model.cfg.n_inputs}")
    report = evaluate(model, examples)
    print(report.table())
    csv_path = out / f"eval_{args.split}.csv"
    report.write_csv(csv_path)
    print(f"per-record results in {csv_path}")
    return EXIT_OK


def cmd_extract(args) -> int:
    out = _prepare_out(args.out)
    model = load_checkpoint(args.checkpoint)
    mix, sr = read_wav(args.mixture)
    adapt, sr_a = read_wav(args.adaptation)
    if sr != model.cfg.sample_rate or sr_a != model.cfg.sample_rate:
        raise ConfigError(f"audio must be sampled at {model.cfg.sample_rate} Hz")
    if len(mix) != model.cfg.n_inputs:
        raise ConfigError(f"mixture has {len(mix)} channel(s), model expects {model.cfg.n_inputs}")
    estimate, weights = model.extract(mix, adapt[0])
    wav_path = out / (Path(args.mixture).stem + "_extracted.wav")
    write_wav(wav_path, [estimate], sr)
    print(f"wrote {wav_path} ({estimate.duration:.3f} s)")
    if weights is not None:
        csv_path = out / (Path(args.mixture).stem + "_attention.csv")
        w = np.asarray(weights.data).reshape(-1)
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("group,weight\n")
            for i, v in enumerate(w):
                fh.write(f"{i},{v:.10g}\n")
        print(f"wrote {csv_path} ({len(w)} groups)")
    return EXIT_OK


def cmd_bench(args) -> int:
    if min(args.N, args.T, args.M, args.reps) < 1:
        raise ConfigError("--N, --T, --M and --reps must be positive")
    report = bench_attention(args.N, args.T, args.M, args.reps, seed=args.seed or 0)
    print(report.table())
    if args.out:
        out = _prepare_out(args.out)
        path = out / "bench.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("method,mult_adds,seconds,transient_floats\n")
            fh.write(f"vector-matrix,{report.asa_macs},{report.asa_seconds:.6e},{report.asa_floats}\n")
            fh.write(f"matrix-matrix,{report.matrix_macs},{report.matrix_seconds:.6e},{report.matrix_floats}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser, with_data: bool = True) -> None:
    p.add_argument("--config", help="YAML or JSON run config")
    p.add_argument("--seed", type=int, help="seed for every random choice")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value, e.g. net.asa.pool_size=1 (repeatable)")
    if with_data:
        p.add_argument("--data", help="corpus directory written by `gen`")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--adaptation", choices=["SA", "ASA", "none"])
    p.add_argument("--pool-size", type=int, dest="pool_size", help="mean pooling size M")
    p.add_argument("--channels", choices=["single", "parallel-2ch", "ipd-2ch"])
    p.add_argument("--num-speakers", type=int, dest="num_speakers", help="speaker classes for the auxiliary head")
    p.add_argument("--alpha", type=float, help="weight of the speaker cross-entropy term")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asatse", description="Target speech extraction with attention-based scaling adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic mixture corpus")
    _add_common(p, with_data=False)
    p.add_argument("--speakers", type=int, help="number of synthetic speakers")
    p.add_argument("--mixtures", type=int, help="total mixtures over all splits")
    p.add_argument("--mic-channels", type=int, dest="mic_channels", choices=[1, 2])
    p.add_argument("--out", required=True, help="corpus directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an extractor")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--out", required=True, help="directory for best.ckpt and train_log.tsv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True, help="directory for the CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", help="extract the target speaker from one mixture file")
    p.add_argument("--mixture", required=True, help="mixture WAV (1 or 2 channels)")
    p.add_argument("--adaptation", required=True, help="clean WAV of the target speaker")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("bench", help="compare vector-matrix and matrix-matrix attention cost")
    p.add_argument("--N", type=int, default=64)
    p.add_argument("--T", type=int, default=3199)
    p.add_argument("--M", type=int, default=20)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional directory for bench.csv")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"asatse {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AsaTseError, OSError, ValueError) as exc:
        print(f"asatse {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
