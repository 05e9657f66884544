"""Run configuration shared by the command-line tools.

Every option has one name used everywhere: ``--batch-size`` on the command
line, ``batch_size`` in a key=value config file and ``CHARCTC_BATCH_SIZE`` in
the environment.  Precedence is flag > environment > file > default.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .decoder import DecodeParams
from .encoders import CnnConfig, LstmConfig
from .kvconfig import read_kv
from .trainer import TrainConfig

ENV_PREFIX = "CHARCTC_"


def _bool(v: str | bool) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable[[Any], Any]
    default: Any
    help: str
    commands: tuple[str, ...]
    is_path: bool = False
    must_exist: bool = False
    choices: tuple[str, ...] | None = None
    shown_default: str | None = None  # for defaults that depend on other options


ALL = ("featurize", "train", "trainlm", "decode", "score", "bench", "export-filters")
TRAINISH = ("train", "bench")

OPTIONS: list[Option] = [
    Option("threads", int, 2, "worker threads for numeric kernels and decoding", ALL),
    Option("log_level", str, "info", "logging verbosity", ALL, choices=("debug", "info", "warning", "error")),
    # featurize
    Option("manifest", str, None, "utterance manifest (TSV: id, speaker, path, transcript)",
           ("featurize", "decode"), is_path=True, must_exist=True),
    Option("output_dir", str, None, "output directory", ("featurize", "export-filters"), is_path=True),
    Option("sample_rate", int, 8000, "expected audio sample rate in Hz", ("featurize", "train", "decode")),
    Option("cmvn", _bool, True, "per-speaker mean/variance normalisation", ("featurize", "train", "decode")),
    # train
    Option("train_manifest", str, None, "training manifest", ("train",), is_path=True, must_exist=True),
    Option("valid_manifest", str, None, "validation manifest (optional)", ("train",), is_path=True, must_exist=True),
    Option("vocab", str, None, "vocabulary file, one token per line (built-in 45 tokens if unset)",
           ("train", "trainlm"), is_path=True, must_exist=True),
    Option("checkpoint_dir", str, None, "training output: checkpoints and log", ("train",), is_path=True),
    Option("encoder", str, "cnn", "encoder architecture", TRAINISH, choices=("cnn", "lstm")),
    Option("filter_width", int, 5, "CNN filter width K", TRAINISH),
    Option("resblocks", int, 28, "CNN residual blocks N", TRAINISH),
    Option("channels", int, 256, "CNN channels", TRAINISH),
    Option("fc_width", int, 512, "CNN fully connected width", TRAINISH),
    Option("lstm_layers", int, 5, "biLSTM layers", TRAINISH),
    Option("lstm_hidden", int, 320, "biLSTM units per direction", TRAINISH),
    Option("dropout", float, 0.1, "biLSTM dropout between layers", TRAINISH),
    Option("batch_size", int, None, "utterances per batch", ("train", "decode"),
           shown_default="train: 64 (lstm) / 32 (cnn); decode: 1"),
    Option("learning_rate", float, None, "Adam learning rate", ("train",),
           shown_default="0.001 (lstm) / 0.0002 (cnn)"),
    Option("adam_beta1", float, 0.9, "Adam beta1", ("train",)),
    Option("adam_beta2", float, 0.999, "Adam beta2", ("train",)),
    Option("adam_epsilon", float, 1e-8, "Adam epsilon", ("train",)),
    Option("decay_factor", float, 0.95, "learning-rate multiplier on stagnation", ("train",)),
    Option("patience", int, 2, "epochs without improvement before each decay", ("train",)),
    Option("stop_patience", int, None, "epochs without improvement before stopping", ("train",),
           shown_default="same as patience"),
    Option("max_epochs", int, 40, "epoch limit", ("train",)),
    Option("seed", int, 0, "random seed for initialisation, shuffling and dropout", ("train", "bench")),
    # trainlm
    Option("corpus", str, None, "transcripts: a manifest (.tsv) or one sentence per line",
           ("trainlm",), is_path=True, must_exist=True),
    Option("order", int, 9, "n-gram order", ("trainlm",)),
    Option("output", str, None, "output file", ("trainlm", "decode", "score", "bench"), is_path=True),
    # decode
    Option("checkpoint", str, None, "checkpoint directory", ("decode", "export-filters"),
           is_path=True, must_exist=True),
    Option("lm", str, None, "ARPA language model; greedy decoding when unset",
           ("decode",), is_path=True, must_exist=True),
    Option("alpha", float, 0.6, "LM weight", ("decode",)),
    Option("beta", float, 1.5, "length bonus exponent", ("decode",)),
    Option("beam_width", int, 200, "beam width", ("decode",)),
    # score
    Option("ref", str, None, "reference manifest or TSV (id, transcript)", ("score",), is_path=True, must_exist=True),
    Option("hyp", str, None, "hypothesis TSV (id, transcript)", ("score",), is_path=True, must_exist=True),
    Option("strip_list", str, None, "tokens/characters removed before scoring (built-in list if unset)",
           ("score",), is_path=True, must_exist=True),
    Option("subsets", str, "", "comma-separated utterance-id prefixes to report separately", ("score",)),
    # bench
    Option("frames", int, 500, "input frames per benchmark utterance", ("bench",)),
    Option("repeats", int, 3, "timed repetitions per encoder", ("bench",)),
    Option("bench_cnn", str, "10,8", "CNN as K,N for the benchmark", ("bench",)),
    Option("bench_lstm", str, "5,320", "biLSTM as layers,units for the benchmark", ("bench",)),
]
BY_NAME = {o.name: o for o in OPTIONS}
REQUIRED = {
    "featurize": ("manifest", "output_dir"),
    "train": ("train_manifest", "checkpoint_dir"),
    "trainlm": ("corpus", "output"),
    "decode": ("checkpoint", "manifest", "output"),
    "score": ("ref", "hyp"),
    "bench": (),
    "export-filters": ("checkpoint", "output_dir"),
}


def options_for(command: str) -> list[Option]:
    return [o for o in OPTIONS if command in o.commands]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any]
    sources: dict[str, str]

    def __getattr__(self, name: str) -> Any:
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def path(self, name: str) -> Path | None:
        v = self.values.get(name)
        return Path(v) if v else None

    def encoder_config(self, vocab_size: int):
        if self.encoder == "cnn":
            return CnnConfig(self.filter_width, self.resblocks, self.channels, self.fc_width, vocab_size=vocab_size)
        return LstmConfig(self.lstm_layers, self.lstm_hidden, self.dropout, vocab_size=vocab_size)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_epsilon=self.adam_epsilon,
            decay_factor=self.decay_factor,
            patience_epochs=self.patience,
            stop_patience=self.stop_patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
        )

    def decode_params(self) -> DecodeParams:
        return DecodeParams(self.alpha, self.beta, self.beam_width)


def _convert(opt: Option, raw: Any, source: str) -> Any:
    try:
        value = opt.type(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: bad value {raw!r} for {opt.name}: {exc}") from None
    if opt.choices and value not in opt.choices:
        raise ConfigError(f"{source}: {opt.name} must be one of {', '.join(opt.choices)}, got {value!r}")
    return value


def resolve(
    command: str,
    flags: Mapping[str, Any],
    env: Mapping[str, str],
    config_path: str | Path | None = None,
) -> RunConfig:
    """Merge the four layers and validate the result for ``command``.

    Config files may carry keys for other commands (one file can serve a
    whole pipeline) but never unknown ones.
    """
    file_values: dict[str, str] = {}
    if config_path is not None:
        file_values = read_kv(config_path)
        unknown = sorted(set(file_values) - set(BY_NAME))
        if unknown:
            raise ConfigError(f"{config_path}: unknown keys {', '.join(unknown)}")
    values: dict[str, Any] = {}
    sources: dict[str, str] = {}
    for opt in options_for(command):
        env_key = ENV_PREFIX + opt.name.upper()
        if flags.get(opt.name) is not None:
            values[opt.name], sources[opt.name] = _convert(opt, flags[opt.name], "command line"), "flag"
        elif env_key in env:
            values[opt.name], sources[opt.name] = _convert(opt, env[env_key], env_key), "env"
        elif opt.name in file_values:
            values[opt.name] = _convert(opt, file_values[opt.name], str(config_path))
            sources[opt.name] = "file"
        else:
            values[opt.name], sources[opt.name] = opt.default, "default"
    for name in REQUIRED[command]:
        if values.get(name) in (None, ""):
            raise ConfigError(f"{command}: --{name.replace('_', '-')} is required")
    for opt in options_for(command):
        v = values[opt.name]
        if opt.must_exist and v and not Path(v).exists():
            raise ConfigError(f"{opt.name}: path {v} does not exist")
    return RunConfig(command, values, sources)
