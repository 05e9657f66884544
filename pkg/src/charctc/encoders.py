"""Acoustic encoders: the 1-D ResBlock CNN and the bidirectional LSTM.

Both map padded ``[B, T, 80]`` feature batches to per-frame log-posteriors
over the CTC labels at half the input frame rate.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from . import tensorio
from .features import FEATURE_DIM, stack_pairs
from .kvconfig import format_kv, read_kv
from .layers import (
    BatchNormState,
    batchnorm,
    ceil_div,
    conv1d,
    lstm_scan,
    maxpool1d,
    reverse_padded,
    time_mask,
)
from .tensor import Tensor


@dataclass
class CnnConfig:
    filter_width: int = 5
    num_resblocks: int = 28
    channels: int = 256
    fc_width: int = 512
    pool_stride: int = 2
    vocab_size: int = 46
    input_dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.filter_width < 1 or self.num_resblocks < 0:
            raise ValueError("need filter_width >= 1 and num_resblocks >= 0")
        if min(self.channels, self.fc_width, self.pool_stride, self.vocab_size) < 1:
            raise ValueError("channels, fc_width, pool_stride and vocab_size must be positive")


@dataclass
class LstmConfig:
    layers: int = 5
    hidden: int = 320
    dropout: float = 0.1
    vocab_size: int = 46
    input_dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("need layers >= 1 and hidden >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


EncoderConfig = CnnConfig | LstmConfig


def param_shapes(config: EncoderConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every trainable tensor in canonical order."""
    s: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()
    V = config.vocab_size
    if isinstance(config, CnnConfig):
        K, C, F = config.filter_width, config.channels, config.fc_width
        s["conv0.w"], s["conv0.b"] = (K, config.input_dim, C), (C,)
        s["bn0.gamma"], s["bn0.beta"] = (C,), (C,)
        for i in range(config.num_resblocks):
            for j in (1, 2):
                s[f"rb{i}.conv{j}.w"], s[f"rb{i}.conv{j}.b"] = (K, C, C), (C,)
                s[f"rb{i}.bn{j}.gamma"], s[f"rb{i}.bn{j}.beta"] = (C,), (C,)
        s["fc1.w"], s["fc1.b"] = (C, F), (F,)
        s["fc2.w"], s["fc2.b"] = (F, F), (F,)
        s["proj.w"], s["proj.b"] = (F, V), (V,)
    else:
        H = config.hidden
        for layer in range(config.layers):
            D = 2 * config.input_dim if layer == 0 else 2 * H
            for d in ("fw", "bw"):
                s[f"l{layer}.{d}.w_ih"] = (D, 4 * H)
                s[f"l{layer}.{d}.w_hh"] = (H, 4 * H)
                s[f"l{layer}.{d}.b"] = (4 * H,)
        s["proj.w"], s["proj.b"] = (2 * H, V), (V,)
    return s


def count_params(config: EncoderConfig) -> int:
    """Closed-form count of trainable scalars (weights, biases, BN gamma/beta)."""
    V = config.vocab_size
    if isinstance(config, CnnConfig):
        K, C, F, N = config.filter_width, config.channels, config.fc_width, config.num_resblocks
        first = K * config.input_dim * C + C + 2 * C
        block = 2 * (K * C * C + C + 2 * C)
        head = (C * F + F) + (F * F + F) + (F * V + V)
        return first + N * block + head
    H, L = config.hidden, config.layers
    lstm = lambda D: 2 * (4 * H * (D + H) + 4 * H)  # noqa: E731
    return lstm(2 * config.input_dim) + (L - 1) * lstm(2 * H) + 2 * H * V + V


def bn_names(config: EncoderConfig) -> list[str]:
    if not isinstance(config, CnnConfig):
        return []
    names = ["bn0"]
    for i in range(config.num_resblocks):
        names += [f"rb{i}.bn1", f"rb{i}.bn2"]
    return names


def init_params(config: EncoderConfig, seed: int = 0) -> "OrderedDict[str, np.ndarray]":
    """Fan-in scaled normal weights for the CNN; Glorot-uniform weights and
    forget-gate bias 1 for the LSTM."""
    rng = np.random.default_rng(seed)
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            out[name] = np.ones(shape)
        elif name.endswith((".beta", ".b")):
            out[name] = np.zeros(shape)
            if isinstance(config, LstmConfig) and name.endswith(".b") and name != "proj.b":
                H = config.hidden
                out[name][H : 2 * H] = 1.0
        elif isinstance(config, CnnConfig):
            fan_in = int(np.prod(shape[:-1]))
            gain = 1.0 if name == "proj.w" else 2.0
            out[name] = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-limit, limit, size=shape)
    return out


def pad_batch(feats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    T = int(lengths.max())
    out = np.zeros((len(feats), T, feats[0].shape[1]), dtype=feats[0].dtype)
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out, lengths


@dataclass
class EncoderOutput:
    """One utterance's log-posteriors plus the input frames behind each row."""

    log_probs: np.ndarray  # [T', V]
    input_frames: int
    stride: int = 2

    def frame_span(self, j: int) -> tuple[int, int]:
        start = j * self.stride
        return start, min(start + self.stride, self.input_frames)


@dataclass
class BatchOutput:
    log_probs: Tensor  # [B, T', V]
    lengths: np.ndarray
    input_lengths: np.ndarray

    def utterance(self, b: int) -> EncoderOutput:
        n = int(self.lengths[b])
        return EncoderOutput(self.log_probs.data[b, :n], int(self.input_lengths[b]))

    def utterances(self) -> list[EncoderOutput]:
        return [self.utterance(b) for b in range(len(self.lengths))]


def resblock(h: Tensor, p: Mapping[str, Tensor], bn: Mapping[str, BatchNormState], r: str, mode: str, mask: np.ndarray) -> Tensor:
    """conv-BN-ReLU-conv-BN, add the block input, ReLU."""
    mc = mask[..., None]
    y = conv1d(h, p[f"{r}.conv1.w"], p[f"{r}.conv1.b"])
    y = tc.relu(batchnorm(y, p[f"{r}.bn1.gamma"], p[f"{r}.bn1.beta"], bn[f"{r}.bn1"], mode, mask)) * mc
    y = conv1d(y, p[f"{r}.conv2.w"], p[f"{r}.conv2.b"])
    y = batchnorm(y, p[f"{r}.bn2.gamma"], p[f"{r}.bn2.beta"], bn[f"{r}.bn2"], mode, mask)
    return tc.relu(y + h) * mc


def cnn_forward(
    config: CnnConfig,
    params: Mapping[str, Tensor],
    bn: Mapping[str, BatchNormState],
    x: np.ndarray,
    lengths: np.ndarray,
    mode: str = "infer",
) -> tuple[Tensor, np.ndarray]:
    """Conv+BN+ReLU, max-pool, ResBlocks, two FC+ReLU, projection, log-softmax.

    Padding frames are zeroed after every block so they read as the
    convolution's own zero padding.  Post-ReLU activations are >= 0, which
    makes zeroed padding neutral for the max-pool as well.
    """
    K, s = config.filter_width, config.pool_stride
    if int(np.min(lengths)) < K:
        raise ValueError(f"utterance with {int(np.min(lengths))} frames is shorter than filter width {K}")
    p = params
    m0 = time_mask(lengths, x.shape[1])
    h = conv1d(Tensor(x * m0[..., None]), p["conv0.w"], p["conv0.b"])
    h = tc.relu(batchnorm(h, p["bn0.gamma"], p["bn0.beta"], bn["bn0"], mode, m0)) * m0[..., None]
    h = maxpool1d(h, s, s)
    out_len = np.array([ceil_div(int(n), s) for n in lengths])
    m1 = time_mask(out_len, h.shape[1])
    for i in range(config.num_resblocks):
        h = resblock(h, p, bn, f"rb{i}", mode, m1)
    h = tc.relu(h @ p["fc1.w"] + p["fc1.b"])
    h = tc.relu(h @ p["fc2.w"] + p["fc2.b"])
    return tc.log_softmax(h @ p["proj.w"] + p["proj.b"], axis=-1), out_len


def bilstm_layer(h: Tensor, lengths: np.ndarray, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    p = params
    fw = lstm_scan(h @ p[f"{prefix}.fw.w_ih"] + p[f"{prefix}.fw.b"], p[f"{prefix}.fw.w_hh"])
    rev = reverse_padded(h, lengths)
    bw = lstm_scan(rev @ p[f"{prefix}.bw.w_ih"] + p[f"{prefix}.bw.b"], p[f"{prefix}.bw.w_hh"])
    return tc.concat([fw, reverse_padded(bw, lengths)], axis=-1)


def lstm_forward(
    config: LstmConfig,
    params: Mapping[str, Tensor],
    x: np.ndarray,
    lengths: np.ndarray,
    mode: str = "infer",
    seed: int = 0,
    step: int = 0,
    return_states: bool = False,
):
    """Pair-stacked input, stacked biLSTM layers with dropout between them,
    projection, log-softmax."""
    stacked = [stack_pairs(x[b, : int(n)]) for b, n in enumerate(lengths)]
    xs, out_len = pad_batch(stacked)
    h = Tensor(xs)
    train = mode == "train"
    for layer in range(config.layers):
        if layer > 0:
            h = tc.dropout(h, config.dropout, train, seed=seed, key=layer, step=step)
        h = bilstm_layer(h, out_len, params, f"l{layer}")
    logp = tc.log_softmax(h @ params["proj.w"] + params["proj.b"], axis=-1)
    if return_states:
        return logp, out_len, h
    return logp, out_len


class Encoder:
    """Parameters, batch-norm buffers and the forward pass of one encoder."""

    def __init__(self, config: EncoderConfig, params: Mapping[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.seed = seed
        arrays = init_params(config, seed) if params is None else params
        shapes = param_shapes(config)
        missing = set(shapes) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in shapes.items():
            a = np.array(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name}: shape {a.shape}, expected {shape}")
            self.params[name] = Tensor(a, requires_grad=True)
        self.bn: dict[str, BatchNormState] = {n: BatchNormState() for n in bn_names(config)}

    @property
    def kind(self) -> str:
        return "cnn" if isinstance(self.config, CnnConfig) else "lstm"

    @property
    def stride(self) -> int:
        return self.config.pool_stride if isinstance(self.config, CnnConfig) else 2

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def output_length(self, T: int) -> int:
        return ceil_div(T, self.stride)

    def forward(
        self,
        feats: Sequence[np.ndarray] | np.ndarray,
        lengths: Sequence[int] | None = None,
        mode: str = "infer",
        step: int = 0,
    ) -> BatchOutput:
        """``feats`` is a list of ``[T_i, 80]`` arrays or a padded batch with
        ``lengths``."""
        if lengths is None:
            if isinstance(feats, np.ndarray) and feats.ndim == 2:
                feats = [feats]
            x, lengths = pad_batch(list(feats))
        else:
            x, lengths = np.asarray(feats), np.asarray(lengths, dtype=np.int64)
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(f"expected {self.config.input_dim}-dim frames, got {x.shape[-1]}")
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        if isinstance(self.config, CnnConfig):
            logp, out_len = cnn_forward(self.config, self.params, self.bn, x, lengths, mode)
        else:
            logp, out_len = lstm_forward(self.config, self.params, x, lengths, mode, self.seed, step)
        return BatchOutput(logp, out_len, np.asarray(lengths))

    # -- persistence ------------------------------------------------------
    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, st in self.bn.items():
            if st.mean is not None:
                out[f"{name}.running_mean"] = st.mean
                out[f"{name}.running_var"] = st.var
        return out

    def load_buffers(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, st in self.bn.items():
            if f"{name}.running_mean" in arrays:
                st.mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
                st.var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)


def config_to_kv(config: EncoderConfig) -> dict[str, str]:
    kind = "cnn" if isinstance(config, CnnConfig) else "lstm"
    return {"encoder": kind, **{k: str(v) for k, v in asdict(config).items()}}


def config_from_kv(values: Mapping[str, str]) -> EncoderConfig:
    kind = values.get("encoder")
    cls = {"cnn": CnnConfig, "lstm": LstmConfig}.get(kind or "")
    if cls is None:
        raise ValueError(f"unknown encoder kind {kind!r}")
    kw = {}
    for f in fields(cls):
        if f.name in values:
            kw[f.name] = float(values[f.name]) if f.type in ("float", float) else int(values[f.name])
    return cls(**kw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | os.PathLike,
    encoder: Encoder,
    vocab_text: str | None = None,
    optimizer: Mapping[str, np.ndarray] | None = None,
    state: Mapping[str, object] | None = None,
    width: int = 8,
) -> None:
    """Write a checkpoint directory atomically.

    Layout: ``config.txt`` (key=value), ``manifest.txt`` (tensor names in
    canonical order), ``tensors/<name>.tnsr``, optional ``vocab.txt``,
    ``optimizer/<name>.tnsr`` and ``state.txt``.
    """
    with tensorio.atomic_directory(path) as tmp:
        cfg = config_to_kv(encoder.config)
        cfg["seed"] = str(encoder.seed)
        (tmp / "config.txt").write_text(format_kv(cfg), encoding="utf-8")
        tensors = OrderedDict((n, p.data) for n, p in encoder.params.items())
        tensors.update(encoder.buffers())
        (tmp / "tensors").mkdir()
        for name, arr in tensors.items():
            (tmp / "tensors" / f"{name}.tnsr").write_bytes(tensorio.dumps(arr, width))
        (tmp / "manifest.txt").write_text("".join(n + "\n" for n in tensors), encoding="utf-8")
        if vocab_text is not None:
            (tmp / "vocab.txt").write_text(vocab_text, encoding="utf-8")
        if optimizer:
            (tmp / "optimizer").mkdir()
            for name, arr in optimizer.items():
                (tmp / "optimizer" / f"{name}.tnsr").write_bytes(tensorio.dumps(arr, 8))
            (tmp / "optimizer" / "manifest.txt").write_text(
                "".join(n + "\n" for n in optimizer), encoding="utf-8"
            )
        if state:
            (tmp / "state.txt").write_text(format_kv(dict(state)), encoding="utf-8")


@dataclass
class Checkpoint:
    encoder: Encoder
    vocab_text: str | None
    optimizer: "OrderedDict[str, np.ndarray]"
    state: dict[str, str]


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not (path / "config.txt").exists():
        raise FileNotFoundError(f"{path} is not a checkpoint directory (no config.txt)")
    cfg = read_kv(path / "config.txt")
    config = config_from_kv(cfg)
    names = (path / "manifest.txt").read_text(encoding="utf-8").split()
    arrays = {n: tensorio.load(path / "tensors" / f"{n}.tnsr") for n in names}
    enc = Encoder(config, arrays, seed=int(cfg.get("seed", 0)))
    enc.load_buffers(arrays)
    vocab = path / "vocab.txt"
    opt: "OrderedDict[str, np.ndarray]" = OrderedDict()
    if (path / "optimizer" / "manifest.txt").exists():
        for n in (path / "optimizer" / "manifest.txt").read_text(encoding="utf-8").split():
            opt[n] = tensorio.load(path / "optimizer" / f"{n}.tnsr")
    state = read_kv(path / "state.txt") if (path / "state.txt").exists() else {}
    return Checkpoint(enc, vocab.read_text(encoding="utf-8") if vocab.exists() else None, opt, state)


# ---------------------------------------------------------------------------
# first-layer filter images
# ---------------------------------------------------------------------------


def first_layer_filters(encoder: Encoder) -> list[tuple[str, np.ndarray]]:
    """Per output channel, the ``[input_dim, K]`` filter (rows = input
    channels, columns = time), then the elementwise max and min over all
    channels."""
    if encoder.kind != "cnn":
        raise ValueError("filter export needs a CNN encoder")
    w = encoder.params["conv0.w"].data  # [K, Cin, Cout]
    imgs = [(f"filter_{c:03d}", w[:, :, c].T.copy()) for c in range(w.shape[2])]
    stack = np.transpose(w, (2, 1, 0))
    imgs.append(("filter_max", stack.max(axis=0)))
    imgs.append(("filter_min", stack.min(axis=0)))
    return imgs


def to_gray(images: Sequence[tuple[str, np.ndarray]]) -> list[tuple[str, np.ndarray]]:
    """Quantise to uint8 with one shared linear map so images stay comparable
    (and the max/min aggregates bound every filter pixelwise)."""
    lo = min(float(im.min()) for _, im in images)
    hi = max(float(im.max()) for _, im in images)
    span = hi - lo
    out = []
    for name, im in images:
        if span == 0:
            q = np.full(im.shape, 128, dtype=np.uint8)
        else:
            q = np.round((im - lo) / span * 255.0).astype(np.uint8)
        out.append((name, q))
    return out


def pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_first_layer_filters(encoder: Encoder, out_dir: str | os.PathLike) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in to_gray(first_layer_filters(encoder)):
        p = out_dir / f"{name}.pgm"
        tensorio.atomic_write_bytes(p, pgm_bytes(img))
        paths.append(p)
    return paths
