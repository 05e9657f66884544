"""``charctc`` command-line interface."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensorio
from .charlm import check_vocabulary, read_arpa, train_lm, write_arpa
from .config import OPTIONS, ConfigError, RunConfig, options_for, resolve
from .ctc import Vocabulary
from .decoder import StripList, beam_decode, greedy_decode, score_pairs
from .encoders import CnnConfig, Encoder, LstmConfig, export_first_layer_filters, load_checkpoint
from .features import FeatureError, ManifestRow, featurize_rows, format_manifest, read_manifest
from .trainer import Utterance, fit

log = logging.getLogger("charctc")

COMMANDS = {
    "featurize": "compute normalised 80-dim features for a manifest",
    "train": "train a CTC encoder (resumes from the latest checkpoint)",
    "trainlm": "train a character n-gram LM and write it as ARPA",
    "decode": "decode a manifest with a checkpoint (greedy, or beam search with --lm)",
    "score": "WER/CER of hypotheses against references",
    "bench": "time CNN and biLSTM forward passes at batch size 1",
    "export-filters": "write first-layer CNN filters as PGM images",
}


def _default_text(opt) -> str:
    if opt.shown_default is not None:
        return opt.shown_default
    if opt.default is None:
        return "unset"
    return str(opt.default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="charctc",
        description="Lexicon-free character CTC speech recognition with CNN or biLSTM encoders.",
        epilog="Every option can also come from a key=value --config file or a "
        "CHARCTC_<NAME> environment variable; flag > env > file > default.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="key=value config file (default: unset)")
        for opt in options_for(name):
            kw = {"default": None, "help": f"{opt.help} (default: {_default_text(opt)})"}
            if opt.choices:
                kw["choices"] = opt.choices
            p.add_argument("--" + opt.name.replace("_", "-"), dest=opt.name, **kw)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _vocab(rc: RunConfig) -> Vocabulary:
    return Vocabulary.load(rc.vocab) if rc.values.get("vocab") else Vocabulary()


def _load_utterances(manifest: Path, vocab: Vocabulary, rc: RunConfig) -> list[Utterance]:
    rows = read_manifest(manifest)
    feats = featurize_rows(rows, manifest.parent, rc.sample_rate, rc.cmvn)
    out = []
    for row, fm in zip(rows, feats):
        try:
            labels = vocab.encode(row.transcript)
        except KeyError as exc:
            raise ConfigError(f"utterance {row.utt_id}: transcript {exc.args[0]}") from None
        out.append(Utterance(row.utt_id, fm.frames, labels))
    return out


def _read_pairs(path: Path) -> dict[str, str]:
    """utterance-id -> transcript from a manifest or a 2-column TSV."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (1, 2, 4):
            raise ConfigError(f"{path}:{lineno}: expected 2 or 4 tab-separated columns")
        if parts[0] in out:
            raise ConfigError(f"{path}:{lineno}: duplicate utterance id {parts[0]}")
        out[parts[0]] = parts[-1] if len(parts) > 1 else ""
    return out


def _timing(wall: float, cpu: float, n: int, threads: int) -> str:
    per_w = wall / n if n else 0.0
    per_c = cpu / n if n else 0.0
    return (
        f"utterances={n}\tthreads={threads}\twall_s={wall:.3f}\tcpu_s={cpu:.3f}\t"
        f"wall_per_utt_s={per_w:.4f}\tcpu_per_utt_s={per_c:.4f}"
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_featurize(rc: RunConfig) -> int:
    manifest = rc.path("manifest")
    out = rc.path("output_dir")
    rows = read_manifest(manifest)
    for r in rows:
        if not r.utt_id or os.sep in r.utt_id or r.utt_id in (".", ".."):
            raise FeatureError(r.utt_id, "utterance id is not usable as a file name")
    feats = featurize_rows(rows, manifest.parent, rc.sample_rate, rc.cmvn)
    out.mkdir(parents=True, exist_ok=True)
    with tensorio.atomic_directory(out / "features") as tmp:
        for fm in feats:
            (tmp / f"{fm.utt_id}.tnsr").write_bytes(tensorio.dumps(fm.frames))
    new_rows = [ManifestRow(r.utt_id, r.speaker_id, f"features/{r.utt_id}.tnsr", r.transcript) for r in rows]
    tensorio.atomic_write_text(out / "manifest.tsv", format_manifest(new_rows))
    print(f"wrote {len(rows)} feature files and {out / 'manifest.tsv'}")
    return 0


def cmd_train(rc: RunConfig) -> int:
    vocab = _vocab(rc)
    out = rc.path("checkpoint_dir")
    last_vocab = out / "last" / "vocab.txt"
    if last_vocab.exists() and last_vocab.read_text(encoding="utf-8") != vocab.dumps():
        raise ConfigError(f"{last_vocab}: vocabulary differs from the one requested")
    train = _load_utterances(rc.path("train_manifest"), vocab, rc)
    valid = _load_utterances(rc.path("valid_manifest"), vocab, rc) if rc.values.get("valid_manifest") else None
    enc = Encoder(rc.encoder_config(vocab.num_labels), seed=rc.seed)
    log.info("%s encoder with %d parameters", enc.kind, enc.num_params())
    res = fit(enc, train, valid, rc.train_config(), out, vocab.dumps())
    if res.records:
        r = res.records[-1]
        print(f"epochs={len(res.records)}\ttrain_loss={r.train_loss:.4f}\tvalid_loss={r.valid_loss:.4f}\t"
              f"stopped_early={res.stopped_early}\tbest_epoch={res.best_epoch}")
    return 0


def cmd_trainlm(rc: RunConfig) -> int:
    src = rc.path("corpus")
    if src.suffix == ".tsv":
        corpus = [r.transcript for r in read_manifest(src)]
    else:
        corpus = src.read_text(encoding="utf-8").splitlines()
    try:
        model = train_lm(corpus, rc.order, _vocab(rc))
    except KeyError as exc:
        raise ConfigError(f"{src}: {exc.args[0]}") from None
    write_arpa(model, rc.path("output"))
    print(f"order={model.order}\tngrams={','.join(map(str, model.num_ngrams()))}\t{rc.output}")
    return 0


def cmd_decode(rc: RunConfig) -> int:
    ck = load_checkpoint(rc.path("checkpoint"))
    vocab = Vocabulary.loads(ck.vocab_text) if ck.vocab_text is not None else Vocabulary()
    if ck.encoder.config.vocab_size != vocab.num_labels:
        raise ConfigError("checkpoint vocabulary does not match its output layer")
    lm = None
    if rc.values.get("lm"):
        lm = read_arpa(rc.path("lm"))
        check_vocabulary(lm, vocab)
    params = rc.decode_params()
    manifest = rc.path("manifest")
    rows = read_manifest(manifest)
    feats = featurize_rows(rows, manifest.parent, rc.sample_rate, rc.cmvn)
    bs = rc.batch_size or 1
    hyps: list[str] = []
    w0, c0 = time.perf_counter(), time.process_time()
    with ThreadPoolExecutor(max_workers=rc.threads) as pool:
        for i in range(0, len(feats), bs):
            out = ck.encoder.forward([f.frames for f in feats[i : i + bs]])
            posts = [u.log_probs for u in out.utterances()]
            if lm is None:
                hyps += [greedy_decode(p, vocab) for p in posts]
            else:
                hyps += list(pool.map(lambda p: beam_decode(p, vocab, lm, params), posts))
    wall, cpu = time.perf_counter() - w0, time.process_time() - c0
    tensorio.atomic_write_text(rc.path("output"), "".join(f"{r.utt_id}\t{h}\n" for r, h in zip(rows, hyps)))
    mode = "greedy" if lm is None else f"beam(width={params.beam_width},alpha={params.alpha},beta={params.beta})"
    print(f"decoder={mode}\tbatch_size={bs}\t" + _timing(wall, cpu, len(rows), rc.threads))
    return 0


def cmd_score(rc: RunConfig) -> int:
    refs, hyps = _read_pairs(rc.path("ref")), _read_pairs(rc.path("hyp"))
    missing = [u for u in refs if u not in hyps]
    if missing:
        raise ConfigError(f"no hypothesis for utterance {missing[0]} ({len(missing)} missing)")
    strip = StripList.load(rc.strip_list) if rc.values.get("strip_list") else StripList()
    lines = [score_pairs(((refs[u], hyps[u]) for u in refs), strip).format("all")]
    for prefix in filter(None, (s.strip() for s in rc.subsets.split(","))):
        ids = [u for u in refs if u.startswith(prefix)]
        if ids:
            lines.append(score_pairs(((refs[u], hyps[u]) for u in ids), strip).format(prefix))
    text = "\n".join(lines) + "\n"
    if rc.values.get("output"):
        tensorio.atomic_write_text(rc.path("output"), text)
    sys.stdout.write(text)
    return 0


def _pair(text: str, what: str) -> tuple[int, int]:
    try:
        a, b = (int(s) for s in text.split(","))
    except ValueError:
        raise ConfigError(f"{what}: expected two comma-separated integers, got {text!r}") from None
    return a, b


def bench_encoders(cnn: CnnConfig, lstm: LstmConfig, frames: int, repeats: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(frames, cnn.input_dim))
    results = []
    for config in (cnn, lstm):
        enc = Encoder(config, seed=seed)
        if isinstance(config, CnnConfig):
            enc.forward([x], mode="train")  # populate batch-norm statistics
        walls, cpus = [], []
        for _ in range(repeats):
            w0, c0 = time.perf_counter(), time.process_time()
            enc.forward([x])
            walls.append(time.perf_counter() - w0)
            cpus.append(time.process_time() - c0)
        results.append({"encoder": enc.kind, "params": enc.num_params(), "wall_s": min(walls), "cpu_s": min(cpus)})
    return results


def cmd_bench(rc: RunConfig) -> int:
    k, n = _pair(rc.bench_cnn, "bench_cnn")
    layers, units = _pair(rc.bench_lstm, "bench_lstm")
    res = bench_encoders(CnnConfig(k, n), LstmConfig(layers, units), rc.frames, rc.repeats, rc.seed)
    lines = ["encoder\tparams\tframes\twall_s\tcpu_s"]
    lines += [f"{r['encoder']}\t{r['params']}\t{rc.frames}\t{r['wall_s']:.4f}\t{r['cpu_s']:.4f}" for r in res]
    text = "\n".join(lines) + "\n"
    if rc.values.get("output"):
        tensorio.atomic_write_text(rc.path("output"), text)
    sys.stdout.write(text)
    return 0


def cmd_export_filters(rc: RunConfig) -> int:
    ck = load_checkpoint(rc.path("checkpoint"))
    if ck.encoder.kind != "cnn":
        raise ConfigError("export-filters needs a CNN checkpoint")
    paths = export_first_layer_filters(ck.encoder, rc.path("output_dir"))
    print(f"wrote {len(paths)} images to {rc.output_dir}")
    return 0


HANDLERS = {
    "featurize": cmd_featurize,
    "train": cmd_train,
    "trainlm": cmd_trainlm,
    "decode": cmd_decode,
    "score": cmd_score,
    "bench": cmd_bench,
    "export-filters": cmd_export_filters,
}


def main(argv: Sequence[str] | None = None, env: Mapping[str, str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    env = os.environ if env is None else env
    flags = {o.name: getattr(args, o.name, None) for o in OPTIONS}
    try:
        rc = resolve(args.command, flags, env, args.config)
        logging.basicConfig(level=rc.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        if rc.threads < 1:
            raise ConfigError("threads must be >= 1")
        with threadpool_limits(limits=rc.threads):
            return HANDLERS[args.command](rc)
    except (ConfigError, FeatureError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"charctc {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
