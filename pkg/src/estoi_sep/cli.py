"""``estoi-sep`` command-line interface.

Exit codes: 0 success, 1 failure (including a failed gradient check),
2 missing input file, 3 sample-rate mismatch, 4 unreadable checkpoint,
5 train/test leakage.
"""

import argparse
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np

from . import gradcheck, kernels, neural, trainer
from .audio_io import AudioError, read_wav, write_wav
from .config import ConfigError, load_config
from .data import (TestMixture, build_arrays, load_speaker_audio, pair_test_mixtures,
                   read_manifest, split_lists)
from .dsp import StftConfig
from .metrics import IntelligibilityConfig, format_table, write_csv, write_jsonl

log = logging.getLogger("estoi_sep")

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_RATE, EXIT_CHECKPOINT, EXIT_LEAKAGE = range(6)
THREADS_ENV = "ESTOI_SEP_THREADS"


class CliError(Exception):
    def __init__(self, message, code=EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _require_file(path, what):
    if path is None:
        raise CliError(f"no {what} given", EXIT_MISSING)
    if not Path(path).is_file():
        raise CliError(f"{what} not found: {path}", EXIT_MISSING)
    return path


def _apply_threads(args):
    n = args.threads if getattr(args, "threads", None) else os.environ.get(THREADS_ENV)
    if n:
        kernels.set_threads(int(n))


def _load_checkpoint(path):
    _require_file(path, "checkpoint")
    try:
        return neural.load_model(path)
    except (neural.CheckpointError, KeyError, ValueError, TypeError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_CHECKPOINT) from exc


def _read_audio(path):
    _require_file(path, "audio file")
    try:
        return read_wav(path)
    except AudioError as exc:
        raise CliError(str(exc)) from exc


def _run_config(args):
    try:
        cfg = load_config(_require_file(args.config, "config file") if args.config else None)
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}") from exc
    for section, key, attr in _OVERRIDES:
        cfg.override(section, key, getattr(args, attr, None))
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}") from exc


_OVERRIDES = [
    ("training", "regime", "regime"), ("training", "seed", "seed"),
    ("training", "max_epochs", "max_epochs"), ("training", "patience", "patience"),
    ("training", "batch_size", "batch_size"), ("training", "learning_rate", "learning_rate"),
    ("training", "steps_per_epoch", "steps_per_epoch"),
    ("training", "keep_optimizer_state", "keep_optimizer_state"),
    ("loss", "alpha", "alpha"), ("data", "manifest", "manifest"),
    ("data", "n_shifts", "n_shifts"), ("output", "directory", "output"),
]


def _speakers(records, wanted):
    found = sorted({r.speaker_id for r in records})
    speakers = list(wanted) if wanted else found
    if len(speakers) != 2:
        raise CliError(f"expected exactly two speakers, found {found}; set data.speakers")
    missing = [s for s in speakers if s not in found]
    if missing:
        raise CliError(f"speaker(s) {missing} not in manifest")
    return speakers


def _check_records(records, base):
    out = []
    for r in records:
        p = Path(r.path)
        if not p.is_absolute():
            p = Path(base) / p
        if not p.is_file():
            raise CliError(f"audio file not found: {p}", EXIT_MISSING)
        out.append(type(r)(str(p), r.speaker_id, r.group_id))
    return out


def _manifest_splits(cfg):
    path = _require_file(cfg.data.manifest, "manifest")
    try:
        records = read_manifest(path)
        parts = split_lists(records, cfg.data.train_groups, cfg.data.validation_groups,
                            cfg.data.test_groups)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    base = Path(path).parent
    return {k: _check_records(v, base) for k, v in parts.items()}


def _split_arrays(cfg, records, n_shifts):
    stft_config = cfg.stft_config()
    if not records:
        raise CliError("a required data split is empty")
    speakers = _speakers(records, cfg.data.speakers)
    audio = load_speaker_audio(records, stft_config.sample_rate)
    try:
        return build_arrays(audio[speakers[0]], audio[speakers[1]], stft_config, n_shifts,
                            cfg.data.sequence_length)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = _run_config(args)
    if args.dataset:
        with np.load(_require_file(args.dataset, "dataset")) as npz:
            train_arr = (npz["train_Z"], npz["train_Y1"], npz["train_Y2"])
            val_arr = (npz["val_Z"], npz["val_Y1"], npz["val_Y2"])
    else:
        parts = _manifest_splits(cfg)
        train_arr = _split_arrays(cfg, parts["train"], cfg.data.n_shifts)
        val_arr = _split_arrays(cfg, parts["validation"], cfg.data.n_shifts)
    if train_arr[0].shape[1] != cfg.stft_config().n_freq:
        raise CliError("dataset frequency bins do not match the STFT config")

    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "model.ckpt", out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    cfg.dump(out / "config.json")
    model = neural.init_model(cfg.stft_config().n_freq, [int(h) for h in cfg.model.hidden_sizes],
                              seed=cfg.training.seed, feature_scale=cfg.model.feature_scale,
                              configs=cfg.model_configs())
    tcfg = cfg.train_config(str(ckpt), str(log_path))
    try:
        best, history = trainer.train(tcfg, train_arr, val_arr, model=model,
                                      loss_config=cfg.loss_config())
    except neural.DivergenceError as exc:
        raise CliError(f"training diverged: {exc}; last good checkpoint: {ckpt}") from exc
    if not ckpt.exists():
        neural.save_model(best, None, ckpt)
    summary = {"best_epoch": history.best_epoch, "phase_best": history.phase_best,
               "epochs": len(history.records),
               "best_val_loss": history.records[history.best_epoch].val_loss}
    (out / "history.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"best epoch {history.best_epoch}; checkpoint {ckpt}")
    return EXIT_OK


def _latency_config(args):
    if args.checkpoint:
        model, _ = _load_checkpoint(args.checkpoint)
        return trainer._model_stft_config(model)
    if args.config:
        return _run_config(args).stft_config()
    return StftConfig()


def cmd_separate(args):
    if args.report_latency:
        print(f"{_latency_config(args).latency_ms:.1f} ms")
        if not args.inputs:
            return EXIT_OK
    if not args.inputs:
        raise CliError("no input files given")
    model, _ = _load_checkpoint(args.checkpoint)
    rate = trainer._model_stft_config(model).sample_rate
    clips = []
    for path in args.inputs:
        clip = _read_audio(path)
        if clip.sample_rate != rate:
            raise CliError(f"{path}: sample rate {clip.sample_rate} Hz, model requires {rate} Hz",
                           EXIT_RATE)
        clips.append((Path(path), clip))
    for path, clip in clips:
        out_dir = Path(args.output_dir) if args.output_dir else path.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        s1, s2 = trainer.separate(model, clip)
        write_wav(s1, out_dir / f"{path.stem}.s1.wav", args.subtype)
        write_wav(s2, out_dir / f"{path.stem}.s2.wav", args.subtype)
        (out_dir / f"{path.stem}.separate.json").write_text(json.dumps(
            {"input": str(path), "checkpoint": str(args.checkpoint),
             "configs": model.configs}, indent=2) + "\n")
        print(f"{path.stem}: wrote {path.stem}.s1.wav, {path.stem}.s2.wav")
    return EXIT_OK


def _resolve(paths, base):
    return {str((Path(base) / p).resolve()) if not Path(p).is_absolute() else str(Path(p).resolve())
            for p in paths}


def _test_items(args, rate):
    if args.pairs:
        items, paths = [], set()
        base = Path(_require_file(args.pairs, "pair list")).parent
        with open(args.pairs, encoding="utf-8") as fh:
            for k, line in enumerate(fh):
                if not line.strip() or line.startswith("#"):
                    continue
                pair = line.rstrip("\n").split("\t")[:2]
                if len(pair) != 2:
                    raise CliError(f"{args.pairs}:{k + 1}: expected two tab-separated paths")
                clips = [_read_audio(p if Path(p).is_absolute() else base / p) for p in pair]
                items.append((f"pair{k}", clips))
                paths |= _resolve(pair, base)
    else:
        manifest = _require_file(args.manifest, "manifest")
        records = read_manifest(manifest)
        groups = args.groups.split(",") if args.groups else None
        if groups:
            records = [r for r in records if r.group_id in groups]
        base = Path(manifest).parent
        records = _check_records(records, base)
        if not records:
            raise CliError("no test records selected from the manifest")
        speakers = _speakers(records, args.speakers.split(",") if args.speakers else None)
        by_spk = [[(Path(r.path).stem, _read_audio(r.path)) for r in records
                   if r.speaker_id == s] for s in speakers]
        items = [(m.mixture_id, (m.source1, m.source2))
                 for m in pair_test_mixtures(*by_spk, max_mixtures=args.max_mixtures)]
        paths = {str(Path(r.path).resolve()) for r in records}
    for mix_id, clips in items:
        for c in clips:
            if c.sample_rate != rate:
                raise CliError(f"{mix_id}: sample rate {c.sample_rate} Hz, model requires "
                               f"{rate} Hz", EXIT_RATE)
    return items, paths


def cmd_evaluate(args):
    model, _ = _load_checkpoint(args.checkpoint)
    stft_config = trainer._model_stft_config(model)
    items, eval_paths = _test_items(args, stft_config.sample_rate)
    if args.check_leakage:
        train_manifest = _require_file(args.check_leakage, "training manifest")
        train_paths = _resolve([r.path for r in read_manifest(train_manifest)],
                               Path(train_manifest).parent)
        overlap = sorted(train_paths & eval_paths)
        if overlap:
            raise CliError(f"{len(overlap)} evaluation file(s) also in the training manifest, "
                           f"e.g. {overlap[0]}", EXIT_LEAKAGE)
    tests = [TestMixture(mix_id, *clips) for mix_id, clips in items]
    metric_config = (IntelligibilityConfig.standard() if args.standard_estoi
                     else IntelligibilityConfig.native(stft_config))
    reports, summary = trainer.evaluate(model, tests, metric_config, args.filter_len)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(reports, out / "metrics.csv")
    write_jsonl(reports, out / "metrics.jsonl")
    (out / "summary.json").write_text(json.dumps(
        {"checkpoint": str(args.checkpoint), "standard_estoi": args.standard_estoi,
         "filter_len": args.filter_len, "summary": summary}, indent=2) + "\n")
    print(format_table(summary))
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run(args.stage, args.instances, args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:14s} max rel err {r.max_rel_error:.3e}  (threshold {r.threshold:.0e})  "
              f"{status}")
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error / r.threshold)
        print(f"worst offender: {worst.name} at {worst.worst_index}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_mixgen(args):
    cfg = _run_config(args)
    parts = _manifest_splits(cfg)
    train_arr = _split_arrays(cfg, parts["train"], cfg.data.n_shifts)
    val_arr = _split_arrays(cfg, parts["validation"], cfg.data.n_shifts)
    out = Path(args.dataset_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, train_Z=train_arr[0], train_Y1=train_arr[1], train_Y2=train_arr[2],
             val_Z=val_arr[0], val_Y1=val_arr[1], val_Y2=val_arr[2])
    cfg.dump(out.with_suffix(".config.json"))
    print(f"{train_arr[0].shape[0]} training and {val_arr[0].shape[0]} validation sequences "
          f"-> {out}")
    return EXIT_OK


def cmd_synth(args):
    """Write a synthetic two-speaker corpus and its manifest."""
    from .synthetic import speaker_pair
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    groups = [f"L{k}" for k in range(1, 14)]
    for g_idx, group in enumerate(groups):
        a, b = speaker_pair(args.seconds, args.sample_rate, args.kind, seed=args.seed + g_idx)
        for spk, clip in (("spk1", a), ("spk2", b)):
            name = f"{spk}_{group}.wav"
            write_wav(clip, out / name)
            lines.append(f"{name}\t{spk}\t{group}\n")
    (out / "manifest.tsv").write_text("".join(lines), encoding="utf-8")
    print(f"wrote {len(lines)} files and {out / 'manifest.tsv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="estoi-sep", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=int,
                        help=f"worker threads (default: ${THREADS_ENV} or all cores)")

    t = sub.add_parser("train", help="train a separation model")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--dataset", help="npz written by mixgen (skips audio loading)")
    t.add_argument("--output", help="output directory")
    t.add_argument("--regime", choices=trainer.REGIMES)
    t.add_argument("--alpha", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--n-shifts", type=int)
    t.add_argument("--keep-optimizer-state", action="store_true", default=None)
    threads(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate mixture WAV files")
    s.add_argument("inputs", nargs="*")
    s.add_argument("--checkpoint")
    s.add_argument("--config", help="only used by --report-latency without a checkpoint")
    s.add_argument("--output-dir")
    s.add_argument("--subtype", choices=("PCM_16", "FLOAT"), default="PCM_16")
    s.add_argument("--report-latency", action="store_true",
                   help="print the analysis-synthesis latency in ms")
    threads(s)
    s.set_defaults(func=cmd_separate)

    e = sub.add_parser("evaluate", help="score a model on test mixtures")
    e.add_argument("--checkpoint", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="test manifest; utterances of the two speakers are paired")
    src.add_argument("--pairs", help="tab-separated list of source1/source2 WAV paths")
    e.add_argument("--groups", help="comma-separated group ids to use from the manifest")
    e.add_argument("--speakers", help="comma-separated pair of speaker ids")
    e.add_argument("--max-mixtures", type=int)
    e.add_argument("--output-dir", default="eval")
    e.add_argument("--filter-len", type=int, default=512)
    e.add_argument("--standard-estoi", action="store_true",
                   help="score intelligibility at 10 kHz with the conventional setup")
    e.add_argument("--check-leakage", metavar="TRAIN_MANIFEST",
                   help="fail if any evaluation file appears in this manifest")
    threads(e)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--stage", choices=("all",) + gradcheck.STAGES, default="all")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=20)
    threads(g)
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("mixgen", help="build the augmented training set from a manifest")
    m.add_argument("--config")
    m.add_argument("--manifest")
    m.add_argument("--n-shifts", type=int)
    m.add_argument("--dataset-out", required=True)
    threads(m)
    m.set_defaults(func=cmd_mixgen)

    y = sub.add_parser("synth", help="write a synthetic two-speaker corpus")
    y.add_argument("--output", required=True)
    y.add_argument("--seconds", type=float, default=20.0, help="per group and speaker")
    y.add_argument("--kind", choices=("disjoint", "overlapping"), default="overlapping")
    y.add_argument("--sample-rate", type=int, default=16000)
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads(args)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
