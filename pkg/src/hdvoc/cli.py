"""``hdvoc`` command line: make-corpus, train, generate, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import functools
import json
import logging
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .audio.spectral import MelSpectrogram
from .audio.wav import read_wav, write_wav
from .config import PRESETS, RunConfig, load_config, save_config
from .corpus import load_corpus, make_corpus
from .errors import ConfigError, ConfigMismatchError, HdvocError
from .hierarchy import ABLATIONS, LevelBundle, LevelDataset, generate, init_bundles, train_level
from .metrics import environment_metadata, estimate_f0, mcd, mr_stft, pmae, vde
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.optim import TrainState

log = logging.getLogger("hdvoc")

REPORT_FIELDS = ("pmae_hz", "vde", "mr_stft", "mcd_db", "rtf")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class UnpairedFilesError(HdvocError):
    pass


class MissingCorpusError(HdvocError):
    pass


# -- training ---------------------------------------------------------------------------------------


def _level_meta(cfg: RunConfig, level: int) -> dict:
    return {"level": level, "rate": cfg.hierarchy.rates[level], "hierarchy": cfg.hierarchy.to_dict()}


def _load_bundle(cfg: RunConfig, level: int, state: TrainState) -> LevelBundle:
    spec = cfg.hierarchy
    return LevelBundle(level, spec.rates[level], state, spec.train_schedule(), spec.inference_schedule())


def load_bundles(cfg: RunConfig, checkpoint_dir: Path | None = None) -> list[LevelBundle]:
    bundles = []
    for i, net_cfg in enumerate(cfg.hierarchy.nets):
        path = cfg.checkpoint_path(i) if checkpoint_dir is None else Path(checkpoint_dir) / cfg.checkpoint_path(i).name
        state, _ = load_checkpoint(path, expected_config=net_cfg, expected_meta=_level_meta(cfg, i))
        bundles.append(_load_bundle(cfg, i, state))
    return bundles


def cmd_train(cfg: RunConfig, waveforms=None) -> list[Path]:
    """Train every level to its configured step count, resuming from existing checkpoints.

    Each ``checkpoint_every`` chunk draws from a generator keyed by
    ``(seed, level, start step)``, so a resumed run replays the same batches
    as an uninterrupted one.
    """
    tc = cfg.training
    if waveforms is None:
        corpus_dir = cfg.path("corpus_dir")
        if not (corpus_dir / "manifest.jsonl").exists():
            raise MissingCorpusError(f"no corpus manifest in {corpus_dir}")
        waveforms = [x for x, _ in load_corpus(corpus_dir)]
    ckpt_dir = cfg.path("checkpoint_dir")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    fresh = init_bundles(cfg.hierarchy, cfg.seed, lr=tc.learning_rate)
    written = []
    for level, target in enumerate(tc.steps):
        path = cfg.checkpoint_path(level)
        if path.exists():
            state, _ = load_checkpoint(path, cfg.hierarchy.nets[level], _level_meta(cfg, level))
            bundle = _load_bundle(cfg, level, state)
            log.info("level=%d resuming from step %d", level, state.step)
        else:
            bundle = fresh[level]
        if bundle.state.step < target:
            data = LevelDataset(waveforms, cfg.hierarchy, level)
            window: list[float] = []

            def on_step(step, loss, t, level=level, window=window):
                window.append(loss)
                if step % tc.log_every == 0:
                    log.info("step=%d level=%d loss=%.6f", step, level, float(np.mean(window)))
                    window.clear()

            while bundle.state.step < target:
                start = bundle.state.step
                chunk = min(tc.checkpoint_every - start % tc.checkpoint_every, target - start)
                rng = np.random.default_rng([cfg.seed, level, start])
                schedule = functools.partial(tc.lr_at, total=target)
                train_level(bundle, data, chunk, rng, tc.batch_size, tc.segment_frames, on_step, schedule)
                save_checkpoint(bundle.state, path, _level_meta(cfg, level))
        written.append(path)
    return written


# -- generation ---------------------------------------------------------------------------------------


def read_input_mel(cfg: RunConfig, path: Path) -> MelSpectrogram:
    """Top-rate log-mel from a WAV (computed here) or a ``.npy`` array of shape (frames, n_mels)."""
    spec = cfg.hierarchy
    if path.suffix.lower() == ".npy":
        values = np.load(path)
        if values.ndim != 2 or values.shape[1] != spec.mel.n_mels:
            raise ConfigMismatchError(f"{path}: mel array shape {values.shape} does not match {spec.mel.n_mels} bands")
        m = spec.mel
        return MelSpectrogram(values.astype(np.float64), m.n_mels, m.hop, m.fft_size, spec.rates[0], m.log_floor)
    x = read_wav(path)
    if x.sample_rate != spec.rates[0]:
        raise ConfigMismatchError(f"{path}: {x.sample_rate} Hz input, hierarchy top rate is {spec.rates[0]} Hz")
    return spec.mel.compute(x).trimmed(len(x) // spec.mel.hop)


def _file_seed(seed: int, name: str) -> list[int]:
    return [seed, zlib.crc32(name.encode())]


def cmd_generate(
    cfg: RunConfig,
    input_path: Path,
    out_path: Path,
    checkpoint_dir: Path | None = None,
    ablate: str | None = None,
    threads: int = 1,
) -> list[Path]:
    """Generate one WAV, or one per input file when ``input_path`` is a directory.

    A directory run also writes ``rtf.json`` with each file's real-time factor.
    """
    bundles = load_bundles(cfg, checkpoint_dir)
    if input_path.is_dir():
        inputs = sorted([*input_path.glob("*.wav"), *input_path.glob("*.npy")])
        if not inputs:
            raise MissingCorpusError(f"no .wav or .npy inputs in {input_path}")
        out_path.mkdir(parents=True, exist_ok=True)
        targets = [out_path / (p.stem + ".wav") for p in inputs]
        seeds = [_file_seed(cfg.seed, p.stem) for p in inputs]
    else:
        inputs, targets, seeds = [input_path], [out_path], [[cfg.seed]]
        out_path.parent.mkdir(parents=True, exist_ok=True)

    def one(job):
        src, dst, seed = job
        mel = read_input_mel(cfg, src)
        start = time.perf_counter()
        y = generate(cfg.hierarchy, bundles, mel, np.random.default_rng(seed), ablate=ablate)
        elapsed = time.perf_counter() - start
        write_wav(dst, y, "float32")
        return dst.name, elapsed / (len(y) / y.sample_rate)

    jobs = list(zip(inputs, targets, seeds))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    if input_path.is_dir():
        (out_path / "rtf.json").write_text(json.dumps({"rtf": dict(results), "environment": environment_metadata()}, indent=2))
    return targets


# -- evaluation ----------------------------------------------------------------------------------------


def _trim(a, b):
    n = min(len(a), len(b))
    return a.with_samples(a.samples[:n]), b.with_samples(b.samples[:n])


def evaluate_pair(cfg: RunConfig, ref, hyp) -> dict:
    ev = cfg.eval
    ref, hyp = _trim(ref, hyp)
    track = lambda x: estimate_f0(x, ev.f0_frame, ev.f0_hop, ev.fmin_hz, ev.fmax_hz, ev.voicing_threshold)
    r, h = track(ref), track(hyp)
    return {"pmae_hz": pmae(r, h), "vde": vde(r, h), "mr_stft": mr_stft(ref, hyp), "mcd_db": mcd(ref, hyp)}


def aggregate(per_file: dict) -> dict:
    """Unweighted mean over files; undefined (NaN) entries are skipped."""
    out = {}
    for key in REPORT_FIELDS:
        vals = np.array([row[key] for row in per_file.values()], dtype=float)
        out[key] = float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else float("nan")
    return out


def cmd_eval(cfg: RunConfig, ref_dir: Path, hyp_dir: Path, report_path: Path) -> dict:
    refs = {p.name: p for p in ref_dir.glob("*.wav")}
    hyps = {p.name: p for p in hyp_dir.glob("*.wav")}
    if set(refs) != set(hyps) or not refs:
        raise UnpairedFilesError(
            f"unpaired files: only in ref {sorted(set(refs) - set(hyps))}, only in hyp {sorted(set(hyps) - set(refs))}"
        )
    rtf_file = hyp_dir / "rtf.json"
    rtfs = json.loads(rtf_file.read_text())["rtf"] if rtf_file.exists() else {}
    per_file = {}
    for name in sorted(refs):
        row = evaluate_pair(cfg, read_wav(refs[name]), read_wav(hyps[name]))
        row["rtf"] = float(rtfs.get(name, float("nan")))
        per_file[name] = row
    report = {"files": per_file, "aggregate": aggregate(per_file), "environment": environment_metadata()}
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.with_suffix(".json").write_text(json.dumps(report, indent=2))
    lines = [" ".join([f"file={n}"] + [f"{k}={row[k]:.6g}" for k in REPORT_FIELDS]) for n, row in per_file.items()]
    lines.append(" ".join(["file=ALL"] + [f"{k}={report['aggregate'][k]:.6g}" for k in REPORT_FIELDS]))
    report_path.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return report


# -- argument handling -------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hdvoc", description="Hierarchical diffusion vocoder toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, type=Path, help="run configuration (JSON)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (1 = deterministic single-threaded)")
        return sp

    sp = common(sub.add_parser("make-corpus", help="synthesise the vibrato corpus"))
    sp.add_argument("--out", type=Path, help="output directory (default: paths.corpus_dir)")
    common(sub.add_parser("train", help="train every level"))
    sp = common(sub.add_parser("generate", help="vocode a WAV or mel file (or a directory)"))
    sp.add_argument("--input", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--checkpoints", type=Path, help="checkpoint directory (default: paths.checkpoint_dir)")
    sp.add_argument("--ablate", choices=ABLATIONS, help="zero a conditioning input of the top level")
    sp = common(sub.add_parser("eval", help="score generated files against references"))
    sp.add_argument("--ref", required=True, type=Path)
    sp.add_argument("--hyp", required=True, type=Path)
    sp.add_argument("--report", type=Path, help="report path without suffix (default: <hyp>/report)")
    sp = sub.add_parser("make-config", help="write a preset configuration")
    sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    sp.add_argument("--out", required=True, type=Path)
    return p


def run(argv) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "make-config":
        save_config(PRESETS[args.preset](), args.out)
        return EXIT_OK
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg.seed = args.seed
    threadpool_limits(args.threads)
    if args.command == "make-corpus":
        out = args.out or cfg.path("corpus_dir")
        make_corpus(cfg.corpus, out, cfg.seed, threads=args.threads)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "generate":
        cmd_generate(cfg, args.input, args.out, args.checkpoints, args.ablate, args.threads)
    elif args.command == "eval":
        cmd_eval(cfg, args.ref, args.hyp, args.report or args.hyp / "report")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except (UsageError, ConfigError, ConfigMismatchError) as exc:
        print(f"hdvoc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HdvocError, OSError, ValueError) as exc:
        print(f"hdvoc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
