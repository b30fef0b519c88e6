"""``melrvq`` command line.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical divergence.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import contrastive
from .dsp import InputStats, load_mels, load_wav, mel_spectrogram, resample, save_mels
from .errors import DomainError, MelRvqError, TrainingDivergenceError
from .pipeline import PipelineConfig, write_manifest
from .rvq import encode, load_checkpoint, save_checkpoint, save_tokens, save_tokens_csv
from .ssl import (
    IterateConfig,
    iterate,
    latents_per_clip,
    layer_probe,
    load_model,
    pretrain,
    save_model,
)
from .train import freeze_random, train

log = logging.getLogger("melrvq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def threads():
    return max(1, int(os.environ.get("MELRVQ_THREADS", "1")))


def _mels_files(mels_dir):
    files = sorted(Path(mels_dir).glob("*.mels"))
    if not files:
        raise DataError(f"no .mels files in {mels_dir}")
    return files


def _load_corpus(mels_dir):
    files = _mels_files(mels_dir)
    return files, [load_mels(f) for f in files]


def _config(args):
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return PipelineConfig.load(args.config, overrides)
    except (DomainError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _write_csv(path, rows):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_featurize(args):
    cfg = _config(args)
    wavs = sorted(p for p in Path(args.audio_dir).iterdir() if p.suffix.lower() == ".wav") \
        if Path(args.audio_dir).is_dir() else []
    if not wavs:
        raise DataError("no inputs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(path):
        try:
            spec = mel_spectrogram(resample(load_wav(path), cfg.dsp.sample_rate_hz), cfg.dsp)
        except (MelRvqError, OSError) as exc:
            return path, None, str(exc)
        target = out / (path.stem + ".mels")
        save_mels(spec, target)
        return path, target, None

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        results = list(pool.map(one, wavs))
    warnings = [(p, err) for p, _, err in results if err]
    for p, err in warnings:
        log.warning("skipping %s: %s", p.name, err)
    written = [t for _, t, _ in results if t is not None]
    if not written:
        raise DataError(f"all {len(wavs)} inputs failed")
    write_manifest(out, "featurize", cfg, [p for p, t, _ in results if t is not None], written)
    print(json.dumps({"written": len(written), "warnings": len(warnings)}))
    return EXIT_OK


def cmd_train_rvq(args):
    cfg = _config(args)
    files, specs = _load_corpus(args.mels_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = np.concatenate([s.frames for s in specs])
    rvq, report = train(frames, cfg.train, cfg.rvq, source="mel")
    save_checkpoint(rvq, out / "rvq.mrvq")
    report.to_csv(out / "train_report.csv")
    summary = report.summary()
    summary.pop("wall_clock_s")
    _write_json(out / "train_report.json", summary)
    write_manifest(out, "train-rvq", cfg, files,
                   [out / "rvq.mrvq", out / "train_report.csv", out / "train_report.json"])
    print(json.dumps({"final_loss_total": summary["final_loss_total"], "utilization": summary["utilization"]}))
    return EXIT_OK


def cmd_tokenize(args):
    rvq = load_checkpoint(args.rvq)
    files = _mels_files(args.mels_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(path):
        tokens = encode(rvq, load_mels(path), strict=False)
        save_tokens(tokens, out / (path.stem + ".mtok"))
        if args.csv:
            save_tokens_csv(tokens, out / (path.stem + ".csv"))
        return path, tokens

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        results = list(pool.map(one, files))
    rows = []
    for path, tokens in results:
        for n in range(tokens.n_stages):
            counts = np.bincount(tokens.tokens[:, n], minlength=rvq.codebook_size)
            rows.append({"file": path.stem, "stage": n + 1, **{f"k{k}": int(c) for k, c in enumerate(counts)}})
    _write_csv(out / "histogram.csv", rows)
    artifacts = sorted(out.glob("*.mtok")) + sorted(out.glob("*.csv"))
    write_manifest(out, "tokenize", None, [Path(args.rvq), *files], artifacts)
    print(json.dumps({"files": len(results)}))
    return EXIT_OK


def _pretrain_outputs(out, model, report, corpus, tokens, holdout, prefix):
    save_model(model, out / f"{prefix}.mtoy")
    _write_csv(out / f"{prefix}_loss.csv", [{"step": i, "loss": v} for i, v in enumerate(report.loss)])
    _write_csv(out / f"{prefix}_layers.csv", layer_probe(model, corpus, tokens, holdout))


def cmd_pretrain(args):
    cfg = _config(args)
    files, specs = _load_corpus(args.mels_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = np.concatenate([s.frames for s in specs[: len(specs) - min(cfg.optim.holdout_clips, len(specs) - 1)]])
    if args.vq_type == "random":
        rvq = freeze_random(cfg.rvq, frames.shape[1], cfg.train.seed, InputStats.fit(frames))
        inputs = list(files)
    elif args.rvq:
        rvq = load_checkpoint(args.rvq)
        inputs = [Path(args.rvq), *files]
    else:
        rvq = train(frames, cfg.train, cfg.rvq)[0]
        inputs = list(files)
    if rvq.source != "mel":
        raise DataError("stage-1 pretraining needs a Mel-source quantizer")
    save_checkpoint(rvq, out / "rvq.mrvq")
    model_cfg = cfg.model_config(specs[0].mel_bins, rvq.n_stages, rvq.codebook_size)
    model, report = pretrain(specs, rvq, model_cfg, cfg.mask, cfg.optim)
    tokens = [encode(rvq, s, strict=False).tokens for s in specs]
    _pretrain_outputs(out, model, report, specs, tokens, cfg.optim.holdout_clips, "model")
    summary = {**report.summary(), "vq_type": "random" if rvq.frozen else "trained", "source": rvq.source,
               "n_stages": rvq.n_stages, "codebook_size": rvq.codebook_size, "seed": cfg.seed,
               "stage": "pretrain"}
    summary.pop("wall_clock_s")
    _write_json(out / "pretrain_report.json", summary)
    write_manifest(out, "pretrain", cfg, inputs, sorted(p for p in out.iterdir() if p.name != "manifest.json"))
    print(json.dumps({"heldout_accuracy": report.heldout_accuracy, "chance": report.chance}))
    return EXIT_OK


def cmd_iterate(args):
    cfg = _config(args)
    files, specs = _load_corpus(args.mels_dir)
    stage1 = Path(args.stage1)
    rvq1, model1 = load_checkpoint(stage1 / "rvq.mrvq"), load_model(stage1 / "model.mtoy")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_config(specs[0].mel_bins, cfg.iterate_rvq.n_stages, cfg.iterate_rvq.codebook_size)
    it_cfg = IterateConfig(cfg.iterate_layer, cfg.iterate_rvq, cfg.iterate_train, model_cfg,
                           cfg.iterate_mask, cfg.iterate_optim)
    rvq_iter, model2, report = iterate(specs, (rvq1, model1), it_cfg)
    save_checkpoint(rvq_iter, out / "rvq_iter.mrvq")
    layer = model1.cfg.n_layers - 1 if cfg.iterate_layer is None else cfg.iterate_layer
    latents = latents_per_clip(model1, specs, max(layer, 0))
    tokens = [encode(rvq_iter, f, strict=False).tokens for f in latents]
    _pretrain_outputs(out, model2, report, specs, tokens, cfg.iterate_optim.holdout_clips, "model_iter")
    summary = {**report.summary(), "vq_type": "trained", "source": rvq_iter.source, "layer": layer,
               "n_stages": rvq_iter.n_stages, "codebook_size": rvq_iter.codebook_size, "seed": cfg.seed,
               "stage": "iterate"}
    summary.pop("wall_clock_s")
    _write_json(out / "iterate_report.json", summary)
    inputs = [stage1 / "rvq.mrvq", stage1 / "model.mtoy", *files]
    write_manifest(out, "iterate", cfg, inputs, sorted(p for p in out.iterdir() if p.name != "manifest.json"))
    print(json.dumps({"heldout_accuracy": report.heldout_accuracy, "chance": report.chance,
                      "source": rvq_iter.source}))
    return EXIT_OK


def cmd_report(args):
    run_dir = Path(args.run_dir)
    reports = sorted(run_dir.rglob("pretrain_report.json")) + sorted(run_dir.rglob("iterate_report.json"))
    if not reports:
        raise DataError(f"no pretrain/iterate reports under {run_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ablation, layers = [], []
    for path in sorted(reports):
        rep = json.loads(path.read_text())
        run = str(path.parent.relative_to(run_dir))
        acc = rep.get("heldout_accuracy") or []
        ablation.append({
            "run": run, "stage": rep.get("stage"), "vq_type": rep.get("vq_type"), "source": rep.get("source"),
            "n_stages": rep.get("n_stages"), "codebook_size": rep.get("codebook_size"), "seed": rep.get("seed"),
            "head1_accuracy": acc[0] if acc else None,
            "mean_accuracy": float(np.mean(acc)) if acc else None,
            "chance": rep.get("chance"),
        })
        for layer_csv in sorted(path.parent.glob("*_layers.csv")):
            with open(layer_csv, newline="") as fh:
                for row in csv.DictReader(fh):
                    layers.append({"run": run, **row})
    _write_csv(out / "ablation.csv", ablation)
    _write_json(out / "ablation.json", ablation)
    _write_csv(out / "layers.csv", layers)
    print(json.dumps({"runs": len(ablation)}))
    return EXIT_OK


def cmd_dcl_selftest(args):
    result = contrastive.selftest(seed=args.seed or 0, trials=args.trials)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK if result["passed"] else EXIT_DIVERGED


def build_parser():
    parser = _Parser(prog="melrvq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. --set train.steps=100")
        return p

    p = common(sub.add_parser("featurize", help="WAV files -> MELS files"))
    p.add_argument("audio_dir")
    p.add_argument("out")
    p.set_defaults(func=cmd_featurize)

    p = common(sub.add_parser("train-rvq", help="train a quantizer on MELS files"))
    p.add_argument("--mels-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_rvq)

    p = sub.add_parser("tokenize", help="MELS files -> MTOK (and CSV) tokens")
    p.add_argument("--rvq", required=True)
    p.add_argument("--mels-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_tokenize)

    p = common(sub.add_parser("pretrain", help="stage-1 masked token pretraining"))
    p.add_argument("--mels-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rvq", help="quantizer checkpoint; trained inline when omitted")
    p.add_argument("--vq-type", choices=("trained", "random"), default="trained")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("iterate", help="latent quantizer + second-iteration pretraining"))
    p.add_argument("--mels-dir", required=True)
    p.add_argument("--stage1", required=True, help="directory written by `pretrain`")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("report", help="merge run reports into ablation and layer tables")
    p.add_argument("run_dir")
    p.add_argument("out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dcl-selftest", help="contrastive-loss property checks as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.set_defaults(func=cmd_dcl_selftest)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        return args.func(args)
    except UsageError as exc:
        print(f"melrvq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergenceError as exc:
        print(f"melrvq: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, MelRvqError, OSError) as exc:
        print(f"melrvq: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
