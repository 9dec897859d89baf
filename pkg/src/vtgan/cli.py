"""Command-line front end: ``vtgan <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, merge, preset
from .data import CLASSES, DataError, PairDataset, build_manifest, read_labels, read_png, write_manifest, write_png
from .distortions import KINDS, DistortionSpec, default_spec, distort
from .weights import WeightFileError, read_header

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; overrides the scale preset")
    p.add_argument("--seed", type=int, help="random seed (default: from config, else 0)")
    p.add_argument("--scale", choices=("full", "desk"), help="architecture preset (default: full)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vtgan", description="Fundus-to-angiography synthesis and classification.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("prepare", help="build a dataset manifest from an image directory")
    _common(p)
    p.add_argument("--in", dest="inp", required=True, help="directory of <id>_fundus.png, <id>_fa.png, labels.csv")
    p.add_argument("--out-dir", required=True, help="where manifest.jsonl is written")

    p = sub.add_parser("train", help="train generators and discriminators")
    _common(p)
    p.add_argument("--in", dest="inp", help="image directory (default: paths.data_dir)")
    p.add_argument("--manifest", help="manifest to train from (default: built from --in)")
    p.add_argument("--out-dir", help="run directory for log and checkpoints (default: paths.run_dir)")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--max-steps", type=int, help="stop after this many generator steps")
    p.add_argument("--resume", action="store_true", help="continue from <out-dir>/checkpoints/latest")

    p = sub.add_parser("synthesize", help="fundus PNG(s) in, angiogram PNGs at both scales out")
    _common(p)
    p.add_argument("--weights", required=True, help="model weight file (weights.vtgw)")
    p.add_argument("--in", dest="inp", required=True, help="fundus PNG or directory of PNGs")
    p.add_argument("--out-dir", required=True, help="output directory")

    p = sub.add_parser("classify", help="Abnormal/Normal probabilities for fundus+angiogram pairs")
    _common(p)
    p.add_argument("--weights", required=True, help="model weight file (weights.vtgw)")
    p.add_argument("--in", dest="inp", required=True, help="fundus PNG or directory of PNGs")
    p.add_argument("--fa", help="matching angiogram PNG or directory; synthesized when omitted")
    p.add_argument("--out-dir", help="write probabilities.jsonl here as well as to stdout")

    p = sub.add_parser("distort", help="apply one distortion to every PNG in a directory")
    _common(p)
    p.add_argument("--in", dest="inp", required=True, help="PNG file or directory")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--distortion", required=True, choices=KINDS, help="distortion kind")
    p.add_argument("--strength", type=float, help="strength (default: configured default for the kind)")

    p = sub.add_parser("evaluate", help="FID/KID per distortion condition and classification metrics")
    _common(p)
    p.add_argument("--in", dest="inp", required=True, help="generated angiogram directory")
    p.add_argument("--reference", required=True, help="real angiogram directory with the same file names")
    p.add_argument("--labels", help="labels.csv (patient_id,label) for classification metrics")
    p.add_argument("--fundus", help="fundus directory with the same file names, for classification")
    p.add_argument("--weights", help="model weights providing the classifier")
    p.add_argument("--out-dir", help="write report.jsonl and report.txt here")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error allowed (default 1e-4)")
    return parser


# --- helpers --------------------------------------------------------------------------


def resolve_config(args, weights_meta: dict | None = None) -> RunConfig:
    """Scale preset < config stored with the weights < --config < flags."""
    cfg = preset(args.scale or "full")
    if weights_meta and "config" in weights_meta and not args.config:
        cfg = RunConfig.from_dict(weights_meta["config"])
    if args.config:
        try:
            overrides_file = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config} is not valid JSON: {exc}") from exc
        cfg = merge(cfg, overrides_file)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None):
        overrides.setdefault("train", {})["epochs"] = args.epochs
    return merge(cfg, overrides).validate() if overrides else cfg.validate()


def _pngs(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if files:
            return files
    raise DataError(f"no PNG images at {path}")


def _load_model(args):
    from .trainer import Vtgan

    try:
        meta = read_header(args.weights)["meta"]
    except OSError as exc:
        raise DataError(f"cannot read weights {args.weights}: {exc}") from exc
    cfg = resolve_config(args, meta)
    model = Vtgan(cfg)
    model.load_weights(args.weights)
    return model


def _fundus_input(path: Path, size: int) -> np.ndarray:
    img = read_png(path, 3)
    if img.shape[:2] != (size, size):
        raise DataError(f"{path}: expected {size}x{size}, got {img.shape[0]}x{img.shape[1]}")
    return img


# --- commands ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    records = build_manifest(args.inp, cfg.crop_size, d.crops_per_image, d.test_fraction, d.balance, cfg.seed)
    write_manifest(out / "manifest.jsonl", records)
    for split in ("train", "test"):
        rows = [r for r in records if r["split"] == split]
        counts = {c: sum(r["label"] == c for r in rows) for c in CLASSES}
        print(f"{split}: {len(rows)} crops {counts}")
    print(f"manifest: {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    cfg = resolve_config(args)
    data_dir = args.inp or cfg.paths.data_dir
    if not data_dir:
        raise UsageError("train needs --in or paths.data_dir")
    run_dir = Path(args.out_dir or cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = args.manifest or cfg.paths.manifest
    if not manifest:
        manifest = run_dir / "manifest.jsonl"
        d = cfg.data
        write_manifest(manifest, build_manifest(data_dir, cfg.crop_size, d.crops_per_image, d.test_fraction,
                                                d.balance, cfg.seed))
    dataset = PairDataset.from_manifest(manifest, data_dir, "train")

    def report(rec):
        print(f"step {rec['step']} epoch {rec['epoch']} g_total {rec['g_total']:.4f} "
              f"d_total {rec['d_total']:.4f} mse_fine {rec['mse_fine']:.4f}", flush=True)

    result = train(dataset, cfg, run_dir, resume=args.resume, max_steps=args.max_steps, on_step=report)
    print(f"checkpoint: {result.run_dir / 'checkpoints' / 'latest'}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .blocks import ForwardContext
    from .tensor import no_grad

    model = _load_model(args)
    g = model.cfg.gan
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path in _pngs(Path(args.inp)):
        fundus = _fundus_input(path, g.fine_size)[None]
        with no_grad():
            fine, coarse = model.gens.synthesize(fundus, ForwardContext.eval())
        for arr, size in ((fine.data[0], g.fine_size), (coarse.data[0], g.coarse_size)):
            target = out / f"{path.stem}_fa_{size}.png"
            write_png(target, arr)
            print(target)
    return EXIT_OK


def cmd_classify(args) -> int:
    from .blocks import ForwardContext
    from .tensor import no_grad

    model = _load_model(args)
    size = model.cfg.gan.fine_size
    fundus_paths = _pngs(Path(args.inp))
    records = []
    for path in fundus_paths:
        fundus = _fundus_input(path, size)[None]
        if args.fa:
            fa_path = Path(args.fa)
            fa_path = fa_path / path.name if fa_path.is_dir() else fa_path
            angio = read_png(fa_path, 1)[None]
            source = "given"
        else:
            with no_grad():
                angio = model.gens.synthesize(fundus, ForwardContext.eval())[0].data
            source = "synthesized"
        probs = model.classify(fundus, angio)[0]
        rec = {"image": path.name, "angiogram": source, **{c: float(p) for c, p in zip(CLASSES, probs)},
               "label": CLASSES[int(np.argmax(probs))]}
        records.append(rec)
        print(json.dumps(rec, sort_keys=True))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probabilities.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return EXIT_OK


def cmd_distort(args) -> int:
    cfg = resolve_config(args)
    spec = default_spec(args.distortion, cfg.distortion, cfg.seed)
    if args.strength is not None:
        spec = DistortionSpec(args.distortion, args.strength, cfg.seed, cfg.distortion.sharp_sigma)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(_pngs(Path(args.inp))):
        with Image.open(path) as im:
            channels = 1 if im.mode in ("L", "I", "I;16", "1") else 3
        img = read_png(path, channels)
        # per-image noise seed so files do not share one noise field
        spec_i = DistortionSpec(spec.kind, spec.strength, spec.seed + i, spec.sharp_sigma)
        write_png(out / path.name, distort(img, spec_i))
        print(out / path.name)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .extractors import metric_extractor
    from .metrics import evaluate_run

    cfg = resolve_config(args)
    classifier = None
    if args.weights:
        if not (args.fundus and args.labels):
            raise UsageError("classification metrics need --fundus and --labels alongside --weights")
        model = _load_model(args)

        def normal_probability(fundus, angio):
            return np.concatenate([model.classify(f[None], a[None])[:, CLASSES.index("Normal")]
                                   for f, a in zip(fundus, angio)])

        classifier = normal_probability
    labels = read_labels(args.labels) if args.labels else None
    report = evaluate_run(args.inp, args.reference, labels, metric_extractor(cfg.paths.metric_weights),
                          cfg.distortion, classifier, args.fundus, seed=cfg.seed)
    sys.stdout.write(report.table())
    if args.out_dir:
        report.write(args.out_dir)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    seed = args.seed if args.seed is not None else 0
    results = run_suite(seed=seed, include_discriminator=True)
    worst = 0.0
    for name, err in results.items():
        ok = err < args.tolerance
        worst = max(worst, err)
        print(f"{name:28s} {err:.3e} {'ok' if ok else 'FAIL'}")
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if worst < args.tolerance else EXIT_NUMERIC


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "classify": cmd_classify,
    "distort": cmd_distort,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def _thread_limit():
    value = os.environ.get("VTGAN_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    from .trainer import NumericalError

    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vtgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, WeightFileError, OSError, KeyError) as exc:
        print(f"vtgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"vtgan {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
