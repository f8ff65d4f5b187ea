"""Command-line front end.

Every command writes a JSON run manifest next to its main output (or where
``--manifest`` says) recording argv, the run config, the seed, the package
version and the sha256 of each file written. ``replay`` re-runs a manifest's
argv and checks the digests.

Exit codes: 0 success, 1 engine/contract error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint
from .config import RunConfig, load_config
from .dcl import DclConfig, train_dcl, write_loss_csv
from .errors import ContractError, EngineError, ParameterError
from .image import Image, read_raster, write_raster
from .metrics import SCORERS
from .model import Engine, EngineConfig
from .quant import quantize_module
from .runtime import DEFAULT_ATTENTION_CAP, MODES, bench
from .synthetic import captioning_set

RASTER_SUFFIX = ".tvlr"


# --------------------------------------------------------------------------
# file helpers


def read_image(path) -> Image:
    """Raw rasters load natively; anything else goes through Pillow."""
    path = Path(path)
    if path.suffix == RASTER_SUFFIX:
        return read_raster(path)
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


def engine_config_for(run: RunConfig, tiny: bool = False) -> EngineConfig:
    base = EngineConfig.tiny() if tiny else EngineConfig()
    d = base.to_dict()
    d["tile_size"] = run.tile_size
    d["max_tiles"] = run.max_tiles
    return EngineConfig.from_dict(d)


def save_engine(path, engine: Engine, seed: int) -> None:
    meta = {"kind": "engine", "config": engine.config.to_dict(), "seed": seed}
    checkpoint.save(path, engine.state_dict(), meta)


def load_engine(path) -> tuple[Engine, dict]:
    state, meta = checkpoint.load(path)
    if meta.get("kind") != "engine":
        raise ContractError(f"{path} is not an engine checkpoint")
    engine = Engine(EngineConfig.from_dict(meta["config"]), seed=int(meta["seed"]))
    engine.load_state_dict(state)
    return engine, meta


def save_vrc(path, model, seed: int) -> None:
    meta = {"kind": "vrc", "r": model.r, "channels": list(model.channels), "hidden": model.hidden, "seed": seed}
    checkpoint.save(path, model.state_dict(), meta)


def load_vrc(path):
    from .vrc import VrcModel

    state, meta = checkpoint.load(path)
    if meta.get("kind") != "vrc":
        raise ContractError(f"{path} is not a compressor checkpoint")
    model = VrcModel(int(meta["r"]), tuple(meta["channels"]), int(meta["hidden"]), int(meta["seed"]))
    model.load_state_dict(state)
    return model


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, argv, run: RunConfig, seed, outputs) -> None:
    manifest = {
        "argv": list(argv),
        "config": run.to_dict(),
        "seed": seed,
        "version": __version__,
        "outputs": {str(p): sha256(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# commands; each returns (seed, [output paths])


def cmd_init(args, run):
    engine = Engine(engine_config_for(run, args.tiny), seed=args.seed)
    save_engine(args.out, engine, args.seed)
    emit({"parameters": engine.num_parameters(), "out": args.out})
    return args.seed, [args.out]


def cmd_train_dcl(args, run):
    engine, meta = load_engine(args.ckpt)
    cfg = DclConfig(args.temperature, args.kd_weight, args.period, args.lr, args.batch_size)
    samples = captioning_set(args.seed, args.samples, args.width, args.height, tag="dcl")
    records = train_dcl(engine, samples, args.steps, cfg, seed=args.seed)
    save_engine(args.out, engine, int(meta["seed"]))
    outputs = [args.out]
    if args.loss_csv:
        write_loss_csv(args.loss_csv, records)
        outputs.append(args.loss_csv)
    emit({"steps": args.steps, "final_ce": records[-1]["ce"] if records else None, "out": args.out})
    return args.seed, outputs


def cmd_label_vrc(args, run):
    from .vrc import ALPHA_GRID, build_labels, write_labels

    if args.ratios != len(ALPHA_GRID):
        raise ParameterError(f"--ratios {args.ratios}: only the {len(ALPHA_GRID)}-level grid is supported")
    engine, _ = load_engine(args.ckpt)
    samples = captioning_set(args.seed, args.samples, args.width, args.height, tag="vrc")
    eps = run.vrc_eps if args.eps is None else args.eps
    labels = build_labels(samples, engine, eps, args.r, args.branch or run.branch)
    write_labels(args.out, labels)
    img_dir = Path(args.images)
    img_dir.mkdir(parents=True, exist_ok=True)
    outputs = [args.out]
    for s in samples:
        p = img_dir / f"{s.id}{RASTER_SUFFIX}"
        write_raster(p, s.image)
        outputs.append(p)
    emit({"labels": len(labels), "out": args.out})
    return args.seed, outputs


def cmd_train_vrc(args, run):
    from .vrc import VrcModel, mse, read_labels, train_vrc

    labels = read_labels(args.labels)
    if not labels:
        raise ContractError(f"{args.labels} holds no labels")
    r = labels[0].r
    if args.r is not None and args.r != r:
        raise ContractError(f"--r {args.r} does not match the labels' r={r}")
    if any(lab.r != r for lab in labels):
        raise ContractError("labels mix different r values")
    images = [read_raster(Path(args.images) / f"{lab.sample_id}{RASTER_SUFFIX}") for lab in labels]
    model = VrcModel(r, seed=args.seed)
    train_vrc(images, labels, model, args.epochs, args.lr, args.batch_size, args.seed)
    save_vrc(args.out, model, args.seed)
    emit({"labels": len(labels), "train_mse": mse(model, images, np.array([lab.target for lab in labels])),
          "out": args.out})
    return args.seed, [args.out]


def cmd_infer(args, run):
    from .pipeline import infer

    engine, _ = load_engine(args.ckpt)
    vrc_on = run.vrc_enabled if args.vrc is None else args.vrc == "on"
    vrc = None
    if vrc_on:
        if not args.vrc_model:
            raise ContractError("--vrc on needs --vrc-model")
        vrc = load_vrc(args.vrc_model)
    branch = args.branch or run.branch
    res = infer(engine, read_image(args.image), args.prompt, branch, vrc, max_new=args.max_new)
    print(f"vrc ratio: {res.alpha}", file=sys.stderr)
    out = {"alpha": res.alpha, "branch": branch, "image_tokens": res.image_tokens.image_count,
           "output_ids": res.output_ids, "text": res.text}
    emit(out)
    if args.out:
        Path(args.out).write_text(json.dumps(out, sort_keys=True) + "\n")
        return None, [args.out]
    return None, []


def cmd_quantize(args, run):
    engine, meta = load_engine(args.input)
    group = args.group or run.quant_group
    done = quantize_module(engine, group)
    save_engine(args.output, engine, int(meta["seed"]))
    emit({"quantized": len(done), "group": group, "out": args.output})
    return None, [args.output]


def cmd_bench(args, run):
    if args.ckpt:
        engine, _ = load_engine(args.ckpt)
    else:
        engine = Engine(engine_config_for(run, args.tiny), seed=args.seed)
    branch = args.branch or run.branch
    report = bench(
        args.resolutions.split(","), [m.strip() for m in args.modes.split(",")], engine.branch(branch),
        engine.config.decoder, engine.config.tile_size, args.max_tiles,
        int(args.attention_cap_mb * 2**20), seed=args.seed, timing=args.timing,
    )
    report.write_csv(args.out)
    emit({"rows": len(report.rows), "out": args.out})
    return args.seed, [args.out]


def cmd_score(args, run):
    result = SCORERS[args.metric](args.pred, args.truth)
    emit(result)
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n")
        return None, [args.out]
    return None, []


def cmd_replay(args, run):
    manifest = json.loads(Path(args.manifest_file).read_text())
    expected = manifest["outputs"]
    code = main(manifest["argv"])
    if code != 0:
        raise ContractError(f"replayed command exited with {code}")
    mismatched = sorted(p for p, digest in expected.items() if sha256(p) != digest)
    emit({"replayed": manifest["argv"], "identical": not mismatched, "mismatched": mismatched})
    if mismatched:
        raise ContractError(f"replay produced different bytes for {mismatched}")
    return "skip", []


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run config file")
    p.add_argument("--manifest", help="where to write the run manifest (default: <output>.manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilevlm", description="Tiled vision-language engine toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("init", help="create a freshly initialised engine checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--tiny", action="store_true", help="cut-down dimensions")
    _common(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train-dcl", help="alternating two-branch training with KL distillation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--kd-weight", "--lambda", dest="kd_weight", type=float, default=1.0)
    p.add_argument("--temperature", "--temp", dest="temperature", type=float, default=1.0)
    p.add_argument("--period", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--loss-csv")
    _common(p)
    p.set_defaults(func=cmd_train_dcl)

    p = sub.add_parser("label-vrc", help="label synthetic images with the loss-ratio oracle")
    p.add_argument("--ckpt", required=True, help="frozen reference engine")
    p.add_argument("--out", required=True, help="labels JSONL")
    p.add_argument("--images", required=True, help="directory for the labelled rasters")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--r", type=int, default=64)
    p.add_argument("--eps", type=float, help="loss-ratio tolerance (overrides vrc.eps)")
    p.add_argument("--ratios", type=int, default=10, help="number of grid ratios; only 10 is supported")
    p.add_argument("--branch", choices=("small", "large"))
    p.add_argument("--seed", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_label_vrc)

    p = sub.add_parser("train-vrc", help="fit the resolution compressor to oracle labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--r", type=int, help="predictor input side; must match the labels")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    _common(p)
    p.set_defaults(func=cmd_train_vrc)

    p = sub.add_parser("infer", help="caption an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help=f"PNG/JPEG or {RASTER_SUFFIX} raster")
    p.add_argument("--prompt", default="what?")
    p.add_argument("--branch", choices=("small", "large"))
    p.add_argument("--vrc", choices=("on", "off"))
    p.add_argument("--vrc-model")
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--out", help="also write the result JSON here")
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("quantize", help="4-bit group-wise weight quantization of a checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--group", type=int)
    _common(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("bench", help="serial vs global encode cost report")
    p.add_argument("--resolutions", default="64,128,256", help="comma list of N or WxH")
    p.add_argument("--modes", default="serial,global", help=f"comma list from {','.join(MODES)}")
    p.add_argument("--branch", choices=("small", "large"))
    p.add_argument("--ckpt", help="engine checkpoint (default: fresh init from --seed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--max-tiles", type=int, help="tile budget (default: no downscaling)")
    p.add_argument("--attention-cap-mb", type=float, default=DEFAULT_ATTENTION_CAP / 2**20)
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column")
    p.add_argument("--out", default="report.csv")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("score", help="evaluate predictions against truth CSVs")
    p.add_argument("--metric", required=True, choices=tuple(SCORERS))
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("replay", help="re-run a manifest and compare output digests")
    p.add_argument("manifest_file")
    p.set_defaults(func=cmd_replay)

    parser.epilog = _flag_listing(sub)
    parser.formatter_class = argparse.RawDescriptionHelpFormatter
    return parser


def _flag_listing(sub) -> str:
    lines = ["flags by command:"]
    for name, p in sub.choices.items():
        flags = []
        for a in p._actions:
            if isinstance(a, argparse._HelpAction):
                continue
            flags.append("/".join(a.option_strings) if a.option_strings else a.dest.upper())
        lines.append(f"  {name}: {' '.join(flags)}")
    lines.append("exit codes: 0 ok, 1 engine error, 2 usage error")
    return "\n".join(lines)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 2
    try:
        run = load_config(args.config) if getattr(args, "config", None) else RunConfig()
        seed, outputs = args.func(args, run)
        if seed != "skip":
            target = args.manifest or (f"{outputs[0]}.manifest.json" if outputs else f"{args.command}.manifest.json")
            write_manifest(target, argv, run, seed, outputs)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
