"""Command-line entry point (``sfc``).

Exit codes: 0 success, 2 config error, 3 dependency error, 4 data error,
5 decode error. The workspace defaults to ``$SFC_OUTPUT`` (or
``runs/default``) and can be overridden with ``--workspace``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, SFCError

log = logging.getLogger("sfcodec")


def _workspace(args):
    from .pipeline import Workspace

    return Workspace(args.workspace)


def cmd_synth(args):
    from .synthetic import make_corpus

    make_corpus(args.root, args.identities, args.images, args.size, args.seed)
    print(f"wrote {args.identities} identities x {args.images} images to {args.root}")


def cmd_ingest(args):
    from .config import load_config, paper_config, toy_config
    from .pipeline import ingest_workspace

    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = toy_config() if args.preset == "toy" else paper_config()
    ws = _workspace(args)
    cfg.dataset_root = str(args.root)
    m = ingest_workspace(ws, args.root, cfg)
    counts = {s: len(m.identities(s)) for s in ("train", "val", "test")}
    print(f"manifest {m.content_hash[:16]}: {len(m.entries)} images, identities {counts}")


def _train(args, sweep):
    from .pipeline import STAGES, run_all, run_stage, write_record

    ws = _workspace(args)
    stages = STAGES if args.stage == "all" else [args.stage]
    for s in stages:
        metrics = run_stage(s, ws, sweep=sweep)
        print(f"{s}: done in {metrics['seconds']:.1f}s")
    write_record(ws, "sweep" if sweep else "train", {"stages": list(stages)})


def cmd_train(args):
    _train(args, sweep=False)


def cmd_sweep(args):
    _train(args, sweep=True)


def cmd_encode(args):
    from .pipeline import encode_image, load_models, read_image, write_record

    ws = _workspace(args)
    need = ("extractor", "feature_codec") if args.base_only else ("extractor", "feature_codec", "generator", "enhancement")
    models = load_models(ws, need)
    x = read_image(args.image, ws.config.image_size)
    data = encode_image(x, models, base_only=args.base_only, operating_point=args.operating_point)
    out = Path(args.output or Path(args.image).with_suffix(".sfc"))
    out.write_bytes(data)
    write_record(ws, "encode", {"input": str(args.image), "output": str(out), "bytes": len(data)})
    print(f"{out}: {len(data)} bytes")


def cmd_decode(args):
    from .data import save_image
    from .pipeline import decode_features, decode_image, load_models

    ws = _workspace(args)
    data = Path(args.stream).read_bytes()
    if args.feature:
        models = load_models(ws, ("extractor", "feature_codec"))
        f = decode_features(data, models)
        text = json.dumps([float(v) for v in f])
        if args.output:
            Path(args.output).write_text(text + "\n")
        else:
            print(text)
        return
    models = load_models(ws, ("extractor", "feature_codec", "generator"))
    x = decode_image(data, models)
    out = args.output or str(Path(args.stream).with_suffix(".png"))
    save_image(x, out)
    print(out)


def cmd_eval(args):
    from .pipeline import evaluate, write_record

    ws = _workspace(args)
    res = evaluate(ws, limit=args.limit)
    write_record(ws, "eval")
    print(json.dumps({k: v for k, v in res.items() if k not in ("base_points", "total_points")}, indent=1))


def cmd_curves(args):
    from .evaluation import plot_rate_curve, read_rate_csv

    ws = _workspace(args)
    found = sorted(ws.path("curves").glob("*.csv"))
    if not found:
        raise ConfigError(f"no rate curves in {ws.path('curves')}; run eval first")
    for csv_path in found:
        points = read_rate_csv(csv_path)
        plot_rate_curve(points, csv_path.with_suffix(f".{args.format}"), csv_path.stem)
        for p in sorted(points, key=lambda p: (p.metric_name, p.bpp)):
            print(f"{csv_path.stem}\t{p.layer}\t{p.metric_name}\t{p.bpp:.6f}\t{p.metric_value:.4f}")


def cmd_dump(args):
    from .bitstream import dump

    print(dump(Path(args.stream).read_bytes()))


def cmd_schema(args):
    from .config import config_schema

    print(json.dumps(config_schema(), indent=1))


def build_parser():
    p = argparse.ArgumentParser(prog="sfc", description="Scalable face-image codec: base feature layer + enhancement residual.")
    p.add_argument("--workspace", "-w", help="experiment directory (default: $SFC_OUTPUT or runs/default)")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic face corpus")
    s.add_argument("root")
    s.add_argument("--identities", type=int, default=16)
    s.add_argument("--images", type=int, default=50)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("ingest", help="scan a dataset and write manifest, splits and pairs")
    s.add_argument("root")
    s.add_argument("--config", help="JSON or YAML experiment config")
    s.add_argument("--preset", choices=("toy", "paper"), default="toy")
    s.set_defaults(fn=cmd_ingest)

    stages = ("extractor", "feature_codec", "generator", "enhancement", "all")
    s = sub.add_parser("train", help="train one stage at the configured operating point")
    s.add_argument("stage", choices=stages)
    s.set_defaults(fn=cmd_train)
    s = sub.add_parser("sweep", help="train one stage over its configured sweep")
    s.add_argument("stage", choices=stages)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("encode", help="encode an image to .sfc")
    s.add_argument("image")
    s.add_argument("--output", "-o")
    s.add_argument("--base-only", action="store_true")
    s.add_argument("--operating-point", type=int, default=0, help="enhancement model index in the sweep")
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("decode", help="decode an .sfc stream")
    s.add_argument("stream")
    s.add_argument("--output", "-o")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--feature", action="store_true", help="base-layer feature only (JSON)")
    g.add_argument("--image", action="store_true", help="full reconstruction (default)")
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("eval", help="rate-accuracy and rate-distortion evaluation on the test split")
    s.add_argument("--limit", type=int, help="evaluate the enhancement layer on the first N test images")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("curves", help="re-plot and print the rate curves written by eval")
    s.add_argument("--format", choices=("png", "svg"), default="png")
    s.set_defaults(fn=cmd_curves)

    s = sub.add_parser("dump", help="print the layout of an .sfc stream")
    s.add_argument("stream")
    s.set_defaults(fn=cmd_dump)

    s = sub.add_parser("schema", help="print the config JSON schema")
    s.set_defaults(fn=cmd_schema)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except SFCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
