"""Command-line front end: ``sketchgait <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 external-tool error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, pipeline, synthetic
from .config import load_config
from .errors import DataError, SketchGaitError
from .evaluation import format_table


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 rather than argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p, jobs=False):
    p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="worker processes over sequences")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sketchgait")
    parser.add_argument("--version", action="version", version=f"sketchgait {__version__}")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthetic", help="render the stick-figure benchmark dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--identities", "--synthetic", type=int, default=10, dest="identities")
    p.add_argument("--seqs-per-condition", type=int, default=3)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequence-seed", type=int, default=None,
                   help="re-render the same identities with different sequences")
    _add_common(p)

    p = sub.add_parser("prep", help="validate a manifest and write the sorted index")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("build-modality", help="build sketch/silhouette/parsing records")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p, jobs=True)

    p = sub.add_parser("extract", help="compute per-branch sequence descriptors")
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p, jobs=True)

    p = sub.add_parser("train", help="train the metric head")
    p.add_argument("--descriptors", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=None, help="protocol override")
    _add_common(p)

    p = sub.add_parser("evaluate", help="gallery/probe Rank-k evaluation")
    p.add_argument("--descriptors", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--head", type=Path, default=None, help="trained head; identity projection if omitted")
    p.add_argument("--manifest", type=Path, default=None, help="protocol override")
    _add_common(p)

    p = sub.add_parser("report", help="print an evaluation as a table")
    p.add_argument("--eval", type=Path, required=True, dest="eval_json")
    p.add_argument("--out", type=Path, default=None)
    _add_common(p)
    return parser


def _run(args) -> int:
    cmd = args.command
    cfg = load_config(args.config)
    if cmd == "synthetic":
        path = synthetic.generate(args.out, args.identities, args.seqs_per_condition, args.frames, args.seed,
                                  sequence_seed=args.sequence_seed)
        pipeline.write_run_files(args.out, cfg)
        print(path)
        return 0
    if cmd == "report":
        try:
            report = json.loads(args.eval_json.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read {args.eval_json}: {exc}") from exc
        text = format_table(report)
        if args.out:
            args.out.write_text(text)
        sys.stdout.write(text)
        return 0
    if cmd == "prep":
        print(json.dumps(pipeline.prep(args.manifest, cfg, args.out), sort_keys=True))
        return 0

    if cmd == "build-modality":
        summary = pipeline.build_modality(args.manifest, cfg, args.out, args.jobs)
        print(json.dumps({k: v for k, v in summary.items() if k != "skips"}, sort_keys=True))
        frames = summary["frames"]
        if frames["total"] > 0 and frames["ok"] == 0:
            tool_fail = summary["skips"] and all(s["error"] == "ExternalToolError" for s in summary["skips"])
            err = {"error": "NoFramesBuilt", "message": "every frame was skipped",
                   "exit_code": 3 if tool_fail else 2}
            (args.out / "error.json").write_text(json.dumps(err, indent=1, sort_keys=True))
            print(f"error: {err['message']}", file=sys.stderr)
            return err["exit_code"]
        return 0
    if cmd == "extract":
        ds = pipeline.extract(args.records, cfg, args.out, args.jobs)
        print(json.dumps({"sequences": len(ds.metas), "layout": ds.layout()}, sort_keys=True))
        return 0
    if cmd == "train":
        head = pipeline.train(args.descriptors, cfg, args.out, args.manifest)
        print(json.dumps({"branches": list(head.branches), "classes": len(head.classes)}))
        return 0
    if cmd == "evaluate":
        report = pipeline.evaluate(args.descriptors, cfg, args.out, args.manifest, args.head)
        sys.stdout.write(format_table(report))
        return 0
    raise AssertionError(cmd)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except SketchGaitError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        if getattr(exc, "diagnostics", None):
            err["diagnostics"] = exc.diagnostics
        out = getattr(args, "out", None)
        if out is not None:
            # report's --out names a file; every other --out is a directory
            out = Path(out).parent if args.command == "report" else Path(out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(err, indent=1, sort_keys=True, default=str))
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
