"""Command line entry point: ``marank {gen-synth,run,compare} --config C --out D``.

Exit codes: 0 on success, 2 on an invalid config, 1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiment import ConfigError, StageError, compare, load_compare_config, load_config, run
from .synth import gen_synthetic

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
SYNTH_KEYS = {"version", "n_sessions", "n_items", "feature_dim", "seed", "label_noise", "filename"}


def _synth_config(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise ConfigError("config needs \"version\": 1")
    if set(doc) - SYNTH_KEYS:
        raise ConfigError(f"unknown gen-synth keys {sorted(set(doc) - SYNTH_KEYS)}")
    for key in ("n_sessions", "n_items", "feature_dim", "seed"):
        value = doc.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or value < (0 if key == "seed" else 1):
            raise ConfigError(f"{key} must be a {'non-negative' if key == 'seed' else 'positive'} integer")
    noise = doc.get("label_noise", 0.3)
    if not isinstance(noise, (int, float)) or noise < 0:
        raise ConfigError("label_noise must be a number >= 0")
    name = doc.get("filename", "synthetic.txt")
    if not isinstance(name, str) or Path(name).name != name:
        raise ConfigError("filename must be a plain file name")
    return dict(doc, label_noise=float(noise), filename=name)


def _gen_synth(args) -> None:
    doc = _synth_config(Path(args.config))
    path = gen_synthetic(doc["n_sessions"], doc["n_items"], doc["feature_dim"], doc["seed"],
                         Path(args.out) / doc["filename"], doc["label_noise"])
    print(path)


def _run(args) -> None:
    report = run(load_config(args.config), args.out)
    print(json.dumps(report.summary, sort_keys=True))


def _compare(args) -> None:
    summary = compare(load_compare_config(args.config), args.out)
    print(json.dumps(summary["final_median"], sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, text in [("gen-synth", _gen_synth, "write a seeded synthetic LETOR dataset"),
                           ("run", _run, "run one offline simulation"),
                           ("compare", _compare, "run several configs and join their learning curves")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
