"""Command-line entry point.

Exit codes: 0 success, 1 failed verification or failed external call,
2 bad input (unreadable or invalid files and arguments).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import keyframes as kf
from .harness.data import Dataset, SyntheticDatasetSpec, generate
from .harness.experiment import Variant, run_experiment
from .harness.metrics import evaluate
from .harness.persist import Checkpoint, load_checkpoint, read_json, save_checkpoint, write_json, write_traces
from .harness.verify import SUITES, run_suite
from .metaopt import TrainConfig, train

log = logging.getLogger("metamargin")

EXIT_OK, EXIT_FAILED, EXIT_BAD_INPUT = 0, 1, 2


class BadInput(Exception):
    pass


def _load(path, what):
    try:
        return read_json(path)
    except OSError as exc:
        raise BadInput(f"cannot read {what} {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadInput(f"{what} {path} is not valid JSON: {exc}") from exc


def _parse_grid(text: str):
    """``"3x4"`` means 3 rows of 4 columns."""
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise BadInput(f"grid must look like ROWSxCOLS, got {text!r}") from exc
    return cols, rows


def cmd_gen_data(args) -> int:
    spec = SyntheticDatasetSpec.from_dict(_load(args.spec, "dataset spec"))
    generate(spec).save(args.out)
    return EXIT_OK


def _load_dataset(path) -> Dataset:
    return Dataset.from_dict(_load(path, "dataset"))


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_load(args.config, "config"))
    data = _load_dataset(args.data)
    Theta, theta, traces = train(cfg, data.train.as_batch(), data.meta.as_batch())
    save_checkpoint(args.out, Checkpoint(Theta, theta, cfg.steps, cfg))
    if args.trace:
        write_traces(args.trace, traces)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ckpt = Checkpoint.from_dict(_load(args.ckpt, "checkpoint"))
    except (KeyError, TypeError) as exc:
        raise BadInput(f"malformed checkpoint {args.ckpt}: {exc}") from exc
    data = _load_dataset(args.data)
    report = evaluate(ckpt.encoder_params, data.test, args.variant)
    write_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_keyframes(args) -> int:
    frames = kf.FrameFeatures.from_dict(_load(args.frames, "frame features"))
    w, h = _parse_grid(args.grid)
    if w * h != args.q:
        raise BadInput(f"grid {args.grid} holds {w * h} frames but --q is {args.q}")
    sel = kf.select_keyframes(frames, args.k, args.q, squared_far=not args.literal_far)
    layout = kf.plan_grid(sel, w, h)
    write_json(
        args.out,
        {"video_id": frames.video_id, "selection": sel.to_dict(), "grid": {"w": w, "h": h, "order": list(layout.order)}},
    )
    return EXIT_OK


def cmd_caption_request(args) -> int:
    doc = _load(args.selection, "selection")
    try:
        grid = doc["grid"]
        layout = kf.GridLayout(int(grid["w"]), int(grid["h"]), tuple(int(i) for i in grid["order"]))
        request = kf.build_caption_request(doc["video_id"], layout)
    except (KeyError, TypeError) as exc:
        raise BadInput(f"malformed selection {args.selection}: {exc}") from exc
    if args.backend == "http":
        if not args.endpoint:
            raise BadInput("--endpoint is required for the http backend")
        backend = kf.HttpBackend(args.endpoint, timeout=args.timeout)
    else:
        backend = kf.MockBackend()
    try:
        text = kf.submit_caption_request(request, backend)
    except kf.CaptionTransportError as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    write_json(args.out, kf.augmented_pair(request, text))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_ablate(args) -> int:
    cfg = TrainConfig.from_dict(_load(args.config, "config"))
    spec = SyntheticDatasetSpec.from_dict(_load(args.spec, "dataset spec"))
    variants = _load(args.variants, "variants")
    if not isinstance(variants, list) or not variants:
        raise BadInput("variants file must hold a non-empty JSON list")
    try:
        variants = [Variant.from_dict(v) for v in variants]
    except (KeyError, TypeError) as exc:
        raise BadInput(f"malformed variant: {exc}") from exc
    reports = run_experiment(cfg, spec, variants)
    write_json(args.out, [r.to_dict() for r in reports])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metamargin", description="Angular-margin contrastive training with meta-learned sample weights.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train an encoder and weighting network")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="JSONL file with one record per step")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="retrieval and accuracy on the test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", default="")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("keyframes", help="select key frames and lay them out on a grid")
    s.add_argument("--frames", required=True)
    s.add_argument("--k", type=int, default=6)
    s.add_argument("--q", type=int, default=12)
    s.add_argument("--grid", default="3x4", help="ROWSxCOLS")
    s.add_argument("--literal-far", action="store_true", help="unsquared distance for frames with no denser frame")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_keyframes)

    s = sub.add_parser("caption-request", help="caption a key-frame grid and write the new pair")
    s.add_argument("--selection", required=True)
    s.add_argument("--backend", choices=("mock", "http"), default="mock")
    s.add_argument("--endpoint")
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_caption_request)

    s = sub.add_parser("verify", help="run the built-in oracle suites")
    s.add_argument("--suite", choices=SUITES + ("all",), default="all")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("ablate", help="train several variants on one dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--variants", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BadInput as exc:
        log.error("%s", exc)
        return EXIT_BAD_INPUT
    except (ValueError, KeyError, TypeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
