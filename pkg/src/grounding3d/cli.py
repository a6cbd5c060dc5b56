"""Command-line surface: gradient checks, caption masking, evaluation,
toy training, the IoU oracle, and wireframe overlay export.

Every command is deterministic given --seed, writes a machine-readable
JSON report beside its human-readable output, and follows the exit-code
contract: 0 success, 1 check or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, gradchecks
from . import pipeline as pipe
from .certainty import MaskPolicy, mask_records
from .evaluate import EvalSample, evaluate
from .geometry import Box3D, iou_3d, monte_carlo_iou3d, project_center


def _write_report(path, payload) -> None:
    dataio.atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_gradcheck(args) -> int:
    results = gradchecks.run_scope(args.scope, seed=args.seed)
    worst = max(err for _, err in results)
    ok = worst < gradchecks.THRESHOLD
    print(f"gradient checks: scope={args.scope} seed={args.seed}")
    for name, err in results:
        flag = "ok " if err < gradchecks.THRESHOLD else "FAIL"
        print(f"  [{flag}] {name:45s} {err:.3e}")
    print(f"worst relative error: {worst:.3e} (threshold {gradchecks.THRESHOLD:.0e})")
    _write_report(args.report, {
        "command": "gradcheck", "scope": args.scope, "seed": args.seed,
        "threshold": gradchecks.THRESHOLD, "ok": ok,
        "checks": [{"name": n, "max_rel_error": e} for n, e in results],
    })
    return 0 if ok else 1


def cmd_mask(args) -> int:
    embeddings = dataio.load_embeddings(args.embeddings)
    annotations = dataio.load_annotations(args.annotations)
    missing = sorted(a.sample_id for a in annotations if a.sample_id not in embeddings)
    if missing:
        print(f"error: {len(missing)} annotation ids missing from the embedding file: "
              f"{', '.join(missing[:10])}{'...' if len(missing) > 10 else ''}",
              file=sys.stderr)
        return 1
    records = [embeddings.get(a.sample_id) for a in annotations]
    policy = MaskPolicy(probability=args.probability)
    stream, audits = mask_records(records, policy, seed=args.seed, epoch=args.epoch)
    lines = "".join(f"{sid}\t{' '.join(tokens)}\n" for sid, tokens in stream)
    dataio.atomic_write_text(args.out, lines)
    dataio.atomic_write_text(args.audit, "".join(
        json.dumps(a.to_dict()) + "\n" for a in audits))
    masked = sum(1 for a in audits if a.masked)
    print(f"masked {masked}/{len(audits)} captions -> {args.out}")
    _write_report(args.report, {
        "command": "mask", "probability": args.probability, "seed": args.seed,
        "epoch": args.epoch, "records": len(audits), "masked": masked, "ok": True,
    })
    return 0


def cmd_eval(args) -> int:
    annotations = dataio.load_annotations(args.gt)
    predictions = dataio.load_predictions(args.pred)
    if args.calib_dir is not None and not os.path.isdir(args.calib_dir):
        print(f"error: calib dir {args.calib_dir} does not exist", file=sys.stderr)
        return 1
    by_id = {p.sample_id: p for p in predictions}
    unknown = sorted(set(by_id) - {a.sample_id for a in annotations})
    absent = sorted(a.sample_id for a in annotations if a.sample_id not in by_id)
    if unknown or absent:
        if unknown:
            print(f"error: predictions for unknown sample_ids: {', '.join(unknown[:10])}",
                  file=sys.stderr)
        if absent:
            print(f"error: annotations without predictions: {', '.join(absent[:10])}",
                  file=sys.stderr)
        return 1
    samples = [
        EvalSample(
            sample_id=a.sample_id,
            gt=a.gt_box3d,
            pred=by_id[a.sample_id].box3d,
            category=a.category,
            depth_gt=a.gt_box3d.center[2],
            occlusion=a.occlusion,
            truncation=a.truncation,
            image_id=a.image_id,
        )
        for a in annotations
    ]
    table = evaluate(samples)
    text = table.render_text()
    print(text, end="")
    dataio.atomic_write_text(args.out, text)
    _write_report(args.report, {"command": "eval", "ok": True, **table.to_dict()})
    return 0


def cmd_toy(args) -> int:
    config_path = args.config or os.environ.get("GROUNDING3D_CONFIG")
    if config_path:
        run_cfg = dataio.load_config(config_path)
        toy_cfg = pipe.ToyConfig.from_dict({"seed": run_cfg.seed, **run_cfg.toy})
    else:
        toy_cfg = pipe.ToyConfig(seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)

    result = pipe.train_toy(toy_cfg)
    probe = pipe.probe_decoupling(result.params, toy_cfg, seed=toy_cfg.seed + 9000)
    trace_path = os.path.join(args.out_dir, "trace.jsonl")
    dataio.atomic_write_text(trace_path, "".join(
        json.dumps({"epoch": i, "loss": v}) + "\n" for i, v in enumerate(result.trace)))
    probe_path = os.path.join(args.out_dir, "probe.jsonl")
    dataio.atomic_write_text(probe_path, json.dumps(
        {"seed": toy_cfg.seed, **probe.to_dict()}) + "\n")
    ckpt_path = os.path.join(args.out_dir, "params.ckpt")
    dataio.save_checkpoint(pipe.named_parameters(result.params), ckpt_path)

    halved = result.final_loss < 0.5 * result.initial_loss
    gap_ok = probe.gap >= 0.2
    print(f"toy run: seed={toy_cfg.seed} epochs={toy_cfg.epochs}")
    print(f"  loss: {result.initial_loss:.3f} -> {result.final_loss:.3f} "
          f"({'halved' if halved else 'NOT halved'})")
    print(f"  probe: matched={probe.matched:.3f} crossed={probe.crossed:.3f} "
          f"gap={probe.gap:+.3f} ({'ok' if gap_ok else 'BELOW 0.2'})")
    _write_report(args.report, {
        "command": "toy", "seed": toy_cfg.seed, "epochs": toy_cfg.epochs,
        "initial_loss": result.initial_loss, "final_loss": result.final_loss,
        "loss_halved": halved, "probe": probe.to_dict(),
        "checkpoint": ckpt_path, "trace": trace_path, "probe_path": probe_path,
        "ok": bool(halved and gap_ok),
    })
    return 0 if (halved and gap_ok) else 1


def cmd_iou_oracle(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    failures = 0
    for i in range(args.n):
        center = (rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(4, 30))
        dims = tuple(rng.uniform(0.5, 4.0, size=3))
        a = Box3D(center, dims, rng.uniform(-np.pi, np.pi))
        b = Box3D(tuple(np.asarray(center) + rng.uniform(-1.5, 1.5, 3)),
                  tuple(np.maximum(0.3, np.asarray(dims) + rng.uniform(-0.5, 0.5, 3))),
                  a.yaw + rng.uniform(-0.6, 0.6))
        exact = iou_3d(a, b)
        estimate, stderr = monte_carlo_iou3d(a, b, n_samples=args.samples,
                                             seed=int(rng.integers(1 << 31)))
        deviation = abs(exact - estimate)
        tolerance = max(0.005, 4.0 * stderr)
        worst = max(worst, deviation)
        if deviation > tolerance:
            failures += 1
    ok = failures == 0
    print(f"iou oracle: {args.n} pairs x {args.samples} samples, "
          f"max deviation {worst:.5f}, failures {failures}")
    _write_report(args.report, {
        "command": "iou-oracle", "n": args.n, "samples": args.samples,
        "seed": args.seed, "max_deviation": worst, "failures": failures, "ok": ok,
    })
    return 0 if ok else 1


BOX_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0),
             (4, 5), (5, 6), (6, 7), (7, 4),
             (0, 4), (1, 5), (2, 6), (3, 7))


def cmd_render(args) -> int:
    annotations = dataio.load_annotations(args.annotations)
    match = [a for a in annotations if a.sample_id == args.sample_id]
    if not match:
        print(f"error: sample_id {args.sample_id!r} not found", file=sys.stderr)
        return 1
    record = match[0]
    calib = dataio.load_calib(args.calib)
    corners = record.gt_box3d.corners()
    if np.any(corners[:, 2] <= 0.0):
        print("error: box extends behind the camera; cannot project", file=sys.stderr)
        return 1
    pts = [project_center(c, calib) for c in corners]
    lines = [f'<line x1="{pts[i][0]:.2f}" y1="{pts[i][1]:.2f}" '
             f'x2="{pts[j][0]:.2f}" y2="{pts[j][1]:.2f}" '
             'stroke="lime" stroke-width="2"/>' for i, j in BOX_EDGES]
    b2 = record.gt_box2d
    rect = (f'<rect x="{b2.left:.2f}" y="{b2.top:.2f}" width="{b2.right - b2.left:.2f}" '
            f'height="{b2.bottom - b2.top:.2f}" stroke="red" fill="none"/>')
    width = max(p[0] for p in pts) + 50
    height = max(p[1] for p in pts) + 50
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
           f'height="{height:.0f}">\n  ' + "\n  ".join([rect] + lines) + "\n</svg>\n")
    dataio.atomic_write_text(args.out, svg)
    print(f"wrote wireframe overlay for {args.sample_id} -> {args.out}")
    _write_report(args.report, {
        "command": "render", "sample_id": args.sample_id, "out": args.out, "ok": True,
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grounding3d",
        description="Desk-scale monocular 3D grounding numerics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=gradchecks.SCOPES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="gradcheck_report.json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mask", help="mask high-certainty caption words")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--probability", "-p", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--audit", default="mask_audit.jsonl")
    p.add_argument("--report", default="mask_report.json")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("eval", help="nine-scenario accuracy tables")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--calib-dir", default=None)
    p.add_argument("--out", default="eval_tables.txt")
    p.add_argument("--report", default="eval_report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy", help="train the toy pipeline and probe decoupling")
    p.add_argument("--config", default=None,
                   help="run config JSON (default: $GROUNDING3D_CONFIG)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="toy_run")
    p.add_argument("--report", default="toy_report.json")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("iou-oracle", help="analytic vs Monte-Carlo 3D IoU")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--samples", type=int, default=250_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="iou_oracle_report.json")
    p.set_defaults(func=cmd_iou_oracle)

    p = sub.add_parser("render", help="SVG wireframe overlay of a GT box")
    p.add_argument("--annotations", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default="render_report.json")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (dataio.FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
