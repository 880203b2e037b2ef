"""Command-line surface for reproducible experiments.

Every command is deterministic under a fixed seed; report commands write
delimited output plus a matplotlib figure next to it.  Exit codes:
0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, hpo, metrics, sim, viz
from .errors import NumericalError, RigidflowError, ValidationError
from .fit import ActionModel, FitOptions, fit_action_model, fit_pair, rollout
from .losses import LossWeights
from .plan import IcemParams, run_servoing


def _parse_weights(text: str) -> LossWeights:
    """Weights from a JSON file path or inline 'l1,...,l6,alpha,knn_k'."""
    path = Path(text)
    if path.exists():
        data = json.loads(path.read_text())
        return LossWeights(**data)
    parts = text.split(",")
    if len(parts) != 8:
        raise ValidationError(
            "inline weights need 8 values: lambda1..lambda6,alpha,knn_k"
        )
    lambdas = [float(p) for p in parts[:6]]
    return LossWeights(*lambdas, alpha=int(parts[6]), knn_k=int(parts[7]))


def _load_icem(path: str | None) -> IcemParams:
    if path is None:
        return IcemParams()
    return IcemParams(**json.loads(Path(path).read_text()))


def cmd_gen_data(args) -> int:
    spec = sim.spec_from_dict(json.loads(Path(args.spec).read_text()))
    sim.generate_dataset(spec, T=args.frames, seed=args.seed, path=args.out)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def cmd_fit(args) -> int:
    seq = dataio.read_sequence(args.data)
    if not 0 <= args.t < seq.T - 1:
        raise ValidationError(f"--t must be in [0, {seq.T - 2}]")
    weights = _parse_weights(args.weights)
    opts = FitOptions(K=args.k, steps=args.steps, lr=args.lr, seed=args.seed)
    model = fit_pair(seq.frame(args.t), seq.frame(args.t + 1), weights, opts)
    dataio.save_model(model, args.out)
    final = model.loss_trace[-1]
    print(
        f"fit pair ({args.t},{args.t + 1}): loss {model.loss_trace[0].total:.6f}"
        f" -> {final.total:.6f} in {len(model.loss_trace) - 1} steps,"
        f" converged={model.converged}"
    )
    return 0


def cmd_fit_actions(args) -> int:
    seq = dataio.read_sequence(args.data)
    if seq.actions is None:
        raise ValidationError("dataset has no actions tensor")
    weights = _parse_weights(args.weights)
    opts = FitOptions(K=args.k, steps=args.steps, lr=args.lr, seed=args.seed)
    dataset = [
        (seq.frame(t), np.asarray(seq.actions[t], dtype=np.float64), seq.frame(t + 1))
        for t in range(seq.T - 1)
    ]
    model = fit_action_model(dataset, K=args.k, w=weights, opts=opts)
    dataio.save_model(model, args.out)
    print(
        f"action model over {len(dataset)} transitions: moving object"
        f" {model.moving_object}, degenerate={model.degenerate}"
    )
    return 0


def cmd_predict(args) -> int:
    seq = dataio.read_sequence(args.data)
    model = dataio.load_model(args.model)
    context = [seq.frame(0)] if seq.T == 1 else [seq.frame(0), seq.frame(1)]
    actions = None
    if args.actions == "from-data":
        if seq.actions is None:
            raise ValidationError("dataset has no actions tensor")
        if not isinstance(model, ActionModel):
            raise ValidationError("--actions requires an action model")
        start = len(context) - 1
        if start + args.horizon > seq.T:
            raise ValidationError("not enough recorded actions for the horizon")
        actions = np.asarray(seq.actions[start : start + args.horizon], np.float64)
    preds = rollout(model, context, actions=actions, steps=args.horizon)
    out = dataio.sequence_from_predictions(
        preds, seq.intr, scene_spec=seq.scene_spec, actions=actions
    )
    dataio.write_sequence(out, args.out)
    print(f"wrote {len(preds)} predicted frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = dataio.read_sequence(args.pred)
    gt = dataio.read_sequence(args.gt)
    if pred.shape != gt.shape:
        raise ValidationError("prediction and ground truth differ in frame size")
    n = min(pred.T, gt.T)
    offset = gt.T - n  # compare against the trailing ground-truth frames
    rows = []
    for i in range(n):
        pf, gf = pred.frame(i), gt.frame(offset + i)
        psnr, ssim_v = metrics.image_metrics(pf.rgb, gf.rgb)
        rmse, absrel = metrics.depth_metrics(pf.depth, gf.depth, gf.valid)
        rows.append(
            {
                "frame": i,
                "psnr_rgb": f"{psnr:.6f}",
                "ssim": f"{ssim_v:.6f}",
                "rmse": f"{rmse:.6f}",
                "absrel": f"{absrel:.6f}",
            }
        )
    with open(args.report, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["frame", "psnr_rgb", "ssim", "rmse", "absrel"]
        )
        writer.writeheader()
        writer.writerows(rows)
    fig_rows = [
        {k: float(v) if k != "frame" else int(v) for k, v in r.items()} for r in rows
    ]
    viz.save_eval_figure(fig_rows, Path(args.report).with_suffix(".png"))
    print(f"wrote {len(rows)} rows to {args.report}")
    return 0


def cmd_plan(args) -> int:
    seq = dataio.read_sequence(args.data)
    if seq.scene_spec is None:
        raise ValidationError("dataset manifest has no scene_spec; cannot rebuild env")
    model = dataio.load_model(args.model)
    if not isinstance(model, ActionModel):
        raise ValidationError("plan requires an action model (see fit-actions)")
    spec = sim.spec_from_dict(seq.scene_spec)
    if spec.action_dim != model.action_dim:
        raise ValidationError("model action_dim does not match the scene")
    goal = np.asarray([float(x) for x in args.goal.split(",")], dtype=np.float64)
    if goal.size != 3:
        raise ValidationError("--goal needs X,Y,Z")
    env = sim.SimEnv(spec, seed=args.seed)
    record = run_servoing(
        env,
        model,
        _load_icem(args.icem),
        budget=args.budget,
        goal=goal,
        seed=args.seed,
        cost_mode=args.cost,
    )
    with open(args.report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["step"]
            + [f"action_{i}" for i in range(model.action_dim)]
            + ["track_x", "track_y", "track_z", "distance"]
        )
        for i, (action, point, dist) in enumerate(record.steps):
            writer.writerow(
                [i]
                + [f"{a:.9f}" for a in np.ravel(action)]
                + [f"{c:.9f}" for c in point]
                + [f"{dist:.9f}"]
            )
    viz.save_servo_figure(record, Path(args.report).with_suffix(".png"))
    print(
        f"episode: success={record.success} hits={record.within_count}"
        f" steps={len(record.steps)} initial={record.initial_distance:.4f}"
    )
    return 0


def cmd_hpo(args) -> int:
    seq = dataio.read_sequence(args.data)
    if seq.T < 2:
        raise ValidationError("need at least two frames for the fit objective")
    space = hpo.SearchSpace.from_dict(json.loads(Path(args.space).read_text()))
    budgets = tuple(int(b) for b in args.ladder.split(","))
    ladder = hpo.RungLadder(budgets=budgets, eta=args.eta)
    base_weights = LossWeights()
    base_opts = FitOptions(K=args.k, seed=args.seed)
    val_pairs = [0] if seq.T == 2 else [0, (seq.T - 1) // 2]

    def objective(config, budget):
        weights = replace(
            base_weights,
            **{
                k: (int(v) if k in ("alpha", "knn_k") else float(v))
                for k, v in config.items()
                if k.startswith("lambda") or k in ("alpha", "knn_k")
            },
        )
        opts = replace(
            base_opts, steps=int(budget), lr=float(config.get("lr", base_opts.lr))
        )
        scores = []
        for t in val_pairs:
            model = fit_pair(seq.frame(t), seq.frame(t + 1), weights, opts)
            pred_frame, _ = rollout(model, [seq.frame(t)], steps=1)[0]
            scores.append(hpo.hpo_metric([pred_frame], [seq.frame(t + 1)]))
        return float(np.mean(scores))

    best, trials = hpo.asha_run(
        space,
        objective,
        ladder,
        workers=args.workers,
        max_trials=args.max_trials,
        seed=args.seed,
    )
    hpo.write_trial_log(trials, args.out)
    print("best configuration:", json.dumps(best, sort_keys=True))
    print(f"trial log written to {args.out}")
    return 0


def cmd_hpo_report(args) -> int:
    trials = hpo.read_trial_log(args.log)
    table = hpo.budget_correlation(trials)
    lines = ["budget_low,budget_high,r,p,n"]
    for row in table:
        lines.append(
            f"{row['budget_low']},{row['budget_high']},"
            f"{row['r']:.6f},{row['p']:.6f},{row['n']}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        if table:
            viz.save_correlation_figure(table, Path(args.out).with_suffix(".png"))
        print(f"wrote correlation table to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_export(args) -> int:
    seq = dataio.read_sequence(args.data)
    t = args.frame
    if args.what == "rgb":
        img = seq.frame(t).rgb
    elif args.what == "depth":
        f = seq.frame(t)
        img = viz.depth_to_rgb(f.depth, f.valid)
    elif args.what == "flow":
        flow = seq.gt_optical_flow
        if flow is None:
            flow = seq.extra.get("pred_optical_flow")
        if flow is None:
            raise ValidationError("dataset has no optical flow tensor")
        if not 0 <= t < flow.shape[0]:
            raise ValidationError(f"flow index {t} out of range")
        img = viz.flow_to_rgb(flow[t].astype(np.float64))
    elif args.what == "occlusion":
        occ = seq.gt_occlusion
        if occ is None:
            occ = seq.extra.get("pred_occlusion")
        if occ is None:
            raise ValidationError("dataset has no occlusion tensor")
        img = np.repeat(occ[t].astype(np.float64)[..., None], 3, axis=-1)
    else:
        raise ValidationError(f"unknown export {args.what!r}")
    viz.write_ppm(img, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rigidflow",
        description="rigid-scene RGB-D dynamics: fit, predict, plan, tune",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit", help="fit masks and twists to one frame pair")
    p.add_argument("--data", required=True)
    p.add_argument("--t", type=int, default=0, help="first frame of the pair")
    p.add_argument("--k", type=int, default=3)
    p.add_argument(
        "--weights",
        default="1,1,1,0.01,0.01,0,2,3",
        help="JSON file or inline lambda1..lambda6,alpha,knn_k",
    )
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-actions", help="fit the action-conditioned model")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--weights", default="1,1,1,0.01,0.01,0,2,3")
    p.add_argument("--steps", type=int, default=12)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_actions)

    p = sub.add_parser("predict", help="roll a fitted model forward")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--actions", choices=["from-data"], default=None)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="output CSV (figure written beside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="closed-loop 3D servoing on the scene")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="action model JSON")
    p.add_argument("--goal", required=True, help="X,Y,Z in meters")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--icem", default=None, help="iCEM params JSON (defaults otherwise)")
    p.add_argument("--cost", choices=["3d", "pixel"], default="3d")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("hpo", help="ASHA search over loss weights and lr")
    p.add_argument("--data", required=True)
    p.add_argument("--space", required=True, help="search space JSON")
    p.add_argument("--ladder", default="2,8,50,200")
    p.add_argument("--eta", type=int, default=4)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-trials", type=int, default=32)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="trial log (JSON lines)")
    p.set_defaults(func=cmd_hpo)

    p = sub.add_parser("hpo-report", help="budget-correlation table from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", default=None, help="CSV path (stdout otherwise)")
    p.set_defaults(func=cmd_hpo_report)

    p = sub.add_parser("export", help="export a frame or flow as PPM")
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--what", choices=["rgb", "depth", "flow", "occlusion"], default="rgb")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except RigidflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
