"""Command-line harness: scene generation, attacks, detection, evaluation, comparison.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from nucuap import __version__, plotting, reporting
from nucuap.config import RunConfig, load_config, preset_names
from nucuap.detector import BlobDetector
from nucuap.errors import ConfigError, FrameIOError, MetricError, NumericalError
from nucuap.metrics import average_ranks, evaluate_attack
from nucuap.scene import (
    FrameSequence,
    generate_scene,
    load_frames,
    load_tensor,
    save_tensor,
    write_frames,
    write_ground_truth,
)
from nucuap.solvers import METHODS, apply_perturbation, ao_exp_attack, fw_nucl_attack, lora_pgd_attack

log = logging.getLogger("nucuap")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

_ITER_SECTION = {"ao-exp": "ao_exp", "ao-exp-lora": "ao_exp", "lora-pgd": "lora_pgd",
                 "fw-nucl": "fw_nucl"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="INI config file")
    g.add_argument("--preset", choices=preset_names(), help="bundled preset applied before --config")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    g.add_argument("--out", type=Path, help="output directory")
    g.add_argument("--seed", type=int, help="run seed (also the scene seed unless set)")
    g.add_argument("--workers", type=int, help="threads for per-frame gradients")
    g.add_argument("--frames-dir", type=Path, help="read frames from a directory instead of a scene")
    s = common.add_argument_group("solver")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--lambda1", type=float, help="nuclear-norm weight")
    s.add_argument("--lambda2", type=float, help="squared Frobenius weight")
    s.add_argument("--iters", type=int, help="iterations of the selected method")
    s.add_argument("--top-k", type=int, help="singular values kept by AO-Exp")
    s.add_argument("--rank-frac", type=float, help="LoRa-PGD rank as a fraction of min(H, W)")
    s.add_argument("--nuclear-budget", type=float, help="LoRa-PGD nuclear budget per channel")
    s.add_argument("--epsilon", type=float, help="FW-Nucl ball radius")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="nucuap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-scene", parents=[common], help="write a synthetic frame sequence")
    sub.add_parser("attack", parents=[common], help="compute a universal perturbation")
    sub.add_parser("detect", parents=[common], help="run the detector on frames")
    p = sub.add_parser("eval", parents=[common], help="score a perturbation or attacked frames")
    p.add_argument("--delta", type=Path, help="perturbation tensor file")
    p.add_argument("--adv-dir", type=Path, help="directory of attacked frames")
    p = sub.add_parser("compare", parents=[common], help="rank methods from report CSVs")
    p.add_argument("reports", nargs="*", type=Path, help="report CSV files (two or more)")
    return parser


def _overrides(args, method: str | None) -> dict:
    o = {
        ("run", "out"): args.out,
        ("run", "seed"): args.seed,
        ("run", "workers"): args.workers,
        ("run", "frames_dir"): args.frames_dir,
        ("run", "method"): args.method,
        ("regularizer", "lambda1"): args.lambda1,
        ("regularizer", "lambda2"): args.lambda2,
        ("ao_exp", "top_k"): args.top_k,
        ("lora_pgd", "rank_frac"): args.rank_frac,
        ("lora_pgd", "nuclear_budget"): args.nuclear_budget,
        ("fw_nucl", "epsilon"): args.epsilon,
    }
    if args.iters is not None and method is not None:
        o[(_ITER_SECTION[method], "iterations")] = args.iters
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        o[(section, name)] = value.strip()
    return o


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args, None), args.preset)
    if args.iters is not None:
        cfg = load_config(args.config, _overrides(args, cfg.method), args.preset)
    return cfg


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(f"# config hash {cfg.hash()}\n" + cfg.effective_ini())


def load_sequence(cfg: RunConfig) -> FrameSequence:
    if cfg.frames_dir is not None:
        return load_frames(cfg.frames_dir)
    return generate_scene(cfg.scene)[0]


def _instance(cfg: RunConfig) -> str:
    if cfg.frames_dir is not None:
        return cfg.frames_dir.name
    return f"scene-seed{cfg.scene.background.seed}"


def run_attack(cfg: RunConfig, seq: FrameSequence, detector: BlobDetector):
    kw = {"weights": cfg.weights, "tau": cfg.tau, "workers": cfg.workers}
    if cfg.method in ("ao-exp", "ao-exp-lora"):
        return ao_exp_attack(seq, detector, cfg.ao_exp, **kw)
    if cfg.method == "lora-pgd":
        return lora_pgd_attack(seq, detector, cfg.lora_pgd, **kw)
    return fw_nucl_attack(seq, detector, cfg.fw_nucl, **kw)


def cmd_gen_scene(cfg: RunConfig) -> int:
    if cfg.scene is None:
        raise ConfigError("gen-scene needs a [scene] configuration, not frames_dir")
    seq, gt = generate_scene(cfg.scene)
    write_frames(seq, cfg.out / "frames")
    write_ground_truth(gt, cfg.scene, cfg.out / "ground_truth.json")
    _write_config(cfg, cfg.out)
    print(f"wrote {len(seq)} frames of {seq.height}x{seq.width}x{seq.channels} "
          f"to {cfg.out / 'frames'}")
    return EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    seq = load_sequence(cfg)
    detector = BlobDetector(cfg.detector_for(seq.channels))
    log.info("running %s on %d frames", cfg.method, len(seq))
    result = run_attack(cfg, seq, detector)
    # the stored tensor is float32, so everything downstream uses that precision
    delta = result.delta.astype(np.float32).astype(np.float64)
    adv = apply_perturbation(seq, delta)
    out = cfg.out
    _write_config(cfg, out)
    save_tensor(delta.astype(np.float32), out / "delta.uapt")
    reporting.write_trace_csv(out / "trace.csv", result.trace)
    write_frames(adv, out / "adv_frames")
    report = evaluate_attack(seq, adv, delta, detector, method=cfg.method,
                             instance=_instance(cfg), config_hash=cfg.hash())
    reporting.write_report_csv(out / "report.csv", report)
    plotting.plot_trace(result.trace, out / "trace.svg", title=cfg.method)
    plotting.plot_report(report, out / "report.svg")
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_detect(cfg: RunConfig) -> int:
    seq = load_sequence(cfg)
    detector = BlobDetector(cfg.detector_for(seq.channels))
    per_frame = [detector.forward(x)[1] for x in seq.frames]
    reporting.write_detections_csv(cfg.out / "detections.csv", per_frame)
    plotting.plot_detections(seq.frames, per_frame, cfg.out / "detections.svg")
    _write_config(cfg, cfg.out)
    for b, dets in enumerate(per_frame):
        print(f"frame {b}: {len(dets)} detection(s)")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, delta_path: Path | None, adv_dir: Path | None) -> int:
    if (delta_path is None) == (adv_dir is None):
        raise UsageError("eval needs exactly one of --delta or --adv-dir")
    seq = load_sequence(cfg)
    detector = BlobDetector(cfg.detector_for(seq.channels))
    if delta_path is not None:
        delta = load_tensor(delta_path).astype(np.float64)
        if delta.ndim == 2:
            delta = delta[:, :, None]
        if delta.shape != seq.frame_shape:
            raise MetricError(f"delta shape {delta.shape} does not match frames {seq.frame_shape}")
        adv = apply_perturbation(seq, delta)
    else:
        adv = load_frames(adv_dir)
        if adv.frames.shape != seq.frames.shape:
            raise MetricError(
                f"attacked frames {adv.frames.shape} do not match clean frames {seq.frames.shape}"
            )
        # frame-mean difference stands in for the universal perturbation
        delta = (adv.frames.astype(np.float64) - seq.frames.astype(np.float64)).mean(axis=0)
    report = evaluate_attack(seq, adv, delta, detector, method=cfg.method,
                             instance=_instance(cfg), config_hash=cfg.hash())
    reporting.write_report_csv(cfg.out / "report.csv", report)
    plotting.plot_report(report, cfg.out / "report.svg")
    _write_config(cfg, cfg.out)
    sys.stdout.write(report.summary())
    return EXIT_OK


def rank_reports(paths):
    """Labels, per-metric values, per-metric ranks and average ranks of report files.

    Reports form a methods x instances grid when every (method, instance)
    pair appears exactly once and the grid is complete; otherwise each file
    is its own entry on a single instance.
    """
    reports = [reporting.read_report_csv(p) for p in paths]
    keys = [(r.method, r.instance) for r in reports]
    methods = list(dict.fromkeys(k[0] for k in keys))
    instances = list(dict.fromkeys(k[1] for k in keys))
    names = [m for m, _ in reporting.RANK_METRICS]
    if len(set(keys)) == len(keys) == len(methods) * len(instances) and len(methods) >= 2:
        lookup = dict(zip(keys, reports))
        labels = methods
        grid = np.array([[[reporting.report_metric(lookup[(m, i)], n) for i in instances]
                          for m in methods] for n in names])
    else:
        labels = [Path(p).stem if not r.method else f"{r.method}:{Path(p).stem}"
                  for p, r in zip(paths, reports)]
        grid = np.array([[[reporting.report_metric(r, n)] for r in reports] for n in names])
    flags = [lower for _, lower in reporting.RANK_METRICS]
    per_metric = np.array([average_ranks(grid[m], flags[m]) for m in range(len(names))])
    average = average_ranks(grid, flags)
    return labels, grid.mean(axis=2), per_metric, average


def cmd_compare(cfg: RunConfig, paths) -> int:
    if len(paths) < 2:
        raise UsageError("compare needs at least two report CSV files")
    labels, values, per_metric, average = rank_reports(paths)
    names = [m for m, _ in reporting.RANK_METRICS]
    reporting.write_rank_csv(cfg.out / "ranks.csv", labels, per_metric, average, values)
    plotting.plot_comparison(labels, names, values, average, cfg.out / "compare.svg")
    width = max(len(s) for s in labels + ["method"])
    print(f"{'method':<{width}}  " + "  ".join(f"{n:>12}" for n in names) + "  average_rank")
    for i, label in enumerate(labels):
        cells = "  ".join(f"{values[m][i]:>12.5g}" for m in range(len(names)))
        print(f"{label:<{width}}  {cells}  {average[i]:>12.3f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        if args.command == "gen-scene":
            return cmd_gen_scene(cfg)
        if args.command == "attack":
            return cmd_attack(cfg)
        if args.command == "detect":
            return cmd_detect(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.delta, args.adv_dir)
        return cmd_compare(cfg, args.reports)
    except (UsageError, ConfigError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FrameIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
