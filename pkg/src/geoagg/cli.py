"""Command-line driver.

Every failure prints one line ``error: <code>: <message>`` on stderr and exits
with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .aggregation import run_pipeline
from .anchors import build_anchor_bank, compute_anchors
from .config import ConfigError, RunConfig, load_run_config, preset
from .fpfh import FpfhParams, compute_fpfh
from .formats import (FormatError, read_anchor_bank, read_labels, read_ply,
                      read_tensor, write_anchor_bank, write_labels,
                      write_tensor)
from .superpoints import init_seeds, refine
from .tasks import ViewProjection, accuracy, classify, fuse_views, miou, segment


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    name = getattr(args, "preset", None)
    if name:
        pipe, geo = preset(name)
        return RunConfig(pipe, geo, name)
    raise CliError("missing_config", "pass --config or --preset")


def _matrix(path, what, rows=None):
    arr = read_tensor(path)
    if arr.ndim != 2:
        raise CliError("dimension_mismatch", f"{what} must be a 2-d tensor, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise CliError("dimension_mismatch",
                       f"{what} has {arr.shape[0]} rows but the cloud has {rows} points")
    return arr.astype(np.float64)


def cmd_fpfh(args):
    cloud = read_ply(args.input)
    if args.config or args.preset:
        params = _run_config(args).fpfh
    else:
        missing = [k for k in ("m_ref", "k3", "k4", "r1", "r2") if getattr(args, k) is None]
        if missing:
            raise CliError("missing_config", "pass --preset, --config or all of "
                           "--m-ref --k3 --k4 --r1 --r2")
        params = FpfhParams(args.m_ref, args.k3, args.k4, args.r1, args.r2)
    write_tensor(args.out, compute_fpfh(cloud, params, start=args.start))


def cmd_fuse_views(args):
    views = []
    for path in args.view:
        arr = _matrix(path, f"view {path}")
        if arr.shape[1] < 3:
            raise CliError("dimension_mismatch", f"view {path} needs columns index, weight, features")
        idx = arr[:, 0]
        if np.any(idx != np.round(idx)):
            raise CliError("bad_view", f"view {path} has non-integer point indices")
        views.append(ViewProjection(idx.astype(np.int64), arr[:, 2:], arr[:, 1]))
    feats, valid = fuse_views(views, args.n)
    write_tensor(args.out, feats)
    if args.mask_out:
        write_labels(args.mask_out, valid.astype(np.int64))


def cmd_aggregate(args):
    cloud = read_ply(args.cloud)
    vlm = _matrix(args.vlm, "VLM features", cloud.n)
    geo = _matrix(args.geo, "geometric features", cloud.n)
    cfg = _run_config(args)
    anchors = read_anchor_bank(args.anchors) if args.anchors else None
    workers = args.workers if args.workers > 0 else (os.cpu_count() or 1)
    result = run_pipeline(cloud, vlm, geo, cfg.pipeline, external_anchors=anchors,
                          workers=workers)
    write_tensor(args.out, result.features)
    if args.report:
        report = dict(result.report)
        report["config"] = cfg.preset
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=2, default=float)


def cmd_classify(args):
    feats = _matrix(args.features, "features")
    text = _matrix(args.text, "text features")
    aux = _matrix(args.aux, "aux global features") if args.aux else None
    if text.shape[1] != feats.shape[1] or (aux is not None and aux.shape[1] != feats.shape[1]):
        raise CliError("dimension_mismatch", "feature, text and aux dimensions differ")
    label, _ = classify(feats, text, aux_global=aux)
    write_labels(args.out, [label])


def cmd_segment(args):
    feats = _matrix(args.features, "features")
    text = _matrix(args.text, "text features")
    if text.shape[1] != feats.shape[1]:
        raise CliError("dimension_mismatch", "feature and text dimensions differ")
    write_labels(args.out, segment(feats, text))


def cmd_eval(args):
    pred = read_labels(args.pred)
    if args.gt.lower().endswith(".ply"):
        gt = read_ply(args.gt).labels
        if gt is None:
            raise CliError("missing_labels", f"{args.gt} has no label property")
    else:
        gt = read_labels(args.gt)
    if pred.size != gt.size:
        raise CliError("length_mismatch", f"pred has {pred.size} labels, gt has {gt.size}")
    if args.metric == "accuracy":
        print(f"accuracy {accuracy(pred, gt)}")
        return
    n_classes = args.n_classes
    if n_classes is None:
        n_classes = int(max(pred.max(), gt.max())) + 1
    print(f"miou {miou(pred, gt, n_classes).miou}")


def cmd_anchors(args):
    if args.merge:
        bank = build_anchor_bank([read_anchor_bank(p) for p in args.merge])
        write_anchor_bank(args.out, bank)
        return
    if not (args.cloud and args.vlm and args.geo):
        raise CliError("missing_input", "anchors --save needs --cloud, --vlm and --geo")
    cloud = read_ply(args.cloud)
    vlm = _matrix(args.vlm, "VLM features", cloud.n)
    geo = _matrix(args.geo, "geometric features", cloud.n)
    cfg = _run_config(args).pipeline
    cfg.check_cloud_size(cloud.n)
    state = refine(init_seeds(cloud, geo, vlm, cfg.n_super, cfg.fps_start), cloud, geo, vlm, cfg)
    anchors, _ = compute_anchors(vlm, geo, state.seeds_f, state.seeds_g,
                                 neighbor_rank=cfg.bandwidth_rank, iters=cfg.ms_iters,
                                 require_both=cfg.nms_require_both)
    write_anchor_bank(args.out, anchors)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoagg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fpfh", help="compute FPFH descriptors for a PLY cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset")
    p.add_argument("--config")
    p.add_argument("--m-ref", dest="m_ref", type=int)
    p.add_argument("--k3", type=int)
    p.add_argument("--k4", type=int)
    p.add_argument("--r1", type=float)
    p.add_argument("--r2", type=float)
    p.add_argument("--start", type=int, default=0, help="FPS start index")
    p.set_defaults(func=cmd_fpfh)

    p = sub.add_parser("fuse-views", help="fuse back-projected view features")
    p.add_argument("--view", action="append", required=True,
                   help="tensor with columns [point_index, weight, features...]")
    p.add_argument("--n", type=int, required=True, help="number of points")
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", help="write the 0/1 validity mask, one per line")
    p.set_defaults(func=cmd_fuse_views)

    p = sub.add_parser("aggregate", help="run the aggregation pipeline")
    p.add_argument("--cloud", required=True)
    p.add_argument("--vlm", required=True)
    p.add_argument("--geo", required=True)
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--anchors")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--workers", type=int, default=1, help="0 means one per CPU")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("classify", help="zero-shot shape classification")
    p.add_argument("--features", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--aux")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("segment", help="zero-shot per-point segmentation")
    p.add_argument("--features", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metric", choices=["miou", "accuracy"], default="miou")
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("anchors", help="save or merge anchor banks")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--save", action="store_true", help="compute anchors for one cloud")
    mode.add_argument("--merge", nargs="+", metavar="BANK")
    p.add_argument("--cloud")
    p.add_argument("--vlm")
    p.add_argument("--geo")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_anchors)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except FormatError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = "config_error", str(exc)
    except FileNotFoundError as exc:
        code, msg = "file_not_found", f"{exc.filename}"
    except ValueError as exc:
        code, msg = "invalid_input", str(exc)
    else:
        return 0
    print(f"error: {code}: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
