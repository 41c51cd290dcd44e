"""Command-line front end.

Every run that succeeds writes its primary output(s) plus a JSON report
sitting next to the main output (same name, .json suffix) holding the
resolved parameters and sha256 hashes of all inputs and outputs. Reports
carry no timestamps, so identical invocations produce identical bytes.

Exit codes: 0 success, 1 usage problems, 2 data or format problems.
Angles are taken in degrees on the command line and converted internally.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .deform import (DeformParams, dao_forward, dcn_forward, dcnv2_forward,
                     dcnv3_forward, dcnv4_forward, gradcheck,
                     trace_receptive_field)
from .imgio import _render_offsets_counted, load_image, load_labels, save_image
from .metrics import (Taxonomy, confusion, load_similarity_csv,
                      metric_report, save_similarity_csv,
                      similarity_from_taxonomy)
from .panogeom import (ErpParams, RerpConfig, WarpSpec, horizontal_rotate,
                       rerp_augment, warp_pinhole_to_erp)
from .salience import salience_upper_bound, salient_map
from .tensor import FormatError, Tensor, load_tensor, save_tensor

THREADS_VAR = "PANOPS_THREADS"


class UsageError(Exception):
    """Bad flag combination detected after parsing."""


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, leaving 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _report_path(primary, explicit):
    if explicit:
        return Path(explicit)
    p = Path(primary)
    candidate = p.with_suffix(".json")
    if candidate == p:
        candidate = p.with_suffix(".report.json")
    return candidate


def _write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _write_report(args, primary, parameters, inputs, outputs, extra=None) -> None:
    doc = {
        "command": args.command,
        "parameters": parameters,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    _write_json(doc, _report_path(primary, getattr(args, "report", None)))


def _thread_cap():
    raw = os.environ.get(THREADS_VAR)
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_VAR} must be a non-negative integer, got {raw!r}") from None
    if cap < 0:
        raise UsageError(f"{THREADS_VAR} must be a non-negative integer, got {cap}")
    return cap


def _float_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_pair(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers in 'row,col', got {text!r}")


def _add_erp_args(sub):
    sub.add_argument("--fov-h", type=float, default=90.0,
                     help="horizontal field of view, degrees (default 90)")
    sub.add_argument("--fov-v", type=float, default=90.0,
                     help="vertical field of view, degrees (default 90)")
    sub.add_argument("--out-h", type=int, help="output rows (default: input rows)")
    sub.add_argument("--out-w", type=int, help="output cols (default: input cols)")
    sub.add_argument("--fill", type=int, default=0,
                     help="value for pixels outside the source frame (default 0)")
    sub.add_argument("--interp", choices=("bilinear", "nearest"), default="bilinear")
    sub.add_argument("--radius", type=float, default=1.0)
    sub.add_argument("--lambda0", type=float, default=0.0, help="central meridian, degrees")
    sub.add_argument("--phi0", type=float, default=0.0, help="central parallel, degrees")
    sub.add_argument("--phi1", type=float, default=0.0, help="standard parallel, degrees")


def _warp_config(args):
    out_size = None
    if (args.out_h is None) != (args.out_w is None):
        raise UsageError("--out-h and --out-w must be given together")
    if args.out_h is not None:
        out_size = (args.out_h, args.out_w)
    spec = WarpSpec(fov_h=math.radians(args.fov_h), fov_v=math.radians(args.fov_v),
                    out_size=out_size, fill=args.fill, interpolation=args.interp)
    erp = ErpParams(radius=args.radius, lambda0=math.radians(args.lambda0),
                    phi0=math.radians(args.phi0), phi1=math.radians(args.phi1))
    return spec, erp


def _erp_parameters(args):
    return {"fov_h": args.fov_h, "fov_v": args.fov_v, "out_h": args.out_h,
            "out_w": args.out_w, "fill": args.fill, "interp": args.interp,
            "radius": args.radius, "lambda0": args.lambda0, "phi0": args.phi0,
            "phi1": args.phi1}


def _cmd_warp(args):
    image = load_image(args.input)
    spec, erp = _warp_config(args)
    save_image(warp_pinhole_to_erp(image, spec, erp), args.out)
    _write_report(args, args.out, _erp_parameters(args), [args.input], [args.out])


def _cmd_rerp(args):
    if (args.labels is None) != (args.labels_out is None):
        raise UsageError("--labels and --labels-out must be given together")
    image = load_image(args.input)
    spec, erp = _warp_config(args)
    config = RerpConfig(grid=args.grid, seed=args.seed, warp=spec)
    labels = load_labels(args.labels) if args.labels else None
    warped, warped_labels, perm = rerp_augment(image, labels, config, erp)
    save_image(warped, args.out)
    inputs = [args.input]
    outputs = [args.out]
    if warped_labels is not None:
        save_image(warped_labels, args.labels_out)
        inputs.append(args.labels)
        outputs.append(args.labels_out)
    parameters = {"grid": args.grid, "seed": args.seed, **_erp_parameters(args)}
    _write_report(args, args.out, parameters, inputs, outputs,
                  extra={"permutation": perm})


def _cmd_rotate(args):
    image = load_image(args.input)
    save_image(horizontal_rotate(image, args.shift), args.out)
    _write_report(args, args.out, {"shift": args.shift}, [args.input], [args.out])


def _cmd_salient(args):
    features = load_tensor(args.input)
    scores = salient_map(features, args.kernel)
    save_tensor(scores, args.out)
    outputs = [args.out]
    if args.png:
        if scores.shape[0] != 1:
            raise ValueError(f"--png needs a single-item batch, got {scores.shape[0]}")
        bound = salience_upper_bound(args.kernel)
        preview = np.rint(scores.data[0, 0] / bound * 255.0).clip(0, 255).astype(np.uint8)
        save_image(preview, args.png)
        outputs.append(args.png)
    _write_report(args, args.out, {"kernel": args.kernel}, [args.input], outputs)


def _deform_io(args, need_mod, grouped):
    x = load_tensor(args.input)
    offsets = load_tensor(args.offsets)
    modulation = load_tensor(args.modulation) if need_mod else None
    groups = args.groups if grouped else 1
    params = DeformParams(kernel=(args.kernel, args.kernel),
                          weights=np.asarray(args.weights, dtype=np.float64),
                          dilation=args.dilation, groups=groups)

    n, c, h, w = x.shape
    expect_off = (n, 2 * params.taps * groups, h, w)
    if offsets.shape != expect_off:
        raise ValueError(f"{args.offsets}: offset field shape {offsets.shape}, "
                         f"expected {expect_off} for input {args.input}")
    if need_mod:
        expect_mod = (n, params.taps * groups, h, w)
        if modulation.shape != expect_mod:
            raise ValueError(f"{args.modulation}: modulation field shape "
                             f"{modulation.shape}, expected {expect_mod} "
                             f"for input {args.input}")
    return x, params, offsets, modulation


def _deform_parameters(args, grouped):
    parameters = {"weights": list(args.weights), "kernel": args.kernel,
                  "dilation": args.dilation}
    if grouped:
        parameters["groups"] = args.groups
    return parameters


def _cmd_dcn(args):
    x, params, offsets, _ = _deform_io(args, need_mod=False, grouped=False)
    save_tensor(dcn_forward(x, params, offsets), args.out)
    _write_report(args, args.out, _deform_parameters(args, grouped=False),
                  [args.input, args.offsets], [args.out])


def _cmd_dcnv2(args):
    x, params, offsets, modulation = _deform_io(args, need_mod=True, grouped=False)
    save_tensor(dcnv2_forward(x, params, offsets, modulation), args.out)
    _write_report(args, args.out, _deform_parameters(args, grouped=False),
                  [args.input, args.offsets, args.modulation], [args.out])


def _cmd_dcnv3(args, forward=dcnv3_forward):
    x, params, offsets, modulation = _deform_io(args, need_mod=True, grouped=True)
    save_tensor(forward(x, params, offsets, modulation), args.out)
    _write_report(args, args.out, _deform_parameters(args, grouped=True),
                  [args.input, args.offsets, args.modulation], [args.out])


def _cmd_dcnv4(args):
    _cmd_dcnv3(args, forward=dcnv4_forward)


def _cmd_dao(args):
    x, params, offsets, modulation = _deform_io(args, need_mod=True, grouped=True)
    gated, gate = dao_forward(x, params, offsets, modulation, args.salience_kernel)
    save_tensor(gated, args.out)
    save_tensor(gate, args.salient_out)
    parameters = _deform_parameters(args, grouped=True)
    parameters["salience_kernel"] = args.salience_kernel
    _write_report(args, args.out, parameters,
                  [args.input, args.offsets, args.modulation],
                  [args.out, args.salient_out])


def _cmd_gradcheck(args):
    result = gradcheck(variant=args.variant, seed=args.seed, step=args.step)
    doc = {"command": args.command, "parameters": {"variant": args.variant,
                                                   "seed": args.seed, "step": args.step},
           "inputs": {}, "outputs": {}}
    doc.update(result)
    _write_json(doc, args.report)


def _cmd_trace_offsets(args):
    base = load_image(args.base)
    h, w = base.shape[:2]
    K = args.kernel * args.kernel
    params = DeformParams(kernel=(args.kernel, args.kernel),
                          weights=np.zeros(K), dilation=args.dilation)
    offset_paths = args.offsets or []
    if offset_paths and len(offset_paths) != args.levels:
        raise UsageError(f"--offsets needs one file per level "
                         f"({args.levels}), got {len(offset_paths)}")
    levels = []
    for i in range(args.levels):
        if offset_paths:
            field = load_tensor(offset_paths[i])
        else:
            field = Tensor.zeros((1, 2 * K, h, w))
        levels.append((params, field))

    points = trace_receptive_field(levels, args.anchor)
    overlay, counts = _render_offsets_counted(base, [args.anchor], points)
    save_image(overlay, args.out)
    parameters = {"anchor": list(args.anchor), "levels": args.levels,
                  "kernel": args.kernel, "dilation": args.dilation}
    _write_report(args, args.out, parameters, [args.base] + offset_paths,
                  [args.out], extra={"points": len(points), **counts})


def _cmd_eval(args):
    pred = load_labels(args.pred)
    gt = load_labels(args.gt)
    matrix = confusion(pred, gt, args.classes)
    similarity = None
    if args.sim:
        names, similarity = load_similarity_csv(args.sim)
        if len(names) != args.classes:
            raise ValueError(f"{args.sim} defines {len(names)} categories, "
                             f"--classes says {args.classes}")
    _write_json(metric_report(matrix, similarity), args.out)
    inputs = [args.pred, args.gt] + ([args.sim] if args.sim else [])
    _write_report(args, args.out, {"classes": args.classes}, inputs, [args.out])


def _cmd_sim_from_taxonomy(args):
    if (args.categories is None) == (args.categories_file is None):
        raise UsageError("give exactly one of --categories or --categories-file")
    if args.categories is not None:
        names = [n.strip() for n in args.categories.split(",") if n.strip()]
    else:
        with open(args.categories_file, encoding="utf-8") as f:
            names = [line.strip() for line in f if line.strip()]
    taxonomy = Taxonomy.load(args.taxonomy)
    save_similarity_csv(args.out, names, similarity_from_taxonomy(taxonomy, names))
    inputs = [args.taxonomy] + ([args.categories_file] if args.categories_file else [])
    _write_report(args, args.out, {"categories": names}, inputs, [args.out])


def _add_deform_args(sub, need_mod, grouped, dao=False):
    sub.add_argument("--in", dest="input", required=True, help="input tensor file")
    sub.add_argument("--offsets", required=True, help="offset field tensor file")
    if need_mod:
        sub.add_argument("--modulation", required=True, help="modulation field tensor file")
    sub.add_argument("--weights", type=_float_list, required=True,
                     help="comma-separated weights: one per tap, or one per group "
                          "for the grouped operators")
    sub.add_argument("--kernel", type=int, default=3)
    sub.add_argument("--dilation", type=int, default=1)
    if grouped:
        sub.add_argument("--groups", type=int, default=1)
    if dao:
        sub.add_argument("--salience-kernel", type=int, default=3)
        sub.add_argument("--salient-out", required=True, help="salient map tensor file")
    sub.add_argument("--out", required=True, help="output tensor file")
    sub.add_argument("--report", help="report path (default: output with .json suffix)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panops",
                     description="Deformable operators, panorama warps, "
                                 "and segmentation metrics.")
    subs = parser.add_subparsers(dest="command", required=True, metavar="command",
                                 parser_class=_Parser)

    sub = subs.add_parser("warp",
                          help="resample a pinhole frame onto a panorama canvas")
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--out", required=True)
    _add_erp_args(sub)
    sub.add_argument("--report")
    sub.set_defaults(func=_cmd_warp)

    sub = subs.add_parser("rerp",
                          help="shuffle image tiles with a seeded permutation, then warp")
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--grid", type=int, required=True)
    sub.add_argument("--seed", type=int, required=True)
    sub.add_argument("--labels", help="label map to carry through the same augmentation")
    sub.add_argument("--labels-out")
    _add_erp_args(sub)
    sub.add_argument("--report")
    sub.set_defaults(func=_cmd_rerp)

    sub = subs.add_parser("rotate",
                          help="circularly shift panorama columns")
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--shift", type=int, required=True)
    sub.add_argument("--report")
    sub.set_defaults(func=_cmd_rotate)

    sub = subs.add_parser("salient",
                          help="per-pixel salience scores of a feature tensor")
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--kernel", type=int, default=3)
    sub.add_argument("--png", help="also write a grayscale preview scaled to the "
                                   "reachable maximum")
    sub.add_argument("--report")
    sub.set_defaults(func=_cmd_salient)

    for name, handler, need_mod, grouped, dao in (
            ("dcn", _cmd_dcn, False, False, False),
            ("dcnv2", _cmd_dcnv2, True, False, False),
            ("dcnv3", _cmd_dcnv3, True, True, False),
            ("dcnv4", _cmd_dcnv4, True, True, False),
            ("dao", _cmd_dao, True, True, True)):
        sub = subs.add_parser(name,
                              help=f"run the {name} operator on tensor files")
        _add_deform_args(sub, need_mod=need_mod, grouped=grouped, dao=dao)
        sub.set_defaults(func=handler)

    sub = subs.add_parser("gradcheck",
                          help="compare analytic gradients against finite differences")
    sub.add_argument("--seed", type=int, required=True)
    sub.add_argument("--variant", choices=("v1", "v2", "v3"), default="v3")
    sub.add_argument("--step", type=float, default=1e-3)
    sub.add_argument("--report", required=True, help="where to write the result JSON")
    sub.set_defaults(func=_cmd_gradcheck)

    sub = subs.add_parser("trace-offsets",
                          help="overlay composed sampling positions on an image")
    sub.add_argument("--base", required=True, help="image to draw on")
    sub.add_argument("--anchor", type=_int_pair, required=True, help="row,col")
    sub.add_argument("--levels", type=int, default=2)
    sub.add_argument("--kernel", type=int, default=3)
    sub.add_argument("--dilation", type=int, default=1)
    sub.add_argument("--offsets", nargs="*",
                     help="offset tensor per level (default: zero offsets)")
    sub.add_argument("--out", required=True)
    sub.add_argument("--report")
    sub.set_defaults(func=_cmd_trace_offsets)

    sub = subs.add_parser("eval",
                          help="confusion-matrix metrics for a prediction/target pair")
    sub.add_argument("--pred", required=True)
    sub.add_argument("--gt", required=True)
    sub.add_argument("--classes", type=int, required=True)
    sub.add_argument("--sim", help="similarity CSV enabling the open metric")
    sub.add_argument("--out", required=True, help="metrics JSON path")
    sub.add_argument("--report")
    sub.set_defaults(func=_cmd_eval)

    sub = subs.add_parser("sim-from-taxonomy",
                          help="build a similarity CSV from a category taxonomy")
    sub.add_argument("--taxonomy", required=True, help="child<TAB>parent file")
    sub.add_argument("--categories", help="comma-separated ordered names")
    sub.add_argument("--categories-file", help="file with one name per line")
    sub.add_argument("--out", required=True)
    sub.add_argument("--report")
    sub.set_defaults(func=_cmd_sim_from_taxonomy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _thread_cap()
        args.func(args)
    except UsageError as exc:
        print(f"panops {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ValueError, IndexError, OSError) as exc:
        print(f"panops {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
