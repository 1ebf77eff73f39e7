"""Command-line front end: ``ttca compress | decompress | probe | experiment``.

Exit codes: 0 success, 2 invalid input, 3 cross-approximation did not
converge (archive still written), 4 densification cap exceeded.
Reports are printed as ``key=value`` lines.  ``TTCA_NUM_THREADS`` sets the
BLAS thread count (default 1).
"""
import argparse
import math
import os
import sys
import warnings
from importlib import resources

import numpy as np
from threadpoolctl import threadpool_limits

from .core import QttMap, dense_oracle
from .cross import cross_approximate, qtt_cross
from .errors import ResourceError, TTCAError, TTCAWarning
from .fields import FIELDS, field_oracle
from .formats import read_cpt1, read_cpv1, read_cpv1_header, write_cpt1, write_cpv1
from .pipeline import ConfigParseError, SyntheticTask, format_config, parse_config, run_experiment
from .tt import DENSE_CAP, tt_eval_batch, tt_svd, tt_to_dense

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_CAP = 4


class InputError(Exception):
    pass


def _ints(text, what):
    try:
        vals = [int(p) for p in text.split(",") if p.strip() != ""]
    except ValueError:
        raise InputError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not vals:
        raise InputError(f"{what} is empty")
    return vals


def _emit(out, key, value):
    out.write(f"{key}={value}\n")


def _check_output(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise InputError(f"output directory {parent} does not exist")


def _check_input(path):
    if not os.path.isfile(path):
        raise InputError(f"input file {path} not found")


def cmd_compress(args, out):
    if (args.field is None) == (args.input is None):
        raise InputError("give exactly one of --field and --input")
    given = [x is not None for x in (args.rank, args.ranks, args.eps)]
    if sum(given) != 1:
        raise InputError("give exactly one of --rank, --ranks and --eps")
    _check_output(args.output)
    if args.input is not None:
        _check_input(args.input)
        read_cpv1_header(args.input)
    if args.field is not None and args.shape is None:
        raise InputError("--field needs --shape")

    converged = True
    if args.eps is not None:
        if args.input is None:
            raise InputError("--eps needs a dense --input volume (analytic fields use --rank)")
        if args.qtt:
            raise InputError("--eps cannot be combined with --qtt")
        a = read_cpv1(args.input)
        tt = tt_svd(a, eps=args.eps)
        shape = a.shape
        method, samples, val_error, sweeps = "svd", a.size, 0.0, 0
    else:
        if args.input is not None:
            a = read_cpv1(args.input)
            oracle = dense_oracle(a)
        else:
            oracle = field_oracle(args.field, _ints(args.shape, "--shape"))
        shape = oracle.shape
        ranks = args.rank if args.rank is not None else _ints(args.ranks, "--ranks")
        kw = dict(max_sweeps=args.sweeps, seed=args.seed, n_validation=args.n_validation,
                  index_batch_size=args.index_batch, val_tolerance=args.tolerance)
        if args.qtt:
            qmap = QttMap.build(shape)
            if not np.isscalar(ranks):
                raise InputError("--qtt takes a single --rank")
            tt, report = qtt_cross(oracle, qmap, ranks, **kw)
            method = "qtt-cross"
        else:
            tt, report = cross_approximate(oracle, ranks, **kw)
            method = "cross"
        samples, val_error, sweeps, converged = report.samples, report.val_error, report.sweeps, report.converged
    write_cpt1(args.output, tt)
    dense = math.prod(shape)
    _emit(out, "method", method)
    _emit(out, "shape", ",".join(str(n) for n in shape))
    _emit(out, "archive_shape", ",".join(str(n) for n in tt.shape))
    _emit(out, "ranks", ",".join(str(r) for r in tt.ranks))
    _emit(out, "params", tt.n_params)
    _emit(out, "compression_ratio", repr(dense / tt.n_params))
    _emit(out, "samples", samples)
    _emit(out, "sweeps", sweeps)
    _emit(out, "val_error", repr(float(val_error)))
    _emit(out, "converged", "yes" if converged else "no")
    if not converged:
        print(f"warning: cross-approximation did not converge in {sweeps} sweeps; archive written",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _original_view(tt, shape_text):
    """QTT map and original shape when ``--shape`` describes a QTT archive."""
    if shape_text is None:
        return None, tuple(tt.shape)
    shape = tuple(_ints(shape_text, "--shape"))
    if shape == tuple(tt.shape):
        return None, shape
    qmap = QttMap.build(shape)
    if qmap.virtual_shape != tuple(tt.shape):
        raise InputError(f"--shape {shape} does not match archive shape {tt.shape}")
    return qmap, shape


def cmd_decompress(args, out):
    _check_input(args.input)
    _check_output(args.output)
    tt = read_cpt1(args.input)
    qmap, shape = _original_view(tt, args.shape)
    cap = None if args.no_cap else args.max_elements
    n = math.prod(tt.shape)
    if cap is not None and n > cap:
        raise ResourceError(f"densifying {n} elements exceeds the cap of {cap}; pass --no-cap to override")
    a = tt_to_dense(tt, max_elements=None if cap is None else cap).reshape(shape)
    write_cpv1(args.output, a)
    _emit(out, "shape", ",".join(str(n) for n in shape))
    _emit(out, "elements", a.size)
    return EXIT_OK


def cmd_probe(args, out):
    _check_input(args.input)
    tt = read_cpt1(args.input)
    qmap, shape = _original_view(tt, args.shape)
    if not args.indices:
        return EXIT_OK
    idx = []
    for text in args.indices:
        ix = _ints(text, "index")
        if len(ix) != len(shape) or any(not 0 <= i < n for i, n in zip(ix, shape)):
            raise InputError(f"index {text} out of range for shape {','.join(str(n) for n in shape)}")
        idx.append(ix)
    idx = np.asarray(idx, dtype=np.int64)
    vidx = qmap.forward(idx) if qmap is not None else idx
    for v in tt_eval_batch(tt, vidx):
        out.write(f"{v:.17g}\n")
    return EXIT_OK


def default_config_text():
    return resources.files("ttca").joinpath("default.cfg").read_text()


def cmd_experiment(args, out):
    if args.config is None:
        text = default_config_text()
    else:
        _check_input(args.config)
        with open(args.config) as fh:
            text = fh.read()
    if args.output_dir is not None and not os.path.isdir(args.output_dir):
        raise InputError(f"output directory {args.output_dir} does not exist")
    cfg = parse_config(text)
    task = SyntheticTask(seed=cfg.seed, grid=cfg.grid, n_train=cfg.n_train, n_val=cfg.n_val,
                         latent_rank=cfg.latent_rank, covariate=cfg.covariate)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TTCAWarning)
        report = run_experiment(task, cfg)
    lines = report.summary_lines()
    if args.output_dir is not None:
        report.write_csv(os.path.join(args.output_dir, "trace.csv"))
        report.write_curves_csv(os.path.join(args.output_dir, "curves.csv"))
        with open(os.path.join(args.output_dir, "summary.txt"), "w") as fh:
            fh.write(format_config(cfg))
            fh.write("".join(line + "\n" for line in lines))
    for line in lines:
        out.write(line + "\n")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ttca", description="TT cross-approximation tools")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="compress a CPV1 volume or an analytic field to a CPT1 archive")
    c.add_argument("--field", choices=sorted(FIELDS))
    c.add_argument("--input", help="CPV1 volume")
    c.add_argument("--shape", help="comma-separated mode sizes for --field")
    c.add_argument("--output", "-o", required=True, help="CPT1 archive to write")
    c.add_argument("--rank", type=int, help="maximum bond rank")
    c.add_argument("--ranks", help="comma-separated inner bond ranks")
    c.add_argument("--eps", type=float, help="relative accuracy for TT-SVD of a dense input")
    c.add_argument("--qtt", action="store_true", help="cross-approximate in the quantized (2 x ... x 2) shape")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--sweeps", type=int, default=10, help="maximum number of sweeps")
    c.add_argument("--tolerance", type=float, default=1e-8, help="validation stopping tolerance")
    c.add_argument("--n-validation", type=int, default=256)
    c.add_argument("--index-batch", type=int, default=None, help="oracle entries per fiber batch")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="densify a CPT1 archive to a CPV1 volume")
    d.add_argument("--input", "-i", required=True)
    d.add_argument("--output", "-o", required=True)
    d.add_argument("--shape", help="original shape of a QTT archive")
    d.add_argument("--max-elements", type=int, default=DENSE_CAP)
    d.add_argument("--no-cap", action="store_true", help="densify regardless of size")
    d.set_defaults(func=cmd_decompress)

    q = sub.add_parser("probe", help="evaluate archive entries")
    q.add_argument("--input", "-i", required=True)
    q.add_argument("--shape", help="original shape of a QTT archive")
    q.add_argument("indices", nargs="*", help="indices as i,j,k")
    q.set_defaults(func=cmd_probe)

    e = sub.add_parser("experiment", help="run the synthetic training experiment")
    e.add_argument("--config", help="key = value config file (default: bundled default.cfg)")
    e.add_argument("--output-dir", help="directory for trace.csv, curves.csv and summary.txt")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None, out=None):
    out = out if out is not None else sys.stdout
    args = build_parser().parse_args(argv)
    threads = int(os.environ.get("TTCA_NUM_THREADS", "1"))
    try:
        with threadpool_limits(limits=threads):
            return args.func(args, out)
    except ResourceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except ConfigParseError as exc:
        print(f"error: config {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, TTCAError, IndexError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
