"""Command-line front end: ``ungd <subcommand> [flags]``.

Every run writes CSV outputs plus ``manifest.json`` into ``--out`` (default
``$UNGD_OUTPUT_DIR`` or ``./ungd_out``).  ``ungd replay MANIFEST`` re-runs a
recorded invocation and reproduces its CSVs byte for byte.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.  Failures print one JSON object to stderr.
"""

import argparse
import csv
import datetime as _dt
import itertools
import json
import math
import os
import sys
import warnings

import numpy as np

from . import __version__, rng
from ._parallel import set_num_threads
from .activations import ActivationKind
from .fisher_probe import (
    ScanTemplate,
    block_decay_scan,
    domino_check,
    estimate_fisher,
    nonclosure_demo,
    self_averaging_check,
)
from .meanfield import monte_carlo, propagate, propagate_resnet
from .nets import (
    ConfigError,
    NetConfig,
    ResNetConfig,
    format_config,
    init_mixers,
    init_random,
    load_params,
    parse_config,
    save_params,
)
from .trainer import NumericalError, OptimizerConfig, TeacherStudentTask, TrainRecord, evaluate, train, train_resnet
from .fisher_probe import ResidualSpec
from .unit_fisher import SingularFisher, unit_coeffs

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUTPUT_ENV = "UNGD_OUTPUT_DIR"
MANIFEST = "manifest.json"
_UNRECORDED = {"out", "threads", "func", "net_text"}

COEFF_FIELDS = ("A00", "A0n", "Ann", "Abar00", "X", "Y", "Z", "D")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ------------------------------------------------------------------ helpers


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


class _Outputs:
    """Tracks files written into the output directory."""

    def __init__(self, directory):
        self.dir = directory
        self.files = []
        self.volatile = []
        os.makedirs(directory, exist_ok=True)
        if not os.access(directory, os.W_OK):
            raise PermissionError(f"output directory {directory!r} is not writable")

    def path(self, name, volatile=False):
        (self.volatile if volatile else self.files).append(name)
        return os.path.join(self.dir, name)

    def csv(self, name, header, rows, volatile=False):
        with open(self.path(name, volatile), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])


def _ints(text):
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a comma separated list of integers, got {text!r}") from None


def _floats(text):
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a comma separated list of numbers, got {text!r}") from None


def _net_config(args):
    """Net architecture from ``--net`` (file or recorded text) or inline flags."""
    text = getattr(args, "net_text", None)
    if text is None and getattr(args, "net", None):
        with open(args.net, encoding="utf-8") as fh:
            text = fh.read()
    if text is not None:
        config = parse_config(text)
    else:
        if not args.widths:
            raise ConfigError("give --net FILE or --widths")
        config = NetConfig(_ints(args.widths), args.sigma_w2, args.sigma_b2, args.activation, args.seed or 0)
    if getattr(args, "seed", None) is not None:
        if isinstance(config, ResNetConfig):
            config = ResNetConfig(config.base.replace(seed=args.seed), config.sigma_v2, config.alpha)
        else:
            config = config.replace(seed=args.seed)
    if getattr(args, "resnet", False) and not isinstance(config, ResNetConfig):
        config = ResNetConfig(config, args.sigma_v2, args.alpha)
    return config


def _base(config):
    return config.base if isinstance(config, ResNetConfig) else config


# -------------------------------------------------------------- subcommands


def cmd_meanfield(args, out):
    config = _net_config(args)
    base = _base(config)
    is_res = isinstance(config, ResNetConfig)
    theory = propagate_resnet(config, args.A0, exact_skip=args.exact_skip) if is_res else propagate(config, args.A0)
    L = base.n_layers
    if args.mc_seeds > 0:
        mc = monte_carlo(base, args.A0, args.mc_seeds, resnet=config if is_res else None)
        A_mc, chi_mc = mc.A, mc.chi
    else:
        A_mc, chi_mc = np.full(L + 1, np.nan), np.full(L, np.nan)
    rows = [[0, theory.A[0], A_mc[0], math.nan, math.nan, math.nan, "", math.nan]]
    for l in range(1, L + 1):
        rows.append(
            [l, theory.A[l], A_mc[l], theory.tau2[l - 1], theory.chi[l - 1], theory.chi_prod[l - 1], theory.regimes[l - 1], chi_mc[l - 1]]
        )
    out.csv("meanfield.csv", ("layer", "A_theory", "A_mc", "tau2", "chi", "chi_prod", "regime", "chi_mc"), rows)
    return config


def _probe_net(args, width_list):
    config = NetConfig(width_list, args.sigma_w2, args.sigma_b2, args.activation, args.seed)
    params = init_random(config)
    if not args.resnet:
        return config, params, None
    res = ResNetConfig(config, args.sigma_v2, args.alpha)
    return res, params, ResidualSpec(init_mixers(res), res)


def cmd_fisher_probe(args, out):
    widths = _ints(args.widths)
    mode = args.mode
    if mode == "full":
        config, params, res = _probe_net(args, widths)
        est = estimate_fisher(params, args.samples, args.seed, resnet=res, input_scale=args.input_scale)
        ids = est.layout.unit_ids()
        P = est.layout.size
        rows = (
            [i, j, ids[i], ids[j], est.matrix[i, j], est.stderr[i, j]] for i in range(P) for j in range(i, P)
        )
        out.csv("fisher_full.csv", ("i", "j", "unit_i", "unit_j", "value", "stderr"), rows)
        return config
    if mode == "domino":
        config, params, res = _probe_net(args, widths)
        ms = range(params.n_layers) if args.m is None else [args.m]
        rows = []
        for m in ms:
            r = domino_check(params, m, args.samples, args.seed, resnet=res, input_scale=args.input_scale)
            rows.append([r.m, r.width, r.diag_mean, r.diag_se, r.chi_theory, r.diag_rel_error, r.offdiag_rms, r.n_samples])
        out.csv(
            "domino.csv",
            ("m", "width", "diag_mean", "diag_se", "chi_theory", "diag_rel_error", "offdiag_rms", "n_samples"),
            rows,
        )
        return None
    if mode == "decay":
        template = ScanTemplate(
            n_layers=args.layers,
            output_width=args.output_width,
            sigma_w2=args.sigma_w2,
            sigma_b2=args.sigma_b2,
            activation=args.activation,
            seed=args.seed,
            sigma_v2=args.sigma_v2 if args.resnet else None,
            alpha=args.alpha if args.resnet else None,
        )
        rep = block_decay_scan(widths, template, args.samples, probe_size=args.probe_size, input_scale=args.input_scale)
        rows = [
            [s.width, s.offblock_same_ratio, s.offblock_cross_ratio, s.n_probe, s.n_samples] for s in rep.stats
        ]
        rows.append(["slope", rep.slope_same, rep.slope_cross, "", ""])
        out.csv("decay.csv", ("width", "offblock_same_ratio", "offblock_cross_ratio", "n_probe", "n_samples"), rows)
        return None
    if mode == "nonclosure":
        rows = []
        for n in widths:
            r = nonclosure_demo(n, args.seed, args.input_scale)
            rows.append([r.n, r.offdiag_rms_G, r.offdiag_rms_G2, r.offdiag_rms_Ginv, r.ratio])
        out.csv("nonclosure.csv", ("n", "offdiag_rms_G", "offdiag_rms_G2", "offdiag_rms_Ginv", "ratio"), rows)
        return None
    # selfavg
    rows = []
    for n in widths:
        r = self_averaging_check(n, args.activation, args.samples, args.seed, sigma2=args.sigma_w2)
        rows.append(
            [r.n, r.mean_f, r.offdiag_gap, r.offdiag_se, r.offdiag_z, r.offdiag_frac_within_3se, r.diag_gap_rms, r.diag_gap_relative]
        )
    out.csv(
        "selfavg.csv",
        ("n", "mean_f", "offdiag_gap", "offdiag_se", "offdiag_z", "offdiag_frac_within_3se", "diag_gap_rms", "diag_gap_relative"),
        rows,
    )
    return None


def cmd_train(args, out):
    config = _net_config(args)
    base = _base(config)
    seed = base.seed
    teacher = init_random(base.replace(seed=rng.derive_seed(seed, 1)))
    student = init_random(base.replace(seed=rng.derive_seed(seed, 3)))
    task_seed = rng.derive_seed(seed, 2)
    cfg = OptimizerConfig(
        args.optimizer,
        eta=args.eta,
        batch_size=args.batch,
        damping=args.damping,
        polyak=args.polyak_window > 0,
        compat_eq68_w0=args.compat_eq68_w0,
    )
    if isinstance(config, ResNetConfig):
        t_res = ResNetConfig(teacher.config, config.sigma_v2, config.alpha)
        s_res = ResNetConfig(student.config, config.sigma_v2, config.alpha)
        task = TeacherStudentTask(teacher, task_seed, ResidualSpec(init_mixers(t_res), t_res))
        mixers = init_mixers(s_res)
        params, record, avg = train_resnet(student, mixers, s_res, task, cfg, args.steps, args.polyak_window, seed)
        spec = ResidualSpec(mixers, s_res)
    else:
        mixers, spec = None, None
        task = TeacherStudentTask(teacher, task_seed)
        params, record, avg = train(student, task, cfg, args.steps, polyak_window=args.polyak_window, seed=seed)
    _write_record(out, record)
    save_params(params, out.path("params.npz"), mixers)
    summary = [["final", evaluate(params, task, args.eval_samples, spec)]]
    if avg is not None:
        save_params(avg, out.path("params_polyak.npz"), mixers)
        summary.append(["polyak", evaluate(avg, task, args.eval_samples, spec)])
    summary.append(["flagged", int(record.flagged)])
    out.csv("train_summary.csv", ("quantity", "value"), summary)
    return config


def _write_record(out, record: TrainRecord):
    out.csv(
        "train.csv",
        ("step", "loss", "step_norm", "fallbacks", "n_units", "ginv_check"),
        ([r.step, r.loss, r.step_norm, r.fallbacks, r.n_units, r.ginv_check] for r in record.rows),
    )
    out.csv("timing.csv", ("step", "wall_time"), ([r.step, r.wall_time] for r in record.rows), volatile=True)


def cmd_unit_coeffs(args, out):
    rows = []
    if args.params:
        params, _ = load_params(args.params)
        act = ActivationKind.parse(args.activation or params.activation)
        for l, (W, b) in enumerate(zip(params.weights, params.biases), start=1):
            norms = np.linalg.norm(W, axis=1)
            c = unit_coeffs(norms, b, act).as_dict()
            for i in range(W.shape[0]):
                rows.append([l, i, norms[i], b[i]] + [c[k][i] for k in COEFF_FIELDS])
        out.csv("unit_coeffs.csv", ("layer", "unit", "w", "w0") + COEFF_FIELDS, rows)
        return params.config
    act = ActivationKind.parse(args.activation)
    for w, w0 in itertools.product(_floats(args.w), _floats(args.w0)):
        c = unit_coeffs(w, w0, act).as_dict()
        rows.append([w, w0] + [float(c[k]) for k in COEFF_FIELDS])
    out.csv("unit_coeffs.csv", ("w", "w0") + COEFF_FIELDS, rows)
    return None


# ------------------------------------------------------------------- parser


def _common(p):
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./ungd_out)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")


def _net_flags(p, seed_default=None):
    p.add_argument("--net", help="network config file (key = value lines)")
    p.add_argument("--widths", help="comma separated layer widths, input first")
    p.add_argument("--activation", default="tanh", choices=[a.value for a in ActivationKind])
    p.add_argument("--sigma-w2", type=float, default=1.0)
    p.add_argument("--sigma-b2", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=seed_default, help="master seed (overrides the config's)")
    p.add_argument("--resnet", action="store_true", help="use residual blocks")
    p.add_argument("--sigma-v2", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.5)


def build_parser():
    parser = _Parser(prog="ungd", description="Unit-wise Fisher analysis and natural-gradient training.")
    parser.add_argument("--version", action="version", version=f"ungd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("meanfield", help="activity and chi recursions with Monte-Carlo check")
    _common(p)
    _net_flags(p)
    p.add_argument("--A0", type=float, default=1.0, help="input activity")
    p.add_argument("--mc-seeds", type=int, default=5, help="sampled nets for the A_mc column (0 disables)")
    p.add_argument("--exact-skip", action="store_true", help="resnet chi uses alpha^2 for the skip path")
    p.set_defaults(func=cmd_meanfield)

    p = sub.add_parser("fisher-probe", help="empirical Fisher structure")
    _common(p)
    _net_flags(p, seed_default=0)
    p.add_argument("--mode", choices=["full", "domino", "decay", "nonclosure", "selfavg"], default="full")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--m", type=int, default=None, help="domino: lower layer index (default all)")
    p.add_argument("--layers", type=int, default=2, help="decay: weight layers per net")
    p.add_argument("--output-width", type=int, default=1, help="decay: output width")
    p.add_argument("--probe-size", type=int, default=600, help="decay: sampled parameters per layer")
    p.add_argument("--input-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_fisher_probe)

    p = sub.add_parser("train", help="teacher-student training with SGD or unit-wise NGD")
    _common(p)
    _net_flags(p)
    p.add_argument("--optimizer", choices=["sgd", "ungd"], default="ungd")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--damping", type=float, default=0.0)
    p.add_argument("--polyak-window", type=int, default=0)
    p.add_argument("--compat-eq68-w0", action="store_true", help="multiply the bias step by w0")
    p.add_argument("--eval-samples", type=int, default=2000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unit-coeffs", help="closed-form unit Fisher coefficients")
    _common(p)
    p.add_argument("--activation", default=None, choices=[a.value for a in ActivationKind])
    p.add_argument("--w", default="1.0", help="weight norms |w| (comma separated)")
    p.add_argument("--w0", default="0.0", help="biases (comma separated)")
    p.add_argument("--params", help="dump every unit of a saved parameter file instead")
    p.set_defaults(func=cmd_unit_coeffs)

    p = sub.add_parser("replay", help="re-run the invocation recorded in a manifest")
    p.add_argument("manifest")
    _common(p)
    p.set_defaults(func=None)
    return parser


# ---------------------------------------------------------------------- run


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _execute(args):
    if args.command == "unit-coeffs" and args.params is None and args.activation is None:
        raise ConfigError("--activation is required without --params")
    for name in ("samples", "steps", "batch", "mc_seeds", "eval_samples"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be >= 0")
    set_num_threads(args.threads)
    out = _Outputs(args.out or os.environ.get(OUTPUT_ENV) or "ungd_out")
    started = _now()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with np.errstate(over="ignore", invalid="ignore"):
            config = args.func(args, out)
    for w in caught:
        print(json.dumps({"warning": str(w.message)}), file=sys.stderr)
    recorded = {k: v for k, v in vars(args).items() if k not in _UNRECORDED}
    manifest = {
        "subcommand": args.command,
        "args": recorded,
        "config": format_config(config) if config is not None else None,
        "seed": _base(config).seed if config is not None else getattr(args, "seed", None),
        "version": __version__,
        "rng_backend": rng.BACKEND,
        "started": started,
        "finished": _now(),
        "outputs": out.files,
        "volatile_outputs": out.volatile,
    }
    with open(os.path.join(out.dir, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def _replay_args(parser, args):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    command = manifest["subcommand"]
    ns = parser.parse_args([command])
    for key, value in manifest["args"].items():
        setattr(ns, key, value)
    if manifest.get("config") is not None and hasattr(ns, "net"):
        ns.net_text = manifest["config"]
        ns.net = None
    ns.out, ns.threads = args.out, args.threads
    return ns


def run(argv=None):
    """Parse ``argv`` and execute; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "replay":
            args = _replay_args(parser, args)
        return _execute(args)
    except (ConfigError, json.JSONDecodeError, KeyError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (NumericalError, SingularFisher, FloatingPointError, OverflowError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", exc)


def _fail(code, kind, exc):
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
