"""Command-line front end.

Subcommands: ``fit`` (write a JSON fit report), ``simulate`` (write a CSV
dataset plus its model spec), ``diagnose`` (residual and envelope CSVs,
optional SVG), ``compare`` (AIC ranking of fit reports), and
``glg-curve`` (density grids for plotting).  Exit codes: 0 success,
1 input error, 2 fit completed but flagged non-converged.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings

import numpy as np

from . import diagnostics, glg_dist, mnb_model, pglg_model, simulate
from .data_io import ModelSpec, read_csv, ungroup, write_csv
from .errors import DataFormatError, DomainError, GlgmixError
from .glg_dist import GlgParams
from .mnb_model import MnbParams
from .pglg_model import PglgFitOptions, PglgParams

_EXIT_OK = 0
_EXIT_INPUT = 1
_EXIT_NOT_CONVERGED = 2


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="glgmix",
        description="Random-intercept Poisson models with generalized "
        "log-gamma effects and the multivariate negative binomial.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model and write a JSON report")
    p_fit.add_argument("--model", required=True,
                       choices=["pglg", "pglg-normal", "mnb", "nb"])
    p_fit.add_argument("--data", required=True, help="input CSV path")
    p_fit.add_argument("--spec", help="model spec JSON file")
    p_fit.add_argument("--response")
    p_fit.add_argument("--cluster")
    p_fit.add_argument("--covariates", default="",
                       help="comma-separated column names")
    p_fit.add_argument("--interactions", default="",
                       help="comma-separated pairs like a:b")
    p_fit.add_argument("--offset")
    p_fit.add_argument("--no-intercept", action="store_true")
    p_fit.add_argument("--order", type=int, default=None,
                       help="quadrature order (pglg models)")
    p_fit.add_argument("--out", required=True, help="report JSON path")

    p_sim = sub.add_parser("simulate", help="write a simulated dataset CSV")
    p_sim.add_argument("--model", required=True, choices=["pglg", "mnb"])
    p_sim.add_argument("--params", required=True,
                       help="parameter JSON file or inline JSON")
    p_sim.add_argument("--design", required=True,
                       help="design JSON file or inline JSON")
    p_sim.add_argument("--seed", type=int, default=None,
                       help="overrides the design seed")
    p_sim.add_argument("--out", required=True, help="output CSV path")

    p_diag = sub.add_parser("diagnose",
                            help="residual report and simulated envelope")
    p_diag.add_argument("--fit", required=True, help="fit report JSON path")
    p_diag.add_argument("--data", required=True, help="input CSV path")
    p_diag.add_argument("--residual", default="deviance",
                        choices=["deviance", "pearson"])
    p_diag.add_argument("--envelope", type=int, default=0, metavar="R",
                        help="number of envelope replicates (0 skips)")
    p_diag.add_argument("--level", type=float, default=0.95)
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--svg", help="optional envelope SVG path")
    p_diag.add_argument("--out", required=True, help="residual CSV path")

    p_cmp = sub.add_parser("compare", help="rank fit reports by AIC")
    p_cmp.add_argument("--fits", nargs="+", required=True,
                       help="two or more fit report JSON paths")
    p_cmp.add_argument("--out", help="ranking JSON path (default stdout)")

    p_curve = sub.add_parser("glg-curve",
                             help="density grids for one or more shapes")
    p_curve.add_argument("--mu", type=float, default=0.0)
    p_curve.add_argument("--sigma", type=float, default=1.0)
    p_curve.add_argument("--lambda", dest="lam", required=True,
                         help="comma-separated shape values")
    p_curve.add_argument("--points", type=int, default=512)
    p_curve.add_argument("--out", required=True, help="output CSV path")
    return parser


def _spec_from_args(args):
    flag_spec = any([args.response, args.cluster, args.covariates,
                     args.interactions, args.offset, args.no_intercept])
    if args.spec and flag_spec:
        raise DataFormatError("--spec cannot be combined with spec flags")
    if args.spec:
        return ModelSpec.from_json_file(args.spec)
    if not (args.response and args.cluster):
        raise DataFormatError(
            "either --spec or both --response and --cluster are required"
        )
    covariates = tuple(s for s in args.covariates.split(",") if s)
    raw_inter = tuple(s for s in args.interactions.split(",") if s)
    interactions = []
    for term in raw_inter:
        parts = term.split(":")
        if len(parts) != 2 or not all(parts):
            raise DataFormatError(f"malformed interaction term {term!r}")
        interactions.append((parts[0], parts[1]))
    return ModelSpec(
        response=args.response,
        cluster=args.cluster,
        covariates=covariates,
        interactions=tuple(interactions),
        offset=args.offset,
        add_intercept=not args.no_intercept,
    )


def _cmd_fit(args):
    spec = _spec_from_args(args)
    dataset = read_csv(args.data, spec)
    if args.model == "nb":
        result = mnb_model.fit(ungroup(dataset))
    elif args.model == "mnb":
        result = mnb_model.fit(dataset)
    else:
        opts = {}
        if args.order is not None:
            opts["order"] = args.order
        if args.model == "pglg-normal":
            opts["fix_lambda"] = 0.0
        result = pglg_model.fit(dataset, options=PglgFitOptions(**opts))

    report = result.as_dict()
    report["model"] = args.model
    report["spec"] = spec.to_mapping()
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if not result.converged:
        print("warning: fit did not converge", file=sys.stderr)
        return _EXIT_NOT_CONVERGED
    return _EXIT_OK


def _load_json_arg(text):
    """Accept a path to a JSON file or an inline JSON literal."""
    if text.lstrip().startswith(("{", "[")):
        return json.loads(text)
    with open(text, encoding="utf-8") as fh:
        return json.load(fh)


def _design_from_mapping(obj, seed_override):
    known = {"n_clusters", "cluster_sizes", "x", "offsets", "seed",
             "column_names"}
    extra = set(obj) - known
    if extra:
        raise DataFormatError(f"unknown design keys: {sorted(extra)}")
    if "n_clusters" not in obj:
        raise DataFormatError("design requires n_clusters")
    x = obj.get("x")
    names = obj.get("column_names")
    return simulate.SimDesign(
        n_clusters=int(obj["n_clusters"]),
        cluster_sizes=obj.get("cluster_sizes", 1),
        x_builder=np.asarray(x, dtype=float) if x is not None else None,
        offsets=obj.get("offsets"),
        seed=seed_override if seed_override is not None else obj.get("seed", 0),
        column_names=tuple(names) if names is not None else None,
    )


def _cmd_simulate(args):
    params_obj = _load_json_arg(args.params)
    design = _design_from_mapping(_load_json_arg(args.design), args.seed)
    if args.model == "mnb":
        params = MnbParams(
            beta=np.asarray(params_obj["beta"], dtype=float),
            phi=float(params_obj["phi"]),
        )
        dataset = simulate.simulate_mnb(design, params)
    else:
        params = PglgParams(
            beta=np.asarray(params_obj["beta"], dtype=float),
            sigma=float(params_obj["sigma"]),
            lam=float(params_obj["lambda"]),
        )
        dataset = simulate.simulate_pglg(design, params)
    spec = write_csv(dataset, args.out)
    with open(args.out + ".spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_mapping(), fh, indent=2)
        fh.write("\n")
    return _EXIT_OK


def _params_from_report(report):
    if report.get("model") not in ("mnb", "nb"):
        raise DomainError(
            "diagnose requires an mnb or nb fit report; residual and "
            "envelope methods are defined for the negative binomial family"
        )
    beta, phi = [], None
    for row in report["params"]:
        if row["name"] == "phi":
            phi = row["estimate"]
        else:
            beta.append(row["estimate"])
    if phi is None:
        raise DataFormatError("fit report lacks a phi parameter")
    return MnbParams(beta=np.asarray(beta, dtype=float), phi=float(phi))


def _format_cell(x):
    return "" if not math.isfinite(x) else repr(float(x))


def _cmd_diagnose(args):
    with open(args.fit, encoding="utf-8") as fh:
        report = json.load(fh)
    params = _params_from_report(report)
    spec = ModelSpec.from_mapping(report["spec"])
    dataset = read_csv(args.data, spec)
    if report["model"] == "nb":
        dataset = ungroup(dataset)

    relayed = set()

    def relay(caught):
        for w in caught:
            text = str(w.message)
            if text not in relayed:
                relayed.add(text)
                print(f"warning: {text}", file=sys.stderr)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = mnb_model.residuals(dataset, params)
    relay(caught)

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("cluster,obs,fitted,leverage,dev_comp,dev_resid,pearson\n")
        for i in range(res.fitted.size):
            fh.write(
                ",".join(
                    [
                        res.cluster_ids[i],
                        str(int(res.obs_index[i])),
                        repr(float(res.fitted[i])),
                        repr(float(res.leverage[i])),
                        repr(float(res.dev_comp[i])),
                        _format_cell(res.dev_resid[i]),
                        repr(float(res.pearson[i])),
                    ]
                )
                + "\n"
            )

    envelope = None
    if args.envelope:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            envelope = diagnostics.simulated_envelope(
                dataset,
                params,
                residual=args.residual,
                n_replicates=args.envelope,
                level=args.level,
                seed=args.seed,
            )
        relay(caught)

    if envelope is not None:
        stem, dot, ext = args.out.rpartition(".")
        env_path = f"{stem}_envelope{dot}{ext}" if dot else args.out + "_envelope"
        with open(env_path, "w", encoding="utf-8") as fh:
            fh.write("rank,observed,lower,median,upper\n")
            for k in range(envelope.observed_sorted.size):
                cells = (
                    envelope.observed_sorted[k],
                    envelope.lower[k],
                    envelope.median[k],
                    envelope.upper[k],
                )
                fh.write(f"{k + 1}," + ",".join(repr(float(v)) for v in cells) + "\n")
        if args.svg:
            with open(args.svg, "w", encoding="utf-8") as fh:
                fh.write(_envelope_svg(envelope))
    return _EXIT_OK


def _envelope_svg(env, width=640, height=480, margin=50):
    """Self-contained scatter of ordered residuals with envelope bands."""
    x = env.theoretical
    ys = np.concatenate([env.observed_sorted, env.lower, env.upper])
    x_lo, x_hi = float(x.min()), float(x.max())
    y_lo, y_hi = float(ys.min()), float(ys.max())
    x_pad = 0.05 * (x_hi - x_lo or 1.0)
    y_pad = 0.05 * (y_hi - y_lo or 1.0)
    x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    def sx(v):
        return margin + (v - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    def path(values):
        return " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, values))

    band = (
        " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, env.upper))
        + " "
        + " ".join(
            f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[::-1], env.lower[::-1])
        )
    )
    dots = "".join(
        f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="#1f3d7a"/>'
        for a, b in zip(x, env.observed_sorted)
    )
    return f"""<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">
<rect width="{width}" height="{height}" fill="white"/>
<polygon points="{band}" fill="#c9d6ef" stroke="none" opacity="0.7"/>
<polyline points="{path(env.median)}" fill="none" stroke="#5b7bb5" stroke-dasharray="4 3"/>
<polyline points="{path(env.lower)}" fill="none" stroke="#3a5a9b"/>
<polyline points="{path(env.upper)}" fill="none" stroke="#3a5a9b"/>
{dots}
<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>
<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>
<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="13">standard normal quantile</text>
<text x="14" y="{height / 2:.0f}" text-anchor="middle" font-size="13" transform="rotate(-90 14 {height / 2:.0f})">ordered residual</text>
</svg>
"""


class _ReportRow:
    def __init__(self, report):
        self.model = report["model"]
        self.loglik = report["loglik"]
        self.aic = report["aic"]


def _cmd_compare(args):
    rows = []
    for path in args.fits:
        with open(path, encoding="utf-8") as fh:
            rows.append(_ReportRow(json.load(fh)))
    table = diagnostics.compare_aic(rows)
    text = json.dumps(table, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return _EXIT_OK


def _cmd_glg_curve(args):
    lams = []
    for part in args.lam.split(","):
        part = part.strip()
        if part:
            lams.append(float(part))
    if not lams:
        raise DomainError("--lambda needs at least one value")
    if args.points < 2:
        raise DomainError(f"--points must be >= 2, got {args.points}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("lambda,y,pdf\n")
        for lam in lams:
            params = GlgParams(mu=args.mu, sigma=args.sigma, lam=lam)
            lo, hi = glg_dist.support_interval(params)
            grid = np.linspace(lo, hi, args.points)
            dens = glg_dist.pdf(grid, params)
            for y, f in zip(grid, dens):
                fh.write(f"{lam!r},{float(y)!r},{float(f)!r}\n")
    return _EXIT_OK


_COMMANDS = {
    "fit": _cmd_fit,
    "simulate": _cmd_simulate,
    "diagnose": _cmd_diagnose,
    "compare": _cmd_compare,
    "glg-curve": _cmd_glg_curve,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (GlgmixError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_INPUT


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
