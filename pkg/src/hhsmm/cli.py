"""Command-line driver: ``hhsmm simulate|init|fit|predict|rul|score``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, load_sequences, store_sequences
from .decode import estimate_rul, predict_states
from .emissions import EmissionError
from .inference import NumericError, hhsmmfit, score
from .initialize import InitError, initial_cluster, initialize_model
from .model import ModelError, ModelSpec, load_model, save_json, save_model, validate_model
from .simulate import simulate
from .sojourn import SojournError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("hhsmm")


class CliError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool_list(text: str) -> list[bool]:
    table = {"1": True, "t": True, "true": True, "0": False, "f": False, "false": False}
    try:
        return [table[v.strip().lower()] for v in text.split(",")]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected comma-separated booleans, got {text!r}") from None


def _nmix(text: str):
    if text in ("auto", "none"):
        return None if text == "none" else "auto"
    return _int_list(text)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _checked(spec: ModelSpec) -> ModelSpec:
    report = validate_model(spec)
    if not report.ok:
        raise ModelError(str(report))
    return spec


def _load_fit(path) -> ModelSpec:
    return _checked(load_model(path))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_svg(path, series, xlabel: str, ylabel: str, step: bool = False) -> None:
    """Minimal SVG line chart of one or more y-series against their index."""
    width, height, pad = 640, 360, 50
    ys = np.concatenate([np.asarray(s, dtype=float) for s in series])
    n = max(len(s) for s in series)
    lo, hi = float(ys.min()), float(ys.max())
    if hi == lo:
        hi = lo + 1.0

    def px(i):
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))

    def py(v):
        return height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
             f'<text x="14" y="{height / 2:.0f}" transform="rotate(-90 14 {height / 2:.0f})" '
             f'text-anchor="middle">{ylabel}</text>',
             f'<text x="{pad - 4}" y="{pad}" text-anchor="end" font-size="10">{hi:.6g}</text>',
             f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10">{lo:.6g}</text>']
    for k, s in enumerate(series):
        pts = []
        for i, v in enumerate(s):
            if step and i:
                pts.append(f"{px(i):.2f},{py(s[i - 1]):.2f}")
            pts.append(f"{px(i):.2f},{py(v):.2f}")
        lines.append(f'<polyline fill="none" stroke="{colors[k % len(colors)]}" points="{" ".join(pts)}"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> None:
    spec = _checked(load_model(args.model))
    data = simulate(spec, args.nsim, seed=args.seed, autoregress=args.autoregress)
    store_sequences(data, args.out)


def cmd_init(args) -> None:
    data = load_sequences(args.data)
    resp_ind = [i - 1 for i in args.resp_ind]
    family = args.family or ("mixlm" if args.regress else "mixmvnorm")
    nmix = None if family in ("nonpar", "addreg") else args.nmix
    clus = initial_cluster(data, args.nstate, nmix, ltr=args.ltr, final_absorb=args.final_absorb,
                           regress=args.regress, resp_ind=resp_ind, seed=args.seed)
    if args.clusters:
        save_json(clus.to_dict(), args.clusters)
    sojourn = None if args.sojourn == "none" else args.sojourn
    semi = args.semi
    if semi is None:
        semi = [sojourn is not None] * args.nstate
        if args.ltr:
            semi[-1] = False
    spec = initialize_model(clus, data, family, sojourn, args.M, semi, resp_ind, args.K)
    save_model(spec, args.out)


def cmd_fit(args) -> None:
    data = load_sequences(args.data)
    spec = _checked(load_model(args.model))
    fit = hhsmmfit(data, spec, maxit=args.maxit, tol=args.tol, lock_init=args.lock_init,
                   lock_transition=args.lock_transition)
    _checked(fit.model)
    fit.save(args.out)
    if args.trace:
        _write_rows(args.trace, ["iter", "loglik"],
                    [[i, _fmt(v)] for i, v in enumerate(fit.loglik_trace)])
    if args.plot:
        write_svg(args.plot, [fit.loglik_trace], "iteration", "log-likelihood")
    log.info("loglik %.6f after %d iterations; AIC %.6f BIC %.6f",
             fit.loglik, len(fit.loglik_trace) - 1, fit.AIC, fit.BIC)


def cmd_predict(args) -> None:
    spec = _load_fit(args.fit)
    data = load_sequences(args.data)
    paths = predict_states(spec, data, method=args.method, future=args.future)
    rows = [[i + 1, t + 1, int(s) + 1] for i, path in enumerate(paths) for t, s in enumerate(path)]
    _write_rows(args.out, ["seq_id", "t", "state"], rows)
    if args.plot:
        write_svg(args.plot, [p + 1 for p in paths], "t", "state", step=True)


def cmd_rul(args) -> None:
    spec = _load_fit(args.fit)
    data = load_sequences(args.data)
    paths = predict_states(spec, data, method=args.method)
    est = estimate_rul(spec, data, method=args.method, confidence=args.confidence, level=args.level)
    rows = []
    for i, path in enumerate(paths):
        for t, s in enumerate(path):
            rows.append([i + 1, t + 1, int(s) + 1, _fmt(est.rul[i]), _fmt(est.low[i]), _fmt(est.up[i])])
    _write_rows(args.out, ["seq_id", "t", "state", "rul", "rul_low", "rul_up"], rows)


def cmd_score(args) -> None:
    spec = _load_fit(args.fit)
    data = load_sequences(args.data)
    vals = score(data, spec)
    _write_rows(args.out, ["seq_id", "loglik"], [[i + 1, _fmt(v)] for i, v in enumerate(vals)])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hhsmm", description="Hidden hybrid Markov/semi-Markov models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate sequences from a model JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--nsim", type=_int_list, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--autoregress", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("init", help="cluster data and write an initial model")
    p.add_argument("--data", required=True)
    p.add_argument("--nstate", type=int, required=True)
    p.add_argument("--nmix", type=_nmix, default="auto")
    p.add_argument("--ltr", action="store_true")
    p.add_argument("--final-absorb", action="store_true")
    p.add_argument("--regress", action="store_true")
    p.add_argument("--resp-ind", type=_int_list, default=[1])
    p.add_argument("--family", choices=("mixmvnorm", "nonpar", "mixlm", "addreg"))
    p.add_argument("--sojourn", default="gamma",
                   choices=("gamma", "weibull", "lognormal", "nonparametric", "auto", "none"))
    p.add_argument("--semi", type=_bool_list, help="per-state flags, e.g. 0,1,0")
    p.add_argument("--M", type=int)
    p.add_argument("--K", type=int, help="spline basis size for nonpar/addreg")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clusters", help="also write the clustering as JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("fit", help="fit a model by EM")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--maxit", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--lock-init", action="store_true")
    p.add_argument("--lock-transition", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace")
    p.add_argument("--plot")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="decode states, optionally predicting future ones")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("viterbi", "smoothing"), default="viterbi")
    p.add_argument("--future", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("rul", help="estimate remaining useful life")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("viterbi", "smoothing"), default="viterbi")
    p.add_argument("--confidence", choices=("mean", "max"), default="mean")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rul)

    p = sub.add_parser("score", help="per-sequence log-likelihood")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"hhsmm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, DataError, InitError, EmissionError, SojournError, CliError,
            OSError, ValueError) as exc:
        print(f"hhsmm: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
