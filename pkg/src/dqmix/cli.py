"""Command-line interface: ``dqmix <subcommand> [options]``.

Exit codes: 0 success, 2 invalid input, 3 infeasible rule generation,
4 estimation did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dqgen import (
    DEFAULT_EPS,
    DEFAULT_RESTARTS,
    InfeasibleRuleError,
    MomentSystem,
    RuleFileError,
    cache_key,
    cached_rule,
    generate_dq,
    load_rule,
    min_nodes_search,
    moment_errors,
    resolve_cache_dir,
    save_rule,
)
from .mmnl import DatasetError, MmnlParams, fit, load_dataset, parameter_names, save_dataset
from .multiindex import CapExceededError, tensor_rule
from .qmc import make_draws
from .quadrature import Provenance
from .simstudy import DgpSpec, StudyConfig, generate_dataset, run_study

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3
EXIT_NOT_CONVERGED = 4

log = logging.getLogger("dqmix")


class UsageError(Exception):
    """Invalid input detected after argument parsing."""


def _symmetric(text: str):
    return {"auto": None, "yes": True, "no": False}[text]


def cmd_gen_rule(args) -> int:
    try:
        rule = generate_dq(
            args.family, args.dim, args.order, args.nodes, eps_target=args.eps, seed=args.seed,
            max_restarts=args.restarts, symmetric=_symmetric(args.symmetric), max_iter=args.max_iter,
        )
    except InfeasibleRuleError as exc:
        print(json.dumps(exc.report(), sort_keys=True), file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.out) if args.out else resolve_cache_dir(args.cache_dir) / cache_key(
        args.family, args.dim, args.order, args.nodes)
    save_rule(rule, out)
    print(f"wrote {out}")
    print(f"nodes {rule.n} (requested {args.nodes})")
    print(f"residual {rule.residual:.3e}")
    return EXIT_OK


def cmd_min_nodes(args) -> int:
    try:
        n = min_nodes_search(
            args.family, args.dim, args.order, eps_target=args.eps, n_lo=args.lo, n_hi=args.hi,
            seed=args.seed, max_restarts=args.restarts,
        )
    except InfeasibleRuleError as exc:
        print(json.dumps(exc.report(), sort_keys=True), file=sys.stderr)
        return EXIT_INFEASIBLE
    print(n)
    return EXIT_OK


def cmd_verify_rule(args) -> int:
    rule = load_rule(args.rule, verify=False)
    sys_ = MomentSystem.total_order(rule.family, rule.dim, rule.order)
    errors = moment_errors(sys_, rule.nodes, rule.weights)
    res = float(np.linalg.norm(errors))
    worst = int(np.argmax(np.abs(errors)))
    problems = rule.invariant_violations()
    if rule.provenance is not Provenance.QMC and abs(res - rule.residual) > 1e-10:
        problems.append(f"stored epsilon {rule.residual:.3e} disagrees with recomputed residual {res:.3e}")
    print(f"rule {args.rule}: dim {rule.dim}, order {rule.order}, nodes {rule.n}, family {rule.family.value}")
    print(f"residual {res:.3e}")
    alpha = " ".join(map(str, sys_.index_set.indices[worst]))
    print(f"worst moment violation {abs(errors[worst]):.3e} at multi-index ({alpha})")
    if args.report_moments:
        for a, e in zip(sys_.index_set, errors):
            print(" ".join(map(str, a)), f"{e:.3e}")
    if problems:
        for p in problems:
            print(f"FAIL: {p}")
        return EXIT_INVALID
    print("OK")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = DgpSpec(d=args.dim, covariance=args.cov, N=args.N, J=args.J, T=args.T)
    data = generate_dataset(spec, args.seed)
    save_dataset(data, args.out)
    truth = spec.truth()
    print(f"wrote {args.out}: N={data.N} T={data.T} J={data.J} p={data.n_fixed} d={data.n_random}")
    for name, v in zip(parameter_names(data.n_fixed, data.n_random, spec.structure), truth.to_vector(spec.structure)):
        print(f"true {name} {v!r}")
    return EXIT_OK


_RULE_NAME = re.compile(r"^(normal|uniform)-d(\d+)-r(\d+)-n(\d+)$")


def _fit_integration(args, data):
    d = data.n_random
    if args.method == "dq":
        if args.rule:
            path = Path(args.rule)
            if not path.exists():
                m = _RULE_NAME.match(path.name)
                hint = (f"; generate it with `dqmix gen-rule --family {m[1]} --dim {m[2]} --order {m[3]} "
                        f"--nodes {m[4]} --out {path}`") if m else "; rule files are named <family>-d<dim>-r<order>-n<nodes>"
                raise UsageError(f"rule file {path} not found{hint}")
            rule = load_rule(path)
        elif args.order is not None and args.nodes is not None:
            rule = cached_rule("normal", d, args.order, args.nodes, args.cache_dir, generate=False)
        else:
            raise UsageError("--method dq needs --rule or both --order and --nodes")
        if rule.dim != d:
            raise UsageError(f"rule dimension {rule.dim} does not match {d} random coefficients in the data")
        return rule
    if args.method == "tensor":
        return tensor_rule("normal", d, args.draws)
    return make_draws(args.method, d, data.N, args.draws, args.seed)


def _parse_start(text, p, d, structure):
    if text is None:
        return None
    values = np.array([float(v) for v in text.split(",")])
    need = len(parameter_names(p, d, structure))
    if values.size != need:
        raise UsageError(f"--start needs {need} comma-separated values ({', '.join(parameter_names(p, d, structure))})")
    return MmnlParams.from_vector(values, p, d, structure)


def cmd_fit(args) -> int:
    data = load_dataset(args.data)
    integ = _fit_integration(args, data)
    start = _parse_start(args.start, data.n_fixed, data.n_random, args.structure)
    result = fit(data, integ, start=start, structure=args.structure, max_iter=args.max_iter)
    text = result.report(timing=args.timing)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if not args.timing:
        print(f"wall time {result.wall_time:.3f} s", file=sys.stderr)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_study(args) -> int:
    config = StudyConfig.load(args.config)
    if args.cache_dir:
        config.rule_cache = args.cache_dir
    if args.no_generate:
        config.generate_rules = False

    def progress(d, cov, method, k, record):
        status = record.get("error") or f"loglik {record['loglik']:.4f}"
        log.info("d=%d %s %s resample %d: %s", d, cov, method, k, status)

    report = run_study(config, args.out_dir, progress=progress)
    print(f"wrote {Path(args.out_dir) / 'report.csv'}")
    failed = sum(c.resamples_failed for c in report.cells)
    if failed:
        print(f"{failed} failed fit(s); see report.json", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqmix", description="Designed quadrature for mixed logit estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def rule_args(p, nodes=True):
        p.add_argument("--family", choices=["normal", "uniform"], default="normal", help="weight family")
        p.add_argument("--dim", type=int, required=True, help="dimension d")
        p.add_argument("--order", type=int, required=True, help="total polynomial degree r")
        if nodes:
            p.add_argument("--nodes", type=int, required=True, help="number of nodes n")
        p.add_argument("--eps", type=float, default=DEFAULT_EPS, help="residual target (default %(default)g)")
        p.add_argument("--seed", type=int, default=0, help="base seed; restart k uses seed+k")
        p.add_argument("--restarts", type=int, default=DEFAULT_RESTARTS, help="random restarts (default %(default)s)")

    p = sub.add_parser("gen-rule", help="generate a designed quadrature rule")
    rule_args(p)
    p.add_argument("--symmetric", choices=["auto", "yes", "no"], default="auto",
                   help="antipodal node layout (default: auto)")
    p.add_argument("--max-iter", type=int, default=2000, help="solver iterations per restart")
    p.add_argument("--out", help="output file (default: <cache-dir>/<family>-d<dim>-r<order>-n<nodes>)")
    p.add_argument("--cache-dir", help="rule cache directory (overrides $DQMIX_RULE_CACHE, default ./rules)")
    p.set_defaults(func=cmd_gen_rule)

    p = sub.add_parser("min-nodes", help="smallest node count reaching the residual target")
    rule_args(p, nodes=False)
    p.add_argument("--lo", type=int, default=1, help="smallest count to try")
    p.add_argument("--hi", type=int, default=200, help="largest count to try")
    p.set_defaults(func=cmd_min_nodes)

    p = sub.add_parser("verify-rule", help="re-check a rule file")
    p.add_argument("--rule", required=True, help="rule file")
    p.add_argument("--report-moments", action="store_true", help="print every moment error")
    p.set_defaults(func=cmd_verify_rule)

    p = sub.add_parser("simulate", help="simulate a choice dataset")
    p.add_argument("--dim", type=int, required=True, help="number of random coefficients")
    p.add_argument("--cov", choices=["diagonal", "full"], default="diagonal", help="covariance structure")
    p.add_argument("--N", type=int, default=1000, help="individuals")
    p.add_argument("--J", type=int, default=5, help="alternatives")
    p.add_argument("--T", type=int, default=5, help="choice situations per individual")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="estimate a mixed logit model")
    p.add_argument("--data", required=True, help="long-format choice CSV")
    p.add_argument("--method", choices=["dq", "tensor", "halton", "halton-scrambled", "mlhs"], required=True,
                   help="integration method")
    p.add_argument("--draws", type=int, default=100, help="QMC draws per individual, or tensor points per axis")
    p.add_argument("--rule", help="rule file for --method dq")
    p.add_argument("--order", type=int, help="with --nodes: look the dq rule up in the cache")
    p.add_argument("--nodes", type=int, help="with --order: look the dq rule up in the cache")
    p.add_argument("--cache-dir", help="rule cache directory")
    p.add_argument("--structure", choices=["full", "diagonal"], default="full", help="covariance structure")
    p.add_argument("--seed", type=int, default=0, help="seed for QMC draws")
    p.add_argument("--start", help="comma-separated starting vector (alpha, gamma, Cholesky entries)")
    p.add_argument("--max-iter", type=int, default=500, help="BFGS iteration limit")
    p.add_argument("--timing", action="store_true", help="include wall time in the report")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("study", help="run a Monte Carlo benchmark study")
    p.add_argument("--config", required=True, help="JSON study configuration")
    p.add_argument("--out-dir", required=True, help="report and fit-cache directory")
    p.add_argument("--cache-dir", help="rule cache directory (overrides the config)")
    p.add_argument("--no-generate", action="store_true", help="fail cells whose rules are not cached")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, RuleFileError, DatasetError, CapExceededError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
