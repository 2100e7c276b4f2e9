"""Command-line front end.

    fairmech solve   FILE
    fairmech pay     FILE --rule exact|sampled|normalized|proj|owner|all
    fairmech audit   FILE [--checks a,b,...] [--rule exact]
    fairmech shapley FILE [--game best|marg] [--mode exact|sampled]

Reports are JSON on stdout (or --out). Exit codes: 0 ok, 1 audit failure,
2 bad input, 3 instance too large for the requested exact computation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import io
from .audit import CHECKS, DeviationSpace, run_checks
from .errors import ContractViolation, SizeCapError, StructuralError
from .games import SHAPLEY_CAP, best_game, marg_game, shapley_exact, shapley_sampled
from .matching import OptCache, solve_optimal
from .model import TypeVector, value, verify
from .payments import EXACT_CAP, RULE_NAMES, make_rule
from .sampling import SamplingConfig

log = logging.getLogger("fairmech")

EXIT_OK, EXIT_AUDIT, EXIT_INPUT, EXIT_SIZE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _num(x: float):
    return int(x) if float(x).is_integer() and abs(x) < 2**53 else float(x)


def _clean(obj):
    """Integral floats as ints, recursively, so fixture output reads naturally."""
    if isinstance(obj, float):
        return _num(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _emit(doc, out=None):
    text = json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cfg(args, n) -> SamplingConfig:
    return SamplingConfig.from_accuracy(n, args.epsilon, args.delta, args.seed,
                                        m=args.samples, repetitions=args.reps)


def _alloc_doc(s, pi):
    return {a: list(s.ordered_goods(pi.bundle(a))) for a in s.agents}


def _need_true(f, cmd):
    if f.true is None:
        raise UsageError(f"{cmd} needs true scores: add a 'true' section to the scenario file")
    return f.true


def cmd_solve(args) -> int:
    f = io.load(args.file)
    pi = solve_optimal(f.scenario, f.declared)
    doc = {
        "command": "solve",
        "allocation": _alloc_doc(f.scenario, pi),
        "submitted": list(f.scenario.ordered_goods(pi.img)),
        "declared_value": value(pi, f.declared),
    }
    if f.true is not None:
        doc["true_value"] = value(pi, f.true)
    _emit(doc, args.out)
    return EXIT_OK


def cmd_pay(args) -> int:
    f = io.load(args.file)
    s, t = f.scenario, _need_true(f, "pay")
    rule_name = args.rule
    if rule_name == "exact" and s.n > EXACT_CAP:
        if not args.fallback_sampled:
            raise SizeCapError(f"{s.n} agents exceeds the exact-rule cap of {EXACT_CAP}; "
                               f"use --rule sampled (or --fallback-sampled)")
        log.warning("%d agents exceeds the exact cap of %d; using the sampled rule", s.n, EXACT_CAP)
        rule_name = "sampled"
    cfg = _cfg(args, s.n) if rule_name in ("sampled", "normalized") else None
    rule = make_rule(rule_name, cfg, variant_all=args.variant_all, reverse_sign=args.reverse_sign,
                     workers=args.workers)
    pi = solve_optimal(s, f.declared)
    view = verify(t, pi)
    rep = rule(s, pi, f.declared, view)
    diag = dict(rep.diagnostics)
    diag.update({
        "budget_sum": rep.budget(),
        "verified_value": view.value(pi),
        "verified_goods": list(s.ordered_goods(view.goods)),
        "opt_verified": _opt_verified(s, view),
    })
    _emit({
        "command": "pay",
        "rule": rep.rule,
        "allocation": _alloc_doc(s, pi),
        "declared_value": value(pi, f.declared),
        "payments": rep.payments,
        "utilities": rep.utilities,
        "sampling": rep.sampling,
        "diagnostics": diag,
    }, args.out)
    return EXIT_OK


def _opt_verified(s, view) -> float:
    """Best total over the verified goods using the verified scores."""
    goods = s.ordered_goods(view.goods)
    if not goods or not s.n:
        return 0.0
    w = TypeVector({a: {g: view.score(a, g) for g in goods} for a in s.agents})
    c = OptCache(s, w)
    return c.value((1 << s.n) - 1, c.goods_mask(goods))


def _parse_deviation(text):
    """'r1:p2=2,p3=2' -> ('r1', {'p2': 2.0, 'p3': 2.0})"""
    try:
        agent, rest = text.split(":", 1)
        upd = {}
        for part in rest.split(","):
            g, x = part.split("=", 1)
            upd[g.strip()] = float(x)
        return agent.strip(), upd
    except ValueError:
        raise UsageError(f"bad --deviation {text!r}; expected AGENT:GOOD=VALUE[,GOOD=VALUE...]") from None


def cmd_audit(args) -> int:
    f = io.load(args.file)
    s, t = f.scenario, _need_true(f, "audit")
    if args.checks is None or args.checks == "all":
        checks = list(CHECKS)
    else:
        checks = [c.strip() for c in args.checks.split(",") if c.strip()]
    unknown = [c for c in checks if c not in CHECKS]
    if unknown:
        raise UsageError(f"unknown checks {unknown}; choose from {', '.join(CHECKS)}")
    if not checks:
        return EXIT_OK
    named = tuple(_parse_deviation(d) for d in args.deviation or ())
    for a, upd in named:
        if not s.has_agent(a) or not all(s.has_good(g) for g in upd):
            raise UsageError(f"--deviation names unknown ids: {a} {sorted(upd)}")
    cfg = _cfg(args, s.n)
    rule = make_rule(args.rule, cfg, variant_all=args.variant_all, reverse_sign=args.reverse_sign)
    space = DeviationSpace(named=named, seed=args.seed, max_combinations=args.max_combinations)
    results = run_checks(s, t, rule, checks, seed=args.seed, trials=args.trials, space=space, cfg=cfg)
    failed = []
    for r in results:
        d = r.to_dict()
        cex = d.pop("counterexample")
        d["rule"] = rule.name
        sys.stdout.write(json.dumps(_clean(d), sort_keys=True) + "\n")
        if cex is not None:
            failed.append({"check": r.check, "rule": rule.name, "counterexample": cex})
    if failed:
        text = json.dumps(_clean(failed), indent=2, sort_keys=True) + "\n"
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stderr.write(text)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_shapley(args) -> int:
    f = io.load(args.file)
    s, t = f.scenario, _need_true(f, "shapley")
    cache = OptCache(s, t)
    g = best_game(s, t, cache) if args.game == "best" else marg_game(s, t, cache)
    doc = {"command": "shapley", "game": args.game, "mode": args.mode}
    if args.mode == "exact":
        if s.n > SHAPLEY_CAP:
            raise SizeCapError(f"{s.n} agents exceeds the exact Shapley cap of {SHAPLEY_CAP}; use --mode sampled")
        sv = shapley_exact(g)
        doc["sampling"] = None
    else:
        cfg = _cfg(args, s.n)
        sv = shapley_sampled(g, cfg, workers=args.workers)
        doc["sampling"] = cfg.as_dict()
    doc["values"] = dict(sv.values)
    doc["grand_coalition"] = g.worth_mask((1 << s.n) - 1)
    _emit(doc, args.out)
    return EXIT_OK


def _sampling_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.25)
    p.add_argument("--samples", type=int, default=None, help="permutations per repetition")
    p.add_argument("--reps", type=int, default=None, help="repetitions (odd)")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fairmech", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="canonical optimal allocation for the declared scores")
    p.add_argument("file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("pay", help="allocate, verify and compute payments")
    p.add_argument("file")
    p.add_argument("--rule", choices=RULE_NAMES, default="exact")
    _sampling_flags(p)
    p.add_argument("--variant-all", action="store_true", help="budget-balanced variant of 'all'")
    p.add_argument("--reverse-sign", action="store_true", help="verbatim sign for the normalized rule")
    p.add_argument("--fallback-sampled", action="store_true",
                   help="use the sampled rule when exact is over the agent cap")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pay)

    p = sub.add_parser("audit", help="run property checks")
    p.add_argument("file")
    p.add_argument("--checks", default=None, help=f"comma list from: {', '.join(CHECKS)} (default all)")
    p.add_argument("--rule", choices=RULE_NAMES, default="exact")
    _sampling_flags(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-combinations", type=int, default=2000)
    p.add_argument("--deviation", action="append",
                   help="extra deviation tried first, e.g. r1:p2=2,p3=2 (repeatable)")
    p.add_argument("--variant-all", action="store_true")
    p.add_argument("--reverse-sign", action="store_true")
    p.add_argument("--out", help="write counterexamples here instead of stderr")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("shapley", help="Shapley value of the best or marg game on true scores")
    p.add_argument("file")
    p.add_argument("--game", choices=("best", "marg"), default="best")
    p.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    _sampling_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_shapley)
    return ap


def _fail(e):
    sys.stderr.write(f"fairmech: error: {e}\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except SizeCapError as e:
        _fail(e)
        return EXIT_SIZE
    except (io.InputError, StructuralError, ContractViolation, UsageError, ValueError) as e:
        _fail(e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
