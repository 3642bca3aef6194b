"""Command-line front end: tree configs in, CSV tables out.

Subcommands
-----------
analyze     exact hit probability along a delay sweep
simulate    discrete-event estimates with confidence intervals
approx      renewal/poisson hierarchy approximation
lump-stats  state-count table for n symmetric sub-trees
fit-trace   phase-type fit of a request trace
bound       delay bound (and optional optimal-delay search) for near-periodic input

Tree configuration files are YAML; see configs/ for commented examples.  All
numbers in CSV output carry nine significant digits.  Errors print a single
``E_<CODE>: message`` line to stderr and exit nonzero.
"""

import argparse
import csv
import math
import secrets
import sys

import numpy as np
import yaml

from ttldelay import distributions as dist
from ttldelay.cache_builders import CacheNode, CacheTreeSpec
from ttldelay.approximation import hierarchy_approx
from ttldelay.errors import ConfigError, TTLDelayError
from ttldelay.hierarchy import build_tree
from ttldelay.lumping import partition_count
from ttldelay.metrics import (
    MetricPoint,
    delay_upper_bound,
    hit_probability,
    optimal_delay,
    with_delay_means,
    zero_delay_variant,
)
from ttldelay.settings import default_settings
from ttldelay.simulator import SimConfig, simulate
from ttldelay.trace_pipeline import (
    coxian_pdf,
    fit_ph_em,
    interarrivals,
    remove_outliers,
    select_phases,
)

LUMP_AUTO_THRESHOLD = 10_000


def _num(x):
    return f"{x:.9g}"


def parse_distribution(cfg, context):
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigError(f"{context}: distribution must be a mapping with a 'kind'")
    kind = cfg["kind"]
    try:
        if kind == "exponential":
            rate = cfg["rate"] if "rate" in cfg else 1.0 / cfg["mean"]
            return dist.Exponential(rate)
        if kind == "erlang":
            phases = int(cfg["phases"])
            rate = cfg["rate"] if "rate" in cfg else phases / cfg["mean"]
            return dist.Erlang(phases, rate)
        if kind == "coxian":
            return dist.Coxian(tuple(cfg["rates"]), tuple(cfg["continue_probs"]))
        if kind == "general-ph":
            return dist.GeneralPH(tuple(cfg["initial"]),
                                  tuple(map(tuple, cfg["subgenerator"])))
        if kind == "deterministic":
            return dist.Deterministic(float(cfg["value"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: bad {kind} parameters: {exc}") from exc
    raise ConfigError(f"{context}: unknown distribution kind {kind!r}")


def parse_node(cfg, context="tree"):
    if not isinstance(cfg, dict) or "id" not in cfg:
        raise ConfigError(f"{context}: node must be a mapping with an 'id'")
    here = f"{context}/{cfg['id']}"
    children = tuple(parse_node(c, here) for c in cfg.get("children", []))
    arrival = cfg.get("arrival")
    return CacheNode(
        id=str(cfg["id"]),
        ttl=parse_distribution(cfg["ttl"], f"{here}.ttl"),
        delay=parse_distribution(cfg["delay"], f"{here}.delay"),
        children=children,
        arrival=parse_distribution(arrival, f"{here}.arrival") if arrival else None,
    )


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse config {path}{where}: {exc}") from exc
    if not isinstance(raw, dict) or "tree" not in raw:
        raise ConfigError(f"config {path} must contain a top-level 'tree' mapping")
    spec = CacheTreeSpec(parse_node(raw["tree"]))
    ref = raw.get("reference_interarrival")
    if ref is None:
        leaves = spec.leaves()
        ref = sum(leaf.arrival.mean() for leaf in leaves) / len(leaves)
    return spec, float(ref)


def parse_sweep(text):
    """Parse ``tau_delta=<start:step:stop>`` into a list of values."""
    if text is None:
        return None
    name, _, rng = text.partition("=")
    if name.strip() != "tau_delta":
        raise ConfigError(f"unsupported sweep variable {name.strip()!r}")
    parts = rng.split(":")
    if len(parts) != 3:
        raise ConfigError("sweep range must be start:step:stop")
    start, step, stop = (float(p) for p in parts)
    if step <= 0 or not all(math.isfinite(v) for v in (start, step, stop)):
        raise ConfigError("sweep bounds must be finite with a positive step")
    if stop < start:
        raise ConfigError("sweep stop must not precede start")
    n = int(round((stop - start) / step))
    values = [start + k * step for k in range(n + 1)]
    if values[-1] > stop + 1e-12:
        values.pop()
    return values or [start]


def _raw_state_count(spec):
    count = 1
    for node in spec.nodes():
        states = 2 + len(node.delay.ph()[0]) if dist.is_ph(node.delay) else 3
        if node.arrival is not None and dist.is_ph(node.arrival):
            phases = len(node.arrival.ph()[0])
            states *= phases
        count *= states
    return count


def _swept_specs(spec, ref, values):
    if values is None:
        return [(None, spec)]
    return [(v, with_delay_means(spec, v * ref)) for v in values]


def _decide_lump(mode, spec):
    if mode == "on":
        return True
    if mode == "off":
        return False
    return _raw_state_count(spec) > LUMP_AUTO_THRESHOLD


def _write_csv(path, header, rows):
    out = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if path:
            out.close()


def cmd_analyze(args):
    spec, ref = load_config(args.config)
    spec.validate(exact=True)
    values = parse_sweep(args.sweep)
    lump = _decide_lump(args.lump, spec)
    settings = default_settings()
    total = spec.total_request_rate()
    zero = build_tree(zero_delay_variant(spec, settings), lump_per_level=lump)
    p_zero = hit_probability(zero, total)
    rows = []
    for value, swept in _swept_specs(spec, ref, values):
        system = build_tree(swept, lump_per_level=lump, settings=settings)
        p = hit_probability(system, total)
        tau_delta = value if value is not None else ref
        point = MetricPoint(
            tau_delta=tau_delta,
            tau_t=spec.root.ttl.mean() / ref,
            p_hit=p,
            eta=1.0 - p / p_zero if p_zero > 0 else math.nan,
        )
        rows.append(
            [
                _num(point.tau_delta),
                _num(point.p_hit),
                _num(point.eta),
                _raw_state_count(swept),
                system.size,
            ]
        )
    _write_csv(
        args.out,
        ["sweep_value", "p_hit_exact", "eta", "states_original", "states_lumped"],
        rows,
    )


def cmd_simulate(args):
    spec, ref = load_config(args.config)
    spec.validate(exact=False)
    values = parse_sweep(args.sweep)
    seed = args.seed if args.seed is not None else secrets.randbits(31)
    rows = []
    for value, swept in _swept_specs(spec, ref, values):
        est = simulate(
            SimConfig(
                spec=swept,
                requests=args.requests,
                warmup_fraction=args.warmup,
                seed=seed,
                replications=args.replications,
            )
        )
        rows.append(
            [
                _num(value if value is not None else ref),
                _num(est.p_hit),
                _num(est.half_width_95),
                seed,
                est.request_count,
            ]
        )
    _write_csv(
        args.out,
        ["sweep_value", "p_hit_sim", "ci_half_width", "seed", "requests"],
        rows,
    )


def cmd_approx(args):
    spec, ref = load_config(args.config)
    spec.validate(exact=True)
    values = parse_sweep(args.sweep)
    rows = []
    for value, swept in _swept_specs(spec, ref, values):
        result = hierarchy_approx(swept, strategy=args.strategy)
        rows.append(
            [
                _num(value if value is not None else ref),
                _num(result.p_hit_sys),
                result.strategy,
                ";".join(result.fallbacks),
            ]
        )
    _write_csv(args.out, ["sweep_value", "p_hit_approx", "strategy", "fallbacks"], rows)


def _lump_plus_width(node):
    """Product-space width of one subtree after recursive sibling lumping."""
    own = 2 + len(node.delay.ph()[0])
    if node.arrival is not None:
        phases = len(node.arrival.ph()[0])
        if phases > 1:
            own *= phases
    if node.is_leaf:
        return own
    widths = [_lump_plus_width(c) for c in node.children]
    total = 1
    i = 0
    while i < len(widths):
        j = i
        while j < len(widths) and widths[j] == widths[i]:
            j += 1
        total *= partition_count(widths[i], j - i)
        i = j
    return total * own


def cmd_lump_stats(args):
    spec, _ = load_config(args.config)
    spec.validate(exact=True)
    n_values = [int(v) for v in parse_sweep(f"tau_delta={args.n}")]
    m_s = _raw_state_count(spec)
    m_plus = _lump_plus_width(spec.root)
    rows = []
    for n in n_values:
        if n < 1:
            raise ConfigError("subtree counts must be positive")
        rows.append(
            [
                n,
                m_s**n,
                partition_count(m_s, n),
                partition_count(m_plus, n),
            ]
        )
    _write_csv(
        args.out,
        ["n", "raw_states", "lumped_states", "lump_plus_states"],
        rows,
    )


def cmd_fit_trace(args):
    try:
        timestamps = np.loadtxt(args.trace, ndmin=1)
    except OSError as exc:
        raise ConfigError(f"cannot read trace {args.trace}: {exc}") from exc
    gaps = interarrivals(timestamps)
    before = gaps.size
    filtered = remove_outliers(gaps, cutoff=args.cutoff)
    if args.phases:
        report = fit_ph_em(filtered, args.phases, sample_count_before=before)
    else:
        lo, hi = (int(v) for v in args.phase_range.split(":"))
        report = select_phases(
            filtered, range(lo, hi + 1), sample_count_before=before
        )
    doc = {
        "phases": report.phases,
        "rates": [float(r) for r in report.fitted.rates],
        "continue_probs": [float(p) for p in report.fitted.continue_probs],
        "log_likelihood": float(report.log_likelihood),
        "log_likelihood_trace": [float(v) for v in report.log_likelihood_trace],
        "aic": float(report.aic),
        "bic": float(report.bic),
        "sample_count_before": report.sample_count_before,
        "sample_count_after": report.sample_count_after,
        "empirical_mean": float(report.empirical_mean),
        "fitted_mean": float(report.fitted_mean),
        "restarts_used": report.restarts_used,
    }
    text = yaml.safe_dump(doc, sort_keys=False)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.density_out:
        hist, edges = np.histogram(filtered, bins=args.bins, density=True)
        centers = 0.5 * (edges[:-1] + edges[1:])
        pdf = coxian_pdf(report.fitted, centers)
        _write_csv(
            args.density_out,
            ["bin_center", "empirical_density", "fitted_density"],
            [[_num(c), _num(h), _num(p)] for c, h, p in zip(centers, hist, pdf)],
        )


def cmd_bound(args):
    bound = delay_upper_bound(args.tau_t)
    print(f"tau_delta_plus = {_num(bound)}")
    if args.search:
        from ttldelay.metrics import tree_hit_probability

        def p_hit(td):
            delay = (
                dist.Exponential(default_settings().zero_delay_scale)
                if td == 0
                else dist.Exponential(1.0 / td)
            )
            spec = CacheTreeSpec(
                CacheNode(
                    "cache",
                    ttl=dist.Exponential(1.0 / args.tau_t),
                    delay=delay,
                    arrival=dist.Erlang(20, 20.0),
                )
            )
            return tree_hit_probability(spec)

        # Near-periodic optima sit in the first alignment window of the
        # request period; the no-harm bound itself can be huge for tiny TTLs.
        delta_star, p_max, kappa = optimal_delay(p_hit, 0.0, 2.0, tol=1e-3)
        print(f"delta_star = {_num(delta_star)}")
        print(f"p_hit_max = {_num(p_max)}")
        print(f"kappa = {_num(kappa)}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ttldelay",
        description="TTL cache hierarchies under object fetch delays",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="tree YAML file")
        p.add_argument("--out", help="output CSV path (default: stdout)")

    p = sub.add_parser("analyze", help="exact hit probability sweep")
    common(p)
    p.add_argument("--sweep", help="tau_delta=<start:step:stop>")
    p.add_argument("--lump", choices=("on", "off", "auto"), default="auto")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="discrete-event estimate sweep")
    common(p)
    p.add_argument("--sweep", help="tau_delta=<start:step:stop>")
    p.add_argument("--requests", type=int, default=1_000_000)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--seed", type=int, help="RNG seed (generated and recorded if absent)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("approx", help="hierarchy approximation sweep")
    common(p)
    p.add_argument("--sweep", help="tau_delta=<start:step:stop>")
    p.add_argument("--strategy", choices=("renewal", "poisson"), default="renewal")
    p.set_defaults(func=cmd_approx)

    p = sub.add_parser("lump-stats", help="state counts for n symmetric sub-trees")
    common(p)
    p.add_argument("--n", default="1:1:10", help="subtree count range start:step:stop")
    p.set_defaults(func=cmd_lump_stats)

    p = sub.add_parser("fit-trace", help="fit a phase-type law to a trace")
    p.add_argument("--trace", required=True, help="timestamp file, one per line")
    p.add_argument("--phases", type=int, help="fixed phase count")
    p.add_argument("--phase-range", default="1:8", help="BIC selection range lo:hi")
    p.add_argument("--cutoff", type=float, default=2.0, help="outlier z-score cutoff")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", help="fit report YAML path (default: stdout)")
    p.add_argument("--density-out", help="histogram/density CSV path")
    p.set_defaults(func=cmd_fit_trace)

    p = sub.add_parser("bound", help="delay bound for near-periodic requests")
    p.add_argument("--tau-t", type=float, required=True)
    p.add_argument("--search", action="store_true",
                   help="also search the hit-maximizing delay (Erlang-20 input)")
    p.set_defaults(func=cmd_bound)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except TTLDelayError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"E_VALUE: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
