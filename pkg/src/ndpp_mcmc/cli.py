"""Command-line front end.

Subcommands: gen, sample, validate, bench, tv.  Every command is
deterministic given ``--seed`` (apart from wall-clock columns).  Tabular
output is CSV with a header row and 17 significant digits.

Exit codes: 0 success, 1 numerical failure, 2 validation failure or bad
arguments, 3 IO/format error, 4 enumeration budget exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from contextlib import contextmanager
from itertools import combinations
from math import comb

import numpy as np
from scipy import stats

from .errors import BudgetExceededError, KernelFormatError, NDPPError
from .kernel import (
    EPS_DET,
    build_kernel,
    condition_inner,
    det_subset,
    load_kernel,
    save_kernel,
    synth_kernel,
)
from .oracle import (
    KNDPP_BUDGET,
    empirical_distribution,
    exact_kndpp_table,
    exact_ndpp_table,
    tv_distance,
)
from .samplers import (
    default_t_iter,
    mcmc_kndpp_batch,
    mcmc_ndpp_batch,
    up_operator_batch,
)
from .spectral import (
    EPS_EIG,
    elementary_symmetric,
    nonzero_eigvals,
    size_distribution,
    symmetrize_proposal,
    youla_decompose,
)
from .tree import build_tree, item_probabilities, traverse_batch

EXIT_OK, EXIT_NUMERIC, EXIT_VALIDATION, EXIT_IO, EXIT_BUDGET = 0, 1, 2, 3, 4


class ValidationFailed(Exception):
    pass


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def subset_str(S) -> str:
    return "-".join(str(int(a)) for a in S)


@contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def write_csv(path, header, rows):
    with _output(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def parse_synth(text):
    try:
        n, d, seed = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected n,d,seed") from None
    return n, d, seed


def parse_int_list(text):
    try:
        return [int(float(p)) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None


def resolve_kernel(args, default_synth=None):
    if args.kernel is not None:
        return load_kernel(args.kernel)
    synth = args.synth or default_synth
    if synth is None:
        raise ValueError("one of --kernel or --synth is required")
    return synth_kernel(*synth)


def resolve_tree(kernel, args):
    return build_tree(kernel.X, args.leaf_block)


# -- gen -----------------------------------------------------------------------


def cmd_gen(args):
    if args.synth is not None:
        n, d, seed = args.synth
    else:
        if args.n is None or args.d is None:
            raise ValueError("gen needs --synth n,d,seed or --n and --d")
        n, d, seed = args.n, args.d, args.seed
    if args.out is None:
        raise ValueError("gen needs --out")
    kernel = synth_kernel(n, d, seed)
    save_kernel(kernel, args.out)
    lam = np.abs(nonzero_eigvals(kernel))
    rank = int(np.sum(lam > EPS_EIG * max(lam.max(initial=0.0), 1e-300)))
    print(json.dumps({
        "path": str(args.out), "n": n, "d": d, "seed": seed, "rank": rank,
        "abs_lambda_max": float(lam.max()), "abs_lambda_min": float(lam.min()),
    }))
    return EXIT_OK


# -- sample --------------------------------------------------------------------


def cmd_sample(args):
    kernel = resolve_kernel(args)
    tree = resolve_tree(kernel, args)
    rng = np.random.default_rng(args.seed)
    N = args.samples
    if args.k is not None:
        out = mcmc_kndpp_batch(kernel, tree, args.k, N, rng, t_iter=args.t_iter)
        subsets = out.subsets
        rejections = out.rejections
    else:
        table = elementary_symmetric(nonzero_eigvals(kernel))
        t_iter = default_t_iter if args.t_iter is None else args.t_iter
        out = mcmc_ndpp_batch(kernel, tree, table, N, rng, t_iter=t_iter)
        subsets = out.subsets
        rejections = out.rejections
    # chains run in lockstep, so the per-sample time is amortized
    micros = 1e6 * out.wall_time / max(N, 1)
    rows = ((i, subset_str(S), len(S), int(r), "" if args.no_timing else micros)
            for i, (S, r) in enumerate(zip(subsets, rejections)))
    write_csv(args.out, ["sample", "subset", "size", "rejections", "microseconds"], rows)
    return EXIT_OK


# -- validate ------------------------------------------------------------------


VALIDATE_ITEMS = 12  # larger kernels are checked on their leading items


def _check(report, name, fn):
    try:
        ok, detail = fn()
        ok = bool(ok)
    except BudgetExceededError:
        raise
    except (NDPPError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    report.append({"check": name, "passed": ok, "detail": detail})


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _random_conditioning(kernel, rng, size, tries=50):
    for _ in range(tries):
        A = np.sort(rng.choice(kernel.n, size=size, replace=False))
        try:
            condition_inner(kernel, None, A)
            return A
        except NDPPError:
            continue
    return None


def validation_report(kernel, budget, seed=0):
    """Run the invariant suites on ``kernel``.

    Deterministic checks always run; checks that need random draws use up to
    ``budget`` draws each and are skipped when ``budget`` is 0.
    """
    rng = np.random.default_rng(seed)
    n, d = kernel.n, kernel.d
    report = []
    tree = build_tree(kernel.X, 1)
    try:
        table = elementary_symmetric(nonzero_eigvals(kernel))
        table_error = None
    except (NDPPError, ValueError, np.linalg.LinAlgError) as exc:
        table, table_error = None, f"eigenvalues unavailable: {type(exc).__name__}: {exc}"

    def factors():
        X_ok = np.array_equal(kernel.X, np.hstack([kernel.V, kernel.B]))
        sym = np.linalg.eigvalsh(kernel.W + kernel.W.T)
        return X_ok and sym.min() >= -EPS_EIG, f"min eig of W + W^T = {sym.min():.3e}"

    def normalizer():
        if table is None:
            return False, table_error
        worst = 0.0
        absl = np.abs(table.lambdas)
        rank = int(np.sum(absl > EPS_EIG * max(absl.max(initial=0.0), 1e-300)))
        floor = EPS_DET * max(float(table.e.max()), 1.0)
        for k in range(1, min(n, d) + 1):
            if comb(n, k) > KNDPP_BUDGET:
                raise BudgetExceededError(f"C({n}, {k}) subsets exceed the budget")
            XS = kernel.X[np.array(list(combinations(range(n), k)), dtype=np.intp)]
            with np.errstate(all="ignore"):
                total = float(np.linalg.det(XS @ kernel.W @ np.swapaxes(XS, -1, -2)).sum())
            ek = float(table.e[k])
            if not np.isfinite(total):
                return False, f"non-finite determinant sum at k={k}"
            if k > rank:
                # past the rank both sides are roundoff; they must vanish on the table's scale
                if max(abs(total), abs(ek)) > floor:
                    return False, f"k={k} exceeds rank {rank} but sums are {total:.3e} and {ek:.3e}"
                continue
            worst = max(worst, abs(total - ek) / max(abs(ek), EPS_DET))
        return worst <= 1e-8, f"max relative error {worst:.3e} (rank {rank})"

    def youla():
        skew = 0.5 * (kernel.W - kernel.W.T)
        f = youla_decompose(skew)
        err = np.linalg.norm(f.reconstruct() - skew) / max(np.linalg.norm(skew), 1e-300)
        return err <= 1e-9, f"relative reconstruction error {err:.3e}"

    def dominance():
        sizes = range(1, min(n, d + 1) + 1)
        if sum(comb(n, m) for m in sizes) > KNDPP_BUDGET:
            raise BudgetExceededError("subset enumeration for the dominance check exceeds the budget")
        worst = 0.0
        for size in range(0, min(d - 2, 2) + 1):
            A = _random_conditioning(kernel, rng, size) if size else np.zeros(0, dtype=np.intp)
            if A is None:
                continue
            WA = condition_inner(kernel, None, A).WA
            What = symmetrize_proposal(WA)
            for m in sizes:
                XS = kernel.X[np.array(list(combinations(range(n), m)), dtype=np.intp)]
                XSt = np.swapaxes(XS, -1, -2)
                with np.errstate(all="ignore"):
                    gap = np.linalg.det(XS @ WA @ XSt) - np.linalg.det(XS @ What @ XSt)
                if m >= d:
                    gap = np.abs(gap)
                if not np.all(np.isfinite(gap)):
                    return False, f"non-finite determinant with A={A.tolist()}, |S|={m}"
                worst = max(worst, float(gap.max()))
        return worst <= 1e-9, f"max violation {worst:.3e}"

    def tree_sums():
        err = 0.0
        for i, (l, r) in enumerate(zip(tree.left, tree.right)):
            if l >= 0:
                err = max(err, np.abs(tree.agg[i] - tree.agg[l] - tree.agg[r]).max())
        err = max(err, np.abs(tree.root - kernel.X.T @ kernel.X).max())
        scale = max(np.abs(tree.root).max(), 1.0)
        return err <= 1e-9 * scale, f"max aggregate error {err:.3e}"

    def esym():
        if table is None:
            return False, table_error
        E = table.E
        rec = np.abs(E[1:, 1:] - E[:-1, 1:] - table.lambdas[:, None] * E[:-1, :-1]).max()
        scale = max(np.abs(E).max(), 1.0)
        return rec <= 1e-12 * scale and np.all(E[-1].real >= -1e-12 * scale), f"recursion residual {rec:.3e}"

    _check(report, "kernel_factors", factors)
    _check(report, "normalizer", normalizer)
    _check(report, "youla_reconstruction", youla)
    _check(report, "minor_dominance", dominance)
    _check(report, "tree_aggregates", tree_sums)
    _check(report, "elementary_symmetric", esym)

    if budget > 0:
        draws = int(budget)

        def traversal():
            G = rng.normal(size=(d, d))
            Q = G @ G.T
            items = traverse_batch(tree, Q, rng, size=draws)
            p = item_probabilities(tree, Q)
            pv = _chi2(np.bincount(items, minlength=n), p)
            return pv > 1e-3, f"chi-square p-value {pv:.3e}"

        def up_operator_dist():
            A = _random_conditioning(kernel, rng, 1) if d > 2 else np.zeros(0, dtype=np.intp)
            if A is None:
                return True, "no valid conditioning set found"
            ratios = []
            pairs, _, ok = up_operator_batch(kernel, tree, np.tile(A, (draws, 1)), rng, ratios=ratios)
            rest = [a for a in range(n) if a not in set(A.tolist())]
            keys = list(combinations(rest, 2))
            p = np.array([det_subset(kernel, list(A) + list(Y)) for Y in keys])
            counts = empirical_distribution(pairs[ok])
            obs = np.array([counts.get(Y, 0.0) for Y in keys]) * ok.sum()
            pv = _chi2(obs, p / p.sum())
            top = max(float(r.max()) for r in ratios)
            return pv > 1e-3 and top <= 1 + 1e-9, f"chi-square p-value {pv:.3e}, max ratio {top:.12f}"

        def chain_tv():
            k = min(3, d, n)
            if k < 2:
                return True, "k < 2, chain undefined"
            exact = exact_kndpp_table(kernel, k)
            out = mcmc_kndpp_batch(kernel, tree, k, draws, rng)
            tv = tv_distance(exact, empirical_distribution(out.subsets))
            base = tv_distance(exact, empirical_distribution(exact.sample(draws, rng)))
            return tv <= base + 0.02, f"tv {tv:.4f} vs resample {base:.4f}"

        def size_marginal():
            if table is None:
                return False, table_error
            # sizes are drawn before the chains run, so one step per chain suffices
            out = mcmc_ndpp_batch(kernel, tree, table, draws, rng, t_iter=1)
            target = size_distribution(table)
            emp = np.bincount(out.sizes, minlength=target.size) / draws
            tv = np.abs(emp - target).max()
            base = 3 * np.sqrt(0.25 / draws) + 1e-12
            return tv <= max(0.02, base), f"size tv {tv:.4f}"

        _check(report, "tree_traversal", traversal)
        _check(report, "up_operator_distribution", up_operator_dist)
        _check(report, "kndpp_chain_tv", chain_tv)
        _check(report, "ndpp_size_marginal", size_marginal)
    return report


def _chi2(counts, p):
    counts = np.asarray(counts, dtype=np.float64)
    keep = p > 0
    if counts[~keep].sum() > 0:
        return 0.0
    expected = p[keep] / p[keep].sum() * counts.sum()
    return float(stats.chisquare(counts[keep], expected).pvalue)


def cmd_validate(args):
    kernel = resolve_kernel(args, default_synth=(8, 4, args.seed))
    checked = kernel
    if kernel.n > VALIDATE_ITEMS:
        # the identities hold for any row subset, and enumeration needs few items
        r = VALIDATE_ITEMS
        checked = build_kernel(kernel.V[:r], kernel.B[:r], kernel.D)
    with np.errstate(all="ignore"):
        report = validation_report(checked, args.budget, args.seed)
    passed = all(r["passed"] for r in report)
    doc = {"n": kernel.n, "d": kernel.d, "items_checked": checked.n, "budget": args.budget, "passed": passed,
           "failed": [r["check"] for r in report if not r["passed"]], "checks": report}
    with _output(args.out) as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    if not passed:
        raise ValidationFailed("failed checks: " + ", ".join(doc["failed"]))
    return EXIT_OK


# -- bench ---------------------------------------------------------------------


def bench_rows(n_list, d, k_list, samples, seed, leaf_block, t_iter=None):
    for n in n_list:
        for k in k_list:
            row = {"n": n, "d": d, "k": k, "build_seconds": "", "mean_sample_seconds": "",
                   "mean_rejections": "", "error": ""}
            try:
                kernel = synth_kernel(n, d, seed)
                start = time.perf_counter()
                tree = build_tree(kernel.X, leaf_block)
                row["build_seconds"] = time.perf_counter() - start
                rng = np.random.default_rng(seed)
                times, rejects = [], []
                for _ in range(samples):
                    out = mcmc_kndpp_batch(kernel, tree, k, 1, rng, t_iter=t_iter)
                    times.append(out.wall_time)
                    rejects.append(out.rejections[0])
                row["mean_sample_seconds"] = float(np.mean(times))
                row["mean_rejections"] = float(np.mean(rejects))
                del tree, kernel
            except MemoryError:
                row["error"] = "allocation failure"
            except NDPPError as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            yield row


BENCH_COLUMNS = ["n", "d", "k", "build_seconds", "mean_sample_seconds", "mean_rejections", "error"]


def cmd_bench(args):
    k_list = args.k_list or [args.k if args.k is not None else 10]
    rows = bench_rows(args.n_list, args.d, k_list, args.samples, args.seed,
                      args.leaf_block, args.t_iter)
    write_csv(args.out, BENCH_COLUMNS, ([r[c] for c in BENCH_COLUMNS] for r in rows))
    return EXIT_OK


# -- tv ------------------------------------------------------------------------


def sample_grid(max_samples, points):
    grid = np.unique(np.geomspace(min(100, max_samples), max_samples, points).astype(int))
    return [int(g) for g in grid]


def tv_curve(kernel, k, t_iter, max_samples, seed, points=8, unconstrained=False, leaf_block=None):
    """Rows ``(samples, tv_mcmc, tv_exact_resample)`` over a log grid."""
    rng = np.random.default_rng(seed)
    tree = build_tree(kernel.X, leaf_block)
    if unconstrained:
        exact = exact_ndpp_table(kernel)
        table = elementary_symmetric(nonzero_eigvals(kernel))
        t = default_t_iter if t_iter is None else t_iter
        subsets = mcmc_ndpp_batch(kernel, tree, table, max_samples, rng, t_iter=t).subsets
    else:
        exact = exact_kndpp_table(kernel, k)
        subsets = mcmc_kndpp_batch(kernel, tree, k, max_samples, rng, t_iter=t_iter).as_tuples()
    resample = exact.sample(max_samples, rng)
    for m in sample_grid(max_samples, points):
        yield (m, tv_distance(exact, empirical_distribution(subsets[:m])),
               tv_distance(exact, empirical_distribution(resample[:m])))


def cmd_tv(args):
    kernel = resolve_kernel(args, default_synth=(10, 8, args.seed))
    if not args.unconstrained and args.k is None:
        raise ValueError("tv needs --k unless --unconstrained is given")
    rows = list(tv_curve(kernel, args.k, args.t_iter, args.samples, args.seed,
                         args.points, args.unconstrained, args.leaf_block))
    write_csv(args.out, ["samples", "tv_mcmc", "tv_exact_resample"], rows)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ndpp-mcmc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, kernel=True, samples=1000):
        if kernel:
            src = sp.add_mutually_exclusive_group()
            src.add_argument("--kernel", help="kernel file (binary, or text with .ndpp.txt)")
            src.add_argument("--synth", type=parse_synth, metavar="N,D,SEED",
                             help="use a synthetic kernel instead of a file")
        sp.add_argument("--k", type=int, help="subset size (omit for unconstrained)")
        sp.add_argument("--t-iter", type=int, help="chain length (default k^2)")
        sp.add_argument("--samples", type=int, default=samples)
        sp.add_argument("--leaf-block", type=int, help="items per tree leaf")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output path (default stdout)")

    g = sub.add_parser("gen", help="write a synthetic kernel file")
    g.add_argument("--synth", type=parse_synth, metavar="N,D,SEED")
    g.add_argument("--n", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("sample", help="draw MCMC samples to CSV")
    common(s)
    s.add_argument("--no-timing", action="store_true", help="leave the microseconds column empty")
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("validate", help="run invariant suites, JSON report")
    common(v, samples=0)
    v.add_argument("--budget", type=int, default=10_000,
                   help="random draws per statistical check; 0 runs deterministic checks only")
    v.set_defaults(func=cmd_validate)

    b = sub.add_parser("bench", help="preprocessing and per-sample timings")
    common(b, kernel=False, samples=10)
    b.add_argument("--n-list", type=parse_int_list, default=[100, 1000, 10000, 100000])
    b.add_argument("--k-list", type=parse_int_list, help="sweep k instead of a single --k")
    b.add_argument("--d", type=int, default=50)
    b.set_defaults(func=cmd_bench, leaf_block=8)

    t = sub.add_parser("tv", help="TV distance to the exact table vs sample count")
    common(t, samples=100_000)
    t.add_argument("--unconstrained", action="store_true")
    t.add_argument("--points", type=int, default=8, help="sample counts on the log grid")
    t.set_defaults(func=cmd_tv)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationFailed as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetExceededError as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (KernelFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NDPPError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
