"""End-to-end acceptance checks, one test per criterion, each at its stated tolerance."""

import json
import math
import time

import numpy as np
import pandas as pd
import pytest

from geoapportion.apportion import ApportionError, fit_geometric, fit_model, solve_intensities
from geoapportion.cli import main
from geoapportion.geometry import SimplexCloud, find_extreme_points, max_volume_subset
from geoapportion.interpret import DesignSpec, ks_one_sided, mann_whitney_one_sided, regress_sources
from geoapportion.resample import align_sources, bootstrap, diagnostics, select_k
from geoapportion.synth import SynthConfig, generate, generate_covariates
from oracles import (
    best_alignment, brute_max_volume, cayley_menger_volume, d_plus, grid_nnls, in_hull_of_others,
    permutation_pvalue, u_statistic,
)


def aligned_error(phi, truth):
    perm = best_alignment(phi, truth)
    return float(np.abs(phi[perm] - truth).max())


def test_c01_ground_truth_recovery(verdict):
    base = dict(n=50_000, J=8, K=3, epsilon=0.0, p_pure=0.05, seed=0)
    clean = generate(SynthConfig(sigma=0.0, **base))
    t0 = time.perf_counter()
    err_clean = aligned_error(fit_geometric(clean.matrix, 3).phi, clean.phi0)
    t_clean = time.perf_counter() - t0

    noisy = generate(SynthConfig(sigma=0.02, **base))
    t0 = time.perf_counter()
    err_noisy = aligned_error(fit_geometric(noisy.matrix, 3).phi, noisy.phi0)
    t_noisy = time.perf_counter() - t0

    # informational: how often the noisy bound holds across other generator seeds
    other = [aligned_error(fit_geometric(d.matrix, 3).phi, d.phi0)
             for d in (generate(SynthConfig(sigma=0.02, **{**base, "seed": s})) for s in range(1, 11))]
    ok = err_clean <= 1e-6 and err_noisy <= 0.05 and max(t_clean, t_noisy) <= 60
    verdict(1, "ground-truth attribution recovery", ok,
            f"sigma=0 err={err_clean:.2e}, sigma=0.02 err={err_noisy:.4f}, "
            f"fit time {t_clean:.1f}s/{t_noisy:.1f}s; seeds 1-10 at sigma=0.02: "
            f"{sum(e <= 0.05 for e in other)}/10 within 0.05, max {max(other):.3f}")


def test_c02_column_stochastic(verdict):
    rng = np.random.default_rng(2)
    worst_sum, worst_range, failures = 0.0, 0.0, []
    for trial in range(100):
        n, J = int(rng.integers(30, 300)), int(rng.integers(3, 9))
        K = int(rng.integers(1, min(J, 5) + 1))
        Y = rng.random((n, J)) * rng.uniform(0.1, 10, J)
        for method, opts in (("geometric", {}), ("xray", {}), ("ls-nmf", {"max_iter": 100})):
            try:
                phi = fit_model(Y, K, method=method, seed=trial, **opts).phi
            except ApportionError as exc:
                failures.append((trial, method, str(exc)))
                continue
            worst_sum = max(worst_sum, float(np.abs(phi.sum(axis=0) - 1).max()))
            worst_range = max(worst_range, float(max(-phi.min(), phi.max() - 1, 0.0)))
    ok = worst_sum <= 1e-10 and worst_range == 0.0 and not failures
    verdict(2, "attribution columns sum to one", ok,
            f"300 fits, max |colsum-1|={worst_sum:.1e}, range violation={worst_range:.1e}, failures={len(failures)}")


def test_c03_max_volume_oracle(verdict):
    rng = np.random.default_rng(3)
    exact_match, greedy_ok = 0, 0
    for _ in range(50):
        m = int(rng.integers(6, 13))
        P = rng.dirichlet(np.ones(int(rng.integers(3, 7))), size=m)
        pos, vol = max_volume_subset(P, 3, strategy="exhaustive")
        brute_set, brute_vol = brute_max_volume(P, 3)
        exact_match += sorted(pos.tolist()) == list(brute_set) and math.isclose(vol, brute_vol, rel_tol=1e-9)
        greedy_ok += max_volume_subset(P, 3, strategy="greedy-swap")[1] >= 0.95 * vol
    ok = exact_match == 50 and greedy_ok >= 0.95 * 50
    verdict(3, "max-volume subset search", ok,
            f"exhaustive matches brute force {exact_match}/50, greedy >= 0.95x on {greedy_ok}/50")


def test_c04_extremality_certificates(verdict):
    rng = np.random.default_rng(4)
    agree = 0
    for _ in range(50):
        J = int(rng.integers(3, 6))
        n = int(rng.integers(J + 1, 201))
        pts = rng.dirichlet(rng.uniform(0.3, 3, J), size=n)
        cloud = SimplexCloud(pts, np.ones(n), np.arange(n), np.array([], dtype=int))
        ours = find_extreme_points(cloud, method="lp").indices.tolist()
        brute = [i for i in range(n) if not in_hull_of_others(pts, i)]
        agree += ours == brute
    verdict(4, "exact hull vertices match convex-combination oracle", agree == 50, f"{agree}/50 clouds identical")


def test_c05_nnls_grid_oracle(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        H = rng.dirichlet(np.ones(3), size=2)
        y = rng.random(3) * rng.uniform(0.1, 2)
        w = solve_intensities(y[None, :], H).W_tilde[0]
        ours = float(np.sum((y - w @ H) ** 2))
        _, grid = grid_nnls(y, H, step=1e-3)
        worst = max(worst, abs(ours - grid))
    verdict(5, "intensity NNLS matches lattice search", worst <= 1e-5, f"max objective gap {worst:.2e}")


def test_c06_bootstrap_degeneracy(verdict):
    d = generate(SynthConfig(n=2000, J=6, K=3, seed=6))
    runs, summary, _ = bootstrap(d.matrix, 3, B=5, resampler=lambda n, rng: np.arange(n))
    diag = diagnostics(summary, runs)
    ok = bool((summary.phi_se == 0).all()) and diag.cvar == 0.0 and diag.rank_stability == 1.0
    verdict(6, "identical replicates give zero spread", ok,
            f"max se={summary.phi_se.max()}, cvar={diag.cvar}, rank stability={diag.rank_stability}")


@pytest.mark.slow
def separated_truth(config, margin, max_attempts=1000):
    """Redraw until every pollutant's true top source leads the runner-up by ``margin``.

    The dominant-source stability score is only informative when the truth has
    a well-defined dominant source per pollutant.
    """
    for attempt in range(max_attempts):
        d = generate(SynthConfig(**{**config.__dict__, "seed": config.seed + 1000 * attempt}))
        top2 = np.sort(d.phi0, axis=0)[-2:]
        if (top2[1] - top2[0]).min() >= margin:
            return d
    raise RuntimeError("no draw met the margin")


def test_c07_k_selection(verdict):
    t0 = time.perf_counter()
    hits, rows = 0, []
    for trial in range(10):
        d = separated_truth(SynthConfig(n=20_000, J=8, K=3, sigma=0.02, seed=700 + trial), margin=0.1)
        table = select_k(d.matrix, [2, 3, 4], B=25, seed=trial)
        rs = dict(zip(table.K, table.rank_stability))
        hits += rs[3] >= max(rs.values())
        rows.append("/".join(f"{rs[k]:.2f}" for k in (2, 3, 4)))
    elapsed = time.perf_counter() - t0
    ok = hits >= 9 and elapsed <= 600
    verdict(7, "rank stability peaks at the true K", ok,
            f"{hits}/10 trials, {elapsed:.0f}s; R(K=2/3/4) per trial: {', '.join(rows)}")


def test_c08_statistical_tests(verdict):
    mw = mann_whitney_one_sided([3, 4, 5], [1, 2])
    x = np.random.default_rng(8).standard_normal(40)
    ks = ks_one_sided(x, x.copy())
    exact_ok = mw.p_value == pytest.approx(0.1, abs=1e-12) and ks.statistic == 0.0 and ks.p_value == 1.0

    rng = np.random.default_rng(80)
    worst_mw = worst_ks = 0.0
    for case in range(20):
        n = int(rng.integers(30, 200))
        m = int(rng.integers(30, 400))
        xs = rng.standard_normal(n) + rng.uniform(0.0, 0.5)
        ys = rng.standard_normal(m)
        worst_mw = max(worst_mw, abs(mann_whitney_one_sided(xs, ys).p_value
                                     - permutation_pvalue(xs, ys, u_statistic, seed=case)))
        worst_ks = max(worst_ks, abs(ks_one_sided(xs, ys).p_value
                                     - permutation_pvalue(xs, ys, d_plus, seed=case)))
    ok = exact_ok and worst_mw <= 0.02 and worst_ks <= 0.02
    verdict(8, "one-sided tests: exact values and permutation agreement", ok,
            f"MW p={mw.p_value}, KS D+={ks.statistic} p={ks.p_value}; "
            f"max |p - perm p| MW={worst_mw:.4f}, KS={worst_ks:.4f}")


@pytest.mark.slow
def test_c09_regression_recovery(verdict):
    effects = {0: {"u": 1.0, "u:v": 1.0}, 1: {"v": 1.0}}
    spec = DesignSpec("intensity", ["u", "v"], [("u", "v")], contrasts={"u+u:v": ["u", "u:v"]})
    covered = total = excluded = nonzero = 0
    for trial in range(50):
        d = generate_covariates(SynthConfig(n=5000, J=8, K=3, sigma=0.0, seed=900 + trial), effects)
        runs, _, ref = bootstrap(d.matrix, 3, B=100, seed=trial, keep_intensities=True, keep_samples=False)
        # fitted source perm[k] plays the role of true source k
        perm = align_sources(d.H0, ref.H_star)
        results = regress_sources(d.matrix.covariates, runs, {int(perm[k]): spec for k in range(3)}, reference=ref)
        for k in range(3):
            res = results[int(perm[k])]
            truth = {t: effects.get(k, {}).get(t, 0.0) for t in ("u", "v", "u:v")}
            truth["u+u:v"] = truth["u"] + truth["u:v"]
            for term, value in truth.items():
                i = res.names.index(term)
                total += 1
                covered += res.ci_low[i] <= value <= res.ci_high[i]
                if value != 0:
                    nonzero += 1
                    excluded += not (res.ci_low[i] <= 0 <= res.ci_high[i])
    coverage, exclusion = covered / total, excluded / nonzero
    ok = coverage >= 0.90 and exclusion >= 0.95
    verdict(9, "bootstrap regression intervals", ok,
            f"coverage {coverage:.3f} over {total} intervals, zero excluded for {exclusion:.3f} of {nonzero} nonzero effects")


def test_c10_scale_invariance(verdict):
    d = generate(SynthConfig(n=10_000, J=8, K=3, seed=10))
    base = fit_geometric(d.matrix, 3).phi
    worst, argmax_ok = 0.0, True
    for j in range(8):
        for c in (0.1, 10.0):
            Y = d.Y.copy()
            Y[:, j] *= c
            phi = fit_geometric(Y, 3).phi
            perm = best_alignment(phi, base)
            worst = max(worst, float(np.abs(phi[perm] - base).max()))
            argmax_ok &= bool((phi[perm].argmax(axis=0) == base.argmax(axis=0)).all())
    ok = worst <= 1e-6 and argmax_ok
    verdict(10, "attribution invariant to pollutant rescaling", ok,
            f"16 rescalings, max change {worst:.2e}, argmax unchanged={argmax_ok}")


@pytest.mark.slow
def test_c11_throughput(verdict):
    d = generate(SynthConfig(n=451_946, J=8, K=3, sigma=0.02, seed=11))
    t0 = time.perf_counter()
    model = fit_geometric(d.matrix, 3)
    elapsed = time.perf_counter() - t0
    ok = elapsed <= 600 and np.allclose(model.phi.sum(axis=0), 1.0)
    verdict(11, "full-scale fit time", ok, f"n=451946, J=8, K=3 in {elapsed:.1f}s")


def _tables(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_c12_cli_determinism(verdict, tmp_path, raw_csv, schema_file):
    rows = [f"2023-02-{3 + m // 1440:02d} {(m // 60) % 24:02d}:{m % 60:02d},L{1 + m % 2},{1 + m % 3},{3 + m % 5},"
            f"{7 + m % 4},{12 + m % 6},{0.5 - 0.1 * (m % 7)},{200 + m % 50},{3 + m % 4},{10 + m % 9},{5 + m % 2}"
            for m in range(3000)]
    raw = raw_csv(rows)
    sim = tmp_path / "simulate"
    steps = [
        ["preprocess", "--input", raw, "--schema", schema_file, "--outlier", "TSP-PM10<20000"],
        ["simulate", "--n", 3000, "--J", 5, "--K", 3, "--sigma", 0.01, "--locations", "L1", "L2",
         "--effects", '{"0": {"u": 1.0}}', "--seed", 4],
        ["fit", "--matrix", sim / "matrix.csv", "--K", 3],
        ["bootstrap", "--matrix", sim / "matrix.csv", "--K", 3, "--B", 5, "--keep-intensities", "--archive"],
        ["select-k", "--matrix", sim / "matrix.csv", "--K", 2, 3, "--B", 3],
        ["regress", "--matrix", sim / "matrix.csv", "--bootstrap", tmp_path / "bootstrap", "--terms", "u"],
        ["diurnal", "--matrix", sim / "matrix.csv", "--fit", tmp_path / "fit"],
        ["case-study", "--matrix", sim / "matrix.csv", "--start", "2023-01-02 00:10", "--end",
         "2023-01-02 00:40", "--group", "location", "--fit", tmp_path / "fit"],
        ["adequacy", "--matrix", sim / "matrix.csv", "--fit", tmp_path / "fit", "--pairs", "P1:P2", "P3:P4"],
    ]
    identical, failed = [], []
    for argv in steps:
        name = argv[0]
        first = tmp_path / name
        code = main([str(a) for a in argv] + ["--out", str(first)])
        if code != 0:
            failed.append(name)
            continue
        again = tmp_path / f"{name}-replay"
        code = main(["replay", str(first / "manifest.json"), "--out", str(again)])
        same = code == 0 and _tables(first) == _tables(again) and bool(_tables(first))
        digests = json.loads((first / "manifest.json").read_text())["outputs"]
        same &= digests == json.loads((again / "manifest.json").read_text())["outputs"]
        (identical if same else failed).append(name)
    ok = not failed and len(identical) == len(steps)
    verdict(12, "CLI reruns are byte-identical", ok,
            f"{len(identical)}/{len(steps)} commands identical" + (f"; differing: {failed}" if failed else ""))
