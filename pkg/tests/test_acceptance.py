"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line."""
from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from swagmos import cli
from swagmos import model as mdl
from swagmos.dataio import filter_by_ids, make_dataset
from swagmos.influence import InfluenceConfig, debug_rank
from swagmos.metrics import evaluate, kendall_ktau, pearson_lcc, spearman_srcc
from swagmos.model import ModelSpec
from swagmos.numkit import RngState
from swagmos.swag import (
    BmaConfig,
    SwagPosterior,
    bma_predict,
    diagonal_variance,
    implied_covariance,
    sample_params,
)
from swagmos.synth import generate
from swagmos.trainer import TrainConfig, train

from conftest import ACCEPTANCE_LINES


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------- oracles

def loss_oracle(kind: str, r: np.ndarray) -> np.ndarray:
    if kind == "l1":
        return np.abs(r)
    if kind == "mse":
        return r * r
    a = np.abs(r)  # huber, delta = 1
    return np.where(a <= 1.0, 0.5 * r * r, a - 0.5)


def batch_loss(spec, values, layout, x, y, kind):
    pred = mdl.predict(spec, mdl.ParamVector(values, layout), x)
    return float(np.mean(loss_oracle(kind, pred - y)))


def brute_kendall(a, b) -> float:
    n = len(a)
    conc = disc = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0:
                ties_a += 1
            if db == 0:
                ties_b += 1
            if da != 0 and db != 0:
                if (da > 0) == (db > 0):
                    conc += 1
                else:
                    disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / math.sqrt(float((n0 - ties_a) * (n0 - ties_b)))


def brute_ranks(a) -> list[float]:
    return [1 + sum(v < x for v in a) + (sum(v == x for v in a) - 1) / 2 for x in a]


def brute_pearson(a, b) -> float:
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def brute_metrics(p, t) -> dict[str, float]:
    return {
        "mse": math.fsum((x - y) ** 2 for x, y in zip(p, t)) / len(p),
        "lcc": brute_pearson(p, t),
        "srcc": brute_pearson(brute_ranks(p), brute_ranks(t)),
        "ktau": brute_kendall(p, t),
    }


def brute_evaluate(pred: dict, ids, systems, truth) -> dict:
    per_sys: dict[str, list[int]] = {}
    for i, s in enumerate(systems):
        per_sys.setdefault(s, []).append(i)
    p = [pred[u] for u in ids]
    sp = [math.fsum(p[i] for i in idx) / len(idx) for idx in per_sys.values()]
    st = [math.fsum(truth[i] for i in idx) / len(idx) for idx in per_sys.values()]
    return {"utterance": brute_metrics(p, list(truth)), "system": brute_metrics(sp, st)}


def run_cli(*argv) -> None:
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"swagmos {' '.join(map(str, argv))} exited {code}"


# ---------------------------------------------------------------- 1

def test_criterion_01_gradient_fidelity():
    rng = np.random.default_rng(20240)
    step = 1e-6
    worst = 0.0
    start = time.perf_counter()
    for trial in range(100):
        d = int(rng.integers(1, 17))
        hidden = () if rng.random() < 0.25 else (int(rng.integers(1, 9)),)
        spec = ModelSpec(d, hidden, activation=str(rng.choice(["tanh", "identity"])), bounded=bool(rng.random() < 0.5))
        kind = str(rng.choice(["l1", "mse", "huber"]))
        params = mdl.init_params(spec, trial)
        params = params.with_values(params.values + 0.3 * rng.normal(size=len(params)))
        n = int(rng.integers(1, 9))
        x = rng.normal(size=(n, d))
        pred = mdl.predict(spec, params, x)
        # keep residuals away from the loss kinks at 0 and +-delta
        r = rng.choice([-1, 1], size=n) * rng.uniform(0.1, 0.8, size=n)
        if kind != "l1":
            r = r + np.sign(r) * rng.choice([0.0, 0.6], size=n)
        y = pred - r
        analytic = mdl.grad(spec, params, x, y, kind).values
        base = params.values
        fd = np.empty_like(base)
        for k in range(base.size):
            up, dn = base.copy(), base.copy()
            up[k] += step
            dn[k] -= step
            fd[k] = (batch_loss(spec, up, params.layout, x, y, kind)
                     - batch_loss(spec, dn, params.layout, x, y, kind)) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-4)
        worst = max(worst, float(np.max(np.abs(analytic - fd) / denom)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    record(1, "gradient fidelity", ok, f"max rel err {worst:.2e} (< 1e-5), {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_02_swa_exactness():
    rng = np.random.default_rng(2)
    layout = (("W0", (3, 4)), ("b0", (3,)))
    size = 15
    worst_mean = worst_var = 0.0
    for n_snap in (1, 2, 7, 20, 137, 1000):
        post = SwagPosterior(layout, rank_max=20)
        snaps = rng.normal(loc=rng.normal(size=size), scale=rng.uniform(0.1, 2.0), size=(n_snap, size))
        for s in snaps:
            post.update(mdl.ParamVector(s.copy(), layout))
        oracle = np.array([math.fsum(col) / n_snap for col in snaps.T])
        rel = np.max(np.abs(post.mean.values - oracle) / np.maximum(np.abs(oracle), 1e-300))
        worst_mean = max(worst_mean, float(rel))
        if 2 <= n_snap <= post.rank_max:
            pop = np.array([math.fsum((col - m) ** 2) / n_snap for col, m in zip(snaps.T, oracle)])
            worst_var = max(worst_var, float(np.max(np.abs(diagonal_variance(post) - pop) / np.max(pop))))
    ok = worst_mean <= 1e-12 and worst_var <= 1e-10
    record(2, "SWA exactness", ok, f"mean rel err {worst_mean:.1e} (<= 1e-12), variance rel err {worst_var:.1e} (<= 1e-10)")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_03_sampler_statistics():
    rng = np.random.default_rng(3)
    layout = (("W0", (1, 7)), ("b0", (1,)))
    post = SwagPosterior(layout, rank_max=20)
    centre = rng.normal(size=8)
    for _ in range(6):
        post.update(mdl.ParamVector(centre + rng.normal(scale=0.5, size=8), layout))
    sigma = implied_covariance(post, "diag+lowrank")
    state = RngState(99)
    n = 50_000
    draws = np.empty((n, 8))
    for i in range(n):
        theta, state = sample_params(post, state, "diag+lowrank")
        draws[i] = theta.values
    mu = post.mean.values
    se = np.sqrt(np.diag(sigma) / n)
    z = np.abs(draws.mean(axis=0) - mu) / se
    emp = np.cov(draws, rowvar=False, bias=True)
    frob = np.linalg.norm(emp - sigma) / np.linalg.norm(sigma)
    ok = bool(np.all(z <= 4.0)) and frob <= 0.05
    record(3, "SWAG sampler statistics", ok, f"max |mean err|/SE {z.max():.2f} (<= 4), cov rel Frobenius {frob:.4f} (<= 0.05)")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_04_bma_degeneracy():
    rng = np.random.default_rng(4)
    spec = ModelSpec(6, (5,))
    layout = spec.layout()
    mu = mdl.init_params(spec, 1).values + rng.normal(scale=0.1, size=spec.n_params)
    zero_cov = SwagPosterior.from_arrays(layout, mu, mu * mu, np.zeros((mu.size, 4)), 10, 20)
    spread = SwagPosterior(layout, rank_max=20)
    for _ in range(8):
        spread.update(mdl.ParamVector(mu + rng.normal(size=mu.size), layout))
    failures = 0
    checks = 0
    for x in rng.normal(size=(20, 6)):
        for k in (1, 2, 3, 10, 33):
            for mode in ("diag", "diag+lowrank", "mean-only"):
                got, _ = bma_predict(spec, zero_cov, x, BmaConfig(k, seed=k, mode=mode))
                failures += got != mdl.forward(spec, mdl.ParamVector(mu, layout), x)
                checks += 1
            got, _ = bma_predict(spec, spread, x, BmaConfig(k, seed=k, mode="mean-only"))
            failures += got != mdl.forward(spec, spread.mean, x)
            checks += 1
    ok = failures == 0
    record(4, "BMA degeneracy", ok, f"{checks - failures}/{checks} predictions bit-equal to forward(mean)")
    assert ok


# ---------------------------------------------------------------- 5

def _loo_problem(seed: int):
    rng = np.random.default_rng(seed)
    n, d, m = 40, 5, 40
    w = 0.3 * rng.normal(size=d)
    x = rng.normal(size=(n, d))
    y = np.clip(3 + x @ w + 0.3 * rng.normal(size=n), 1, 5)
    xt = rng.normal(size=(m, d))
    yt = np.clip(3 + xt @ w + 0.3 * rng.normal(size=m), 1, 5)
    train_set = make_dataset([f"u{i}" for i in range(n)], ["s"] * n, x, y, "train")
    test_set = make_dataset([f"t{i}" for i in range(m)], ["s"] * m, xt, yt, "test")
    return train_set, test_set


def test_criterion_05_influence_vs_leave_one_out():
    start = time.perf_counter()
    scores = []
    for seed in range(5):
        tr, te = _loo_problem(seed)
        n = len(tr)
        spec = ModelSpec(5, bounded=False)
        cfg = TrainConfig(iterations=3000, lr=0.1, schedule="constant", batch_size=n, loss="mse",
                          seed=seed, checkpoint_interval=3000)
        params = train(spec, tr, None, cfg)[-1].params
        rep = debug_rank(spec, params, tr, InfluenceConfig(damping=0.01, grad_loss="mse", worst_k=1), test=te)
        predicted = -rep.harmfulness / n

        # oracle: exact least-squares refits without each point
        X = np.hstack([tr.features(), np.ones((n, 1))])
        y = tr.labels()
        t = te.index_of(rep.test_ids[0])
        xt, yt = np.append(te.features()[t], 1.0), te.labels()[t]
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
        base = (xt @ beta - yt) ** 2
        actual = []
        for i in range(n):
            keep = np.arange(n) != i
            b = np.linalg.lstsq(X[keep], y[keep], rcond=None)[0]
            actual.append((xt @ b - yt) ** 2 - base)
        scores.append(spearman_srcc(predicted, actual))
    elapsed = time.perf_counter() - start
    ok = min(scores) >= 0.9 and elapsed < 60
    record(5, "influence vs leave-one-out", ok,
           f"Spearman min {min(scores):.4f} over {len(scores)} seeds (>= 0.9), {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 6 and 9

@pytest.fixture(scope="module")
def corrupted_runs():
    runs = []
    for seed in range(10):
        corpus = generate(10, 10, 8, 0.3, 2, seed, dev_systems=20, test_systems=10)
        tr, dev, te = (corpus.splits[k] for k in ("train", "dev", "test"))
        spec = ModelSpec(8)
        cfg = TrainConfig(iterations=3000, lr=0.05, schedule="constant", batch_size=len(tr), loss="mse",
                          seed=seed, checkpoint_interval=3000)
        params = train(spec, tr, None, cfg)[-1].params
        rep = debug_rank(spec, params, tr, InfluenceConfig(grad_loss="mse", test_ids=tuple(dev.ids)), test=dev)
        runs.append((corpus, spec, cfg, params, rep))
    return runs


def test_criterion_06_corrupted_label_detection(corrupted_runs):
    hits = 0
    ratios = []
    for corpus, _, _, _, rep in corrupted_runs:
        harm = dict(zip(rep.train_ids, rep.harmfulness))
        median = float(np.median(rep.harmfulness))
        top5 = rep.top(5)
        found = all(u in top5 for u in corpus.corrupted)
        # |median| keeps the ratio meaningful when most points are mildly helpful
        strong = all(harm[u] >= 5 * abs(median) for u in corpus.corrupted)
        hits += found and strong
        ratios.append(min(harm[u] for u in corpus.corrupted) / abs(median))
    ok = hits >= 9
    record(6, "corrupted-label detection", ok,
           f"{hits}/10 seeds with both corrupted ids in top-5 and >= 5x |median| (>= 9); "
           f"min harm/|median| per seed {np.round(ratios, 1).tolist()}")
    assert ok


def test_criterion_09_filtering_efficacy(corrupted_runs):
    wins = 0
    deltas = []
    for corpus, spec, cfg, params, rep in corrupted_runs:
        tr, te = corpus.splits["train"], corpus.splits["test"]
        kept = filter_by_ids(tr, rep.top(2))
        refit = train(spec, kept, None, TrainConfig(**{**cfg.to_dict(), "batch_size": len(kept)}))[-1].params
        before = float(np.mean((mdl.predict(spec, params, te.features()) - te.labels()) ** 2))
        after = float(np.mean((mdl.predict(spec, refit, te.features()) - te.labels()) ** 2))
        wins += after <= before
        deltas.append(after - before)
    ok = wins >= 8
    record(9, "filtering efficacy", ok,
           f"filtered test MSE <= unfiltered in {wins}/10 seeds (>= 8); deltas {np.round(deltas, 4).tolist()}")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_07_metric_equivalence():
    rng = np.random.default_rng(7)
    kendall_bad = spearman_bad = 0
    for _ in range(1000):
        n = int(rng.integers(3, 60))
        a = rng.integers(0, int(rng.integers(2, 10)), size=n).astype(float)
        b = rng.integers(0, int(rng.integers(2, 10)), size=n).astype(float)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        kendall_bad += kendall_ktau(a, b) != brute_kendall(a.tolist(), b.tolist())
        spearman_bad += spearman_srcc(a, b) != pearson_lcc(brute_ranks(a.tolist()), brute_ranks(b.tolist()))

    eval_worst = 0.0
    for trial in range(25):
        ids, systems, truth = [], [], []
        for s in range(20):
            for u in range(int(rng.integers(1, 8))):
                ids.append(f"s{s}-u{u}")
                systems.append(f"s{s}")
                truth.append(float(rng.choice([1.0, 2.0, 3.0, 4.0, 5.0]) if trial % 2 else rng.uniform(1, 5)))
        pred = {u: float(rng.uniform(1, 5)) for u in ids}
        d = make_dataset(ids, systems, np.zeros((len(ids), 0)), truth, "eval")
        got = evaluate(pred, d)
        want = brute_evaluate(pred, ids, systems, truth)
        for level in ("utterance", "system"):
            for key, value in want[level].items():
                eval_worst = max(eval_worst, abs(getattr(got, level)[key] - value))
    ok = kendall_bad == 0 and spearman_bad == 0 and eval_worst <= 1e-12
    record(7, "metric equivalence", ok,
           f"kendall mismatches {kendall_bad}, spearman mismatches {spearman_bad}, evaluate max abs diff {eval_worst:.1e} (<= 1e-12)")
    assert ok


# ---------------------------------------------------------------- 8 and 10

def pipeline(root: Path, seed: int = 7) -> dict[str, Path]:
    """gen-synth -> train -> swag -> predict -> evaluate -> influence -> filter, all through the CLI."""
    root.mkdir(parents=True, exist_ok=True)
    d, run = root / "data", root / "run"
    run_cli("gen-synth", "--out", d, "--n-systems", 20, "--utts-per-system", 10, "--noise", 0.3,
            "--dev-systems", 5, "--test-systems", 10, "--corrupt", 2, "--seed", seed)
    tr = ["--train-table", d / "train.csv", "--train-features", d / "train.swgf"]
    dv = ["--dev-table", d / "dev.csv", "--dev-features", d / "dev.swgf"]
    run_cli("train", *tr, *dv, "--out", run, "--seed", seed)
    run_cli("swag", "--run", run, *tr, *dv, "--seed", seed)
    out = {}
    for split in ("dev", "test"):
        table, feats = d / f"{split}.csv", d / f"{split}.swgf"
        for name, source in (("bma", ["--run", run]), ("sgd", ["--checkpoint", run / "final.swgc"])):
            pred = root / f"{name}-{split}.csv"
            run_cli("predict", *source, "--table", table, "--features", feats, "--out", pred, "--seed", seed)
            report = root / f"{name}-{split}.json"
            run_cli("evaluate", "--pred", pred, "--table", table, "--out", report, "--label", name)
            out[f"pred-{name}-{split}"] = pred
            out[f"report-{name}-{split}"] = report
            out[f"text-{name}-{split}"] = report.with_suffix(".txt")
    run_cli("influence", "--run", run, *tr, "--test-table", d / "dev.csv", "--test-features", d / "dev.swgf",
            "--out", root / "influence.json")
    run_cli("filter", "--table", d / "train.csv", "--features", d / "train.swgf",
            "--exclude", d / "corrupted.txt", "--out-table", root / "clean.csv", "--out-features", root / "clean.swgf")
    out["posterior"] = run / "posterior.swgp"
    out["final"] = run / "final.swgc"
    out["influence"] = root / "influence.json"
    out["clean"] = root / "clean.swgf"
    out["train-report"] = run / "train.json"
    out["swag-report"] = run / "swag.json"
    return out


def test_criterion_08_end_to_end(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    start = time.perf_counter()
    out = pipeline(Path("e2e"))
    elapsed = time.perf_counter() - start
    reports = {k: json.loads(out[f"report-{k}"].read_text()) for k in ("bma-test", "sgd-test", "bma-dev", "sgd-dev")}
    srcc = reports["bma-test"]["system"]["srcc"]
    n_sys = reports["bma-test"]["n_systems"]
    assert len(out["pred-bma-test"].read_text().splitlines()) == 101
    ok = srcc >= 0.9 and n_sys == 10 and elapsed < 300
    side = ", ".join(
        f"{k} sys SRCC {reports[k]['system']['srcc']:.3f} utt MSE {reports[k]['utterance']['mse']:.3f}"
        for k in ("bma-dev", "sgd-dev", "sgd-test")
    )
    record(8, "end-to-end desk-scale", ok,
           f"SWAG-BMA test system SRCC {srcc:.3f} on {n_sys} held-out systems (>= 0.9); {side}; {elapsed:.1f}s (< 300s)")
    assert ok


def test_criterion_10_determinism(tmp_path, monkeypatch):
    outputs = []
    for name in ("first", "second"):
        work = tmp_path / name
        work.mkdir()
        monkeypatch.chdir(work)
        outputs.append({k: (work / v).read_bytes() for k, v in pipeline(Path("p")).items()})
    differing = sorted(k for k in outputs[0] if outputs[0][k] != outputs[1][k])
    ok = not differing
    record(10, "determinism", ok,
           f"{len(outputs[0]) - len(differing)}/{len(outputs[0])} artifacts byte-identical"
           + (f"; differing: {differing}" if differing else ""))
    assert ok
