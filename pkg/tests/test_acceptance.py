"""Acceptance criteria 1-9.

Each criterion is a function returning ``(passed, detail)``.  Under pytest
one PASS/FAIL line per criterion is printed in the terminal summary; run
this file directly to print the same lines without pytest.
"""
import itertools
import math
import os
import subprocess
import sys
import tempfile
import time
import warnings

import numpy as np
import pytest
import scipy.linalg

from ttca.core import QttMap, ResidencyMeter, dense_oracle
from ttca.cross import cross_approximate, qtt_cross, qtt_eval_batch
from ttca.diffca import gradcheck, random_cross_problem
from ttca.fields import field_oracle
from ttca.maxvol import maxvol
from ttca.pipeline import ExperimentConfig, SyntheticTask, mlll, pinball_loss, run_experiment
from ttca.projection import fit_projection, project
from ttca.tt import TTTensor, best_truncation_errors, tt_gauge, tt_inner, tt_svd, tt_to_dense

RESULTS = {}


def record(n, passed, detail):
    RESULTS[n] = (passed, detail)
    return passed, detail


def criterion_1():
    t0 = time.perf_counter()
    D, I, r = 4, 32, 5
    a = tt_to_dense(TTTensor.random((I,) * D, (1, r, r, r, 1), 2024))
    oracle = dense_oracle(a)
    tt, rep = cross_approximate(oracle, r, seed=0)
    err = np.linalg.norm(tt_to_dense(tt) - a) / np.linalg.norm(a)
    per_sweep = (rep.samples - 256) / rep.sweeps
    bound = 4 * D * r * r * I
    runtime = time.perf_counter() - t0
    ok = err < 1e-8 and per_sweep <= bound and rep.sweeps <= 3 and runtime < 30
    return ok, (f"rel_error={err:.2e} samples/sweep={per_sweep:.0f} (bound {bound}) "
                f"sweeps={rep.sweeps} runtime={runtime:.1f}s")


def criterion_2():
    t0 = time.perf_counter()
    shape = (1024, 1024, 1024)
    oracle = field_oracle("gaussian", shape)
    qmap = QttMap.build(shape)
    meter = ResidencyMeter()
    tt, rep = qtt_cross(oracle, qmap, 8, seed=0, meter=meter)
    idx = np.stack([np.random.default_rng(7).integers(0, n, 1000) for n in shape], axis=1)
    exact = field_oracle("gaussian", shape).entries(idx)
    approx = qtt_eval_batch(tt, qmap, idx)
    err = np.linalg.norm(approx - exact) / np.linalg.norm(exact)
    runtime = time.perf_counter() - t0
    ok = meter.peak < 10 ** 6 and err < 1e-4 and runtime < 600
    return ok, (f"peak_resident={meter.peak} probe_rel_error={err:.2e} "
                f"max_abs={np.max(np.abs(approx - exact)):.2e} samples={rep.samples} runtime={runtime:.1f}s")


def criterion_3():
    devs = [gradcheck(*random_cross_problem(seed, shape=(4, 5, 4), max_rank=3)) for seed in range(20)]
    worst = max(devs)
    return worst < 1e-5, f"max_rel_deviation={worst:.2e} over 20 problems"


def criterion_4():
    D = 4
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((8,) * D)
        ranks = (1,) + tuple(int(x) for x in rng.integers(1, 8, D - 1)) + (1,)
        err = np.linalg.norm(tt_to_dense(tt_svd(a, max_ranks=ranks)) - a)
        rss = math.sqrt(sum(x * x for x in best_truncation_errors(a, ranks)))
        worst = max(worst, err / (math.sqrt(D - 1) * rss))
    return worst <= 1.0, f"max error / (sqrt(D-1) * rss_tails)={worst:.4f} over 10 tensors"


def maxvol_case(seed):
    rng = np.random.default_rng(seed)
    r = 1 + seed % 4
    n = int(rng.integers(r + 1, 13))
    return rng.standard_normal((n, r))


def criterion_5():
    delta = 1e-2
    fails, worst = [], 1.0
    for seed in range(50):
        A = maxvol_case(seed)
        r = A.shape[1]
        best = max(abs(np.linalg.det(A[list(s)])) for s in itertools.combinations(range(A.shape[0]), r))
        ratio = abs(np.linalg.det(A[maxvol(A, tol=delta).rows])) / best
        worst = min(worst, ratio)
        if ratio < (1 + delta) ** -r * (1 - 1e-12):
            fails.append((seed, A.shape, round(ratio, 4)))
    return not fails, f"{50 - len(fails)}/50 meet the bound; worst ratio={worst:.4f}; failing={fails}"


def well_conditioned(rng, r):
    Q1, _ = np.linalg.qr(rng.standard_normal((r, r)))
    Q2, _ = np.linalg.qr(rng.standard_normal((r, r)))
    return Q1 @ np.diag(rng.uniform(0.5, 2.0, r)) @ Q2


def criterion_6():
    rng = np.random.default_rng(6)
    train = [TTTensor.random((4, 4, 4), 2, rng) for _ in range(8)]
    basis, _ = fit_projection(train, 3)
    gauge_dev = 0.0
    for _ in range(20):
        t = TTTensor.random((4, 4, 4), 3, rng)
        g = t
        for d in range(2):
            g = tt_gauge(g, d, well_conditioned(rng, g.ranks[d + 1]))
        gauge_dev = max(gauge_dev, float(np.max(np.abs(project(basis, g) - project(basis, t)))))
    gram = np.array([[tt_inner(basis.vector(i), basis.vector(j)) for j in range(3)] for i in range(3)])
    gram_dev = float(np.max(np.abs(gram - np.eye(3))))
    X = np.stack([tt_to_dense(t).ravel() for t in train])
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    B = np.stack([tt_to_dense(basis.vector(j)).ravel() for j in range(3)], axis=1)
    angle = float(np.max(scipy.linalg.subspace_angles(B, Vt[:3].T)))
    ok = gauge_dev < 1e-8 and gram_dev < 1e-10 and angle < 1e-6
    return ok, f"gauge_dev={gauge_dev:.1e} gram_dev={gram_dev:.1e} subspace_angle={angle:.1e}"


def criterion_7():
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in range(5):
        cfg = ExperimentConfig(seed=seed)
        task = SyntheticTask(seed=seed, grid=cfg.grid, n_train=cfg.n_train, n_val=cfg.n_val,
                             latent_rank=cfg.latent_rank, covariate=cfg.covariate)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = run_experiment(task, cfg)
        base, final = rep.baseline["val"]["rmse"], rep.final["val"]["rmse"]
        ok &= final <= 0.5 * base
        rows.append(f"s{seed}:{final:.3f}/{base:.3f}")
    runtime = time.perf_counter() - t0
    ok &= runtime < 900
    return ok, f"trained/untrained val rmse {' '.join(rows)} runtime={runtime:.0f}s"


def criterion_8():
    checks = [
        abs(mlll(0.0, 70.0, 0.0) + math.log(math.sqrt(2) * 70)) <= 1e-12,
        mlll(0.0, 10.0, 0.0) == mlll(0.0, 70.0, 0.0),
        mlll(0.0, 70.0, 1500.0) == mlll(0.0, 70.0, 1000.0),
        abs(mlll(0.0, 70.0, 2000.0) - (-math.sqrt(2) * 1000 / 70 - math.log(math.sqrt(2) * 70))) <= 1e-12,
        abs(mlll(0.0, 140.0, 500.0) - (-math.sqrt(2) * 500 / 140 - math.log(math.sqrt(2) * 140))) <= 1e-12,
        pinball_loss([1.0, 1.0, 1.0], 1.0) == 0.0,
        pinball_loss([0.0, 0.0, 0.0], 1.0) == 0.2 + 0.5 + 0.8,
        pinball_loss([2.0, 2.0, 2.0], 1.0) == 0.8 + 0.5 + 0.2,
        abs(pinball_loss([0.0, 1.0, 2.0], 1.0) - 0.4) <= 1e-12,
    ]
    return all(checks), f"{sum(checks)}/{len(checks)} closed-form checks hold"


def _cli(argv, cwd, env):
    res = subprocess.run([sys.executable, "-m", "ttca.cli"] + argv, cwd=cwd, env=env,
                         capture_output=True)
    return res.returncode, res.stdout


def criterion_9():
    env = dict(os.environ, TTCA_NUM_THREADS="1", PYTHONWARNINGS="ignore")
    config = ("n_train = 8\nn_val = 4\nbatch = 4\nepochs = 2\ninner_steps = 2\nseed = 3\n")
    commands = [
        ["compress", "--field", "gaussian", "--shape", "32,32,32", "--rank", "6", "--qtt", "--seed", "4",
         "-o", "g.cpt"],
        ["compress", "--field", "hilbert", "--shape", "16,16,16", "--rank", "4", "--seed", "4", "-o", "h.cpt"],
        ["compress", "--input", "in.cpv", "--eps", "1e-6", "-o", "s.cpt"],
        ["decompress", "-i", "h.cpt", "-o", "h.cpv"],
        ["probe", "-i", "h.cpt", "0,0,0", "3,9,15", "15,15,15"],
        ["experiment", "--config", "e.cfg", "--output-dir", "out"],
    ]
    files = ["g.cpt", "h.cpt", "s.cpt", "h.cpv", "out/trace.csv", "out/curves.csv", "out/summary.txt"]
    snapshots = []
    for _ in range(2):
        with tempfile.TemporaryDirectory() as d:
            from ttca.formats import write_cpv1
            write_cpv1(os.path.join(d, "in.cpv"), np.random.default_rng(0).standard_normal((8, 8, 8)))
            with open(os.path.join(d, "e.cfg"), "w") as fh:
                fh.write(config)
            os.mkdir(os.path.join(d, "out"))
            outs = [_cli(c, d, env) for c in commands]
            blobs = []
            for f in files:
                with open(os.path.join(d, f), "rb") as fh:
                    blobs.append(fh.read())
            snapshots.append((outs, blobs))
    codes = [c for c, _ in snapshots[0][0]]
    same = snapshots[0] == snapshots[1]
    direct = [run_experiment(SyntheticTask(seed=2, n_train=8, n_val=4),
                             ExperimentConfig(seed=2, n_train=8, n_val=4, batch=4, epochs=2, inner_steps=2))
              for _ in range(2)]
    same_train = direct[0].trace == direct[1].trace and direct[0].summary_lines() == direct[1].summary_lines()
    ok = same and same_train and all(c == 0 for c in codes)
    return ok, (f"{len(commands)} commands and {len(files)} files byte-identical={same}; "
                f"training trace identical={same_train}; exit codes={codes}")


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9}


@pytest.mark.slow
@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    passed, detail = record(n, *CRITERIA[n]())
    assert passed, f"criterion {n}: {detail}"


if __name__ == "__main__":
    for n, fn in CRITERIA.items():
        passed, detail = fn()
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}", flush=True)
