"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line
with the measured quantity, its tolerance and the runtime budget."""

import time

import numpy as np
import pytest
from scipy.stats import kurtosis

from ungd import rng
from ungd.fisher_probe import ResidualSpec, ScanTemplate, block_decay_scan, domino_check, self_averaging_check
from ungd.meanfield import monte_carlo, propagate
from ungd.nets import NetConfig, ResNetConfig, forward, forward_resnet, init_mixers, init_random
from ungd.trainer import OptimizerConfig, TeacherStudentTask, batch_loss, evaluate, loss_gradient, train, train_resnet
from ungd.unit_fisher import (
    UnitWeights,
    assemble_G,
    coeffs_quadrature,
    coeffs_relu,
    ginv_matrix,
    monte_carlo_G,
    unit_coeffs,
)


@pytest.fixture
def report(capsys):
    start = time.perf_counter()

    def _report(number, title, ok, detail, budget):
        elapsed = time.perf_counter() - start
        passed = bool(ok) and elapsed < budget
        with capsys.disabled():
            status = "PASS" if passed else "FAIL"
            print(f"\n[acceptance {number:2d}] {status}  {title}: {detail}; {elapsed:.1f}s (budget {budget:.0f}s)")
        assert ok, detail
        assert elapsed < budget, f"runtime {elapsed:.1f}s over budget {budget}s"

    return _report


def test_01_relu_closed_forms(report):
    worst = 0.0
    for w in (0.5, 1.0, 2.0):
        for w0 in (-1.0, 0.0, 1.0):
            c, q = coeffs_relu(w, w0), coeffs_quadrature(w, w0, "relu")
            worst = max(worst, *(abs(float(getattr(c, k)) - float(getattr(q, k))) for k in ("A00", "A0n", "Ann")))
    report(1, "ReLU closed forms vs quadrature", worst <= 1e-10, f"max abs diff {worst:.2e} (tol 1e-10)", 1)


def test_02_explicit_inverse(report):
    worst, used = 0.0, 0
    for a, act in enumerate(("relu", "tanh", "sigmoid", "linear")):
        for n in (1, 2, 8, 64):
            for k in range(50):
                seed = rng.derive_seed(2, a, n, k)
                w = rng.normals(seed, rng.Stream.PROBE, 0, 1, n)[0] * np.exp(rng.normals(seed, rng.Stream.PROBE, 1, 1, 1)[0, 0])
                w0 = 1.5 * rng.normals(seed, rng.Stream.PROBE, 2, 1, 1)[0, 0]
                uw = UnitWeights(w, w0)
                c = unit_coeffs(uw.w_norm, w0, act)
                if not float(c.D) > 1e-8:
                    continue
                used += 1
                worst = max(worst, np.abs(assemble_G(c, uw) @ ginv_matrix(c, uw) - np.eye(n + 1)).max())
    report(2, "explicit inverse", worst <= 1e-10, f"max |G Ginv - I| {worst:.2e} over {used} units (tol 1e-10)", 10)


def test_03_unit_fisher_vs_monte_carlo(report):
    w = rng.normals(5, rng.Stream.WEIGHTS, 0, 1, 50)[0] / np.sqrt(50)
    uw = UnitWeights(w, 0.3)
    G = assemble_G(coeffs_relu(uw.w_norm, uw.w0), uw)
    frac = float(np.mean(monte_carlo_G(uw, "relu", 10**6, 7).z_scores(G) <= 3))
    report(3, "unit Fisher vs Monte Carlo", frac >= 0.95, f"{100 * frac:.2f}% of entries within 3 SE (need >= 95%)", 60)


def test_04_domino_scaling(report):
    stats = {}
    for n in (200, 800):
        p = init_random(NetConfig([n] * 4, 1.0, 0.0, "tanh", rng.derive_seed(4, n)))
        stats[n] = domino_check(p, 1, 4, seed=4)
    ratio = stats[800].offdiag_rms / stats[200].offdiag_rms
    rel = max(s.diag_rel_error for s in stats.values())
    ok = 0.35 <= ratio <= 0.65 and rel < 0.10
    report(4, "domino scaling", ok, f"off-diag rms ratio {ratio:.3f} (need [0.35, 0.65]), diag rel err {rel:.3f} (< 0.10)", 120)


def test_05_theorem1_decay(report):
    t = ScanTemplate(n_layers=2, output_width=1, sigma_w2=1.0, activation="tanh", seed=3)
    rep = block_decay_scan([100, 200, 400], t, 100_000)
    r = rep.rms_offblock_same_layer
    factor = r[0] / r[-1]
    report(5, "off-block decay", 1.5 <= factor <= 3.0, f"ratio falls by {factor:.3f} from n=100 to 400 (need [1.5, 3.0])", 300)


def test_06_meanfield_agreement(report):
    cfg = NetConfig([1000] * 6, 2.0, 0.0, "tanh", 6)
    theory = propagate(cfg)
    mc = monte_carlo(cfg, n_seeds=20)
    errA = float(np.max(np.abs(mc.A[1:] / theory.A[1:] - 1)))
    errC = float(np.max(np.abs(mc.chi / theory.chi - 1)))
    ok = errA < 0.05 and errC < 0.10
    report(6, "mean-field agreement", ok, f"max rel err A {errA:.4f} (< 0.05), chi {errC:.4f} (< 0.10)", 120)


def test_07_resnet_recursion_and_gaussianization(report):
    ratios = []
    for k in range(5):
        res = ResNetConfig(NetConfig([500] * 4, 1.0, 0.0, "linear", rng.derive_seed(7, k)), 1.0, 0.5)
        x = rng.normals(res.base.seed, rng.Stream.INPUTS, 0, 1, 500)[0]
        t = forward_resnet(init_random(res.base), init_mixers(res), res, x)
        A = [np.mean(v**2) for v in t.xs]
        ratios += [A[l] / A[l - 1] for l in range(1, 4)]
    ratio = float(np.mean(ratios))
    pooled = [[] for _ in range(5)]
    for k in range(5):
        res = ResNetConfig(NetConfig([1000] * 6, 2.0, 0.0, "relu", rng.derive_seed(70, k)), 1.0, 0.5)
        x = rng.normals(res.base.seed, rng.Stream.INPUTS, 0, 1, 1000)[0]
        t = forward_resnet(init_random(res.base), init_mixers(res), res, x)
        for l in range(1, 6):
            pooled[l - 1].append(t.xs[l])
    kurt = [float(kurtosis(np.concatenate(v))) for v in pooled]
    worst = max(kurt, key=abs)
    ok = abs(ratio - 1.25) <= 0.1 and all(-0.3 <= k <= 0.3 for k in kurt)
    report(7, "resnet recursion + Gaussianization", ok, f"activity ratio {ratio:.3f} (1.25 +- 0.1), worst excess kurtosis {worst:+.3f} (in [-0.3, 0.3])", 120)


def _teacher_student(widths, seed, act="relu"):
    base = NetConfig(widths, 2.0 if act == "relu" else 1.0, 0.0, act, rng.derive_seed(seed, 1))
    teacher = init_random(base)
    student = init_random(base.replace(seed=rng.derive_seed(seed, 3)))
    return base, teacher, student


def test_08_ngd_degeneracy(report):
    base, teacher, student = _teacher_student([10, 20, 1], 8, act="linear")
    task = TeacherStudentTask(teacher, rng.derive_seed(8, 2))
    a, _, _ = train(student, task, OptimizerConfig("sgd", 0.01, 32), 100)
    b, _, _ = train(student, task, OptimizerConfig("ungd", 0.01, 32), 100)
    diff = float(np.abs(a.flat() - b.flat()).max())
    report(8, "NGD = SGD for linear units", diff <= 1e-10, f"max trajectory difference {diff:.2e} (tol 1e-10)", 10)


def test_09_ngd_effectiveness(report):
    eta = 0.01
    gains = {"sgd": [], "ungd": []}
    flagged = False
    for k in range(10):
        _, teacher, student = _teacher_student([10, 20, 1], 900 + k)
        task = TeacherStudentTask(teacher, rng.derive_seed(900 + k, 2))
        start = evaluate(student, task)
        for kind in gains:
            p, rec, _ = train(student, task, OptimizerConfig(kind, eta, 32), 50)
            gains[kind].append(start - evaluate(p, task))
            flagged |= rec.flagged
    final = {"sgd": [], "ungd": []}
    for k in range(10):
        seed = 950 + k
        base = NetConfig([20] * 4, 1.0, 0.0, "relu", rng.derive_seed(seed, 1))
        t_res = ResNetConfig(base, 1.0, 0.7)
        task = TeacherStudentTask(init_random(base), rng.derive_seed(seed, 2), ResidualSpec(init_mixers(t_res), t_res))
        s_res = ResNetConfig(base.replace(seed=rng.derive_seed(seed, 3)), 1.0, 0.7)
        V = init_mixers(s_res)
        for kind in final:
            p, rec, _ = train_resnet(init_random(s_res.base), V, s_res, task, OptimizerConfig(kind, eta, 32), 500)
            final[kind].append(evaluate(p, task, resnet=ResidualSpec(V, s_res)))
            flagged |= rec.flagged
    g_ngd, g_sgd = np.median(gains["ungd"]), np.median(gains["sgd"])
    f_ngd, f_sgd = np.median(final["ungd"]), np.median(final["sgd"])
    ok = g_ngd >= g_sgd and f_ngd <= f_sgd and not flagged
    detail = (
        f"median 50-step decrease NGD {g_ngd:.4f} vs SGD {g_sgd:.4f}; "
        f"resnet median final loss NGD {f_ngd:.4f} vs SGD {f_sgd:.4f}; fallback flag {flagged}"
    )
    report(9, "NGD effectiveness", ok, detail, 300)


def test_10_gradient_oracle(report):
    cfg = NetConfig([4, 5, 3], 1.5, 0.2, "tanh", 10)
    h, worst = 1e-6, 0.0
    for k in range(20):
        seed = rng.derive_seed(10, k)
        p = init_random(cfg.replace(seed=seed))
        x = rng.sample_normals(seed, rng.Stream.DATA, 0, 1, 4)
        y = rng.sample_normals(seed, rng.Stream.DATA, 0, 1, 3, tag=1)
        grads = loss_gradient(p, x, y)
        for l in range(2):
            for which in (0, 1):
                arr = (p.weights if which == 0 else p.biases)[l]
                for idx in np.ndindex(arr.shape):
                    vals = []
                    for sgn in (1, -1):
                        q = p.copy()
                        (q.weights if which == 0 else q.biases)[l][idx] += sgn * h
                        vals.append(batch_loss(forward(q, x).output, y))
                    fd = (vals[0] - vals[1]) / (2 * h)
                    worst = max(worst, abs(grads[l][which][idx] - fd) / max(abs(fd), 1.0))
    report(10, "gradient oracle", worst <= 1e-5, f"max relative deviation {worst:.2e} (tol 1e-5)", 5)


def test_11_self_averaging(report):
    a = self_averaging_check(1000, "relu", 20_000, 11)
    b = self_averaging_check(2000, "relu", 20_000, 11)
    ratio = b.diag_gap_rms / a.diag_gap_rms
    ok = abs(a.offdiag_z) < 3 and a.offdiag_frac_within_3se >= 0.95 and 0.3 <= ratio <= 0.7
    detail = (
        f"i!=j z {a.offdiag_z:+.2f} (|z| < 3), {100 * a.offdiag_frac_within_3se:.1f}% of pairs within 3 SE; "
        f"i=j gap ratio on doubling {ratio:.3f} (need [0.3, 0.7])"
    )
    report(11, "self-averaging", ok, detail, 60)
