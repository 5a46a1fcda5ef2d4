"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Criteria 5, 6 and 9 train real models with the ``compact`` preset and take
most of the suite's runtime (tens of minutes on one core).
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from ampal import autodiff as ad
from ampal.acquisition import AcquisitionConfig, ascend, disagreement, disagreement_at
from ampal.baselines import BetaParams, fit_beta, sample_beta
from ampal.experiments import preset, run_active_learning, run_baseline
from ampal.model import AudioSignal, ModelConfig, forward_graph, gated_layer, init_model, param_tensors
from ampal.persistence import RunLog, load_checkpoint, load_dataset, read_wav, save_checkpoint, save_dataset, write_wav
from ampal.training import LabeledDataset
from ampal.oracle import label

SEEDS = (0, 1, 2)


def announce(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} | {detail}", flush=True)


def randomize(params, rng, scale=0.6):
    for name in params.arrays:
        params.arrays[name] = rng.uniform(-scale, scale, params.arrays[name].shape)
    return params


def fd_error(analytic, numeric):
    """Largest absolute discrepancy relative to the largest gradient component."""
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-300))


# -- 1 -------------------------------------------------------------------------

def _random_small_config(rng):
    layers = int(rng.integers(1, 5))
    return ModelConfig(
        channels=int(rng.integers(1, 5)), kernel_width=int(rng.integers(2, 4)),
        dilations=tuple(int(2 ** rng.integers(0, 4)) for _ in range(layers)),
        head_channels=int(rng.integers(1, 5)),
    )


def _mse_grad_error(cfg, params, x, g, target):
    names = params.names()

    def loss(arrays):
        p = {n: ad.constant(a) for n, a in zip(names, arrays)}
        return float(ad.mse_loss(forward_graph(cfg, p, ad.constant(x), ad.constant(g)), target).data)

    leaves = [ad.leaf(params.arrays[n].copy()) for n in names]
    out = ad.mse_loss(forward_graph(cfg, dict(zip(names, leaves)), ad.constant(x), ad.constant(g)), target)
    analytic = np.concatenate([gr.ravel() for gr in ad.backward(out, leaves)])
    arrays = [params.arrays[n].copy() for n in names]
    numeric = []
    eps = 1e-6
    for a in arrays:
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + eps
            hi = loss(arrays)
            a[i] = old - eps
            lo = loss(arrays)
            a[i] = old
            numeric.append((hi - lo) / (2 * eps))
    return fd_error(analytic, numeric)


def _d_grad_error(models, x, g):
    _, analytic = disagreement_at(models, x, g)
    numeric = np.zeros_like(g)
    eps = 1e-6
    for j in range(g.size):
        e = np.zeros_like(g)
        e[j] = eps
        hi, _ = disagreement_at(models, x, g + e, need_grad=False)
        lo, _ = disagreement_at(models, x, g - e, need_grad=False)
        numeric[j] = (hi - lo) / (2 * eps)
    return fd_error(analytic, numeric)


def test_1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_mse = worst_d = 0.0
    for _ in range(20):
        cfg = _random_small_config(rng)
        T = int(rng.integers(16, 257))
        B = int(rng.integers(1, 3))
        x = rng.uniform(-1, 1, (B, 1, T))
        g = rng.uniform(0.05, 0.95, (B, 6))
        target = rng.uniform(-0.5, 0.5, (B, 1, T))
        params = randomize(init_model(cfg, int(rng.integers(1 << 30))), rng)
        worst_mse = max(worst_mse, _mse_grad_error(cfg, params, x, g, target))
        M = int(rng.integers(2, 5))
        members = [randomize(init_model(cfg, int(rng.integers(1 << 30))), rng) for _ in range(M)]
        worst_d = max(worst_d, _d_grad_error(members, AudioSignal(x[0, 0], 16000), g[0]))
    elapsed = time.perf_counter() - t0
    ok = worst_mse < 1e-4 and worst_d < 1e-4 and elapsed < 60
    announce(capsys, 1, ok, f"max rel err MSE/params {worst_mse:.2e}, D/g {worst_d:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert worst_mse < 1e-4 and worst_d < 1e-4
    assert elapsed < 60


# -- 2 -------------------------------------------------------------------------

def test_2_disagreement_oracle(capsys):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        M, T = int(rng.integers(1, 6)), int(rng.integers(1, 65))
        o = rng.standard_normal((M, T)) * 10.0 ** rng.uniform(-2, 1)
        rows = o.tolist()
        total = 0.0
        for t in range(T):
            mu = sum(r[t] for r in rows) / M
            total += sum((r[t] - mu) ** 2 for r in rows) / M
        worst = max(worst, abs(disagreement(o) - total / T))
    same = np.tile(rng.standard_normal(64), (5, 1))
    zero = disagreement(same)
    ok = worst <= 1e-12 and zero == 0.0
    announce(capsys, 2, ok, f"max |D - brute force| {worst:.1e} (<= 1e-12), identical outputs D = {zero!r}")
    assert worst <= 1e-12
    assert zero == 0.0


# -- 3 -------------------------------------------------------------------------

def _scalar_gated(h, y, g, L, d):
    """Straight-line loops: z = tanh(W_f * h + V_f y + Vc_f^T g) . sigmoid(W_g * h + V_g y + Vc_g^T g)."""
    C, T = len(h), len(h[0])
    K = len(L["W_f"][0][0])
    z = [[0.0] * T for _ in range(C)]
    for c in range(C):
        for t in range(T):
            f = gt = 0.0
            for ci in range(C):
                for j in range(K):
                    s = t - (K - 1 - j) * d
                    if s >= 0:
                        f += L["W_f"][c][ci][j] * h[ci][s]
                        gt += L["W_g"][c][ci][j] * h[ci][s]
            f += L["V_f"][c][0] * y[t]
            gt += L["V_g"][c][0] * y[t]
            for i in range(len(g)):
                f += L["Vc_f"][i][c] * g[i]
                gt += L["Vc_g"][i][c] * g[i]
            z[c][t] = np.tanh(f) * (1.0 / (1.0 + np.exp(-gt)))
    return np.array(z)


def test_3_equation_fidelity(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(12):
        C, K, T, d, k = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 20)),
                         int(rng.integers(1, 4)), int(rng.integers(1, 7)))
        L = {"W_f": rng.normal(size=(C, C, K)), "W_g": rng.normal(size=(C, C, K)),
             "V_f": rng.normal(size=(C, 1)), "V_g": rng.normal(size=(C, 1)),
             "Vc_f": rng.normal(size=(k, C)), "Vc_g": rng.normal(size=(k, C))}
        h, y, g = rng.normal(size=(C, T)), rng.normal(size=T), rng.uniform(size=k)
        got = gated_layer(ad.constant(h[None]), ad.constant(y[None, None]), ad.constant(g[None]),
                          {n: ad.constant(a) for n, a in L.items()}, d).data[0]
        worst = max(worst, float(np.max(np.abs(got - _scalar_gated(h.tolist(), y.tolist(), g.tolist(),
                                                                     {n: a.tolist() for n, a in L.items()}, d)))))
    # broadcast check: with no time-varying input, z is constant over time and equals the knob term alone
    C, k, T = 3, 6, 25
    L = {"W_f": np.zeros((C, C, 3)), "W_g": np.zeros((C, C, 3)), "V_f": np.zeros((C, 1)),
         "V_g": np.zeros((C, 1)), "Vc_f": rng.normal(size=(k, C)), "Vc_g": rng.normal(size=(k, C))}
    g = rng.uniform(size=k)
    z = gated_layer(ad.constant(rng.normal(size=(1, C, T))), ad.constant(rng.normal(size=(1, 1, T))),
                    ad.constant(g[None]), {n: ad.constant(a) for n, a in L.items()}, 2).data[0]
    expect = np.tanh(L["Vc_f"].T @ g) / (1.0 + np.exp(-(L["Vc_g"].T @ g)))
    bcast = float(np.max(np.abs(z - expect[:, None])))
    ok = worst <= 1e-12 and bcast <= 1e-12
    announce(capsys, 3, ok, f"max |gated_layer - scalar loops| {worst:.1e}, knob broadcast error {bcast:.1e} (<= 1e-12)")
    assert worst <= 1e-12 and bcast <= 1e-12


# -- 4 -------------------------------------------------------------------------

def test_4_ascent_sanity(capsys):
    def surrogate(c):
        def objective(g):
            dlt = np.atleast_2d(g) - c
            return -np.sum(dlt * dlt, axis=1), -2.0 * dlt
        return objective

    rng = np.random.default_rng(4)
    cfg = AcquisitionConfig()
    worst = 0.0
    for _ in range(5):
        c = rng.uniform(0.02, 0.98, 6)
        g, _ = ascend(None, None, rng.uniform(size=6), cfg, objective=surrogate(c))
        worst = max(worst, float(np.max(np.abs(g - c))))
    g_out, _ = ascend(None, None, rng.uniform(size=6), cfg, objective=surrogate(np.full(6, 2.0)))
    face = bool(np.all(g_out == 1.0))
    ok = worst < 1e-3 and face
    announce(capsys, 4, ok, f"interior max |g* - c| {worst:.1e} (< 1e-3), exterior c=(2,...) clamps to ones: {face}")
    assert worst < 1e-3 and face


# -- 5, 6: active learning against uniform sampling ----------------------------

def _fraction_extreme(G):
    flat = np.asarray(G).ravel()
    return float(np.mean((flat <= 0.1) | (flat >= 0.9)))


@pytest.fixture(scope="module")
def comparison():
    workers = os.cpu_count() or 1
    runs = {}
    for seed in SEEDS:
        cfg = preset("compact").with_overrides({"seed": seed, "workers": workers})
        t0 = time.perf_counter()
        ds_a, _, _, log_a = run_active_learning(cfg)
        ds_u, _, log_u = run_baseline("uniform", cfg.budget, cfg)
        runs[seed] = {
            "active": log_a.events("validation")[0]["mse"],
            "uniform": log_u.events("validation")[0]["mse"],
            "G_active": ds_a.knobs(), "G_uniform": ds_u.knobs(),
            "rounds": len(log_a.events("round")), "seconds": time.perf_counter() - t0,
        }
    return runs


@pytest.mark.slow
def test_5_active_beats_uniform(capsys, comparison):
    act = np.median([comparison[s]["active"] for s in SEEDS])
    uni = np.median([comparison[s]["uniform"] for s in SEEDS])
    ratio = act / uni
    per_seed = ", ".join(f"seed {s}: {comparison[s]['active']:.3e} vs {comparison[s]['uniform']:.3e}"
                         f" ({comparison[s]['rounds']} rounds, {comparison[s]['seconds']:.0f}s)" for s in SEEDS)
    ok = act < uni and ratio <= 0.7
    announce(capsys, 5, ok, f"median MSE active {act:.3e}, uniform {uni:.3e}, ratio {ratio:.3f} (<= 0.7); {per_seed}")
    assert act < uni
    assert ratio <= 0.7


@pytest.mark.slow
def test_6_extreme_knob_values(capsys, comparison):
    wins = 0
    parts = []
    for s in SEEDS:
        fa, fu = _fraction_extreme(comparison[s]["G_active"]), _fraction_extreme(comparison[s]["G_uniform"])
        wins += fa > fu
        parts.append(f"seed {s}: {fa:.2f} vs {fu:.2f}")
    pooled = np.concatenate([comparison[s]["G_active"].ravel() for s in SEEDS])
    bp = fit_beta(pooled)
    ok = wins >= 2 and bp.alpha < 1 and bp.beta < 1
    announce(capsys, 6, ok, f"extreme fraction active vs uniform ({'; '.join(parts)}; 0.2 expected), "
                            f"{wins}/3 seeds higher; Beta fit alpha={bp.alpha:.3f} beta={bp.beta:.3f} (both < 1)")
    assert wins >= 2
    assert bp.alpha < 1 and bp.beta < 1


# -- 7 -------------------------------------------------------------------------

def test_7_beta_fit_self_consistency(capsys):
    truth = BetaParams(0.5396, 0.4122)
    draws = np.concatenate(sample_beta(100_000 // 6 + 1, 6, truth, seed=7))[:100_000]
    est = fit_beta(draws)
    da, db = abs(est.alpha - truth.alpha), abs(est.beta - truth.beta)
    ok = da <= 0.05 and db <= 0.05
    announce(capsys, 7, ok, f"fit of 1e5 draws: alpha {est.alpha:.4f} (err {da:.4f}), beta {est.beta:.4f} (err {db:.4f}), tol 0.05")
    assert da <= 0.05 and db <= 0.05


# -- 8 -------------------------------------------------------------------------

def test_8_persistence_and_reproducibility(capsys, tmp_path):
    rng = np.random.default_rng(8)
    # WAV
    x32 = AudioSignal(rng.uniform(-1, 1, 999).astype(np.float32).astype(np.float64), 16000)
    write_wav(tmp_path / "a.wav", x32)
    wav_ok = read_wav(tmp_path / "a.wav") == x32
    # dataset
    ds = LabeledDataset(AudioSignal(rng.uniform(-0.5, 0.5, 300), 16000))
    for g in rng.uniform(size=(3, 6)):
        label(ds, g)
    save_dataset(ds, tmp_path / "ds")
    ds_ok = load_dataset(tmp_path / "ds") == ds
    # checkpoint
    p = randomize(init_model(ModelConfig(channels=3, dilations=(1, 2, 4), head_channels=3), 1), rng)
    save_checkpoint(tmp_path / "m.ckpt", p)
    q, _ = load_checkpoint(tmp_path / "m.ckpt")
    ck_ok = p.flat().tobytes() == q.flat().tobytes()
    # end-to-end run-al, single-threaded, twice
    logs, models = [], []
    for name in ("first", "second"):
        r = subprocess.run([sys.executable, "-m", "ampal", "run-al", "--preset", "tiny", "--budget", "12",
                            "--single-thread", "--out", str(tmp_path / name)], capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        text = (tmp_path / name / "active" / "runlog.jsonl").read_text()
        logs.append(RunLog.read(tmp_path / name / "active" / "runlog.jsonl"))
        models.append((tmp_path / name / "active" / "model.ckpt").read_bytes())
        assert text
    from ampal.experiments import deterministic_view
    views = [deterministic_view(lg) for lg in logs]
    for v in views:
        v[0]["config"].pop("output_dir")
    mse_a, mse_b = (lg.events("validation")[0]["mse"] for lg in logs)
    run_ok = views[0] == views[1] and models[0] == models[1] and mse_a == mse_b
    ok = wav_ok and ds_ok and ck_ok and run_ok
    announce(capsys, 8, ok, f"wav {wav_ok}, dataset {ds_ok}, checkpoint {ck_ok}, "
                            f"run-al twice: identical log/model/MSE {run_ok} (MSE {mse_a!r})")
    assert ok


# -- 9 -------------------------------------------------------------------------

@pytest.mark.slow
def test_9_more_data_helps(capsys):
    base = preset("compact")
    errs = {}
    for n in (16, 128):
        cfg = base.with_overrides({"budget": n, "initial_points": min(n, base.initial_points)})
        _, _, log = run_baseline("uniform", n, cfg)
        errs[n] = log.events("validation")[0]["mse"]
    ratio = errs[16] / errs[128]
    ok = ratio >= 5
    announce(capsys, 9, ok, f"validation MSE 16 points {errs[16]:.3e}, 128 points {errs[128]:.3e}, improvement {ratio:.2f}x (>= 5x)")
    assert ratio >= 5
