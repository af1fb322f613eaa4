"""Acceptance suite: eleven numbered criteria, one printed status line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines.  Criterion 6 needs the ETTh1 benchmark CSV (place it at data/ETTh1.csv
or point TSLAB_ETTH1 at it); without the file that test skips honestly and a
synthetic surrogate stands in.  Criterion 7 reports its finding-dependent gap
instead of hard-failing.
"""

import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from tslab import (
    Backbone,
    ExperimentConfig,
    LinearChain,
    Mixer,
    MixerSpec,
    SeriesTensor,
    VariantSpec,
    alignment_report,
    apply_freeze_policy,
    check_reprogram_bound,
    durbin_watson,
    knn_jaccard,
    load_dataset,
    pretrain_tiny,
    run_experiment,
    tally_wins,
    wasserstein1_1d,
)
from tslab.synthetic import (
    inject_spikes,
    seasonal_series,
    sine_series,
    write_labels_csv,
    write_series_csv,
)

REPO_ROOT = Path(__file__).resolve().parent.parent


def _report(num: int, status: str, detail: str) -> None:
    print(f"[criterion {num:02d}] {status} — {detail}")


def _etth1_path():
    env = os.environ.get("TSLAB_ETTH1")
    if env and Path(env).exists():
        return Path(env)
    default = REPO_ROOT / "data" / "ETTh1.csv"
    if default.exists():
        return default
    return None


# ---------------------------------------------------------------------------


def test_criterion_01_durbin_watson():
    """DW hand value, iid Monte Carlo, AR(1) Monte Carlo; all under 1 second."""
    t0 = time.perf_counter()
    exact = durbin_watson(np.array([1.0, -1.0, 1.0, -1.0]))
    rng = np.random.default_rng(0)
    iid = durbin_watson(rng.standard_normal(10_000))
    e = np.empty(10_000)
    e[0] = rng.standard_normal()
    eps = rng.standard_normal(10_000)
    for t in range(1, 10_000):
        e[t] = 0.5 * e[t - 1] + eps[t]
    ar1 = durbin_watson(e)
    elapsed = time.perf_counter() - t0
    ok = exact == 3.0 and 1.94 <= iid <= 2.06 and 0.9 <= ar1 <= 1.1 and elapsed < 1.0
    _report(1, "PASS" if ok else "FAIL",
            f"DW([1,-1,1,-1])={exact}, iid={iid:.4f}, AR(0.5)={ar1:.4f}, {elapsed:.2f}s")
    assert exact == 3.0
    assert 1.94 <= iid <= 2.06
    assert 0.9 <= ar1 <= 1.1
    assert elapsed < 1.0


def test_criterion_02_lipschitz_bound_always_holds():
    """1,000 seeded (f, S, T) triples: the expectation-gap bound must hold in
    every case; for 1-D identity f the gap is bounded by W1 directly."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    acts = ["relu", "tanh", "abs", "identity"]
    held = 0
    for i in range(1000):
        d_in = int(rng.integers(1, 6))
        d_mid = int(rng.integers(1, 6))
        d_out = int(rng.integers(1, 4))
        layers = [("linear", rng.standard_normal((d_mid, d_in)), rng.standard_normal(d_mid))]
        if rng.random() < 0.8:
            layers.append(("act", acts[int(rng.integers(0, len(acts)))]))
            layers.append(("linear", rng.standard_normal((d_out, d_mid)), rng.standard_normal(d_out)))
        f = LinearChain(layers=layers)
        n = int(rng.integers(3, 13))
        scale = rng.uniform(0.2, 3.0)
        s = rng.standard_normal((n, d_in)) * scale
        t = rng.standard_normal((n, d_in)) + rng.standard_normal(d_in)
        chk = check_reprogram_bound(f, s, t, probe_seed=i, sliced_projections=16)
        if chk.holds:
            held += 1
    # 1-D identity: |mean(S) - mean(T)| <= W1 with no Lipschitz slack at all
    ident = LinearChain.single(np.eye(1))
    ident_ok = 0
    for i in range(100):
        n = int(rng.integers(2, 20))
        s = rng.standard_normal((n, 1)) * rng.uniform(0.5, 2)
        t = rng.standard_normal((n, 1))
        chk = check_reprogram_bound(ident, s, t, probe_seed=i, sliced_projections=4)
        if chk.lhs <= chk.w1 + 1e-12:
            ident_ok += 1
    elapsed = time.perf_counter() - t0
    ok = held == 1000 and ident_ok == 100 and elapsed < 30.0
    _report(2, "PASS" if ok else "FAIL",
            f"bound held {held}/1000, identity gap <= W1 {ident_ok}/100, {elapsed:.1f}s")
    assert held == 1000
    assert ident_ok == 100
    assert elapsed < 30.0


def test_criterion_03_wasserstein_brute_force():
    """wasserstein1_1d equals exhaustive-assignment transport on 500 pairs."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 7))
        x = rng.standard_normal(n) * rng.uniform(0.1, 5)
        y = rng.standard_normal(n) * rng.uniform(0.1, 5)
        brute = min(
            np.mean(np.abs(x - y[list(perm)]))
            for perm in itertools.permutations(range(n))
        )
        worst = max(worst, abs(wasserstein1_1d(x, y) - brute))
    ok = worst <= 1e-9
    _report(3, "PASS" if ok else "FAIL", f"max |sorted-pairing - brute force| = {worst:.2e}")
    assert worst <= 1e-9


def test_criterion_04_mixer_gradient_check():
    """Analytic Mixer gradients match central differences (double precision)."""
    k, s, m, d = 4, 5, 3, 8
    torch.manual_seed(0)
    mixer = Mixer(MixerSpec(m=m), n_tokens_in=k + s, width=d, seed=0).double()
    x = torch.randn(k + s, d, dtype=torch.float64)
    probe = torch.randn(m, d, dtype=torch.float64)

    def loss_value():
        return (mixer(x) * probe).sum()

    loss = loss_value()
    loss.backward()
    worst = 0.0
    checked = 0
    for param in mixer.parameters():
        grad = param.grad.detach().clone()
        flat = param.data.view(-1)
        for j in range(flat.numel()):
            theta = flat[j].item()
            h = 1e-5 * max(1.0, abs(theta))
            flat[j] = theta + h
            up = loss_value().item()
            flat[j] = theta - h
            down = loss_value().item()
            flat[j] = theta
            numeric = (up - down) / (2 * h)
            analytic = grad.view(-1)[j].item()
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
            checked += 1
    ok = worst <= 1e-4
    _report(4, "PASS" if ok else "FAIL",
            f"{checked} parameters, worst relative gradient error {worst:.2e}")
    assert worst <= 1e-4


def test_criterion_05_freeze_soundness():
    """50 optimizer steps under layernorm_only leave everything else bit-identical,
    and the trainable count equals the hand enumeration."""
    width, depth, max_len = 32, 2, 128
    torch.manual_seed(0)
    bb = Backbone(VariantSpec(kind="random", width=width, depth=depth, heads=4, max_len=max_len))
    mask = apply_freeze_policy(bb, "layernorm_only")
    # hand enumeration: per block two LayerNorms (gain+bias), plus the final
    # LayerNorm, plus the positional table
    expected = depth * 2 * (2 * width) + 2 * width + max_len * width
    frozen_before = {n: p.detach().clone() for n, p in bb.named_parameters() if not p.requires_grad}
    opt = torch.optim.Adam([p for p in bb.parameters() if p.requires_grad], lr=1e-2)
    for _ in range(50):
        loss = bb(torch.randn(8, 16, width)).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    drifted = [n for n, p in bb.named_parameters() if n in frozen_before and not torch.equal(p, frozen_before[n])]
    ok = mask.trainable == expected and not drifted
    _report(5, "PASS" if ok else "FAIL",
            f"trainable {mask.trainable} (expected {expected}), drifted frozen tensors: {drifted or 'none'}")
    assert mask.trainable == expected
    assert not drifted


def test_criterion_06_etth1_forecast(tmp_path):
    """Linear variant on ETTh1 (lookback 336, horizon 96, benchmark split
    borders 8640/2880/2880) must reach test MSE <= 0.46 on standardized data."""
    source = _etth1_path()
    if source is None:
        _report(6, "SKIP", "ETTh1.csv not present (data/ETTh1.csv or TSLAB_ETTH1); "
                           "synthetic surrogate runs separately")
        pytest.skip(
            "ETTh1.csv is not available in this sandbox (no public network); "
            "place it at data/ETTh1.csv or set TSLAB_ETTH1 to enable this criterion"
        )
    t0 = time.perf_counter()
    series = load_dataset(source)
    # standard benchmark convention: 12/4/4 months of hourly rows
    truncated = SeriesTensor(values=series.values[:14400],
                             timestamps=series.timestamps[:14400] if series.timestamps else None)
    data = write_series_csv(truncated, tmp_path / "etth1_14400.csv")
    cfg = ExperimentConfig.parse(
        {
            "dataset": str(data),
            "task": {"task": "forecast", "horizon": 96},
            "variant": "linear",
            "lookback": 336,
            "patch_len": 16,
            "stride": 8,
            "split": (0.6, 0.2, 0.2),
            "output_dir": str(tmp_path / "runs"),
            "seed": 0,
        }
    )
    result = run_experiment(cfg, persist=False)
    mse = result.metrics[0]["mse"]
    elapsed = time.perf_counter() - t0
    ok = mse <= 0.46 and elapsed <= 900
    _report(6, "PASS" if ok else "FAIL", f"ETTh1 lookback 336 horizon 96 test MSE {mse:.3f} "
                                         f"(bar 0.46), {elapsed:.0f}s")
    assert mse <= 0.46
    assert elapsed <= 900


def test_criterion_06s_synthetic_surrogate(tmp_path):
    """Always-on stand-in for criterion 6: the same pipeline shape (Linear
    variant, lookback 336, horizon 96, standardized) on synthetic seasonal data
    must clear the same MSE bar."""
    data = write_series_csv(
        seasonal_series(4000, periods=(24.0, 168.0), noise=0.1, seed=3, n_variates=3),
        tmp_path / "seasonal.csv",
    )
    cfg = ExperimentConfig.parse(
        {
            "dataset": str(data),
            "task": {"task": "forecast", "horizon": 96},
            "variant": "linear",
            "lookback": 336,
            "patch_len": 16,
            "stride": 8,
            "window_stride": 2,
            "output_dir": str(tmp_path / "runs"),
            "seed": 0,
        }
    )
    result = run_experiment(cfg, persist=False)
    mse = result.metrics[0]["mse"]
    ok = mse <= 0.46
    _report(6, "PASS" if ok else "FAIL", f"surrogate seasonal MSE {mse:.3f} (bar 0.46)")
    assert mse <= 0.46


def test_criterion_07_variant_parity(tmp_path):
    """Random-init vs tiny-pretrained backbones under LayerNorm-only finetuning
    should land close together; the gap is reported, not hard-failed."""
    ckpt = tmp_path / "tiny.zip"
    pretrain_tiny(ckpt, width=32, depth=2, heads=4, vocab=64, max_len=128, seq_len=32,
                  steps=200, seed=0)
    data = write_series_csv(
        seasonal_series(2000, periods=(24.0, 168.0), noise=0.1, seed=1), tmp_path / "seasonal.csv"
    )
    base = {
        "dataset": str(data),
        "task": {"task": "forecast", "horizon": 24},
        "lookback": 96,
        "patch_len": 16,
        "stride": 8,
        "window_stride": 2,
        "output_dir": str(tmp_path / "runs"),
        "seed": 0,
    }
    mses = {}
    for name, variant in {
        "random": {"kind": "random", "width": 32, "freeze_policy": "layernorm_only"},
        "llm": {"kind": "llm", "width": 32, "checkpoint": str(ckpt),
                "freeze_policy": "layernorm_only"},
        "linear": {"kind": "linear", "width": 32},
    }.items():
        cfg = ExperimentConfig.parse({**base, "variant": variant})
        mses[name] = run_experiment(cfg, persist=False).metrics[0]["mse"]
    gap = abs(mses["random"] - mses["llm"])
    tol = 0.1 * mses["linear"]
    within = gap <= tol
    status = "PASS" if within else "REPORT"
    _report(7, status,
            f"|MSE(random)-MSE(llm)| = {gap:.4f} vs 0.1*MSE(linear) = {tol:.4f} "
            f"(random {mses['random']:.4f}, llm {mses['llm']:.4f}, linear {mses['linear']:.4f})"
            + ("" if within else "; finding-dependent gap exceeded tolerance, reported not failed"))
    # hard requirements: all three pipelines ran and produced finite errors
    assert all(np.isfinite(v) for v in mses.values())


def test_criterion_08_anomaly_f1(tmp_path):
    """Ten injected 10-sigma spikes, 1% anomaly ratio, point-adjust off: F1 >= 0.9."""
    series = sine_series(1120, period=24.0, noise=0.02, seed=5)
    spiked, labels = inject_spikes(series, n_spikes=10, magnitude_sigmas=10.0, seed=6,
                                   start_fraction=0.8, min_gap=8)
    data = write_series_csv(spiked, tmp_path / "anom.csv")
    lab = write_labels_csv(labels, tmp_path / "labels.csv")
    cfg = ExperimentConfig.parse(
        {
            "dataset": str(data),
            "schema": "anomaly",
            "label_path": str(lab),
            "task": {"task": "anomaly", "anomaly_ratio": 1.0, "point_adjust": False},
            "variant": "linear",
            "lookback": 32,
            "patch_len": 16,
            "lr_grid": [1e-2, 1e-3],
            "epochs": 4,
            "output_dir": str(tmp_path / "runs"),
            "seed": 0,
        }
    )
    result = run_experiment(cfg, persist=False)
    rec = result.metrics[0]
    ok = rec["f1"] >= 0.9
    _report(8, "PASS" if ok else "FAIL",
            f"P {rec['precision']:.3f} R {rec['recall']:.3f} F1 {rec['f1']:.3f} (bar 0.90, no point-adjust)")
    assert rec["f1"] >= 0.9


def test_criterion_09_pseudo_alignment_metrics():
    """knn overlap of identical clouds is exactly 1; rigid motions change nothing
    (1e-9); a centroid-cancelling shift kills the centroid gap without touching
    the variance profile."""
    rng = np.random.default_rng(11)
    a = rng.standard_normal((60, 5))
    identical = knn_jaccard(a, a.copy(), k=10)
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    moved = knn_jaccard(a @ q.T + rng.standard_normal(5), (a.copy()) @ q.T + 7.0, k=10)
    base = knn_jaccard(a, a.copy(), k=10)
    rigid_dev = abs(moved - base)

    ts_pre = rng.standard_normal((80, 5)) + 4.0
    text = rng.standard_normal((120, 5)) - 2.0
    shift = text.mean(axis=0) - ts_pre.mean(axis=0)
    ts_post = ts_pre + shift
    rep = alignment_report(ts_pre, ts_post, text, alt_post=ts_post.copy(), k=10)
    ratio_dev = float(np.max(np.abs(np.array(rep.variance_profile["post_over_pre"]) - 1.0)))
    ok = (identical == 1.0 and rigid_dev <= 1e-9
          and rep.centroid_shift_after < 1e-6 and ratio_dev < 1e-9)
    _report(9, "PASS" if ok else "FAIL",
            f"identical knn {identical}, rigid deviation {rigid_dev:.1e}, "
            f"centroid after {rep.centroid_shift_after:.1e}, variance-ratio change {ratio_dev:.1e}")
    assert identical == 1.0
    assert rigid_dev <= 1e-9
    assert rep.centroid_shift_after < 1e-6
    assert ratio_dev < 1e-9


# Reference averaged (MSE, MAE) results for the six backbone variants on eight
# public long-horizon benchmarks; the tally over these rows is the fixture's
# published wins row.
REFERENCE_AVG_RESULTS = {
    "ETTh1":   {"llm": (0.433, 0.435), "random": (0.508, 0.479), "linear": (0.432, 0.436),
                "att": (0.486, 0.452), "trans": (0.504, 0.473), "nollm": (0.431, 0.437)},
    "ETTh2":   {"llm": (0.362, 0.399), "random": (0.433, 0.448), "linear": (0.361, 0.397),
                "att": (0.363, 0.401), "trans": (0.404, 0.433), "nollm": (0.356, 0.398)},
    "ETTm1":   {"llm": (0.360, 0.394), "random": (0.367, 0.392), "linear": (0.372, 0.386),
                "att": (0.367, 0.388), "trans": (0.388, 0.406), "nollm": (0.364, 0.383)},
    "ETTm2":   {"llm": (0.272, 0.332), "random": (0.292, 0.346), "linear": (0.270, 0.326),
                "att": (0.261, 0.322), "trans": (0.279, 0.332), "nollm": (0.259, 0.317)},
    "Illness": {"llm": (2.209, 0.981), "random": (1.961, 0.920), "linear": (1.901, 0.891),
                "att": (2.209, 0.960), "trans": (2.004, 0.928), "nollm": (2.134, 0.981)},
    "Weather": {"llm": (0.219, 0.265), "random": (0.243, 0.283), "linear": (0.221, 0.266),
                "att": (0.221, 0.266), "trans": (0.225, 0.270), "nollm": (0.249, 0.281)},
    "Traffic": {"llm": (0.428, 0.296), "random": (0.407, 0.281), "linear": (0.420, 0.292),
                "att": (1.061, 0.629), "trans": (0.401, 0.278), "nollm": (0.422, 0.287)},
    "ECL":     {"llm": (0.167, 0.266), "random": (0.163, 0.255), "linear": (0.164, 0.258),
                "att": (0.165, 0.260), "trans": (0.164, 0.261), "nollm": (0.164, 0.257)},
}


def test_criterion_10_win_tally_reproduces_reference_row():
    """Feeding the transcribed averages through tally_wins must reproduce the
    published wins rows for both MSE and MAE."""
    tally = tally_wins(list(REFERENCE_AVG_RESULTS.items()))
    mse_row = {v: tally[v]["mse"] for v in ("llm", "random", "linear", "att", "trans", "nollm")}
    mae_row = {v: tally[v]["mae"] for v in ("llm", "random", "linear", "att", "trans", "nollm")}
    expected_mse = {"llm": 2, "random": 1, "linear": 1, "att": 0, "trans": 1, "nollm": 3}
    expected_mae = {"llm": 2, "random": 1, "linear": 2, "att": 0, "trans": 1, "nollm": 2}
    ok = mse_row == expected_mse and mae_row == expected_mae
    _report(10, "PASS" if ok else "FAIL", f"MSE wins {mse_row}, MAE wins {mae_row}")
    assert mse_row == expected_mse
    assert mae_row == expected_mae


def test_criterion_11_byte_determinism(tmp_path):
    """Same config + same seed => byte-identical result JSON (wall clock aside),
    across two task types."""
    data = write_series_csv(
        seasonal_series(600, periods=(24.0,), noise=0.05, seed=2, n_variates=2),
        tmp_path / "series.csv",
    )
    configs = [
        {
            "dataset": str(data),
            "task": {"task": "forecast", "horizon": 12},
            "variant": {"kind": "trans", "width": 32},
            "lookback": 48,
            "patch_len": 16,
            "window_stride": 2,
            "lr_grid": [1e-2, 1e-3],
            "epochs": 2,
            "output_dir": str(tmp_path / "runs"),
            "seed": 0,
        },
        {
            "dataset": str(data),
            "task": {"task": "impute", "mask_ratio": 0.25},
            "variant": {"kind": "random", "width": 32,
                        "mechanisms": {"prototypes": 6, "mixer": 8}},
            "lookback": 32,
            "patch_len": 16,
            "lr_grid": [1e-3],
            "epochs": 2,
            "output_dir": str(tmp_path / "runs"),
            "seed": 0,
        },
    ]
    identical = []
    for raw in configs:
        a = run_experiment(ExperimentConfig.parse(raw), persist=False)
        b = run_experiment(ExperimentConfig.parse(raw), persist=False)
        ja, jb = a.to_json(include_wall_clock=False), b.to_json(include_wall_clock=False)
        identical.append(ja == jb)
        json.loads(ja)  # must stay valid JSON
    ok = all(identical)
    _report(11, "PASS" if ok else "FAIL",
            f"byte-identical reruns: forecast/trans {identical[0]}, impute/random+mixer {identical[1]}")
    assert all(identical)
