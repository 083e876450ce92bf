"""End-to-end acceptance checks.

Each test records one PASS/FAIL line, printed in the terminal summary under
"acceptance criteria". Run just these with ``pytest tests/test_acceptance.py``.
"""
import hashlib
import math
import shutil
import time
import warnings

import numpy as np
import pytest

from clickrecon import combinatorics as cb
from clickrecon import forward_model as fm
from clickrecon import reconstruction as rc
from clickrecon.cli import main
from clickrecon.dataio import aggregate
from clickrecon.forward_model import (
    ResponseParams,
    ShotBatch,
    apply_channel,
    coherent_click_distribution,
    conversion_matrix,
    default_n_max,
    loss_matrix,
    poisson_distribution,
    sample_shots,
)
from clickrecon.pipeline import DetectorConfig, RunConfig, attenuation_grid, default_detectors, derive_seed, simulate_point
from clickrecon.reconstruction import deconvolve_loss, deconvolved_q, pseudo_inverse_matrix, pseudo_invert
from clickrecon.statistics import q_binomial, q_mandel, total_variation
from clickrecon.tomography import (
    CalibrationPoint,
    bin_covariances,
    bin_means,
    crosstalk_pairs,
    fit_response,
    uniformity_test,
)

SHOTS = 1_000_000
SEED = 7


def clear_caches():
    for fn in (
        cb.stirling_second_table,
        cb.stirling_first_table,
        fm._conversion_entries,
        fm._loss_entries,
        rc._pseudo_inverse_entries,
    ):
        fn.cache_clear()


def simulate_detector(det, shots=SHOTS, seed=SEED):
    cfg = RunConfig(detectors=[det], shots=shots, seed=seed)
    return [aggregate(simulate_point(cfg, det, i)) for i in range(len(det.nbar))]


def test_ac1_stirling_inversion_identity(criterion):
    clear_caches()
    start = time.perf_counter()
    worst_int = 0
    for n in range(13):
        for m in range(13):
            total = sum(cb.stirling_first_signed(k, m) * cb.stirling_second(n, k) for k in range(13))
            worst_int = max(worst_int, abs(total - (n == m)))
    worst = {}
    for n_bins in (4, 8):
        prod = pseudo_inverse_matrix(n_bins).entries @ conversion_matrix(n_bins, n_bins).entries
        worst[n_bins] = float(np.max(np.abs(prod - np.eye(n_bins + 1))))
    elapsed = time.perf_counter() - start
    criterion(
        "AC1 Stirling inversion",
        f"integer residual={worst_int}, |C+C-I| N=4: {worst[4]:.1e}, N=8: {worst[8]:.1e}, {elapsed:.3f}s",
    )
    assert worst_int == 0
    assert max(worst.values()) < 1e-10
    assert elapsed < 1.0


def test_ac2_povm_matrix_consistency(criterion):
    clear_caches()
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(20):
        eta = float(1.0 - rng.random())  # uniform on (0, 1]
        nbar = float(rng.uniform(0.027, 0.85))
        for n_bins in (4, 8):
            n_max = default_n_max(nbar, n_bins)
            lossy = apply_channel(loss_matrix(eta, n_max), poisson_distribution(nbar, n_max))
            clicks = apply_channel(conversion_matrix(n_bins, n_max), lossy)
            closed = coherent_click_distribution(ResponseParams(0, eta, 0, n_bins), nbar)
            worst = max(worst, float(np.max(np.abs(clicks.values - closed.values))))
    elapsed = time.perf_counter() - start
    criterion("AC2 POVM/matrix consistency", f"sup-norm={worst:.1e} over 20 pairs x N in (4, 8), {elapsed:.3f}s")
    assert worst < 1e-9
    assert elapsed < 1.0


def test_ac3_q_discrimination(criterion):
    grid = sorted(set(attenuation_grid(16)) | set(attenuation_grid(6)))
    qm_poisson = max(abs(q_mandel(poisson_distribution(nb, default_n_max(nb, 8)))) for nb in grid)
    qb_clicks = 0.0
    for det in default_detectors() + [DetectorConfig(4, 1.0), DetectorConfig(8, 1.0)]:
        for nb in grid:
            qb_clicks = max(qb_clicks, abs(q_binomial(coherent_click_distribution(det.params(), nb))))
    qb_poisson = q_binomial(poisson_distribution(0.85, 30), n_bins=4)
    qm_clicks = q_mandel(coherent_click_distribution(ResponseParams(0, 1.0, 0, 8), 0.85))
    expected_qm = math.exp(-0.10625) - 1
    criterion(
        "AC3 Q discrimination",
        f"max|Q_M(Poisson)|={qm_poisson:.1e}, max|Q_B(clicks)|={qb_clicks:.1e}, "
        f"Q_B(Poisson,N=4,0.85)={qb_poisson:.5f}, Q_M(clicks,N=8,0.85)-closed={qm_clicks - expected_qm:.1e}",
    )
    assert qm_poisson < 1e-8
    assert qb_clicks < 1e-12
    assert abs(qb_poisson - 0.2698) < 1e-3
    assert abs(qm_clicks - expected_qm) < 1e-9


def test_ac4_tomography_reproduction(criterion):
    start = time.perf_counter()
    lines, ok = [], True
    for det in default_detectors():
        aggs = simulate_detector(det)
        points = [CalibrationPoint(nb, a.clicks(), a.per_bin) for nb, a in zip(det.nbar, aggs)]
        fit = fit_response(points, order="quadratic")
        z_eta = abs(fit.eta - det.eta) / fit.sigma[1]
        z_nu, z_gamma = fit.significance[0], fit.significance[2]
        ok &= z_eta < 3 and z_nu < 3 and z_gamma < 3 and fit.r_squared > 0.9999
        lines.append(
            f"N={det.n_bins} ({len(points)} pts): eta={fit.eta:.4f}+-{fit.sigma[1]:.4f} ({z_eta:.1f} sigma), "
            f"|nu| {z_nu:.1f} sigma, |gamma| {z_gamma:.1f} sigma, R2={fit.r_squared:.7f}"
        )
    elapsed = time.perf_counter() - start
    criterion("AC4 tomography reproduction", "; ".join(lines) + f"; {elapsed:.1f}s")
    assert ok
    assert elapsed < 120


def test_ac5_pseudo_inversion_statistics_flip(criterion):
    start = time.perf_counter()
    det = DetectorConfig(8, 0.605, nbar=[0.85])
    clicks = simulate_detector(det)[0].clicks()
    r = pseudo_invert(clicks, eta=det.eta, resamples=1000, seed=derive_seed(SEED, 8, 0, 1))
    elapsed = time.perf_counter() - start
    cm, cb_, pm, pb = r.click_q_mandel, r.click_q_binomial, r.q_mandel, r.q_binomial
    criterion(
        "AC5 pseudo-inversion flip",
        f"clicks Q_B={cb_.q:+.4f} ({cb_.q / cb_.sigma:+.1f} sigma), Q_M={cm.q:+.4f} ({cm.q / cm.sigma:+.1f} sigma); "
        f"pseudo Q_M={pm.q:+.4f} ({pm.q / pm.sigma:+.1f} sigma), Q_B={pb.q:+.4f} ({pb.q / pb.sigma:+.1f} sigma); {elapsed:.1f}s",
    )
    assert abs(cb_.q) < 3 * cb_.sigma
    assert cm.q < -3 * cm.sigma
    assert abs(pm.q) < 3 * pm.sigma
    assert pb.q > 3 * pb.sigma
    assert elapsed < 30


def total_negativity_z(p):
    neg = p.values < 0
    if not np.any(neg):
        return 0.0
    sigma = math.sqrt(float(neg.astype(float) @ p.covariance @ neg.astype(float)))
    return abs(float(p.values[neg].sum())) / sigma if sigma > 0 else math.inf


def test_ac6_loss_deconvolution_staircase(criterion):
    det = DetectorConfig(8, 0.608, nbar=[0.85])
    clicks = simulate_detector(det)[0].clicks()
    pseudo = pseudo_invert(clicks, eta=det.eta, resamples=2).output
    stages = {"60%": pseudo}
    stages["80%"] = deconvolve_loss(pseudo, eta_to=0.8)
    stages["100%"] = deconvolve_loss(stages["80%"], eta_to=1.0)
    qm = {k: deconvolved_q(p)["q_mandel"] for k, p in stages.items()}
    neg_z = {k: total_negativity_z(p) for k, p in stages.items()}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ideal = poisson_distribution(0.85, 8)
    tv = total_variation(stages["100%"], ideal)
    criterion(
        "AC6 deconvolution staircase",
        "Q_M " + ", ".join(f"{k}: {q.q:+.4f}+-{q.sigma:.4f}" for k, q in qm.items())
        + "; negativity z " + ", ".join(f"{k}: {z:.2f}" for k, z in neg_z.items())
        + f"; TV(100%, Poisson)={tv:.4f}",
    )
    assert all(abs(q.q) < 0.05 for q in qm.values())
    assert all(z < 1.5 for z in neg_z.values())
    assert tv < 0.02


def inject_bias(patterns, bin_index, n_sigma):
    """Turn on extra clicks in one bin so its mean rises by ``n_sigma`` standard errors."""
    pats = patterns.copy()
    shots = len(pats)
    m = pats[:, bin_index].mean()
    extra = int(round(n_sigma * math.sqrt(m * (1 - m) / shots) * shots))
    off = np.flatnonzero(~pats[:, bin_index])
    pats[off[:: max(len(off) // extra, 1)][:extra], bin_index] = True
    return pats


def test_ac7_bin_diagnostics(criterion):
    start = time.perf_counter()
    details, ok = [], True
    for det in (DetectorConfig(4, 0.608, nbar=[0.84]), DetectorConfig(8, 0.605, nbar=[0.85])):
        key = derive_seed(SEED, det.n_bins, 99)
        batch = sample_shots(det.params(), det.nbar[0], SHOTS, key)
        clean = aggregate(batch).per_bin
        uni = uniformity_test(bin_means(clean))
        cov = bin_covariances(clean)
        off = ~np.eye(det.n_bins, dtype=bool)
        max_z = float(np.max(cov.z[off]))

        biased = aggregate(ShotBatch(batch.shot_ids, inject_bias(batch.patterns, 0, 10))).per_bin
        p_biased = uniformity_test(bin_means(biased)).p_value

        copied = batch.patterns.copy()
        copied[:, 1] = copied[:, 0]
        pairs = crosstalk_pairs(bin_covariances(aggregate(ShotBatch(batch.shot_ids, copied)).per_bin))

        ok &= uni.p_value > 1e-3 and max_z < 5 and p_biased < 1e-6 and (0, 1) in [(j, k) for j, k, _ in pairs]
        details.append(
            f"N={det.n_bins}: uniform p={uni.p_value:.3f}, max cross-talk z={max_z:.2f}, "
            f"10-sigma bias p={p_biased:.1e}, copy flagged={[(j, k) for j, k, _ in pairs]}"
        )
    elapsed = time.perf_counter() - start
    criterion("AC7 bin diagnostics", "; ".join(details) + f"; {elapsed:.1f}s")
    assert ok
    assert elapsed < 60


def tree_digest(root):
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.mark.slow
def test_ac8_pipeline_determinism(criterion, tmp_path):
    digests, times = [], []
    for label, workers in (("a", 1), ("b", 1), ("c", 3)):
        out = tmp_path / label
        start = time.perf_counter()
        code = main(["paper-pipeline", "--seed", str(SEED), "--workers", str(workers), "--out", str(out)])
        times.append(time.perf_counter() - start)
        assert code == 0
        digests.append(tree_digest(out))
        shutil.rmtree(out)
    same_repeat = digests[0] == digests[1]
    same_workers = digests[0] == digests[2]
    criterion(
        "AC8 pipeline determinism",
        f"{len(digests[0])} files; repeat identical={same_repeat}, workers 1 vs 3 identical={same_workers}; "
        f"runs {', '.join(f'{t:.1f}s' for t in times)}",
    )
    assert len(digests[0]) > 40
    assert same_repeat and same_workers
    assert max(times) < 300
