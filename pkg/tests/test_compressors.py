import numpy as np
import pytest

from lowranklab.bundleio import ModelBundle, WeightMatrix
from lowranklab.compressors import (
    CholeskyFallbackWarning,
    CompressionConfig,
    LowRankFactors,
    RankBudgetWarning,
    asvd_allocate_ranks,
    asvd_compress,
    compress_bundle,
    output_error,
    rank_for_ratio,
    svd_truncate,
    svdllm_refine,
)
from lowranklab.errors import DataError, DegeneracyError
from lowranklab.spectral import truncation_error


def test_rank_for_ratio_examples():
    assert rank_for_ratio(100, 100, 0.5) == 25
    assert rank_for_ratio(100, 300, 0.3) == 22
    assert rank_for_ratio(4, 4, 1.0) == 2


def test_rank_for_ratio_budget_and_monotone():
    rng = np.random.default_rng(0)
    last = 0
    for gamma in np.linspace(0.05, 1.0, 20):
        k = rank_for_ratio(60, 90, gamma)
        assert k >= last
        last = k
        if k > 1:
            assert k * (60 + 90) <= gamma * 60 * 90


def test_rank_for_ratio_warns_when_budget_unreachable():
    with pytest.warns(RankBudgetWarning):
        assert rank_for_ratio(100, 100, 0.005) == 1


def test_svd_truncate_full_rank_reproduces():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((6, 4))
    rec = svd_truncate(w, 4).reconstruct()
    np.testing.assert_allclose(rec, w, atol=1e-10)


def test_svd_truncate_diag():
    rec = svd_truncate(np.diag([2.0, 1.0]), 1).reconstruct()
    np.testing.assert_allclose(rec, np.diag([2.0, 0.0]), atol=1e-12)


def test_svd_truncate_matches_spectral_error():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((12, 9))
    for k in (1, 4, 9):
        rec = svd_truncate(w, k).reconstruct()
        explicit = np.linalg.norm(w - rec) ** 2 / np.linalg.norm(w) ** 2
        assert explicit == pytest.approx(truncation_error(w, k), abs=1e-10)


def test_svd_truncate_never_beaten_by_random_candidates():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((10, 8))
    k = 3
    best = np.linalg.norm(w - svd_truncate(w, k).reconstruct())
    for _ in range(200):
        cand = rng.standard_normal((10, k)) @ rng.standard_normal((k, 8))
        assert np.linalg.norm(w - cand) >= best


def test_svd_truncate_rank_out_of_range():
    with pytest.raises(DataError):
        svd_truncate(np.eye(3), 0)
    with pytest.raises(DataError):
        svd_truncate(np.eye(3), 4)


def test_factors_param_count_and_shape():
    f = svd_truncate(np.random.default_rng(0).standard_normal((7, 5)), 2)
    assert f.shape == (7, 5)
    assert f.k == 2
    assert f.param_count == 2 * 12


def test_asvd_alpha_zero_equals_vanilla():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((8, 6))
    x = rng.standard_normal((20, 6))
    plain = svd_truncate(w, 3).reconstruct()
    scaled = asvd_compress(w, x, 3, alpha=0.0).reconstruct()
    np.testing.assert_allclose(scaled, plain, atol=1e-10)


def test_asvd_uniform_activations_equal_errors():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((8, 6))
    x = np.full((10, 6), 2.5) * np.sign(rng.standard_normal((10, 6)))
    e_vanilla = output_error(w, svd_truncate(w, 2), x)
    e_asvd = output_error(w, asvd_compress(w, x, 2, alpha=0.5), x)
    assert e_asvd == pytest.approx(e_vanilla, abs=1e-10)


def test_asvd_protects_dominant_channel():
    # One input channel 100x louder: scaling must cut the output error, at
    # least in the median over seeded trials.
    wins = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        w = rng.standard_normal((6, 8))
        x = rng.standard_normal((40, 8))
        x[:, 2] *= 100.0
        e_vanilla = output_error(w, svd_truncate(w, 1), x)
        e_asvd = output_error(w, asvd_compress(w, x, 1, alpha=0.5), x)
        wins += e_asvd < e_vanilla
    assert wins > 50


def test_asvd_errors():
    w = np.eye(4)
    with pytest.raises(DataError, match="channels"):
        asvd_compress(w, np.ones((5, 3)), 1)
    with pytest.raises(DataError, match="all-zero"):
        asvd_compress(w, np.zeros((5, 4)), 1)


def test_allocate_single_matrix_gets_full_budget():
    w = np.random.default_rng(6).standard_normal((10, 10))
    ranks = asvd_allocate_ranks([w], total_budget=100, mode="stable_rank")
    assert ranks == [5]  # 5 * (10 + 10) = 100


def test_allocate_identical_matrices_split_evenly():
    w = np.random.default_rng(7).standard_normal((8, 8))
    budget = 8 * 16
    ranks = asvd_allocate_ranks([w, w.copy()], total_budget=budget, mode="stable_rank")
    assert ranks[0] == ranks[1] == budget // (2 * 16)


def test_allocate_flat_spectrum_wins_budget():
    rng = np.random.default_rng(8)
    near_rank1 = np.outer(rng.standard_normal(12), rng.standard_normal(12))
    near_rank1 += 1e-6 * rng.standard_normal((12, 12))
    flat = np.linalg.qr(rng.standard_normal((12, 12)))[0] * 5.0
    ranks = asvd_allocate_ranks([near_rank1, flat], total_budget=12 * 24, mode="stable_rank")
    assert ranks[1] > ranks[0]


def test_allocate_matches_greedy_simulation_oracle():
    # Independent re-simulation of the documented greedy rule.
    rng = np.random.default_rng(9)
    ws = [rng.standard_normal((6, 5)), rng.standard_normal((9, 4)), rng.standard_normal((5, 5))]
    budget = 150
    got = asvd_allocate_ranks(ws, budget, mode="stable_rank")

    from lowranklab.spectral import singular_values, stable_rank
    ranks = [1, 1, 1]
    spent = sum(sum(w.shape) for w in ws)
    while True:
        cand = []
        for i, w in enumerate(ws):
            if ranks[i] >= min(w.shape) or sum(w.shape) > budget - spent:
                continue
            sq = singular_values(w) ** 2
            gain = stable_rank(w) * sq[ranks[i]] / sq.sum()
            cand.append((gain, -i))
        if not cand:
            break
        gain, neg_i = max(cand)
        ranks[-neg_i] += 1
        spent += sum(ws[-neg_i].shape)
    assert got == ranks


def test_allocate_budget_respected_and_infeasible():
    rng = np.random.default_rng(10)
    ws = [rng.standard_normal((20, 10)), rng.standard_normal((15, 15))]
    budget = 400
    ranks = asvd_allocate_ranks(ws, budget, mode="stable_rank")
    assert sum(k * sum(w.shape) for k, w in zip(ranks, ws)) <= budget
    with pytest.raises(DataError, match="budget"):
        asvd_allocate_ranks(ws, 30, mode="stable_rank")


def test_allocate_output_error_mode():
    rng = np.random.default_rng(11)
    ws = [rng.standard_normal((8, 6)), rng.standard_normal((8, 6))]
    xs = [rng.standard_normal((30, 6)), rng.standard_normal((30, 6))]
    ranks = asvd_allocate_ranks(ws, 200, mode="output_error", calib=xs)
    assert sum(k * 14 for k in ranks) <= 200
    with pytest.raises(DataError, match="calibration"):
        asvd_allocate_ranks(ws, 200, mode="output_error")


def test_svdllm_identity_calibration_matches_truncation():
    rng = np.random.default_rng(12)
    w = rng.standard_normal((7, 7))
    refined = svdllm_refine(w, np.eye(7), 3).reconstruct()
    plain = svd_truncate(w, 3).reconstruct()
    np.testing.assert_allclose(refined, plain, atol=1e-8)


def test_svdllm_never_worse_than_vanilla():
    for trial in range(40):
        rng = np.random.default_rng(2000 + trial)
        w = rng.standard_normal((9, 7))
        x = rng.standard_normal((25, 7))
        k = int(rng.integers(1, 6))
        e_vanilla = output_error(w, svd_truncate(w, k), x)
        e_refined = output_error(w, svdllm_refine(w, x, k), x)
        assert e_refined <= e_vanilla + 1e-10


def test_svdllm_whiten_handles_rank_deficient_calibration():
    rng = np.random.default_rng(13)
    w = rng.standard_normal((6, 8))
    x = rng.standard_normal((3, 8))  # fewer samples than channels
    with pytest.warns(CholeskyFallbackWarning):
        factors = svdllm_refine(w, x, 2, whiten=True)
    assert np.all(np.isfinite(factors.reconstruct()))


def test_svdllm_whiten_well_conditioned_improves_or_ties():
    rng = np.random.default_rng(14)
    w = rng.standard_normal((8, 6))
    x = rng.standard_normal((50, 6)) @ np.diag([5.0, 3.0, 1.0, 1.0, 0.5, 0.1])
    e_plain = output_error(w, svd_truncate(w, 2), x)
    e_whiten = output_error(w, svdllm_refine(w, x, 2, whiten=True), x)
    assert e_whiten <= e_plain + 1e-10


def test_output_error_cases():
    w = np.diag([2.0, 1.0])
    exact = svd_truncate(w, 2)
    assert output_error(w, exact, np.eye(2)) == pytest.approx(0.0, abs=1e-12)
    zero = LowRankFactors(np.zeros((2, 1)), np.zeros(1), np.zeros((2, 1)))
    assert output_error(w, zero, np.eye(2)) == pytest.approx(1.0)
    e = output_error(w, svd_truncate(w, 1), np.eye(2))
    assert e == pytest.approx(np.sqrt(1 / 5), abs=1e-12)
    with pytest.raises(DegeneracyError):
        output_error(np.zeros((2, 2)), exact, np.eye(2))


def _demo_bundle(rng):
    mats = [
        WeightMatrix("l0.q", "attn_q", 0, rng.standard_normal((12, 12)).astype(np.float32)),
        WeightMatrix("l0.up", "mlp_up", 0, rng.standard_normal((12, 20)).astype(np.float32)),
        WeightMatrix("tok", "embed", 0, rng.standard_normal((30, 12)).astype(np.float32)),
    ]
    return ModelBundle(mats)


def test_compress_bundle_vanilla_structure():
    rng = np.random.default_rng(15)
    bundle = _demo_bundle(rng)
    out, report = compress_bundle(bundle, CompressionConfig("vanilla", gamma=0.5))
    names = [m.name for m in out.matrices]
    assert "l0.q.left" in names and "l0.q.right" in names and "tok" in names
    assert out.metadata["compression.method"] == "vanilla"
    # Factorized storage respects the declared ratio per targeted matrix.
    for entry in report:
        assert entry["params_after"] <= 0.5 * entry["params_before"]
    # Factors reconstruct the truncation.
    left = out.matrix("l0.q.left").values.astype(np.float64)
    right = out.matrix("l0.q.right").values.astype(np.float64)
    k = int(out.metadata["compression.rank.l0.q"])
    expected = svd_truncate(bundle.matrix("l0.q").values, k).reconstruct()
    np.testing.assert_allclose(left @ right.T, expected, atol=1e-4)


def test_compress_bundle_asvd_and_report():
    rng = np.random.default_rng(16)
    bundle = _demo_bundle(rng)
    calib = {"l0.q": rng.standard_normal((16, 12)), "l0.up": rng.standard_normal((16, 20))}
    cfg = CompressionConfig("asvd_sr", gamma=0.4, target="both")
    out, report = compress_bundle(bundle, cfg, calib)
    targeted = {e["name"] for e in report}
    assert targeted == {"l0.q", "l0.up"}
    assert all("output_error" in e for e in report)
    budget = int(0.4 * (144 + 240))
    assert sum(e["params_after"] for e in report) <= budget


def test_compress_bundle_requires_calibration():
    bundle = _demo_bundle(np.random.default_rng(17))
    with pytest.raises(DataError, match="calibration"):
        compress_bundle(bundle, CompressionConfig("svdllm", gamma=0.5))
