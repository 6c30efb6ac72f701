import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from dmuq.detector import Detection, DetectorConfig, covariances_from_raw, detect, forward, init_model, mode_inputs
from dmuq.distributions import BoxUncertainty, UQStats, Variant, combine_covariance, estimate_sigma_a, estimate_sigma_e
from dmuq.doublem import (
    DoubleMConfig,
    ResidualSet,
    bootstrap_train,
    build_blocks,
    double_m_infer,
    double_m_train,
    harvest,
    load_residual_log,
    load_stats,
    mbb_infer,
    run_dm,
    run_mbb,
    sample_bootstrap,
    save_residual_log,
    save_stats,
    stats_bytes,
    stats_from_logs,
)
from dmuq.errors import ConfigError, EstimationError, FormatError, UsageError
from dmuq.linalg import is_psd

from conftest import SMALL

MODE = "early"


@pytest.fixture(scope="module")
def refined(trained_img, small_splits):
    cfg = DoubleMConfig(block_length=10, n_bootstraps=2, refine_epochs=1, seed=5)
    return double_m_train(small_splits["train"], small_splits["val"], cfg, SMALL, "IMG", MODE, pretrained=trained_img)


@pytest.fixture(scope="module")
def mbb(trained_none, small_splits):
    cfg = DoubleMConfig(block_length=10, n_bootstraps=2, refine_epochs=1, seed=5)
    return run_mbb(small_splits["train"], small_splits["val"], cfg, SMALL, MODE, pretrained=trained_none)


def degenerate_cfg(k):
    return DoubleMConfig(block_length=k, n_bootstraps=1, refine_epochs=0, seed=5)


# -- blocks -------------------------------------------------------------------------


def test_single_scene_of_100_gives_91_blocks():
    assert len(build_blocks([100], 10)) == 91


def test_block_length_equal_to_scene_gives_whole_scene():
    blocks = build_blocks([100], 100)
    assert len(blocks) == 1
    assert np.array_equal(blocks.block(0), np.arange(100))


def test_unit_blocks_are_singletons():
    blocks = build_blocks([100], 1)
    assert len(blocks) == 100
    assert [list(blocks.block(b)) for b in range(3)] == [[0], [1], [2]]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=5), st.integers(1, 12))
def test_blocks_are_contiguous_and_stay_in_their_scene(lengths, l):
    if l > min(lengths):
        with pytest.raises(ConfigError):
            build_blocks(lengths, l)
        return
    blocks = build_blocks(lengths, l)
    assert len(blocks) == sum(n - l + 1 for n in lengths)
    scene_of = np.repeat(np.arange(len(lengths)), lengths)
    for b in range(len(blocks)):
        idx = blocks.block(b)
        assert np.array_equal(np.diff(idx), np.ones(l - 1))
        assert len(set(scene_of[idx])) == 1


def test_blocks_from_frames_follow_scenes(small_splits):
    blocks = build_blocks(small_splits["train"], 10)
    assert len(blocks) == 2 * (60 - 10 + 1)
    assert blocks.n_frames == 120


def test_block_longer_than_scene_is_config_error():
    with pytest.raises(ConfigError):
        build_blocks([100, 50], 60)


@pytest.mark.parametrize("k,l,m", [(100, 10, 10), (105, 10, 10), (99, 10, 9)])
def test_resample_size_uses_floor(k, l, m, rng):
    r = sample_bootstrap(build_blocks([k], l), rng)
    assert len(r.blocks) == m
    assert len(r.frames) == m * l


def test_resample_keeps_order_inside_blocks(rng):
    blocks = build_blocks([30, 40], 5)
    r = sample_bootstrap(blocks, rng)
    for m, b in enumerate(r.blocks):
        assert np.array_equal(r.frames[5 * m : 5 * m + 5], blocks.block(b))


def test_block_draws_are_uniform():
    blocks = build_blocks([100], 10)
    rng = np.random.default_rng(2024)
    counts = np.zeros(len(blocks))
    for _ in range(10_000):
        np.add.at(counts, sample_bootstrap(blocks, rng).blocks, 1)
    n = counts.sum()
    p = 1.0 / len(blocks)
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))
    assert sps.chisquare(counts).pvalue > 0.001


def test_config_validation():
    for bad in (dict(block_length=0), dict(n_bootstraps=0), dict(refine_epochs=-1)):
        with pytest.raises(ConfigError):
            DoubleMConfig(**bad).validate()


# -- matching and residuals -----------------------------------------------------------


def test_identical_boxes_give_zero_residuals(small_splits):
    frames = small_splits["val"][:5]
    dets = [[Detection(0.9, c.copy(), None, (0, 0)) for c in f.target_corners()] for f in frames]
    keys, values, covs = harvest(dets, frames, 1, 0.5)
    assert len(values) == 4 * sum(len(f.targets()) for f in frames)
    assert np.all(values == 0.0)
    assert covs == []
    assert set(keys[:, 3]) <= {0, 1, 2, 3}


def test_disjoint_boxes_give_no_residuals(small_splits):
    frames = small_splits["val"][:5]
    dets = [[Detection(0.9, c + 100.0, None, (0, 0)) for c in f.target_corners()] for f in frames]
    keys, values, _ = harvest(dets, frames, 1, 0.5)
    assert len(keys) == len(values) == 0


def test_harvest_keys_identify_objects(small_splits):
    frame = next(f for f in small_splits["val"] if f.targets())
    box = frame.targets()[0]
    det = Detection(0.8, box.corners + 0.1, BoxUncertainty(Variant.IMG, np.stack([np.eye(2)] * 4)), (0, 0))
    keys, values, covs = harvest([[det]], [frame], 3, 0.5)
    assert np.array_equal(keys, [[3, 0, box.object_id, i] for i in range(4)])
    assert np.allclose(values, -0.1)
    assert len(covs) == 1


def test_dmg_residuals_stack_corners():
    rs = ResidualSet(np.zeros((8, 4), dtype=np.int64), np.arange(16.0).reshape(8, 2))
    assert rs.pooled(Variant.DMG).shape == (2, 8)
    assert np.array_equal(rs.pooled(Variant.DMG)[1], np.arange(8.0, 16.0))
    assert rs.pooled(Variant.IMG).shape == (8, 2)


def test_too_few_residuals_is_estimation_error():
    rs = ResidualSet(np.zeros((2, 4), dtype=np.int64), np.ones((2, 2)))
    with pytest.raises(EstimationError):
        stats_from_logs(None, rs, [], DoubleMConfig())


def test_untrained_model_matches_nothing(small_splits):
    model = init_model(SMALL, "IMG", DetectorConfig(epochs=0), seed=1)
    with pytest.raises(EstimationError):
        bootstrap_train(small_splits["train"], small_splits["val"], degenerate_cfg(60), model, MODE)


def test_isg_keeps_diagonal_epistemic(rng):
    rs = ResidualSet(np.zeros((50, 4), dtype=np.int64), rng.standard_normal((50, 2)) @ np.array([[1.0, 0.8], [0.0, 0.5]]))
    covs = [np.stack([np.diag(rng.random(2) + 0.1)] * 4)]
    s = stats_from_logs(Variant.ISG, rs, covs, DoubleMConfig())
    assert s.sigma_e[0, 1] == s.sigma_e[1, 0] == 0.0
    assert np.allclose(np.diag(s.sigma_e), np.diag(estimate_sigma_e(rs.values)))


# -- training ------------------------------------------------------------------------------


def test_refinement_runs_every_iteration(refined):
    assert len(refined.resamples) == 2
    assert len(refined.refine_losses) == 2 and all(refined.refine_losses)
    assert set(refined.residuals.keys[:, 0]) <= {1, 2}
    assert refined.stats.n_bootstraps == 2 and refined.stats.block_length == 10


def test_sigma_e_recomputes_from_log(refined, tmp_path):
    path = tmp_path / "residuals.txt"
    save_residual_log(path, refined.residuals)
    log = load_residual_log(path)
    assert np.array_equal(log.keys, refined.residuals.keys)
    assert np.array_equal(log.values, refined.residuals.values)
    assert np.array_equal(estimate_sigma_e(log.values), refined.stats.sigma_e)
    assert np.array_equal(estimate_sigma_a(np.stack(refined.covariances)), refined.stats.sigma_a)
    assert refined.stats.n_residuals == len(log)


def test_statistics_are_psd(refined, mbb):
    for s in (refined.stats, mbb.stats):
        assert is_psd(s.sigma_e, tol=1e-12) and is_psd(s.sigma_a, tol=1e-12)


def test_training_is_deterministic(refined, trained_img, small_splits):
    cfg = DoubleMConfig(block_length=10, n_bootstraps=2, refine_epochs=1, seed=5)
    again = double_m_train(small_splits["train"], small_splits["val"], cfg, SMALL, "IMG", MODE, pretrained=trained_img)
    assert again.model.flat().tobytes() == refined.model.flat().tobytes()
    assert stats_bytes(again.stats) == stats_bytes(refined.stats)
    assert [r.blocks.tolist() for r in again.resamples] == [r.blocks.tolist() for r in refined.resamples]


def test_degenerate_loop_is_one_validation_pass(trained_img, small_splits):
    scene0 = small_splits["train"][:60]
    result = double_m_train(scene0, small_splits["val"], degenerate_cfg(60), SMALL, "IMG", MODE, pretrained=trained_img)
    assert result.model is trained_img
    dets = detect(trained_img, small_splits["val"], MODE)
    _, values, covs = harvest(dets, small_splits["val"], 1, 0.5)
    assert np.array_equal(result.stats.sigma_e, estimate_sigma_e(values))
    assert np.array_equal(result.stats.sigma_a, np.mean(np.concatenate(covs), axis=0))


def test_mbb_degenerate_loop_is_residual_covariance(trained_none, small_splits):
    scene0 = small_splits["train"][:60]
    result = run_mbb(scene0, small_splits["val"], degenerate_cfg(60), SMALL, MODE, pretrained=trained_none)
    _, values, _ = harvest(detect(trained_none, small_splits["val"], MODE), small_splits["val"], 1, 0.5)
    assert np.array_equal(result.stats.sigma_e, estimate_sigma_e(values))
    assert np.all(result.stats.sigma_a == 0.0)
    assert result.stats.variant == "NONE"


def test_variant_checks(trained_img, trained_none, small_splits):
    with pytest.raises(UsageError):
        double_m_train(small_splits["train"], small_splits["val"], DoubleMConfig(), SMALL, "DMG", MODE, pretrained=trained_img)
    with pytest.raises(UsageError):
        run_mbb(small_splits["train"], small_splits["val"], DoubleMConfig(), SMALL, MODE, pretrained=trained_img)
    with pytest.raises(UsageError):
        bootstrap_train(small_splits["train"], [], DoubleMConfig(), trained_none, MODE)


def test_run_dm_is_plain_training(small_splits):
    cfg = DetectorConfig(epochs=1)
    model, losses = run_dm(small_splits["val"], SMALL, "ISG", "lb", cfg, seed=2)
    again, _ = run_dm(small_splits["val"], SMALL, "ISG", "lb", cfg, seed=2)
    assert model.variant is Variant.ISG
    assert len(losses) == 2
    assert model.flat().tobytes() == again.flat().tobytes()


# -- inference --------------------------------------------------------------------------------


def test_infer_changes_only_covariances(refined, small_splits):
    plain = detect(refined.model, small_splits["test"], MODE)
    combined = double_m_infer(refined.model, refined.stats, small_splits["test"], MODE)
    assert [len(d) for d in plain] == [len(d) for d in combined]
    for a_frame, b_frame in zip(plain, combined):
        for a, b in zip(a_frame, b_frame):
            assert a.score == b.score
            assert a.corners.tobytes() == b.corners.tobytes()
            assert np.all(np.linalg.eigvalsh(b.cov) > 0)


def test_combined_covariance_recomputes_exactly(refined, small_splits):
    plain = detect(refined.model, small_splits["test"], MODE)
    combined = double_m_infer(refined.model, refined.stats, small_splits["test"], MODE)
    s = refined.stats
    for a_frame, b_frame in zip(plain, combined):
        for a, b in zip(a_frame, b_frame):
            for i in range(4):
                expected = s.sigma_e + (0.5 * s.sigma_a + 0.5 * a.cov[i])
                assert np.max(np.abs(b.cov[i] - expected)) <= 1e-15


def test_zero_statistics_halve_the_prediction(trained_img, small_splits):
    zero = UQStats(np.zeros((2, 2)), np.zeros((2, 2)), 1, 0, 1, "IMG")
    plain = detect(trained_img, small_splits["val"], MODE)
    halved = double_m_infer(trained_img, zero, small_splits["val"], MODE)
    for a_frame, b_frame in zip(plain, halved):
        for a, b in zip(a_frame, b_frame):
            assert np.array_equal(b.cov, 0.5 * a.cov)


def test_combine_covariance_formula(rng):
    e, a, h = (np.cov(rng.standard_normal((2, 10))) for _ in range(3))
    assert np.allclose(combine_covariance(e, a, h), e + 0.5 * a + 0.5 * h, rtol=0, atol=1e-15)


def test_infer_variant_mismatch(refined, trained_none, mbb, small_splits):
    dmg = UQStats(np.eye(8), np.eye(8), 1, 9, 1, "DMG")
    with pytest.raises(UsageError):
        double_m_infer(refined.model, dmg, small_splits["val"], MODE)
    with pytest.raises(UsageError):
        double_m_infer(trained_none, mbb.stats, small_splits["val"], MODE)
    with pytest.raises(UsageError):
        mbb_infer(refined.model, refined.stats, small_splits["val"], MODE)


def test_dm_covariance_is_head_output(trained_img, small_splits):
    frames = small_splits["val"][:4]
    raw = forward(trained_img, mode_inputs(frames, MODE), MODE)
    for b, dets in enumerate(detect(trained_img, frames, MODE)):
        for d in dets:
            r, c = d.cell
            head = covariances_from_raw(raw.cov.data[b, r, c][None], Variant.IMG)[0]
            assert np.array_equal(d.cov, head)


def test_mbb_covariance_is_constant(mbb, small_splits):
    dets = [d for fd in mbb_infer(mbb.model, mbb.stats, small_splits["test"], MODE) for d in fd]
    assert dets
    for d in dets:
        assert d.uncertainty.variant is Variant.IMG
        for i in range(4):
            assert np.array_equal(d.cov[i], mbb.stats.sigma_e)


# -- files ---------------------------------------------------------------------------------------


def test_stats_round_trip(refined, mbb, tmp_path):
    for s in (refined.stats, mbb.stats, UQStats(np.eye(8), 2 * np.eye(8), 3, 40, 7, "DMG")):
        path = tmp_path / "s.dmuqst"
        save_stats(path, s)
        loaded = load_stats(path)
        assert path.read_bytes()[:7] == b"DMUQST1"
        assert (loaded.variant, loaded.block_length, loaded.n_bootstraps, loaded.n_residuals) == (
            s.variant,
            s.block_length,
            s.n_bootstraps,
            s.n_residuals,
        )
        assert loaded.sigma_a.tobytes() == np.asarray(s.sigma_a, dtype="<f8").tobytes()
        assert loaded.sigma_e.tobytes() == np.asarray(s.sigma_e, dtype="<f8").tobytes()


def test_stats_file_rejects_garbage(refined, tmp_path):
    path = tmp_path / "s.dmuqst"
    path.write_bytes(b"DMUQCP1 nope")
    with pytest.raises(FormatError):
        load_stats(path)
    path.write_bytes(stats_bytes(refined.stats)[:-1])
    with pytest.raises(FormatError):
        load_stats(path)


def test_empty_residual_log_round_trip(tmp_path):
    path = tmp_path / "r.txt"
    save_residual_log(path, ResidualSet())
    assert path.read_text() == "n k j i e1 e2\n"
    assert len(load_residual_log(path)) == 0
