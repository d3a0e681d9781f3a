import numpy as np
import pytest

from src.errors import CoverageError, DegenerateDataError, ShapeError, UsageError
from src.frontend import FeatureMatrix
from src.metrics import dcf, dcf_inv, pool_sad_stats
from src.sad import (
    FramePosteriors,
    MlpParams,
    SadPostConfig,
    TrainConfig,
    TuningGrid,
    cross_entropy,
    evaluate_postprocess,
    frame_accuracy,
    init_mlp,
    load_mlp,
    mlp_forward,
    mlp_gradients,
    mlp_train,
    postprocess,
    raw_config,
    save_mlp,
    tune_postprocess,
)
from tests.helpers import seg


def posteriors(values, rec="r1", frame_rate=100.0):
    return FramePosteriors(np.asarray(values, dtype=np.float64), frame_rate, rec)


def blobs(rng, n=200):
    """Two well separated 2-D clusters, labels 0 and 1"""
    rows = np.vstack([rng.normal(-2.0, 0.5, (n, 2)), rng.normal(2.0, 0.5, (n, 2))])
    labels = np.concatenate([np.zeros(n, dtype=bool), np.ones(n, dtype=bool)])
    return [(FeatureMatrix(rows, 100.0, "blobs"), labels)]


# ---- forward ----

def test_zero_network_gives_half():
    params = MlpParams(layers=((np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))))
    post = mlp_forward(params, FeatureMatrix(np.random.default_rng(0).normal(size=(7, 3)), 100.0))
    assert np.allclose(post.probs, 0.5)


def test_single_layer_softmax():
    weights = np.array([[0.5, -1.0], [2.0, 0.25]])
    bias = np.array([0.1, -0.3])
    params = MlpParams(layers=((weights, bias),))
    x = np.array([[1.0, 2.0]])
    logits = x[0] @ weights + bias
    expected = np.exp(logits[1]) / np.exp(logits).sum()
    assert mlp_forward(params, FeatureMatrix(x, 100.0)).probs[0] == pytest.approx(expected)


def test_two_by_256_output_length(rng):
    params = init_mlp(390, [256, 256], seed=3)
    post = mlp_forward(params, FeatureMatrix(rng.normal(size=(17, 390)), 100.0))
    assert len(post.probs) == 17
    assert params.hidden_sizes == [256, 256]


def test_feature_dim_mismatch():
    with pytest.raises(ShapeError):
        mlp_forward(init_mlp(4, [3]), FeatureMatrix(np.zeros((2, 5)), 100.0))


def test_bad_layer_chain():
    with pytest.raises(ShapeError):
        MlpParams(layers=((np.zeros((3, 4)), np.zeros(4)), (np.zeros((5, 2)), np.zeros(2))))


# ---- training ----

def test_gradients_match_finite_differences(rng):
    params = init_mlp(3, [5], seed=11)
    rows = rng.normal(size=(12, 3))
    labels = rng.integers(0, 2, 12)
    _, grads = mlp_gradients(params, rows, labels)

    eps = 1e-6
    analytic, numeric = [], []
    for layer_index, (weights, bias) in enumerate(params.layers):
        for tensor_index, tensor in enumerate((weights, bias)):
            for flat in range(tensor.size):
                perturbed = [(w.copy(), b.copy()) for w, b in params.layers]
                target = perturbed[layer_index][tensor_index].reshape(-1)
                target[flat] += eps
                up, _ = mlp_gradients(MlpParams(layers=tuple(perturbed)), rows, labels)
                target[flat] -= 2 * eps
                down, _ = mlp_gradients(MlpParams(layers=tuple(perturbed)), rows, labels)
                numeric.append((up - down) / (2 * eps))
                analytic.append(grads[layer_index][tensor_index].reshape(-1)[flat])
    analytic, numeric = np.array(analytic), np.array(numeric)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    assert rel <= 1e-4


def test_separable_data_learned(rng):
    dataset = blobs(rng)
    params = mlp_train(dataset, [8], TrainConfig(epochs=50, batch_size=32, learning_rate=0.05, seed=1))
    assert frame_accuracy(params, dataset) >= 0.99
    assert len(params.losses) == 51


def test_training_deterministic(rng):
    dataset = blobs(rng, n=50)
    hyper = TrainConfig(epochs=3, batch_size=16, seed=5)
    a = mlp_train(dataset, [4], hyper)
    b = mlp_train(dataset, [4], hyper)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        assert np.array_equal(wa, wb)
        assert np.array_equal(ba, bb)


def test_xor_loss_decreases(rng):
    corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    rows = np.repeat(corners, 50, axis=0) + rng.normal(0, 0.05, (200, 2))
    labels = np.repeat(np.array([0, 1, 1, 0], dtype=bool), 50)
    dataset = [(FeatureMatrix(rows, 100.0), labels)]
    params = mlp_train(dataset, [8], TrainConfig(epochs=30, batch_size=20, learning_rate=0.05, seed=2))
    assert params.losses[-1] < params.losses[0]
    assert cross_entropy(params, dataset) == pytest.approx(params.losses[-1])


def test_single_class_rejected():
    dataset = [(FeatureMatrix(np.zeros((10, 2)), 100.0), np.ones(10, dtype=bool))]
    with pytest.raises(DegenerateDataError):
        mlp_train(dataset, [4])


def test_label_count_mismatch():
    dataset = [(FeatureMatrix(np.zeros((10, 2)), 100.0), np.ones(9, dtype=bool))]
    with pytest.raises(ShapeError):
        mlp_train(dataset, [4])


def test_save_and_load(tmp_path, rng):
    params = mlp_train(blobs(rng, n=30), [4], TrainConfig(epochs=2, batch_size=8))
    loaded = load_mlp(save_mlp(tmp_path / "sad.sadm", params))
    feats = FeatureMatrix(rng.normal(size=(5, 2)), 100.0)
    assert np.allclose(mlp_forward(loaded, feats).probs, mlp_forward(params, feats).probs, atol=1e-5)


# ---- postprocessing ----

def test_postprocess_keeps_long_segment():
    post = posteriors([0.9] * 30 + [0.0] * 70)
    segments = postprocess(post, SadPostConfig(f_thd=0.02, s_min=25, s_thd=0.25, gap_merge=0))
    assert [(s.start, s.end) for s in segments] == [(0.0, pytest.approx(0.30))]
    assert segments[0].score == pytest.approx(0.9)


def test_postprocess_drops_short_burst():
    post = posteriors([0.0] * 20 + [0.9] * 10 + [0.0] * 20)
    assert postprocess(post, SadPostConfig(s_min=25)) == []


def test_postprocess_drops_low_scoring_segment():
    post = posteriors([0.05] * 40 + [0.0] * 10)
    assert postprocess(post, SadPostConfig(f_thd=0.02, s_min=25, s_thd=0.25)) == []


def test_postprocess_merges_gaps():
    post = posteriors([0.9] * 30 + [0.0] * 3 + [0.9] * 30 + [0.0] * 10)
    merged = postprocess(post, SadPostConfig(s_min=25, gap_merge=3))
    assert [(s.start, s.end) for s in merged] == [(0.0, pytest.approx(0.63))]
    split = postprocess(post, SadPostConfig(s_min=25, gap_merge=2))
    assert len(split) == 2


def walk_frames(probs, cfg):
    """Frame-by-frame reference implementation of the postprocessing rules"""
    runs, start = [], None
    for i, p in enumerate(list(probs) + [-1.0]):
        if p >= cfg.f_thd and start is None:
            start = i
        elif p < cfg.f_thd and start is not None:
            runs.append([start, i])
            start = None
    merged = []
    for run in runs:
        if merged and run[0] - merged[-1][1] <= cfg.gap_merge:
            merged[-1][1] = run[1]
        else:
            merged.append(run)
    return [(a, b) for a, b in merged if b - a >= cfg.s_min and np.mean(probs[a:b]) >= cfg.s_thd]


GRID_CONFIGS = TuningGrid(f_thd=[0.3, 0.6], s_min=[1, 5], s_thd=[0.0, 0.7], gap_merge=[0, 3]).configs()


# 100 seeds x 10 streams
@pytest.mark.parametrize("seed", range(100))
def test_postprocess_matches_frame_walk(seed):
    rng = np.random.default_rng(seed)
    for _ in range(10):
        probs = np.clip(np.repeat(rng.uniform(0, 1, 40), rng.integers(1, 8, 40)), 0, 1)
        for cfg in GRID_CONFIGS:
            got = [(int(round(s.start * 100)), int(round(s.end * 100))) for s in postprocess(posteriors(probs), cfg)]
            assert got == walk_frames(probs, cfg)


# ---- tuning ----

def perfect_stream():
    probs = np.zeros(100)
    probs[20:60] = 1.0
    return {"r1": posteriors(probs)}, {"r1": [seg(0, 0.2, "non-speech"), seg(0.2, 0.6), seg(0.6, 1.0, "non-speech")]}


def test_tune_perfect_detector_picks_smallest():
    posts, refs = perfect_stream()
    best, cost = tune_postprocess(posts, refs, 'dcf')
    assert cost == 0.0
    assert best == SadPostConfig(f_thd=0.02, s_min=1, s_thd=0.0, gap_merge=0)


def test_tune_singleton_grid():
    posts, refs = perfect_stream()
    grid = TuningGrid(f_thd=[0.5], s_min=[50], s_thd=[0.0], gap_merge=[0])
    best, cost = tune_postprocess(posts, refs, 'dcf', grid)
    assert best == SadPostConfig(f_thd=0.5, s_min=50, s_thd=0.0, gap_merge=0)
    # the only 40-frame segment is dropped: everything missed
    assert cost == pytest.approx(0.75)


def noisy_corpus(seed=0, n_recs=3):
    rng = np.random.default_rng(seed)
    posts, refs = {}, {}
    for r in range(n_recs):
        truth = np.zeros(300, dtype=bool)
        truth[50:120] = True
        truth[180:260] = True
        probs = np.clip(np.where(truth, 0.65, 0.3) + rng.normal(0, 0.2, 300), 0, 1)
        rec = f"r{r}"
        posts[rec] = posteriors(probs, rec)
        refs[rec] = [seg(0.5, 1.2), seg(1.8, 2.6)]
    return posts, refs


def test_dcf_inv_tuning_has_fewer_false_alarms():
    posts, refs = noisy_corpus()
    grid = TuningGrid(f_thd=[0.1, 0.3, 0.5, 0.7], s_min=[1, 10, 25], s_thd=[0.0, 0.4, 0.6], gap_merge=[0, 5])
    by_dcf, _ = tune_postprocess(posts, refs, 'dcf', grid)
    by_inv, _ = tune_postprocess(posts, refs, 'dcf_inv', grid)
    fp_dcf = pool_sad_stats(evaluate_postprocess(posts, refs, by_dcf)).p_fp
    fp_inv = pool_sad_stats(evaluate_postprocess(posts, refs, by_inv)).p_fp
    assert fp_inv <= fp_dcf


def test_tuned_config_beats_every_grid_point():
    posts, refs = noisy_corpus(seed=1)
    grid = TuningGrid(f_thd=[0.2, 0.5], s_min=[1, 20], s_thd=[0.0, 0.5], gap_merge=[0])
    best, cost = tune_postprocess(posts, refs, 'dcf_inv', grid)
    for cfg in grid.configs():
        assert cost <= dcf_inv(pool_sad_stats(evaluate_postprocess(posts, refs, cfg))) + 1e-12


def test_parallel_tuning_matches_serial():
    posts, refs = noisy_corpus(seed=2)
    grid = TuningGrid(f_thd=[0.2, 0.5], s_min=[1, 20], s_thd=[0.0, 0.5], gap_merge=[0, 2])
    assert tune_postprocess(posts, refs, 'dcf', grid, workers=4) == tune_postprocess(posts, refs, 'dcf', grid)


def test_mean_pooling_differs_from_pooled_inputs():
    posts, refs = noisy_corpus(seed=3)
    cfg = raw_config(0.5)
    pooled = pool_sad_stats(evaluate_postprocess(posts, refs, cfg), 'pooled')
    mean = pool_sad_stats(evaluate_postprocess(posts, refs, cfg), 'mean')
    # every file has the same duration and reference, so both poolings agree
    assert pooled.p_fn == pytest.approx(mean.p_fn)
    assert dcf(pooled) == pytest.approx(dcf(mean))


def test_tune_errors():
    posts, refs = perfect_stream()
    with pytest.raises(UsageError):
        tune_postprocess(posts, refs, 'accuracy')
    with pytest.raises(CoverageError):
        tune_postprocess(posts, {}, 'dcf')


def test_grid_from_csv():
    grid = TuningGrid(f_thd="0.5,0.1", s_min="10", s_thd="0", gap_merge="0,1")
    assert grid.f_thd == [0.5, 0.1]
    assert [c.f_thd for c in grid.configs()][:2] == [0.1, 0.1]
    with pytest.raises(ValueError):
        TuningGrid(f_thd=[])
