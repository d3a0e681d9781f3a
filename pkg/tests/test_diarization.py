import itertools

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import multivariate_normal

from src.diarization import (
    AhcConfig,
    AhcTuningGrid,
    Clustering,
    PldaModel,
    VbConfig,
    ahc_cluster,
    cluster_recording,
    dense_relabel,
    diarize_recording,
    labels_to_segments,
    plda_em,
    plda_score_matrix,
    plda_score_pair,
    recording_pca_project,
    speaker_counts,
    tune_diarization,
    variant_configs,
    vb_resegment,
    vbx,
)
from src.embeddings import Chunk
from src.errors import (CoverageError, DegenerateDataError, InvalidInitError, RankError, ShapeError,
                        UsageError)
from src.metrics import der
from tests.helpers import seg


def random_model(rng, dim):
    a = rng.normal(size=(dim, dim))
    c = rng.normal(size=(dim, dim))
    return PldaModel(mu=rng.normal(size=dim), between=a @ a.T + 0.5 * np.eye(dim), within=c @ c.T + np.eye(dim))


# ---- PLDA scoring ----

def test_one_dimensional_llr():
    model = PldaModel(np.zeros(1), np.eye(1), np.eye(1))
    assert plda_score_pair(model, np.zeros(1), np.zeros(1)) == pytest.approx(0.5 * np.log(4 / 3), abs=1e-12)


def test_llr_matches_gaussian_oracle(rng):
    model = random_model(rng, 3)
    total = model.between + model.within
    joint = np.block([[total, model.between], [model.between, total]])
    for _ in range(5):
        x1, x2 = rng.normal(size=3) * 2, rng.normal(size=3) * 2
        expected = (multivariate_normal.logpdf(np.concatenate([x1, x2]), np.tile(model.mu, 2), joint)
                    - multivariate_normal.logpdf(x1, model.mu, total)
                    - multivariate_normal.logpdf(x2, model.mu, total))
        assert plda_score_pair(model, x1, x2) == pytest.approx(expected, abs=1e-9)


def test_llr_symmetry(rng):
    model = random_model(rng, 4)
    x1, x2 = rng.normal(size=4), rng.normal(size=4)
    assert abs(plda_score_pair(model, x1, x2) - plda_score_pair(model, x2, x1)) <= 1e-10
    scores = plda_score_matrix(model, rng.normal(size=(6, 4)))
    assert np.array_equal(scores, scores.T)


def test_same_direction_scores_higher():
    model = PldaModel(np.zeros(2), np.eye(2) * 4, np.eye(2))
    x = np.array([3.0, -2.0])
    assert plda_score_pair(model, x, x) > plda_score_pair(model, x, -x)


def test_score_dimension_mismatch():
    model = PldaModel(np.zeros(2), np.eye(2), np.eye(2))
    with pytest.raises(ShapeError):
        plda_score_matrix(model, np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        plda_score_pair(model, np.zeros(2), np.zeros(3))


# ---- PLDA training ----

def two_covariance_data(rng, between, within, speakers, per_speaker):
    dim = len(between)
    y = rng.multivariate_normal(np.zeros(dim), between, size=speakers)
    e = rng.multivariate_normal(np.zeros(dim), within, size=(speakers, per_speaker))
    vectors = (np.linspace(1.0, -1.0, dim) + y[:, None, :] + e).reshape(-1, dim)
    labels = [f"spk{i}" for i in range(speakers) for _ in range(per_speaker)]
    return vectors, labels


def test_plda_em_recovers_parameters():
    between = np.array([[4.0, 1.0], [1.0, 2.0]])
    within = np.array([[1.0, 0.3], [0.3, 0.5]])
    vectors, labels = two_covariance_data(np.random.default_rng(0), between, within, 1000, 10)
    model, trace = plda_em(vectors, labels)
    assert np.linalg.norm(model.between - between) / np.linalg.norm(between) < 0.1
    assert np.linalg.norm(model.within - within) / np.linalg.norm(within) < 0.1
    assert np.allclose(model.mu, vectors.mean(axis=0))
    assert np.all(np.diff(trace) >= -1e-9)


def test_plda_em_trace_is_monotone(rng):
    between = np.diag([2.0, 1.0, 0.5])
    within = np.eye(3) * 0.7
    vectors, labels = two_covariance_data(rng, between, within, 30, 4)
    _, trace = plda_em(vectors, labels, max_iters=20, tol=0.0)
    assert len(trace) > 1
    assert np.all(np.diff(trace) >= -1e-9)


def test_plda_needs_two_speakers(rng):
    with pytest.raises(DegenerateDataError):
        plda_em(rng.normal(size=(5, 2)), ["a"] * 5)
    with pytest.raises(DegenerateDataError):
        plda_em(rng.normal(size=(4, 2)), ["a", "a", "b", "c"])


def test_plda_save_load(tmp_path, rng):
    model = random_model(rng, 3)
    loaded = PldaModel.load(model.save(tmp_path / "m.plda"))
    assert np.array_equal(loaded.between, model.between)
    assert loaded.dim == 3


# ---- PCA ----

def test_full_rank_projection_keeps_scores(rng):
    model = random_model(rng, 3)
    vectors = rng.normal(size=(8, 3))
    projected, local = recording_pca_project(model, vectors, 3)
    assert np.allclose(plda_score_matrix(local, projected), plda_score_matrix(model, vectors), atol=1e-8)


def test_identical_vectors_are_rank_error():
    model = PldaModel(np.zeros(2), np.eye(2), np.eye(2))
    with pytest.raises(RankError):
        recording_pca_project(model, np.ones((5, 2)), 1)


def test_too_many_components(rng):
    model = PldaModel(np.zeros(3), np.eye(3), np.eye(3))
    with pytest.raises(RankError):
        recording_pca_project(model, rng.normal(size=(3, 3)), 3)


def test_line_data_keeps_total_variance(rng):
    t = rng.normal(size=20)
    vectors = np.outer(t, [1.0, 2.0]) / np.sqrt(5) + np.array([0.5, -1.0])
    projected, local = recording_pca_project(PldaModel(np.zeros(2), np.eye(2), np.eye(2)), vectors, 1)
    assert projected.shape == (20, 1)
    assert local.dim == 1
    assert projected.var() == pytest.approx(vectors.var(axis=0).sum())


# ---- AHC ----

@pytest.mark.parametrize("score, expected", [(5.0, 1), (-5.0, 2)])
def test_two_chunks(score, expected):
    scores = np.array([[0.0, score], [score, 0.0]])
    assert ahc_cluster(scores, AhcConfig(stop_threshold=0.0)).num_speakers == expected


def test_block_scores():
    scores = np.full((4, 4), -10.0)
    scores[:2, :2] = scores[2:, 2:] = 10.0
    clustering = ahc_cluster(scores, AhcConfig(stop_threshold=0.0), "rec")
    assert clustering.labels.tolist() == [0, 0, 1, 1]
    assert clustering.recording_id == "rec"


def test_empty_scores():
    clustering = ahc_cluster(np.zeros((0, 0)))
    assert clustering.num_speakers == 0


def test_asymmetric_scores_rejected():
    with pytest.raises(ShapeError):
        ahc_cluster(np.array([[0.0, 1.0], [2.0, 0.0]]))


def greedy_average_linkage(scores, threshold):
    """Every merge step recomputed from scratch with exact cluster averages"""
    clusters = [[i] for i in range(len(scores))]
    while len(clusters) > 1:
        best, pair = -np.inf, None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            value = np.mean([scores[i, j] for i in clusters[a] for j in clusters[b]])
            if value > best:
                best, pair = value, (a, b)
        if best < threshold:
            break
        a, b = pair
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    labels = np.zeros(len(scores), dtype=int)
    for label, members in enumerate(sorted(clusters, key=min)):
        labels[members] = label
    return labels


@pytest.mark.parametrize("seed", range(200))
def test_ahc_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 1 + seed % 8
    points = rng.normal(size=(n, 2)) * 2
    scores = 1.0 - np.linalg.norm(points[:, None] - points[None], axis=-1)
    clustering = ahc_cluster(scores, AhcConfig(stop_threshold=-1.0))
    assert clustering.labels.tolist() == greedy_average_linkage(scores, -1.0).tolist()


def test_clustering_labels_must_be_dense():
    with pytest.raises(ShapeError):
        Clustering(np.array([0, 2]), 2)
    assert dense_relabel([3, 3, 1, 3, 0]).tolist() == [0, 0, 1, 0, 2]


# ---- VB ----

def test_elbo_is_non_decreasing():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        vectors = rng.normal(size=(30, 3)) * 2
        gamma = rng.dirichlet(np.ones(3), size=30)
        phi = rng.uniform(0.5, 5.0, size=3)
        _, _, elbo = vbx(vectors, gamma, phi, VbConfig(max_iters=20, convergence_tol=0.0))
        assert np.all(np.diff(elbo) >= -1e-8)


def two_speaker_run(rng, per_speaker=10):
    model = PldaModel(np.zeros(2), np.eye(2) * 16, np.eye(2))
    centres = np.array([[4.0, 0.0]] * per_speaker + [[-4.0, 0.0]] * per_speaker)
    return model, centres + rng.normal(size=centres.shape)


def test_vb_merges_spurious_clusters():
    init = Clustering(np.array([0] * 8 + [1] * 2 + [2] * 8 + [3] * 2), 4, "rec")
    truth = np.array([0] * 10 + [1] * 10)
    merged = 0
    for seed in range(50):
        model, vectors = two_speaker_run(np.random.default_rng(seed))
        result = vb_resegment(vectors, init, model, VbConfig(max_iters=40, convergence_tol=1e-6))
        merged += result.num_speakers == 2 and np.mean(result.labels == truth) >= 0.95
    assert merged >= 45


def test_acoustic_scale_follows_dimension():
    cfg = VbConfig(acoustic_scale=0.3, reference_dim=128)
    assert cfg.acoustic_scale_for(128) == pytest.approx(0.3)
    assert cfg.acoustic_scale_for(256) == pytest.approx(0.15)
    assert cfg.acoustic_scale_for(4) == 1.0
    assert VbConfig(acoustic_scale=0.3, reference_dim=0).acoustic_scale_for(4) == 0.3


def turn_chunks(speaker_order, chunks_per_turn):
    """One-second chunks over back-to-back turns, with the per-chunk speaker index"""
    labels = np.repeat(speaker_order, chunks_per_turn)
    chunks = [Chunk("rec", float(i), float(i + 1)) for i in range(len(labels))]
    ref = [seg(i * chunks_per_turn, (i + 1) * chunks_per_turn, f"S{s}") for i, s in enumerate(speaker_order)]
    return chunks, labels, ref


@pytest.mark.parametrize("seed", range(10))
def test_vb_from_reference_labels_keeps_speakers(seed):
    # between-speaker variance of the order seen after per-recording PCA
    model = PldaModel(np.zeros(4), np.eye(4) * 2, np.eye(4))
    angles = np.array([0.0, 2.0, 4.0]) * np.pi / 3
    means = np.zeros((3, 4))
    means[:, 0], means[:, 1] = 2.6 * np.cos(angles), 2.6 * np.sin(angles)
    chunks, truth, ref = turn_chunks([0, 1, 2] * 6, 3)
    vectors = means[truth] + np.random.default_rng(seed).normal(size=(len(truth), 4))

    result = vb_resegment(vectors, Clustering(truth, 3, "rec"), model, VbConfig())
    assert result.num_speakers == 3
    assert np.mean(result.labels == truth) >= 0.95
    assert der(ref, labels_to_segments(chunks, result.labels)).der <= 0.05


def test_single_speaker_is_fixed_point(rng):
    model, _ = two_speaker_run(rng)
    vectors = np.array([4.0, 0.0]) + rng.normal(size=(12, 2))
    result = vb_resegment(vectors, Clustering(np.zeros(12, dtype=int), 1), model)
    assert result.num_speakers == 1
    assert not result.labels.any()


def test_vb_needs_speakers():
    model = PldaModel(np.zeros(2), np.eye(2), np.eye(2))
    with pytest.raises(InvalidInitError):
        vb_resegment(np.zeros((0, 2)), Clustering(np.zeros(0, dtype=int), 0), model)
    with pytest.raises(ShapeError):
        vb_resegment(np.zeros((3, 2)), Clustering(np.zeros(2, dtype=int), 1), model)


def test_config_validation():
    with pytest.raises(ValidationError):
        VbConfig(loop_prob=1.0)
    with pytest.raises(ValidationError):
        VbConfig(min_occupancy=1.0)
    with pytest.raises(ValidationError):
        AhcConfig(pca_components=0)


# ---- recording pipeline ----

def test_one_chunk_is_one_speaker():
    segments = diarize_recording([Chunk("rec", 1.0, 3.0)], np.ones((1, 4)), None)
    assert segments == [seg(1.0, 3.0, "spk00")]


def test_no_chunks():
    assert diarize_recording([], np.zeros((0, 4)), None) == []


def test_chunks_from_two_recordings():
    with pytest.raises(UsageError):
        diarize_recording([Chunk("a", 0, 1), Chunk("b", 0, 1)], np.zeros((2, 2)), None)


def test_overlapping_votes_and_merging():
    chunks = [Chunk("rec", 0.0, 2.0), Chunk("rec", 1.0, 3.0), Chunk("rec", 2.0, 4.0), Chunk("rec", 5.0, 6.0)]
    segments = labels_to_segments(chunks, [0, 1, 1, 1])
    assert segments == [seg(0.0, 2.0, "spk00"), seg(2.0, 4.0, "spk01"), seg(5.0, 6.0, "spk01")]
    for a, b in zip(segments, segments[1:]):
        assert a.end <= b.start


def test_merged_chunk_sources_map_back():
    chunks = [Chunk("rec", 0.0, 5.0, sources=((0.0, 1.0), (4.0, 5.0)))]
    assert labels_to_segments(chunks, [0]) == [seg(0.0, 1.0, "spk00"), seg(4.0, 5.0, "spk00")]


def under_clustering_fixture(seed=0, per_speaker=6):
    """Speaker identity in the first dimension, low-variance noise where the model expects almost none"""
    rng = np.random.default_rng(seed)
    means = np.array([[4.0, 0, 0, 0]] * per_speaker + [[-4.0, 0, 0, 0]] * per_speaker)
    vectors = means + rng.normal(size=means.shape) * np.array([0.5, 1.2, 0.4, 0.4])
    model = PldaModel(np.zeros(4), np.eye(4) * 4, np.diag([1.0, 1.0, 0.01, 0.01]))
    return vectors, model


def test_more_components_never_fewer_clusters():
    vectors, model = under_clustering_fixture()
    counts = [cluster_recording(vectors, model, AhcConfig(stop_threshold=0.0, pca_components=k)).num_speakers
              for k in (1, 2, 4)]
    assert counts[1] == 2
    assert counts == sorted(counts)
    assert counts[2] > 2


def test_vb_after_under_clustering_does_not_add_speakers():
    vectors, model = under_clustering_fixture()
    ahc_cfg, vb_cfg = variant_configs('ahc_uc_vb', AhcConfig(pca_components=1), VbConfig(), extra=3)
    assert ahc_cfg.pca_components == 4
    ahc_only = cluster_recording(vectors, model, ahc_cfg)
    with_vb = cluster_recording(vectors, model, ahc_cfg, vb_cfg)
    assert with_vb.num_speakers <= ahc_only.num_speakers


def test_vb_never_adds_speakers_to_ahc():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        model = random_model(rng, 4)
        vectors, _ = two_covariance_data(rng, model.between, model.within, 3, 8)
        base = AhcConfig(stop_threshold=float(rng.uniform(-3.0, 3.0)), pca_components=1)
        ahc_cfg, vb_cfg = variant_configs('ahc_uc_vb', base, VbConfig(), extra=3)
        ahc_only = cluster_recording(vectors, model, ahc_cfg)
        assert cluster_recording(vectors, model, ahc_cfg, vb_cfg).num_speakers <= ahc_only.num_speakers


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("with_vb", [False, True])
def test_two_speaker_alternation(seed, with_vb):
    model = PldaModel(np.zeros(4), np.eye(4) * 4, np.eye(4))
    means = np.array([[3.0, 0, 0, 0], [-3.0, 0, 0, 0]])
    chunks, truth, ref = turn_chunks([0, 1] * 5, 4)
    vectors = means[truth] + np.random.default_rng(seed).normal(size=(len(truth), 4))
    hyp = diarize_recording(chunks, vectors, model, AhcConfig(), VbConfig() if with_vb else None)
    assert der(ref, hyp).der <= 0.15


def test_degenerate_recording_is_one_speaker():
    model = PldaModel(np.zeros(2), np.eye(2), np.eye(2))
    clustering = cluster_recording(np.ones((4, 2)), model, AhcConfig(pca_components=1))
    assert clustering.num_speakers == 1


def test_plda_scoring_needs_model():
    with pytest.raises(UsageError):
        cluster_recording(np.eye(3), None, AhcConfig())


def test_variants():
    ahc_cfg, vb_cfg = AhcConfig(), VbConfig()
    assert variant_configs('ahc', ahc_cfg, vb_cfg) == (ahc_cfg, None)
    assert variant_configs('ahc_vb', ahc_cfg, vb_cfg)[1] is vb_cfg
    assert variant_configs('ahc_uc_vb', ahc_cfg, vb_cfg)[0].pca_components == ahc_cfg.pca_components + 4
    with pytest.raises(UsageError):
        variant_configs('kmeans', ahc_cfg, vb_cfg)


# ---- tuning ----

def cosine_inputs(rng):
    chunks = [Chunk("r1", float(t), float(t + 1)) for t in range(6)]
    centres = np.array([[1.0, 0, 0]] * 3 + [[0, 1.0, 0]] * 3)
    return {"r1": (chunks, centres + rng.normal(size=centres.shape) * 0.02)}


def test_tuning_grid_from_csv():
    grid = AhcTuningGrid(stop_threshold="0.5,-1", pca_components="4,2")
    points = [(c.stop_threshold, c.pca_components) for c in grid.configs()]
    assert points == [(-1.0, 2), (-1.0, 4), (0.5, 2), (0.5, 4)]
    with pytest.raises(ValidationError):
        AhcTuningGrid(stop_threshold="")


def test_tune_picks_lowest_der(rng):
    refs = {"r1": [seg(0, 3, "A"), seg(3, 6, "B")]}
    grid = AhcTuningGrid(stop_threshold=[1.5, 0.5], pca_components=[1])
    best, value = tune_diarization(cosine_inputs(rng), refs, None, grid, AhcConfig(scoring='cosine'))
    assert best.stop_threshold == 0.5
    assert best.scoring == 'cosine'
    assert value == 0.0


def test_tune_parallel_matches_serial(rng):
    inputs = cosine_inputs(rng)
    refs = {"r1": [seg(0, 3, "A"), seg(3, 6, "B")]}
    grid = AhcTuningGrid(stop_threshold=[1.5, 0.5, 0.9], pca_components=[1])
    base = AhcConfig(scoring='cosine')
    assert tune_diarization(inputs, refs, None, grid, base) == tune_diarization(inputs, refs, None, grid, base,
                                                                                 workers=3)


def test_tune_needs_references(rng):
    with pytest.raises(CoverageError):
        tune_diarization(cosine_inputs(rng), {}, None)


def test_speaker_counts():
    hyps = {"b": [seg(0, 1, "spk00")], "a": [seg(0, 1, "spk00"), seg(1, 2, "spk01"), seg(2, 3, "spk00")]}
    assert speaker_counts(hyps) == {"a": 2, "b": 1}
