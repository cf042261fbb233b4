import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from sfploc.evaluation import pose_error
from sfploc.extraction import Keypoint
from sfploc.localization import (
    LocalizerConfig,
    Match,
    MatchSet,
    covisible_landmarks,
    gated_match,
    global_descriptor,
    localize,
    match_level,
    read_report,
    record_to_pose,
    result_to_record,
    retrieve,
    write_report,
)
from sfploc.mapping import Landmark, LandmarkMap, MapConfig, MapFrame, build_map, shorten_descriptors
from sfploc.pyramid import DensePyramid, FeatureGrid, LevelSpec, default_level_specs
from sfploc.synthetic import frame_observations


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def kp(descriptor, pixel=(10.0, 10.0), level=3):
    return Keypoint(level=level, pixel=pixel, score=0.9, descriptor=unit(descriptor))


def landmark(i, descriptor, position=(0.0, 0.0, 0.0), level=3):
    return Landmark(
        landmark_id=i,
        position=np.asarray(position, dtype=np.float32),
        slices={level: unit(descriptor).astype(np.float32)},
    )


# -- retrieval -------------------------------------------------------------


def axis_map(n_frames=3, gdim=3):
    frames = tuple(
        MapFrame(frame_id=i, global_descriptor=np.eye(gdim, dtype=np.float32)[i % gdim], landmark_ids=(0,))
        for i in range(n_frames)
    )
    lm = landmark(0, np.ones(8))
    return LandmarkMap(level_specs=(LevelSpec(3, 8, 8),), landmarks=(lm,), frames=frames)


def test_global_descriptor_is_pooled_deepest_level():
    rng = np.random.default_rng(0)
    grids = []
    for spec in default_level_specs((4, 6, 8)):
        shape = spec.grid_shape((16, 16))
        grids.append(FeatureGrid(spec, rng.normal(size=(*shape, spec.dim)), np.zeros(shape)))
    pyr = DensePyramid(levels=tuple(grids), image_shape=(16, 16))
    g = global_descriptor(pyr)
    assert g.shape == (8,)
    np.testing.assert_allclose(g, unit(grids[-1].values.mean(axis=(0, 1))), atol=1e-12)
    assert np.linalg.norm(g) == pytest.approx(1.0, abs=1e-12)


def test_global_descriptor_zero_features_give_zero_vector():
    grids = []
    for spec in default_level_specs((4, 6, 8)):
        shape = spec.grid_shape((16, 16))
        grids.append(FeatureGrid(spec, np.zeros((*shape, spec.dim)), np.zeros(shape)))
    g = global_descriptor(DensePyramid(levels=tuple(grids), image_shape=(16, 16)))
    np.testing.assert_array_equal(g, np.zeros(8))


def test_retrieve_ranks_by_cosine():
    m = axis_map()
    order = retrieve(unit([1.0, 0.2, 0.1]), m, k=3)
    assert order[0] == 0
    assert retrieve(unit([0.0, 1.0, 0.1]), m, k=1) == [1]


def test_retrieve_breaks_ties_by_frame_id():
    m = axis_map(n_frames=6)  # descriptors repeat every 3 frames
    order = retrieve(unit([1.0, 0.0, 0.0]), m, k=4)
    assert order[:2] == [0, 3]  # identical similarity, lower id first


def test_retrieve_clips_k_and_validates():
    m = axis_map()
    assert len(retrieve(unit([1, 1, 1]), m, k=50)) == 3
    with pytest.raises(ValueError):
        retrieve(unit([1, 1, 1]), m, k=0)
    with pytest.raises(ValueError):
        retrieve(unit([1, 1]), m, k=1)  # dimension mismatch
    empty = LandmarkMap(
        level_specs=(LevelSpec(3, 8, 8),), landmarks=(landmark(0, np.ones(8)),), frames=()
    )
    with pytest.raises(ValueError):
        retrieve(unit([1, 1, 1]), empty, k=1)


def test_covisible_landmarks_union():
    lms = tuple(landmark(i, np.eye(8)[i]) for i in range(4))
    frames = (
        MapFrame(0, np.ones(2, dtype=np.float32), (0, 1)),
        MapFrame(1, np.ones(2, dtype=np.float32), (1, 2)),
        MapFrame(2, np.ones(2, dtype=np.float32), (3,)),
    )
    m = LandmarkMap(level_specs=(LevelSpec(3, 8, 8),), landmarks=lms, frames=frames)
    got = covisible_landmarks(m, [0, 1])
    assert [lm.landmark_id for lm in got] == [0, 1, 2]
    assert covisible_landmarks(m, [99]) == []


# -- matching --------------------------------------------------------------


def test_match_level_hand_oracle():
    e = np.eye(8)
    queries = [kp(0.9 * e[0] + 0.1 * e[1]), kp(0.1 * e[0] + 0.9 * e[1])]
    lms = [landmark(0, e[0]), landmark(1, e[1])]
    got = match_level(queries, lms, level=3, floor=0.5)
    assert {(m.query_index, m.landmark_id) for m in got.matches} == {(0, 0), (1, 1)}
    assert all(m.similarity > 0.5 for m in got.matches)
    assert got.gating_radius_px == math.inf

    nothing = match_level(queries, lms, level=3, floor=0.999)
    assert len(nothing) == 0


def test_match_level_requires_mutual_agreement():
    e = np.eye(8)
    # both queries prefer landmark 0; only the closer one gets it, and
    # landmark 1 is nobody's first choice
    queries = [kp(unit(0.9 * e[0] + 0.1 * e[2])), kp(unit(0.8 * e[0] + 0.2 * e[2]))]
    lms = [landmark(0, e[0]), landmark(1, e[1])]
    got = match_level(queries, lms, level=3, floor=0.0)
    assert {(m.query_index, m.landmark_id) for m in got.matches} == {(0, 0)}


def test_match_level_empty_inputs():
    assert len(match_level([], [landmark(0, np.ones(8))], level=3)) == 0
    assert len(match_level([kp(np.ones(8))], [], level=3)) == 0


def test_match_level_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        match_level([kp(np.ones(4))], [landmark(0, np.ones(8))], level=3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_match_level_is_one_to_one_mutual_best(seed):
    rng = np.random.default_rng(seed)
    queries = [kp(rng.normal(size=8)) for _ in range(6)]
    lms = [landmark(i, rng.normal(size=8)) for i in range(5)]
    got = match_level(queries, lms, level=3, floor=-1.0)
    q = np.stack([k.descriptor for k in queries])
    l = np.stack([lm.slices[3].astype(np.float64) for lm in lms])
    sim = q @ l.T
    seen_q, seen_l = set(), set()
    for m in got.matches:
        assert m.query_index not in seen_q and m.landmark_id not in seen_l
        seen_q.add(m.query_index)
        seen_l.add(m.landmark_id)
        # mutual best against the raw similarity table
        assert sim[m.query_index].argmax() == m.landmark_id
        assert sim[:, m.landmark_id].argmax() == m.query_index


def gating_setup(intr):
    """Landmarks on a grid in front of an identity camera, matching queries."""
    pose = random_pose(40)
    rng = np.random.default_rng(40)
    world = np.column_stack([rng.uniform(-1, 1, 12), rng.uniform(-1, 1, 12), rng.uniform(-0.3, 0.3, 12)])
    from sfploc.geometry import project_points

    px, z = project_points(world, pose, intr)
    keep = (z > 0) & intr.contains(px)
    world, px = world[keep], px[keep]
    descs = [rng.normal(size=8) for _ in range(len(world))]
    queries = [kp(d, pixel=(float(u), float(v))) for d, (u, v) in zip(descs, px)]
    lms = [landmark(i, d, position=w) for i, (d, w) in enumerate(zip(descs, world))]
    return pose, queries, lms


def test_gated_match_with_infinite_radius_equals_ungated(intr):
    pose, queries, lms = gating_setup(intr)
    gated = gated_match(queries, lms, pose, intr, radius_px=math.inf, level=3, floor=0.0)
    ungated = match_level(queries, lms, level=3, floor=0.0)
    assert {(m.query_index, m.landmark_id) for m in gated.matches} == {
        (m.query_index, m.landmark_id) for m in ungated.matches
    }


def test_gated_match_results_satisfy_the_gate(intr):
    from sfploc.geometry import project_points

    pose, queries, lms = gating_setup(intr)
    radius = 25.0
    got = gated_match(queries, lms, pose, intr, radius_px=radius, level=3, floor=0.0)
    assert len(got) > 0
    by_id = {lm.landmark_id: lm for lm in lms}
    for m in got.matches:
        proj, z = project_points(by_id[m.landmark_id].position.astype(np.float64), pose, intr)
        assert z[0] > 0
        assert np.linalg.norm(proj[0] - np.asarray(queries[m.query_index].pixel)) <= radius


def test_gated_match_candidate_sets_grow_with_radius(intr):
    """A wider gate can only add candidate pairs, never remove them."""
    from sfploc.geometry import project_points

    pose, queries, lms = gating_setup(intr)
    px = np.stack([k.pixel for k in queries])
    proj, z = project_points(np.stack([lm.position.astype(np.float64) for lm in lms]), pose, intr)
    dist = np.linalg.norm(px[:, None, :] - proj[None, :, :], axis=2)
    for small, large in [(5.0, 20.0), (20.0, 100.0)]:
        allowed_small = (dist <= small) & (z[None, :] > 0)
        allowed_large = (dist <= large) & (z[None, :] > 0)
        assert np.all(allowed_large >= allowed_small)


def test_gated_match_excludes_landmarks_behind_the_prior(intr):
    pose = random_pose(41)
    # one landmark in front, an identical-descriptor twin behind the camera
    d = unit(np.arange(1.0, 9.0))
    front_world = pose.rotation.T @ (np.array([0.0, 0.0, 3.0]) - pose.translation)
    behind_world = pose.rotation.T @ (np.array([0.0, 0.0, -3.0]) - pose.translation)
    from sfploc.geometry import project_points

    px, _ = project_points(front_world, pose, intr)
    queries = [kp(d, pixel=(float(px[0, 0]), float(px[0, 1])))]
    lms = [landmark(0, d, position=behind_world)]
    got = gated_match(queries, lms, pose, intr, radius_px=1e6, level=3, floor=0.0)
    assert len(got) == 0


def test_gated_match_rejects_nonpositive_radius(intr):
    with pytest.raises(ValueError):
        gated_match([], [], random_pose(0), intr, radius_px=0.0, level=3)


def test_match_set_validation():
    with pytest.raises(ValueError):
        MatchSet(level=3, matches=(Match(0, 0, 0.9), Match(0, 1, 0.8)), gating_radius_px=math.inf)
    with pytest.raises(ValueError):
        MatchSet(level=3, matches=(Match(0, 0, 0.9), Match(1, 0, 0.8)), gating_radius_px=math.inf)
    with pytest.raises(ValueError):
        MatchSet(level=3, matches=(Match(0, 0, 1.5),), gating_radius_px=math.inf)


def test_localizer_config_validation():
    with pytest.raises(ValueError):
        LocalizerConfig(top_k=0)
    with pytest.raises(ValueError):
        LocalizerConfig(gating_radius_px=(4.0, 8.0))  # growing toward fine levels
    with pytest.raises(ValueError):
        LocalizerConfig(min_inliers=2)
    cfg = LocalizerConfig(gating_radius_px=(math.inf, 8.0, 4.0))
    assert cfg.radius_for(0) == math.inf
    assert cfg.radius_for(2) == 4.0
    assert cfg.radius_for(9) == 4.0  # deeper ranks reuse the finest radius


# -- end-to-end ------------------------------------------------------------


@pytest.fixture(scope="module")
def clean_map(clean_scene):
    frames = frame_observations(clean_scene, list(range(8)))
    return build_map(frames, list(clean_scene.level_specs), MapConfig(merge_radius=0.01))


def query_inputs(scene, frame_id, mode="full"):
    (obs,) = frame_observations(scene, [frame_id], mode=mode)
    return obs.keypoints, obs.global_descriptor.astype(np.float64)


def test_localize_noiseless_queries_exactly(clean_scene, clean_map, intr):
    for qid in (8, 9, 10, 11):
        kps, g = query_inputs(clean_scene, qid)
        res = localize(qid, kps, g, clean_map, intr)
        assert res.success
        assert [t.level for t in res.trace] == [3, 2, 1]
        assert all(t.inliers >= 6 for t in res.trace)
        gt = next(f.pose for f in clean_scene.frames if f.frame_id == qid)
        err = pose_error(res.final_pose, gt)
        assert err.translation_m < 1e-6
        assert err.rotation_deg < 1e-6


def test_localize_noisy_trace_fine_beats_coarse(noisy_scene, intr):
    frames = frame_observations(noisy_scene, list(range(8)))
    m = build_map(frames, list(noisy_scene.level_specs), MapConfig(merge_radius=0.05))
    for qid in (8, 9, 10, 11):
        kps, g = query_inputs(noisy_scene, qid)
        res = localize(qid, kps, g, m, intr)
        assert res.success
        gt = next(f.pose for f in noisy_scene.frames if f.frame_id == qid)
        errs = [pose_error(t.pose, gt).translation_m for t in res.trace]
        assert len(errs) == 3
        assert errs[-1] <= errs[0], f"query {qid}: fine {errs[-1]} vs coarse {errs[0]}"


def test_localize_flags_out_of_volume_query(clean_scene, clean_map, intr):
    # a camera far outside the mapped volume, looking away: nothing to match
    from sfploc.geometry import Pose

    rng = np.random.default_rng(3)
    far = Pose(np.eye(3), np.array([0.0, 0.0, 50.0]))
    levels = {s.level_index: s for s in clean_scene.level_specs}
    kps = {
        lvl: [
            kp(rng.normal(size=spec.dim), pixel=(float(rng.uniform(0, 640)), float(rng.uniform(0, 480))), level=lvl)
            for _ in range(30)
        ]
        for lvl, spec in levels.items()
    }
    g = unit(rng.normal(size=clean_map.global_dim))
    res = localize(99, kps, g, clean_map, intr)
    assert not res.success
    assert res.final_pose is None or res.trace[-1].inliers < 6


def test_localize_short_mode_round_trip(clean_scene, clean_map, intr):
    short_map = shorten_descriptors(clean_map)
    cfg = LocalizerConfig(descriptor_mode="short")
    kps, g = query_inputs(clean_scene, 9, mode="short")
    res = localize(9, kps, g, short_map, intr, cfg)
    assert res.success
    gt = next(f.pose for f in clean_scene.frames if f.frame_id == 9)
    assert pose_error(res.final_pose, gt).translation_m < 1e-3


def test_localize_mode_mismatch_raises(clean_scene, clean_map, intr):
    kps, g = query_inputs(clean_scene, 8)
    with pytest.raises(ValueError):
        localize(8, kps, g, clean_map, intr, LocalizerConfig(descriptor_mode="short"))


def test_localize_never_raises_on_empty_inputs(clean_map, intr):
    res = localize(1, {}, np.ones(clean_map.global_dim), clean_map, intr)
    assert not res.success and res.trace == ()


# -- reports ---------------------------------------------------------------


def test_report_round_trip(tmp_path, clean_scene, clean_map, intr):
    kps, g = query_inputs(clean_scene, 8)
    ok = localize(8, kps, g, clean_map, intr)
    failed = localize(77, {}, np.zeros(clean_map.global_dim), clean_map, intr)
    path = tmp_path / "report.jsonl"
    write_report([ok, failed], path)

    records = read_report(path)
    assert len(records) == 2
    assert records[0]["query_id"] == 8 and records[0]["success"]
    assert records[1]["query_id"] == 77 and not records[1]["success"]
    assert "final" not in records[1]

    est = record_to_pose(records[0]["final"])
    diff = pose_error(est, ok.final_pose)
    assert diff.translation_m < 1e-12 and diff.rotation_deg < 1e-10
    assert [e["level"] for e in records[0]["trace"]] == [3, 2, 1]


def test_result_record_shape(clean_scene, clean_map, intr):
    kps, g = query_inputs(clean_scene, 10)
    res = localize(10, kps, g, clean_map, intr)
    rec = result_to_record(res)
    assert set(rec) >= {"query_id", "success", "elapsed_s", "trace", "final"}
    assert set(rec["final"]) == {"q_wxyz", "t"}
    assert len(rec["final"]["q_wxyz"]) == 4
