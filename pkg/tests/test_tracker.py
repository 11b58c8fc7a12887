import logging
import math
import warnings
from collections import deque
from pathlib import Path

import numpy as np
import pytest
import torch

from mfgtrack.box import BoundingBox, overlap_ratio
from mfgtrack.config import load_config
from mfgtrack.datanet import AttentionMap, DaTANet, GlobalProposals
from mfgtrack.evaluate import evaluate
from mfgtrack.experiment import build_sequences, run_attention_training
from mfgtrack.frame import FramePair, ImageTensor, Modality
from mfgtrack.sampling import draw_training_samples, sample_uniform
from mfgtrack.synth import SyntheticSpec, easy_spec, generate_sequence
from mfgtrack.tracker import (
    BBoxRegressor,
    FrameGeometry,
    InstanceHead,
    ProposalSource,
    SearchPolicy,
    Tracker,
    TrackerState,
    loss_cls,
    loss_inst,
    loss_total,
    regress_box,
    roi_instance_features,
    select_proposal,
    target_score,
)


def test_roi_of_constant_map_is_constant():
    features = torch.stack([torch.full((10, 12), 2.0), torch.full((10, 12), -1.0)])
    out = roi_instance_features(features, [[1, 1, 5, 4], [2.5, 0, 3, 7]], spatial_scale=1.0)
    assert out.shape == (2, 2 * 9)
    torch.testing.assert_close(out[:, :9], torch.full((2, 9), 2.0))
    torch.testing.assert_close(out[:, 9:], torch.full((2, 9), -1.0))


def test_roi_bilinear_on_linear_ramp():
    ys, xs = torch.meshgrid(torch.arange(8.0), torch.arange(8.0), indexing="ij")
    features = (xs + 10 * ys)[None]
    out = roi_instance_features(features, [[1, 2, 3, 3]], spatial_scale=1.0).reshape(3, 3)
    expected = torch.tensor([[(1 + j) + 10 * (2 + i) for j in range(3)] for i in range(3)])
    torch.testing.assert_close(out, expected.float(), atol=1e-4, rtol=0)


def test_roi_length_follows_grid():
    out = roi_instance_features(torch.randn(4, 6, 6), [[0, 0, 16, 16]], grid=2)
    assert out.shape == (1, 4 * 4)


def test_select_proposal_skips_nan():
    boxes = [[0, 0, 4, 4], [4, 4, 4, 4], [8, 8, 4, 4]]
    best = select_proposal(boxes, torch.tensor([0.2, float("nan"), 0.5]), ProposalSource.Local)
    assert best.index == 2 and best.box == BoundingBox(8, 8, 4, 4)
    assert select_proposal(boxes, torch.full((3,), float("nan")), ProposalSource.Global) is None


def test_loss_cls_uniform_is_ln2():
    loss = loss_cls(torch.zeros(5, 2), torch.tensor([1, 0, 1, 1, 0]))
    assert float(loss) == pytest.approx(math.log(2))


def _nll(row, label):
    return -(row[label] - math.log(sum(math.exp(v) for v in row)))


def test_loss_cls_matches_oracle():
    g = torch.Generator().manual_seed(0)
    for n in range(1, 101):
        logits = torch.randn(n, 2, generator=g, dtype=torch.float64) * 3
        labels = torch.randint(0, 2, (n,), generator=g)
        rows, targets = logits.tolist(), labels.tolist()
        expected = sum(_nll(row, label) for row, label in zip(rows, targets)) / n
        assert float(loss_cls(logits, labels)) == pytest.approx(expected, abs=1e-10)


def test_balanced_loss_cls_averages_the_classes():
    g = torch.Generator().manual_seed(1)
    for _ in range(100):
        logits = torch.randn(12, 2, generator=g, dtype=torch.float64)
        labels = torch.cat([torch.ones(3), torch.zeros(9)])
        rows, targets = logits.tolist(), labels.long().tolist()
        pos = sum(_nll(row, 1) for row, label in zip(rows, targets) if label == 1) / 3
        neg = sum(_nll(row, 0) for row, label in zip(rows, targets) if label == 0) / 9
        loss = loss_cls(logits, labels, torch.tensor([1 / 9, 1 / 3]))
        assert float(loss) == pytest.approx((pos + neg) / 2, abs=1e-10)


def test_loss_item_detaches():
    cls = torch.tensor(0.5, requires_grad=True) * 2
    breakdown = loss_total(cls, torch.tensor(0.2, requires_grad=True))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        values = breakdown.item()
    assert values.total == pytest.approx(1.02)
    assert isinstance(values.cls, float)


def test_loss_cls_needs_samples():
    with pytest.raises(ValueError):
        loss_cls(torch.zeros(0, 2), torch.zeros(0))


def test_loss_inst_single_domain_warns():
    with pytest.warns(UserWarning):
        loss = loss_inst(torch.randn(4, 1), 0)
    assert float(loss) == pytest.approx(0.0)


def test_loss_inst_equal_scores():
    assert float(loss_inst(torch.ones(6, 2), 1)) == pytest.approx(math.log(2))


def test_loss_inst_matches_oracle():
    g = torch.Generator().manual_seed(2)
    for n in range(1, 101):
        domains = 2 + n % 5
        scores = torch.randn(n, domains, generator=g, dtype=torch.float64) * 2
        domain = n % domains
        expected = sum(_nll(row, domain) for row in scores.tolist()) / n
        assert float(loss_inst(scores, domain)) == pytest.approx(expected, abs=1e-10)


def test_loss_total():
    assert loss_total(0.7, 0.5).total == pytest.approx(0.75)
    a, b = loss_total(0.2, 1.0, 0.3).total, loss_total(0.4, 2.0, 0.3).total
    assert b == pytest.approx(2 * a)


def test_zero_regressor_is_identity():
    regressor = BBoxRegressor.from_weights(np.zeros((8, 4)))
    box = BoundingBox(10, 12, 20, 16)
    refined = regress_box(regressor, torch.randn(8), box)
    np.testing.assert_allclose(refined.to_array(), box.to_array())


def test_untrained_regressor_keeps_box(caplog):
    box = BoundingBox(3, 4, 5, 6)
    with caplog.at_level(logging.WARNING):
        refined = regress_box(BBoxRegressor(), torch.randn(8), box, log=logging.getLogger("t"))
    assert refined == box
    assert "untrained" in caplog.text


def test_regressor_learns_linear_offsets():
    rng = np.random.default_rng(0)
    gt = BoundingBox(40, 40, 20, 20)
    boxes = np.column_stack(
        [
            40 + rng.normal(0, 2, 200),
            40 + rng.normal(0, 2, 200),
            20 * np.exp(rng.normal(0, 0.1, 200)),
            20 * np.exp(rng.normal(0, 0.1, 200)),
        ]
    )
    centers = boxes[:, :2] + boxes[:, 2:] / 2
    deltas = np.column_stack(
        [(np.array(gt.center) - centers) / boxes[:, 2:], np.log(gt.to_array()[2:] / boxes[:, 2:])]
    )
    feats = torch.from_numpy(np.concatenate([deltas, rng.normal(0, 1, (200, 4))], axis=1))
    regressor = BBoxRegressor(alpha=1e-3).fit(feats, boxes, gt)
    refined = regressor.predict(feats, boxes)
    assert overlap_ratio(refined, gt).mean() > overlap_ratio(boxes, gt).mean()
    assert overlap_ratio(refined, gt).min() > 0.95


def test_head_outputs():
    head = InstanceHead(12, hidden=8, domains=3).eval()
    feats = torch.randn(5, 12)
    assert head(feats).shape == (5, 3, 2)
    probs = torch.softmax(head.classify(feats), dim=1)
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(5))
    torch.testing.assert_close(head.classify(feats), head.classify(feats))
    torch.testing.assert_close(target_score(head.classify(feats)), head(feats)[:, 0, 1] - head(feats)[:, 0, 0])


def test_update_cadence():
    policy = SearchPolicy(failure_threshold=8, update_interval=10)
    assert [t for t in range(1, 31) if policy.update_kind(t, True) == "scheduled"] == [10, 20, 30]
    assert policy.update_kind(7, False) == "failure"
    assert policy.update_kind(7, True) is None


def test_store_evicts_oldest():
    state = TrackerState(BoundingBox(0, 0, 4, 4), short_term_store=deque(maxlen=3))
    for index in range(5):
        state.short_term_store.append(index)
    assert list(state.short_term_store) == [2, 3, 4]


def test_global_switch_trace(tiny_settings, monkeypatch):
    record = generate_sequence(easy_spec(16, 64, np.random.default_rng(1)), seed=1)
    datanet = DaTANet(tiny_settings.datanet)
    tracker = Tracker(tiny_settings, datanet=datanet)
    state = tracker.initialize(record.frames[0], record.boxes[0])

    phase = {"score": -1.0}
    monkeypatch.setattr(tracker, "score", lambda feats: torch.full((len(feats),), phase["score"]))
    monkeypatch.setattr(
        tracker,
        "_global_proposals",
        lambda state, pair: GlobalProposals(
            sample_uniform(state.current_box, 16, pair.size, rng=np.random.default_rng(0))
        ),
    )
    used_global = []
    for t in range(1, 16):
        phase["score"] = -1.0 if t <= 12 else 1.0
        result = tracker.track_frame(state, record.frames[t])
        if result.used_global:
            used_global.append(t)
        assert state.failure_streak == (t if t <= 12 else 0)
    assert used_global == [9, 10, 11, 12, 13]


def test_global_switch_needs_attention_network(tiny_settings, easy_record, monkeypatch):
    tracker = Tracker(tiny_settings)
    state = tracker.initialize(easy_record.frames[0], easy_record.boxes[0])
    monkeypatch.setattr(tracker, "score", lambda feats: torch.full((len(feats),), -1.0))
    results = [tracker.track_frame(state, pair) for pair in easy_record.frames[1:]]
    assert not any(result.used_global for result in results)
    assert all(result.update == "failure" for result in results)
    assert all(result.score == -1.0 for result in results)


def test_initialize_separates_target(tiny_settings, easy_record):
    settings = tiny_settings.with_overrides({"tracker.init_iters": 40, "tracker.init_lr": 5e-3})
    tracker = Tracker(settings)
    pair, box = easy_record.frames[0], easy_record.boxes[0]
    tracker.initialize(pair, box)
    samples = draw_training_samples(box, pair.size, 32, 64, rng=np.random.default_rng(9))
    features = tracker.features(pair)
    pos = tracker.score(tracker.instance_features(features, samples.positives))
    neg = tracker.score(tracker.instance_features(features, samples.negatives))
    assert float(pos.mean()) > float(neg.mean())


def test_online_update_descends(tiny_settings, easy_record):
    failures = 0
    for seed in range(20):
        tracker = Tracker(tiny_settings.with_overrides({"tracker.seed": seed, "tracker.lr": 1e-4}))
        state = tracker.initialize(easy_record.frames[0], easy_record.boxes[0])
        losses = tracker.online_update(state, "scheduled")
        failures += int(not losses[-1].descended)
    assert failures <= 1


def test_first_frame_finetuning_separates_samples(tiny_settings, easy_record, caplog):
    settings = tiny_settings.with_overrides({"backbone.input_size": 256})
    tracker = Tracker(settings, log=logging.getLogger("t"))
    pair, box = easy_record.frames[0], easy_record.boxes[0]
    with caplog.at_level(logging.INFO):
        tracker.initialize(pair, box)
    assert "First frame finetuning" in caplog.text
    samples = draw_training_samples(box, pair.size, 32, 64, rng=np.random.default_rng(9))
    features = tracker.features(pair)
    pos_rate, neg_rate = tracker.separation(
        tracker.instance_features(features, samples.positives),
        tracker.instance_features(features, samples.negatives),
    )
    assert pos_rate > 0.8 and neg_rate > 0.8


def test_static_target_never_fails(tiny_settings):
    spec = SyntheticSpec(
        name="static",
        num_frames=12,
        canvas=(64, 64),
        target_size=(16.0, 16.0),
        waypoints=[(32.0, 32.0)],
        speed=0.0,
    )
    record = generate_sequence(spec, seed=5)
    settings = tiny_settings.with_overrides({"backbone.input_size": 256, "tracker.n_local": 128})
    tracker = Tracker(settings)
    state = tracker.initialize(record.frames[0], record.boxes[0])
    for t in range(1, len(record)):
        result = tracker.track_frame(state, record.frames[t])
        assert result.score > 0
        assert state.failure_streak == 0
        assert result.box.iou(record.boxes[t]) > 0.7


def test_frame_geometry_brings_target_to_size():
    small = BoundingBox(10, 10, 8, 8)
    assert FrameGeometry.fit((64, 64), 256, small, 48).scale == pytest.approx(4.0)
    assert FrameGeometry.fit((64, 64), 1024, small, 48).scale == pytest.approx(6.0)
    assert FrameGeometry.fit((64, 64), 1024, BoundingBox(0, 0, 64, 64), 32).scale == pytest.approx(0.5)
    assert FrameGeometry.fit((64, 64), 1024).scale == 1.0
    assert FrameGeometry.fit((2000, 1000), 1024).scale == pytest.approx(0.512)
    geometry = FrameGeometry.fit((20, 30), 1024, BoundingBox(0, 0, 5, 5), 10)
    assert geometry.prepare(_pair(20, 30)).size == (40, 64)
    assert geometry.spatial_scale == pytest.approx(0.25)


def _pair(height, width):
    return FramePair(
        ImageTensor(torch.rand(3, height, width), Modality.Visible),
        ImageTensor(torch.rand(3, height, width), Modality.Thermal),
    )


def test_global_proposals_reach_the_attended_region(tiny_settings, easy_record, monkeypatch):
    tracker = Tracker(tiny_settings, datanet=DaTANet(tiny_settings.datanet))
    state = tracker.initialize(easy_record.frames[0], easy_record.boxes[0])
    w, h = state.current_box.w, state.current_box.h
    target = BoundingBox(40, 8, w, h)
    att = torch.zeros(64, 64)
    att[8 : 8 + int(h), 40 : 40 + int(w)] = 1.0
    monkeypatch.setattr(tracker.datanet, "predict", lambda clip: AttentionMap(att))
    proposals = tracker._global_proposals(state, easy_record.frames[1])
    assert not proposals.uniform_fallback
    assert len(proposals.boxes) == 2 * tiny_settings.tracker.n_global
    assert overlap_ratio(proposals.boxes, target).max() >= 0.6


def test_track_is_deterministic(tiny_settings, easy_record):
    first = Tracker(tiny_settings).track(easy_record.frames, easy_record.boxes[0])
    second = Tracker(tiny_settings).track(easy_record.frames, easy_record.boxes[0])
    assert [r.box for r in first] == [r.box for r in second]
    assert first[0].box == easy_record.boxes[0]
    assert len(first) == len(easy_record)


def test_head_checkpoint_round_trip(tiny_settings, easy_record, tmp_path):
    tracker = Tracker(tiny_settings)
    state = tracker.initialize(easy_record.frames[0], easy_record.boxes[0])
    tracker.save_head(tmp_path / "head.pt", state)
    other = Tracker(tiny_settings)
    regressor = other.load_head(tmp_path / "head.pt")
    np.testing.assert_allclose(regressor.weights, state.regressor.weights)
    feats = torch.randn(3, tracker.net.head.shared[0].in_features)
    torch.testing.assert_close(tracker.score(feats), other.score(feats))
    torch.testing.assert_close(tracker.standardize(feats), other.standardize(feats))
    assert not torch.equal(other.standardize(feats), feats)


DESK = Path(__file__).parents[1] / "configs" / "desk.cfg"


@pytest.mark.slow
def test_easy_sequence_accuracy():
    settings = load_config(DESK).with_overrides(
        {"experiment.num_sequences": 1, "experiment.num_frames": 200}
    )
    record = build_sequences(settings)[0]
    results = Tracker(settings).track(record.frames, record.boxes[0])
    result = evaluate([r.box for r in results], record.boxes)
    assert result.pr_at_threshold >= 0.9
    assert result.sr_auc >= 0.6


@pytest.mark.slow
def test_global_search_reacquires_after_teleport(tmp_path):
    settings = load_config(DESK).with_overrides(
        {"experiment.num_sequences": 10, "experiment.num_frames": 60, "datanet.epochs": 20}
    )
    training = build_sequences(settings.with_overrides({"experiment.seed": 100}), "occlusion", 4)
    _, datanet = run_attention_training(settings, training, tmp_path)

    def reacquired(tracker, record):
        results = tracker.track(record.frames, record.boxes[0])
        window = range(record.occluded[-1] + 1, min(record.occluded[-1] + 11, len(record)))
        return any(results[t].box.iou(record.boxes[t]) > 0.5 for t in window)

    with_global = without = 0
    for record in build_sequences(settings, "occlusion"):
        with_global += reacquired(Tracker(settings, datanet=datanet), record)
        without += reacquired(Tracker(settings), record)
    assert with_global > without


def test_online_update_uses_stores(tiny_settings, easy_record, caplog):
    tracker = Tracker(tiny_settings, log=logging.getLogger("t"))
    state = tracker.initialize(easy_record.frames[0], easy_record.boxes[0])
    assert len(tracker.online_update(state, "scheduled")) == tiny_settings.tracker.update_iters
    state.short_term_store.clear()
    with caplog.at_level(logging.WARNING):
        assert tracker.online_update(state, "failure") == []
    assert "skipping failure update" in caplog.text
