import copy
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lidar_uda.backbone import ArchConfig, init_head, init_params, state_hash
from lidar_uda.datasets import MemoryDataset
from lidar_uda.downstream import ConfigError, FeatureBank, segmentation_loss
from lidar_uda.geometry import IGNORE_ID, AugmentPolicy, Frame, PointCloud
from lidar_uda.schedule import make_adamw, set_lr
from lidar_uda.selftrain import SelfTrainConfig, TeacherStudentPair, ema_update, pseudo_labels, self_train


def _frames(n, seed, labelled=True, label_fill=None):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        xyz = np.column_stack([rng.uniform(-8, 8, (120, 2)), rng.normal(-1.5, 0.5, 120)])
        labels = np.where(xyz[:, 2] > -1.5, 3, 6)
        labels[::7] = IGNORE_ID
        if label_fill is not None:
            labels = np.full(120, label_fill)
        out.append(Frame(PointCloud(xyz, rng.uniform(0, 1, 120), labels if labelled else None), name=f"f{i}"))
    return MemoryDataset(out)


def _pair(scale=1.0):
    net = init_params(ArchConfig(width=16, depth=1), 0)
    net.pretrained = True
    head = init_head("mlp2", 16, 10, 1)
    with torch.no_grad():
        for p in head.parameters():
            p.mul_(scale)
    return TeacherStudentPair.from_head(net, head)


OFF = AugmentPolicy.off()


# ---------------------------------------------------------------------------
# EMA


def test_ema_scalar_step():
    assert ema_update(1.0, 0.0, 0.99) == pytest.approx(0.99, abs=1e-15)


def test_ema_fixed_point():
    x = np.array([0.3, -2.0, 7.5])
    assert np.array_equal(ema_update(x, x, 0.99), x)


def test_ema_hundred_steps_closed_form():
    t = 1.0
    for _ in range(100):
        t = ema_update(t, 0.0, 0.99)
    assert abs(t - 0.99 ** 100) < 1e-12
    assert abs(t - 0.3660) < 5e-5


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update(np.zeros(3), np.zeros(4), 0.9)
    with pytest.raises(ValueError):
        ema_update(init_head("mlp2", 8, 3, 0), init_head("mlp2", 8, 4, 0), 0.9)


def test_ema_module_is_convex_combination():
    t, s = init_head("linear_bn", 8, 5, 0), init_head("linear_bn", 8, 5, 1)
    t0 = {k: v.clone() for k, v in t.state_dict().items()}
    ema_update(t, s, 0.7)
    for k, v in t.state_dict().items():
        if v.is_floating_point():
            assert torch.allclose(v, 0.7 * t0[k] + 0.3 * s.state_dict()[k], atol=1e-7)
        else:
            assert torch.equal(v, s.state_dict()[k])


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.floats(0.01, 1.0))
def test_ema_stays_in_hull_of_history(students, momentum):
    t = start = 0.5
    for k, s in enumerate(students):
        t = ema_update(t, s, momentum)
        seen = [start, *students[:k + 1]]
        assert min(seen) - 1e-9 <= t <= max(seen) + 1e-9


# ---------------------------------------------------------------------------
# Pseudo-labels


def test_pseudo_labels_threshold():
    logits = torch.log(torch.tensor([[0.95, 0.05], [0.6, 0.4], [0.05, 0.95]], dtype=torch.float64))
    labels, conf = pseudo_labels(logits, 0.9)
    assert labels.tolist() == [0, IGNORE_ID, 1]
    assert conf == pytest.approx([0.95, 0.6, 0.95])


def test_pseudo_label_tie_is_ignored():
    # two equal logits give confidence exactly 0.5; equality with the threshold does not pass
    labels, conf = pseudo_labels(torch.zeros(3, 2), 0.5)
    assert conf.tolist() == [0.5] * 3 and (labels == IGNORE_ID).all()
    logits = torch.log(torch.tensor([[0.9, 0.1]], dtype=torch.float64))
    _, c = pseudo_labels(logits, 0.9)
    assert pseudo_labels(logits, float(c[0]))[0][0] == IGNORE_ID


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_pseudo_labels_shift_invariant(seed, shift):
    logits = torch.tensor(np.random.default_rng(seed).normal(size=(20, 5)) * 4)
    a, ca = pseudo_labels(logits, 0.8)
    b, cb = pseudo_labels(logits + shift, 0.8)
    keep = np.abs(ca - 0.8) > 1e-9  # rounding at the exact boundary may differ
    assert np.array_equal(a[keep], b[keep])


# ---------------------------------------------------------------------------
# Contracts


def test_config_validation():
    for bad in ({"momentum": 0.0}, {"momentum": 1.5}, {"confidence_threshold": 0.0}, {"epochs": 0}):
        with pytest.raises(ConfigError):
            SelfTrainConfig(**bad)
    SelfTrainConfig(momentum=1.0, confidence_threshold=1.0)


def test_requires_frozen_backbone():
    net = init_params(ArchConfig(width=8, depth=1), 0)
    with pytest.raises(ValueError):
        TeacherStudentPair(net, init_head("mlp2", 8, 10, 0), init_head("mlp2", 8, 10, 0))


def test_backbone_unchanged_and_deterministic():
    results = []
    for _ in range(2):
        pair = _pair(scale=6.0)
        before = state_hash(pair.backbone)
        student, hist = self_train(pair, _frames(3, 0), _frames(3, 1, labelled=False),
                                   SelfTrainConfig(epochs=2, batch_size=2, lr=1e-2, confidence_threshold=0.5), 0)
        assert state_hash(pair.backbone) == before
        results.append((state_hash(student), hist))
    assert results[0] == results[1]
    assert hist[-1]["pseudo_label_rate"] > 0 and {"source_loss", "target_loss"} <= hist[-1].keys()


def test_target_labels_never_read():
    cfg = SelfTrainConfig(epochs=2, batch_size=2, lr=1e-2, confidence_threshold=0.5)
    outs = []
    for fill in (0, 9, IGNORE_ID):
        pair = _pair(scale=6.0)
        student, _ = self_train(pair, _frames(3, 0), _frames(3, 1, label_fill=fill), cfg, 0)
        outs.append(state_hash(student))
    assert len(set(outs)) == 1


def test_momentum_one_freezes_teacher():
    pair = _pair(scale=6.0)
    before = state_hash(pair.teacher)
    student, _ = self_train(pair, _frames(3, 0), _frames(3, 1, labelled=False),
                            SelfTrainConfig(epochs=2, batch_size=2, lr=1e-2, momentum=1.0), 0)
    assert state_hash(pair.teacher) == before != state_hash(student)


def test_threshold_one_equals_source_only_training():
    """No prediction can be strictly above probability 1, so only the source branch ever steps."""
    cfg = SelfTrainConfig(epochs=3, batch_size=2, lr=1e-2, confidence_threshold=1.0, augment=OFF)
    src = _frames(5, 0)
    hashes = []
    for tgt_seed in (1, 2):
        pair = _pair(scale=6.0)
        with pytest.warns(RuntimeWarning, match="no confident pseudo-labels"):
            student, hist = self_train(pair, src, _frames(4, tgt_seed, labelled=False), cfg, 7)
        hashes.append(state_hash(student))
        assert all(h["pseudo_label_rate"] == 0 and h["target_loss"] == 0 for h in hist)
    assert hashes[0] == hashes[1]

    # reference: plain supervised continued training of the head on the source frames, same batch order
    pair = _pair(scale=6.0)
    head = copy.deepcopy(pair.student)
    opt = make_adamw([{"params": head.parameters(), "weight_decay": cfg.weight_decay}])
    set_lr(opt, cfg.lr)
    bank = FeatureBank(pair.backbone, src, OFF)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([7, 21, epoch]).permutation(len(src))
        for b in range(0, len(src), cfg.batch_size):
            idx = [int(j) for j in order[b:b + cfg.batch_size]]
            head.train()
            loss = segmentation_loss(head(torch.cat([bank(j) for j in idx])),
                                     np.concatenate([src[j].cloud.labels for j in idx]))[0]
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    head.eval()
    assert state_hash(head) == hashes[0]

