import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_cloud
from lidar_uda.backbone import (ArchConfig, Head, NORM_EPS, fold_linear_head, forward, init_head, init_params,
                                load_checkpoint, param_count, recalibrate_batchnorm, save_checkpoint,
                                state_hash)
from lidar_uda.downstream import segmentation_loss
from lidar_uda.geometry import PointCloud
from lidar_uda.schedule import make_adamw, set_lr


def _street(rng, n=300):
    """Ground plane plus a box of points: enough vertical structure for every input feature."""
    ground = np.column_stack([rng.uniform(-10, 10, (n // 2, 2)), rng.normal(-1.8, 0.02, n // 2)])
    box = np.column_stack([rng.uniform(2, 5, n - n // 2), rng.uniform(-1, 1, n - n // 2),
                           rng.uniform(-1.8, 0.0, n - n // 2)])
    xyz = np.vstack([ground, box])
    return PointCloud(xyz, rng.uniform(0, 1, n), np.r_[np.full(n // 2, 6), np.zeros(n - n // 2, int)])


def _bytes(module):
    return b"".join(t.detach().numpy().tobytes() for t in module.state_dict().values())


def test_init_deterministic():
    cfg = ArchConfig(width=16, depth=2)
    assert _bytes(init_params(cfg, 3)) == _bytes(init_params(cfg, 3))
    assert _bytes(init_params(cfg, 3)) != _bytes(init_params(cfg, 4))


def test_param_count_closed_form():
    cfg = ArchConfig(width=64, depth=2)
    # embed 7*64+64 = 512; each layer 2*64^2 + 34*64 = 10368; output norm 128
    assert param_count(cfg) == 512 + 2 * 10368 + 128 == 21376
    net = init_params(cfg, 0)
    assert sum(p.numel() for p in net.parameters()) == 21376
    for norm, w, d, inten in (("batch", 32, 3, True), ("layer", 96, 1, False)):
        c = ArchConfig(width=w, depth=d, norm=norm, use_intensity=inten)
        assert sum(p.numel() for p in init_params(c, 0).parameters()) == param_count(c)


def test_layernorm_has_no_running_stats():
    assert list(init_params(ArchConfig(width=16, norm="layer"), 0).buffers()) == []
    assert len(list(init_params(ArchConfig(width=16, norm="batch"), 0).buffers())) > 0


def test_single_point():
    out = forward(init_params(ArchConfig(width=16), 0), PointCloud([[1.0, 2.0, -1.0]]))
    assert out.shape == (1, 16)
    assert torch.isfinite(out).all()


def test_permutation_equivariance():
    rng = np.random.default_rng(0)
    cloud = _street(rng)
    perm = rng.permutation(len(cloud))
    net = init_params(ArchConfig(width=32), 1)
    a = forward(net, cloud)
    b = forward(net, PointCloud(cloud.xyz[perm], cloud.intensity[perm], cloud.labels[perm]))
    assert torch.allclose(a[perm], b, atol=1e-6, rtol=0)


def test_layernorm_output_standardised():
    net = init_params(ArchConfig(width=32, norm="layer"), 0)  # output affine is identity at init
    out = forward(net, _street(np.random.default_rng(1))).double()
    assert out.mean(1).abs().max() < 1e-4
    assert (out.var(1, unbiased=False) - 1).abs().max() < 1e-4


def test_intensity_required():
    net = init_params(ArchConfig(width=16, use_intensity=True), 0)
    with pytest.raises(ValueError, match="intensity required"):
        forward(net, PointCloud(np.zeros((3, 3))))


@given(st.integers(0, 1000))
def test_layernorm_batch_composition_invariance(seed):
    rng = np.random.default_rng(seed)
    clouds = [_street(rng, int(rng.integers(20, 120))) for _ in range(3)]
    net = init_params(ArchConfig(width=16, depth=2), seed)
    net.eval()
    joint = net.batch(clouds)
    parts = joint.split(net(joint))
    for cloud, part in zip(clouds, parts):
        assert torch.allclose(part, net(cloud), atol=1e-5, rtol=0)


def test_batchnorm_eval_does_not_update_stats():
    net = init_params(ArchConfig(width=16, norm="batch"), 0)
    before = state_hash(net)
    forward(net, _street(np.random.default_rng(0)), mode="eval")
    assert state_hash(net) == before
    forward(net, _street(np.random.default_rng(0)), mode="train")
    assert state_hash(net) != before


def test_eval_forward_deterministic():
    cloud = _street(np.random.default_rng(2))
    for norm in ("layer", "batch"):
        net = init_params(ArchConfig(width=16, norm=norm), 0)
        assert torch.equal(forward(net, cloud), forward(net, cloud))


def test_frozen_groups_bit_identical_after_training():
    net = init_params(ArchConfig(width=16, depth=3), 0)
    head = init_head("linear_bn", 16, 10, 1)
    net.freeze(["embed", "layers.0"])
    frozen = {k: state_hash(m) for k, m in net.groups().items() if k in ("embed", "layers.0")}
    opt = make_adamw([{"params": net.parameters(), "weight_decay": 0.03},
                      {"params": head.parameters(), "weight_decay": 0.03}])
    set_lr(opt, 1e-2)
    cloud = _street(np.random.default_rng(3))
    net.train()
    for _ in range(5):
        loss = segmentation_loss(head(net(cloud)), cloud.labels)[0]
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert {k: state_hash(net.groups()[k]) for k in frozen} == frozen
    assert state_hash(net.groups()["layers.1"]) != state_hash(init_params(ArchConfig(width=16, depth=3), 0).layers[1])


def test_full_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    rng = np.random.default_rng(4)
    cloud = _street(rng, 64)
    cloud = cloud.with_labels(rng.integers(0, 10, 64))
    net = init_params(ArchConfig(width=16, depth=2), 0).double()
    head = init_head("mlp2", 16, 10, 1).double()
    net.train()
    params = [p for p in list(net.parameters()) + list(head.parameters())]

    def loss_fn():
        return segmentation_loss(head(net(cloud)), cloud.labels)[0]

    loss_fn().backward()
    flat = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.numel())]
    picks = rng.choice(len(flat), 32, replace=False)
    h = 1e-4
    for k in picks:
        pi, idx = flat[k]
        p = params[pi].data.view(-1)
        analytic = params[pi].grad.view(-1)[idx].item()
        old = p[idx].item()
        with torch.no_grad():
            p[idx] = old + h
            up = loss_fn().item()
            p[idx] = old - h
            down = loss_fn().item()
            p[idx] = old
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 2e-3 * max(abs(analytic), abs(numeric), 1e-6), (k, analytic, numeric)


# ---------------------------------------------------------------------------
# Heads


def test_mlp2_zero_second_layer():
    head = init_head("mlp2", 16, 10, 0)
    with torch.no_grad():
        head.fc2.weight.zero_()
        head.fc2.bias.zero_()
    assert torch.equal(head(torch.randn(5, 16)), torch.zeros(5, 10))


def test_linear_bn_identity_equals_linear():
    head = init_head("linear_bn", 16, 10, 0).eval()
    x = torch.randn(7, 16)
    assert torch.allclose(head(x), head.fc(x / np.sqrt(1 + NORM_EPS)), atol=1e-6)


def test_head_dim_mismatch():
    with pytest.raises(ValueError):
        init_head("linear_bn", 16, 10, 0)(torch.zeros(2, 8))


@pytest.mark.parametrize("kind", ["linear_bn", "mlp2", "distill_proj"])
def test_head_gradient_finite_differences(kind):
    head = init_head(kind, 6, 4, 0).double().eval()
    if kind == "linear_bn":
        head.bn.running_mean.uniform_(-1, 1)
        head.bn.running_var.uniform_(0.5, 2)
    x = torch.randn(5, 6, dtype=torch.float64)
    proj = torch.randn(5, 4, dtype=torch.float64)
    (head(x) * proj).sum().backward()
    h = 1e-6
    for p in head.parameters():
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = (head(x) * proj).sum().item()
                flat[i] = old - h
                down = (head(x) * proj).sum().item()
                flat[i] = old
            num = (up - down) / (2 * h)
            ana = p.grad.view(-1)[i].item()
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-8)


def test_fold_identity_bn_exact():
    head = init_head("linear_bn", 16, 10, 0)
    head.bn.eps = 0.0  # so that the folded scale is exactly one
    folded = fold_linear_head(head)
    assert torch.equal(folded.fc.weight, head.fc.weight)
    assert torch.equal(folded.fc.bias, head.fc.bias)
    assert folded.kind == "linear" and not list(folded.buffers())


@given(st.integers(0, 10_000))
def test_fold_matches_unfolded(seed):
    g = torch.Generator().manual_seed(seed)
    head = init_head("linear_bn", 16, 10, seed).eval()
    with torch.no_grad():
        head.bn.running_mean.copy_(torch.randn(16, generator=g))
        head.bn.running_var.copy_(torch.rand(16, generator=g) * 3 + 0.05)
        head.bn.weight.copy_(torch.randn(16, generator=g))
        head.bn.bias.copy_(torch.randn(16, generator=g))
    x = torch.randn(100, 16, generator=g)
    assert (fold_linear_head(head)(x) - head(x)).abs().max() < 1e-5


def test_fold_zero_variance_finite():
    head = init_head("linear_bn", 8, 3, 0).eval()
    head.bn.running_var.zero_()
    assert torch.isfinite(fold_linear_head(head)(torch.randn(4, 8))).all()


# ---------------------------------------------------------------------------
# Batchnorm recalibration


def test_recalibrate_on_training_distribution_is_stable():
    # desk frames hold thousands of points; the unbiased/biased variance gap is ~1/n
    cloud = _street(np.random.default_rng(5), 4000)
    net = init_params(ArchConfig(width=16, depth=2, norm="batch"), 0)
    net.train()
    with torch.no_grad():
        for _ in range(200):
            net(cloud)
    net.eval()
    before = net(cloud)
    recal = recalibrate_batchnorm(net, [cloud])
    assert (recal(cloud) - before).abs().mean() < 1e-3


def test_recalibrate_keeps_weights():
    net = init_params(ArchConfig(width=16, depth=2, norm="batch"), 0)
    clouds = [_street(np.random.default_rng(s), 100) for s in range(3)]
    recal = recalibrate_batchnorm(net, clouds)
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), recal.named_parameters()):
        assert n1 == n2 and p1.detach().numpy().tobytes() == p2.detach().numpy().tobytes()


def test_recalibrated_stats_match_scalar_loop():
    clouds = [_street(np.random.default_rng(s), 40) for s in range(2)]
    net = init_params(ArchConfig(width=8, depth=2, norm="batch"), 0).double()
    recal = recalibrate_batchnorm(net, clouds)
    recal.eval()
    seen = {id(m): [] for m in recal.norms()}
    hooks = [m.register_forward_pre_hook(lambda mod, inp: seen[id(mod)].append(inp[0].detach().numpy()))
             for m in recal.norms()]
    with torch.no_grad():
        for c in clouds:
            recal(c)
    for h in hooks:
        h.remove()
    for norm in recal.norms():
        rows = [row for chunk in seen[id(norm)] for row in chunk.tolist()]
        for ch in range(8):
            vals = [r[ch] for r in rows]
            mean = 0.0
            for v in vals:
                mean += v
            mean /= len(vals)
            var = 0.0
            for v in vals:
                var += (v - mean) ** 2
            var /= len(vals)
            assert abs(norm.running_mean[ch].item() - mean) < 1e-6
            assert abs(norm.running_var[ch].item() - var) < 1e-6


def test_recalibrate_layernorm_rejected():
    with pytest.raises(ValueError, match="no batchnorm to recalibrate"):
        recalibrate_batchnorm(init_params(ArchConfig(width=8), 0), [random_cloud(np.random.default_rng(0), 10)])


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_roundtrip(tmp_path):
    net = init_params(ArchConfig(width=16, depth=2, norm="batch", use_intensity=True), 0)
    net.pretrained = True
    net.freeze(["embed"])
    head = init_head("mlp2", 16, 10, 1)
    save_checkpoint(tmp_path / "m.ckpt", net, {"cls": head}, {"note": "x"})
    net2, heads, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert state_hash(net2) == state_hash(net)
    assert state_hash(heads["cls"]) == state_hash(head)
    assert net2.frozen_flags() == net.frozen_flags()
    assert net2.pretrained and meta == {"note": "x"}
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"LUDACKPT"


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"garbage!" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_arch_validation():
    for kw in ({"width": 4}, {"depth": 0}, {"grid_res": 0}, {"norm": "group"}):
        with pytest.raises(ValueError):
            ArchConfig(**kw)
