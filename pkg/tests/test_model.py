import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from cpe.model import (
    BRANCHES,
    build_model,
    forward_branches,
    generate_pseudo_labels,
    load_checkpoint,
    partition_classes,
    predict,
    save_checkpoint,
)


def small_model(C=3, F=4, in_dim=5, experts=3, seed=0):
    torch.manual_seed(seed)
    return build_model({"kind": "mlp", "in_dim": in_dim, "hidden": [F]}, C, experts).double()


@pytest.mark.parametrize("C, head, medium, tail", [
    (9, (0, 1, 2), (3, 4, 5), (6, 7, 8)),
    (10, (0, 1, 2), (3, 4, 5, 6), (7, 8, 9)),
])
def test_partition(C, head, medium, tail):
    g = partition_classes(C)
    assert (g.head, g.medium, g.tail) == (head, medium, tail)


def test_partition_sizes_cifar100():
    g = partition_classes(100)
    assert (len(g.head), len(g.medium), len(g.tail)) == (33, 34, 33)


def test_partition_rejects_small():
    with pytest.raises(ValueError):
        partition_classes(2)


@given(st.integers(3, 500))
def test_partition_is_partition(C):
    g = partition_classes(C)
    assert sorted(g.head + g.medium + g.tail) == list(range(C))
    assert len(g.head) == len(g.tail) == C // 3
    assert max(g.head) < min(g.medium or g.tail)


def test_eval_forward_is_repeatable():
    m = small_model()
    x = torch.randn(6, 5, dtype=torch.float64)
    a = forward_branches(m, x, "eval")
    b = forward_branches(m, x, "eval")
    assert torch.equal(a, b)


def test_fresh_branches_agree():
    m = small_model()
    x = torch.randn(6, 5, dtype=torch.float64)
    out = forward_branches(m, x, "train")
    assert out.shape == (3, 3, 6, 3)
    assert torch.allclose(out[0], out[1]) and torch.allclose(out[0], out[2])


def test_branch_matches_hand_computation():
    m = small_model(C=3, F=4)
    bn = m.bn["MT"]
    with torch.no_grad():
        bn.weight.copy_(torch.tensor([1.0, 2.0, 0.5, -1.0]))
        bn.bias.copy_(torch.tensor([0.0, 0.1, -0.2, 0.3]))
        m.experts[1].weight.copy_(torch.arange(12, dtype=torch.float64).reshape(3, 4) / 10)
        m.experts[1].bias.copy_(torch.tensor([0.5, -0.5, 0.0]))
    z = torch.tensor([[1.0, 2.0, 3.0, 4.0], [3.0, 0.0, -1.0, 2.0]], dtype=torch.float64)
    got = m.branch_logits(z, train=True, branches=("MT",))[0, 1]
    # normalize with the population variance of the two rows, then affine, then the head
    zn = z.numpy()
    mu = zn.mean(0)
    var = ((zn - mu) ** 2).mean(0)
    h = (zn - mu) / np.sqrt(var + bn.eps) * np.array([1, 2, 0.5, -1]) + np.array([0, 0.1, -0.2, 0.3])
    ref = h @ (np.arange(12).reshape(3, 4) / 10).T + np.array([0.5, -0.5, 0.0])
    np.testing.assert_allclose(got.detach().numpy(), ref, atol=1e-6)


def test_routes_limit_statistic_updates():
    m = small_model(C=9)
    z = torch.randn(8, 4, dtype=torch.float64)
    before = {b: m.bn[b].running_mean.clone() for b in BRANCHES}
    routes = {"MT": torch.zeros(8, dtype=torch.bool), "T": torch.zeros(8, dtype=torch.bool)}
    m.branch_logits(z, True, routes)
    assert not torch.equal(m.bn["HMT"].running_mean, before["HMT"])
    assert torch.equal(m.bn["MT"].running_mean, before["MT"])
    assert torch.equal(m.bn["T"].running_mean, before["T"])


def test_routed_subset_statistics():
    m = small_model(C=9)
    z = torch.randn(8, 4, dtype=torch.float64)
    route = torch.tensor([1, 1, 0, 0, 1, 0, 0, 0], dtype=torch.bool)
    m.branch_logits(z, True, {"T": route}, branches=("T",))
    bn = m.bn["T"]
    expected = 0.9 * 0 + 0.1 * z[route].mean(0)
    assert torch.allclose(bn.running_mean, expected)


def test_missing_running_stats_in_eval():
    m = small_model()
    m.bn["HMT"].running_mean = None
    with pytest.raises(RuntimeError):
        forward_branches(m, torch.randn(2, 5, dtype=torch.float64), "eval")


def test_pseudo_label_confidence_value():
    m = small_model()
    with torch.no_grad():
        for e in m.experts:
            e.weight.zero_()
            e.bias.copy_(torch.tensor([5.0, 0.0, 0.0]))
    pl = generate_pseudo_labels(m, torch.randn(1, 5, dtype=torch.float64), 0.95)
    assert pl.labels[:, 0].tolist() == [0, 0, 0]
    # 1 / (1 + 2 e^-5)
    assert float(pl.confidences[0, 0]) == pytest.approx(0.98670329104226799227, abs=1e-12)
    assert bool(pl.masks[0, 0])


def test_uniform_logits_are_masked():
    m = small_model(C=4)
    with torch.no_grad():
        for e in m.experts:
            e.weight.zero_()
            e.bias.zero_()
    pl = generate_pseudo_labels(m, torch.randn(3, 5, dtype=torch.float64), 0.95)
    assert torch.allclose(pl.confidences, torch.full_like(pl.confidences, 0.25))
    assert not pl.masks.any()


def test_experts_pseudo_label_independently():
    m = small_model()
    with torch.no_grad():
        for i, e in enumerate(m.experts):
            e.weight.zero_()
            e.bias.copy_(torch.nn.functional.one_hot(torch.tensor(i), 3).double() * 10)
    pl = generate_pseudo_labels(m, torch.randn(2, 5, dtype=torch.float64), 0.5)
    recs = pl.records(sample_ids=[10, 11])
    assert [r[0].pseudo_label for r in recs] == [0, 1, 2]
    assert [r[0].expert for r in recs] == [0, 1, 2]
    assert recs[2][1].sample_id == 11


def test_pseudo_labeling_is_pure():
    m = small_model(C=9)
    m.branch_logits(torch.randn(8, 4, dtype=torch.float64), True)  # non-trivial stats
    state = {k: v.clone() for k, v in m.state_dict().items()}
    generate_pseudo_labels(m, torch.randn(16, 5, dtype=torch.float64), 0.5)
    for k, v in m.state_dict().items():
        assert torch.equal(v, state[k]), k


def test_predict_uses_second_expert():
    m = small_model()
    x = torch.randn(20, 5, dtype=torch.float64)
    p1 = predict(m, x)
    assert torch.equal(p1, predict(m, x))
    pl = generate_pseudo_labels(m, x, 0.95)
    assert torch.equal(p1, pl.labels[1])
    with torch.no_grad():
        for i in (0, 2):
            m.experts[i].weight.normal_()
            m.experts[i].bias.fill_(1e3)
    assert torch.equal(p1, predict(m, x))


def test_predict_identity_head():
    m = small_model(C=4, F=4, in_dim=4)
    m.encoder = torch.nn.Identity()
    m.encoder.out_dim = 4
    with torch.no_grad():
        m.experts[1].weight.copy_(torch.eye(4))
        m.experts[1].bias.zero_()
    x = torch.randn(10, 4, dtype=torch.float64)
    assert torch.equal(predict(m, x), x.argmax(dim=1))


def test_single_expert_inference_head():
    m = small_model(experts=1)
    assert m.inference_expert == 0
    x = torch.randn(7, 5, dtype=torch.float64)
    assert torch.equal(predict(m, x), forward_branches(m, x, "eval")[0, 0].argmax(-1))


def test_encoder_runs_once_per_sample():
    m = small_model()
    x = torch.randn(6, 5, dtype=torch.float64)
    forward_branches(m, x, "train")
    assert m.encoded_samples == 6


def test_checkpoint_round_trip(tmp_path):
    m = small_model(C=9)
    m.branch_logits(torch.randn(8, 4, dtype=torch.float64), True)
    save_checkpoint(tmp_path / "c.pt", m, step=3)
    loaded, payload = load_checkpoint(tmp_path / "c.pt")
    loaded = loaded.double()
    assert payload["step"] == 3
    assert payload["groups"]["tail"] == [6, 7, 8]
    for k, v in m.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    x = torch.randn(5, 5, dtype=torch.float64)
    assert torch.equal(forward_branches(m, x, "eval"), forward_branches(loaded, x, "eval"))


def test_wrn_feature_shape():
    torch.manual_seed(0)
    m = build_model({"kind": "wrn", "depth": 10, "widen": 1}, 10)
    out = forward_branches(m, torch.rand(2, 3, 32, 32), "eval")
    assert out.shape == (3, 3, 2, 10)
    assert m.feature_dim == 64


def test_wrn_28_2_width():
    m = build_model({"kind": "wrn"}, 10)
    assert m.feature_dim == 128
    n_params = sum(p.numel() for p in m.encoder.parameters())
    assert 1.4e6 < n_params < 1.5e6
