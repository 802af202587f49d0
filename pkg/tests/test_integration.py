import pytest
import torch

from dynamicformer.config import INTEGRATION_ORDERS, ModelConfig
from dynamicformer.gradcheck import check_gradients
from dynamicformer.integration import Heads, Integration, TemporalProject, classify
from dynamicformer.nn import count_parameters

from conftest import tiny_config


def make_streams(cfg, b=2, pad_last=True, dtype=torch.float64):
    n, k, t, d, e = cfg.max_persons, cfg.num_joints, cfg.num_frames, cfg.d_model, cfg.max_objects
    pm = torch.ones(b, n, dtype=torch.bool)
    if pad_last:
        pm[0, -1] = False
    kv = torch.ones(b, n, k, t, dtype=torch.bool) & pm[:, :, None, None]
    fill = lambda *s: torch.randn(*s, dtype=dtype)
    S = fill(b, n, k, t, d) * kv[..., None]
    P = fill(b, n, t, d) * pm[..., None, None]
    sub = torch.tensor([0, 1] * n)[:n].expand(b, n).clone()
    sub[~pm] = -1
    streams = {"S": S, "P": P, "G": fill(b, cfg.num_subgroups, t, d), "O": fill(b, e, t, d),
               "keypoint_valid": kv, "person_mask": pm,
               "group_mask": torch.ones(b, cfg.num_subgroups, dtype=torch.bool),
               "object_mask": torch.ones(b, e, dtype=torch.bool)}
    relation = fill(b, n, n, 2 * d)
    interaction = fill(b, n, d) * pm[..., None]
    return streams, relation, interaction, sub


def test_temporal_project_zero_and_single_frame():
    proj = TemporalProject(3, 8).double()
    assert torch.equal(proj(torch.zeros(2, 3, 8, dtype=torch.float64)), torch.zeros(2, 8, dtype=torch.float64))
    one = TemporalProject(1, 8).double()
    x = torch.randn(4, 1, 8, dtype=torch.float64)
    assert torch.allclose(one(x), one.w2(torch.relu(one.w1(x[:, 0]))), atol=1e-12)
    with pytest.raises(ValueError):
        proj(torch.zeros(1, 4, 8))


def test_temporal_project_gradients():
    torch.manual_seed(4)
    proj = TemporalProject(3, 4).double()
    x = torch.randn(2, 3, 4, dtype=torch.float64)
    errs = check_gradients(lambda: (proj(x) ** 2).sum(), {"x": x, **dict(proj.named_parameters())})
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("order", INTEGRATION_ORDERS)
def test_orders_share_output_shapes(order):
    cfg = tiny_config(integration=order)
    scene, persons = Integration(cfg).double().eval()(*make_streams(cfg))
    assert scene.shape == (2, 8) and persons.shape == (2, 3, 8)


def test_parameter_counts_by_order():
    cfg = ModelConfig.micro()
    counts = {o: count_parameters(Integration(cfg.replace(integration=o))) for o in INTEGRATION_ORDERS}
    assert counts["hierarchical"] == counts["linear"]
    assert counts["parallel"] != counts["hierarchical"]


@pytest.mark.parametrize("order", INTEGRATION_ORDERS)
def test_no_objects(order):
    cfg = tiny_config(max_objects=0, integration=order)
    scene, persons = Integration(cfg).double().eval()(*make_streams(cfg))
    assert scene.shape == (2, 8) and persons.shape == (2, 3, 8)


@pytest.mark.parametrize("order", INTEGRATION_ORDERS)
def test_padded_person_gets_no_attention(order):
    cfg = tiny_config(integration=order)
    integ = Integration(cfg).double().eval()
    streams, rel, inter, sub = make_streams(cfg)
    integ(streams, rel, inter, sub)
    layers = list(integ.stack) if order == "parallel" else [l for s in integ.stages for l in s]
    for layer in layers:
        assert layer.attn.last_weights is not None
    if order == "hierarchical":
        n, k = cfg.max_persons, cfg.num_joints
        w1 = integ.stages[0][0].attn.last_weights[0]           # heads, q, key
        assert torch.all(w1[..., (n - 1) * k:n * k] == 0)
        assert torch.all(integ.stages[1][0].attn.last_weights[0, ..., n - 1] == 0)
        w3 = integ.stages[2][0].attn.last_weights[0].view(cfg.heads, n * n, n, n)
        assert torch.all(w3[..., n - 1, :] == 0) and torch.all(w3[..., :, n - 1] == 0)


@pytest.mark.parametrize("order", INTEGRATION_ORDERS)
def test_scene_ignores_padded_person_contents(order):
    cfg = tiny_config(integration=order)
    integ = Integration(cfg).double().eval()
    streams, rel, inter, sub = make_streams(cfg)
    scene, persons = integ(streams, rel, inter, sub)
    noisy = dict(streams)
    noisy["P"] = streams["P"].clone()
    noisy["P"][0, -1] = 50.0
    rel2 = rel.clone()
    rel2[0, -1] = 7.0
    rel2[0, :, -1] = -7.0
    scene2, persons2 = integ(noisy, rel2, inter, sub)
    assert torch.allclose(scene, scene2, atol=1e-12)
    assert torch.allclose(persons[0, :-1], persons2[0, :-1], atol=1e-12)


def test_integration_gradients():
    torch.manual_seed(6)
    cfg = tiny_config()
    integ = Integration(cfg).double().eval()
    streams, rel, inter, sub = make_streams(cfg, b=1)
    target = torch.randn(8, dtype=torch.float64)

    def loss():
        scene, persons = integ(streams, rel, inter, sub)
        return ((scene[0] - target) ** 2).sum() + persons.pow(2).sum()
    tensors = {"S": streams["S"], "P": streams["P"], "relation": rel, "interaction": inter,
               "scene_token": integ.scene_token, "stage1.q": integ.stages[0][0].attn.q.weight,
               "stage4.ffn": integ.stages[3][0].ffn.w2.weight}
    errs = check_gradients(loss, tensors, max_entries=30)
    assert max(errs.values()) < 1e-4, errs


def test_heads():
    heads = Heads(8, 3, 2).double()
    with torch.no_grad():
        heads.group.weight.zero_()
        heads.indiv.weight.zero_()
    g, i = classify(torch.zeros(2, 8, dtype=torch.float64), torch.zeros(2, 4, 8, dtype=torch.float64), heads)
    assert torch.equal(g, torch.zeros(2, 3, dtype=torch.float64)) and i.shape == (2, 4, 2)
    assert Heads(8, 5, 0)(torch.zeros(1, 8), torch.zeros(1, 4, 8))[1].shape == (1, 4, 0)


def test_volleyball_head_shapes():
    cfg = ModelConfig.volleyball()
    heads = Heads(cfg.d_model, cfg.num_group_classes, cfg.num_indiv_classes)
    g, i = heads(torch.randn(1, cfg.d_model), torch.randn(1, cfg.max_persons, cfg.d_model))
    assert g.shape == (1, 8) and i.shape == (1, 12, 9)
    assert torch.equal(g.argmax(-1), (g + 3.5).argmax(-1))
