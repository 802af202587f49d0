import numpy as np
import pytest
import torch

from dynamicformer.features import collate, featurize
from dynamicformer.gradcheck import check_gradients
from dynamicformer.model import DynamicFormer
from dynamicformer.training import loss_fn

from conftest import random_clip, tiny_config


def batch_for(clips, cfg, pad=True):
    return collate([featurize(c, cfg, pad=pad) for c in clips], torch.float64)


@pytest.mark.parametrize("n_real", [1, 2, 4])
def test_padding_matches_natural_size(n_real):
    cfg = tiny_config(max_persons=5)
    model = DynamicFormer(cfg).double().eval()
    clip = random_clip(np.random.default_rng(n_real), t=3, n=n_real, k=4, e=1)
    natural = model(batch_for([clip], cfg, pad=False))
    padded = model(batch_for([clip], cfg))
    assert torch.allclose(natural["group_logits"], padded["group_logits"], atol=1e-5)
    assert torch.allclose(natural["indiv_logits"][0], padded["indiv_logits"][0, :n_real], atol=1e-5)


def test_scene_invariant_to_padded_slot_permutation(rng):
    cfg = tiny_config(max_persons=6)
    model = DynamicFormer(cfg).double().eval()
    batch = batch_for([random_clip(rng, t=3, n=3, k=4, e=1)], cfg)
    base = model(batch)["group_logits"]
    for perm in ([0, 1, 2, 5, 3, 4], [0, 1, 2, 4, 5, 3]):
        shuffled = {k: v.clone() for k, v in batch.items()}
        for name in ("keypoints", "keypoint_valid", "person_mask", "subgroups", "individual_labels"):
            shuffled[name] = batch[name][:, perm]
        assert torch.allclose(model(shuffled)["group_logits"], base, atol=1e-12)


def test_batch_items_independent(rng):
    cfg = tiny_config()
    model = DynamicFormer(cfg).double().eval()
    clips = [random_clip(rng, t=3, n=3, k=4, e=1) for _ in range(3)]
    together = model(batch_for(clips, cfg))["group_logits"]
    alone = torch.cat([model(batch_for([c], cfg))["group_logits"] for c in clips])
    assert torch.allclose(together, alone, atol=1e-12)


def test_output_shapes_and_masks(rng):
    cfg = tiny_config(max_persons=4)
    out = DynamicFormer(cfg).double().eval()(batch_for([random_clip(rng, t=3, n=2, k=4, e=1)], cfg))
    assert out["group_logits"].shape == (1, 3)
    assert out["indiv_logits"].shape == (1, 4, 2)
    assert out["relation"].shape == (1, 4, 4, 16)
    assert out["adjacency"].shape == (1, 3, 5, 5)
    assert out["node_mask"].tolist() == [[True, True, False, False, True]]


def test_end_to_end_gradients(rng):
    torch.manual_seed(11)
    cfg = tiny_config()
    model = DynamicFormer(cfg).double().eval()
    batch = batch_for([random_clip(rng, t=3, n=3, k=4, e=1)], cfg)
    batch["keypoints"].requires_grad_(True)

    def loss():
        out = model(batch)
        return loss_fn(out["group_logits"], out["indiv_logits"], batch["group_label"],
                       batch["individual_labels"], batch["person_mask"])
    picks = ["features.unify_keypoint.w1.weight", "dcm.e_pos", "dcm.temporal.0.attn.q.weight",
             "dim.norm.weight", "dim.encoder.attn.v.weight", "integration.stages.2.0.ffn.w1.weight",
             "heads.group.weight"]
    params = dict(model.named_parameters())
    tensors = {"keypoints": batch["keypoints"], **{p: params[p] for p in picks}}
    errs = check_gradients(loss, tensors, max_entries=25)
    assert max(errs.values()) < 1e-4, errs
