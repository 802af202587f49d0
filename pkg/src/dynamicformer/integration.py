"""Multi-level integration of keypoint, object, person, interaction, relation
and group tokens through four encoder stages, plus the classification heads.

Stage layout (hierarchical order):

1. keypoint tokens with object tokens
2. person tokens (person + interaction + projected keypoint summary)
3. relation tokens, each fused with projections of its two persons
4. subgroup tokens fused with projected relation summaries, plus a scene token

The linear order runs the same stages but hands each stage's projected output
tokens to the next stage as extra sequence elements instead of fusing them
per entity. The parallel order puts every token into one stack of the same
total depth.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .features import aggregate_group
from .nn import EncoderLayer, FeedForward, glorot_linear, masked_mean

LEVELS = ("keypoint", "object", "person", "interaction", "relation", "group")


class TemporalProject(nn.Module):
    """Concatenate T frames per entity and map T*D -> D with a two-layer perceptron."""

    def __init__(self, num_frames: int, d_model: int):
        super().__init__()
        self.num_frames = num_frames
        self.w1 = glorot_linear(num_frames * d_model, d_model)
        self.w2 = glorot_linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (..., T, D)
        if x.shape[-2] != self.num_frames:
            raise ValueError(f"expected {self.num_frames} frames, got {x.shape[-2]}")
        return self.w2(F.relu(self.w1(x.flatten(-2))))


def temporal_project(stream: torch.Tensor, proj: TemporalProject) -> torch.Tensor:
    return proj(stream)


class Integration(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.config = c
        self.order = c.integration
        d = c.d_model
        self.proj_object = TemporalProject(c.num_frames, d)
        self.proj_keypoint = TemporalProject(c.num_frames, d)
        self.proj_person = TemporalProject(c.num_frames, d)
        self.proj_group = TemporalProject(c.num_frames, d)
        self.relation_in = glorot_linear(2 * d, d)
        self.level_embed = nn.Parameter(torch.zeros(len(LEVELS), d))
        self.scene_token = nn.Parameter(torch.zeros(d))
        nn.init.normal_(self.level_embed, std=0.02)
        nn.init.normal_(self.scene_token, std=0.02)

        def layer():
            return EncoderLayer(d, c.heads, c.ffn_dim, c.dropout, c.residual, c.layer_norm)

        if self.order == "parallel":
            self.stack = nn.ModuleList(layer() for _ in range(4 * c.integration_layers))
        else:
            self.stages = nn.ModuleList(
                nn.ModuleList(layer() for _ in range(c.integration_layers)) for _ in range(4))
            self.lift_keypoint = FeedForward(d, c.ffn_dim)
            self.lift_person = FeedForward(d, c.ffn_dim)
            self.lift_relation = FeedForward(d, c.ffn_dim)

    @staticmethod
    def _run(layers, x, mask):
        for layer in layers:
            x = layer(x, mask)
        return x

    def level_tokens(self, streams: dict[str, torch.Tensor], relation: torch.Tensor,
                     interaction: torch.Tensor) -> dict[str, torch.Tensor]:
        S = streams["S"]
        b, n, k = S.shape[:3]
        lv = self.level_embed
        kp_mask = streams["keypoint_valid"].any(dim=-1) & streams["person_mask"][:, :, None]
        pm = streams["person_mask"]
        return {
            "keypoint": (temporal_project(S, self.proj_keypoint) + lv[0]).reshape(b, n * k, -1),
            "keypoint_mask": kp_mask.reshape(b, n * k),
            "object": temporal_project(streams["O"], self.proj_object) + lv[1],
            "object_mask": streams["object_mask"],
            "person": temporal_project(streams["P"], self.proj_person) + lv[2],
            "interaction": interaction + lv[3],
            "person_mask": pm,
            "relation": self.relation_in(relation) + lv[4],          # B,N,N,D
            "relation_mask": pm[:, :, None] & pm[:, None, :],
            "group": temporal_project(streams["G"], self.proj_group) + lv[5],
            "group_mask": streams["group_mask"],
        }

    def forward(self, streams: dict[str, torch.Tensor], relation: torch.Tensor,
                interaction: torch.Tensor, subgroups: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the scene token (B,D) and person tokens (B,N,D)."""
        tok = self.level_tokens(streams, relation, interaction)
        if self.order == "parallel":
            return self._parallel(tok)
        if self.order == "linear":
            return self._linear(tok)
        return self._hierarchical(tok, subgroups)

    def _scene(self, x, mask):
        b = x.shape[0]
        scene = self.scene_token.expand(b, 1, -1)
        x = torch.cat([x, scene], dim=1)
        mask = torch.cat([mask, mask.new_ones(b, 1)], dim=1)
        return x, mask

    def _hierarchical(self, tok, subgroups):
        b, n = tok["person_mask"].shape
        nk = tok["keypoint"].shape[1]
        k = nk // n
        x1 = torch.cat([tok["keypoint"], tok["object"]], dim=1)
        m1 = torch.cat([tok["keypoint_mask"], tok["object_mask"]], dim=1)
        out1 = self._run(self.stages[0], x1, m1)
        kp = out1[:, :nk].reshape(b, n, k, -1)
        kp_summary, _ = masked_mean(kp, tok["keypoint_mask"].view(b, n, k), dim=2)

        x2 = tok["person"] + tok["interaction"] + self.lift_keypoint(kp_summary)
        persons = self._run(self.stages[1], x2, tok["person_mask"])

        lifted = self.lift_person(persons)
        x3 = tok["relation"] + lifted[:, :, None, :] + lifted[:, None, :, :]
        m3 = tok["relation_mask"]
        out3 = self._run(self.stages[2], x3.reshape(b, n * n, -1), m3.reshape(b, n * n))
        rows, _ = masked_mean(out3.view(b, n, n, -1), m3, dim=2)           # B,N,D
        per_group, _ = aggregate_group(rows.unsqueeze(2), subgroups, tok["group"].shape[1])
        x4 = tok["group"] + self.lift_relation(per_group.squeeze(2))
        x4, m4 = self._scene(x4, tok["group_mask"])
        out4 = self._run(self.stages[3], x4, m4)
        return out4[:, -1], persons

    def _linear(self, tok):
        b, n = tok["person_mask"].shape
        x1 = torch.cat([tok["keypoint"], tok["object"]], dim=1)
        m1 = torch.cat([tok["keypoint_mask"], tok["object_mask"]], dim=1)
        out1 = self._run(self.stages[0], x1, m1)

        x2 = torch.cat([tok["person"] + tok["interaction"], self.lift_keypoint(out1)], dim=1)
        m2 = torch.cat([tok["person_mask"], m1], dim=1)
        persons = self._run(self.stages[1], x2, m2)[:, :n]

        m3 = tok["relation_mask"].reshape(b, n * n)
        x3 = torch.cat([tok["relation"].reshape(b, n * n, -1), self.lift_person(persons)], dim=1)
        out3 = self._run(self.stages[2], x3, torch.cat([m3, tok["person_mask"]], dim=1))[:, :n * n]

        x4 = torch.cat([tok["group"], self.lift_relation(out3)], dim=1)
        x4, m4 = self._scene(x4, torch.cat([tok["group_mask"], m3], dim=1))
        out4 = self._run(self.stages[3], x4, m4)
        return out4[:, -1], persons

    def _parallel(self, tok):
        b, n = tok["person_mask"].shape
        nk, e = tok["keypoint"].shape[1], tok["object"].shape[1]
        parts = [tok["keypoint"], tok["object"], tok["person"], tok["interaction"],
                 tok["relation"].reshape(b, n * n, -1), tok["group"]]
        masks = [tok["keypoint_mask"], tok["object_mask"], tok["person_mask"], tok["person_mask"],
                 tok["relation_mask"].reshape(b, n * n), tok["group_mask"]]
        x, m = self._scene(torch.cat(parts, dim=1), torch.cat(masks, dim=1))
        out = self._run(self.stack, x, m)
        start = nk + e
        persons = out[:, start:start + n] + out[:, start + n:start + 2 * n]
        return out[:, -1], persons


class Heads(nn.Module):
    def __init__(self, d_model: int, num_group: int, num_indiv: int):
        super().__init__()
        self.group = glorot_linear(d_model, num_group)
        self.indiv = glorot_linear(d_model, num_indiv) if num_indiv else None

    def forward(self, scene: torch.Tensor, persons: torch.Tensor):
        group = self.group(scene)
        indiv = self.indiv(persons) if self.indiv is not None else persons.new_zeros(*persons.shape[:2], 0)
        return group, indiv


def classify(scene: torch.Tensor, persons: torch.Tensor, heads: Heads):
    return heads(scene, persons)
