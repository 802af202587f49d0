from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .dcm import DCM, build_relation
from .dim import DIM
from .features import FeatureExtractor
from .integration import Heads, Integration


class DynamicFormer(nn.Module):
    """Keypoint-only group activity model: features -> DCM / DIM -> integration -> heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.features = FeatureExtractor(config)
        self.dcm = DCM(config)
        self.dim = DIM(config)
        self.integration = Integration(config)
        self.heads = Heads(config.d_model, config.num_group_classes, config.num_indiv_classes)

    def forward(self, batch: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        streams = self.features(batch)
        pmask = streams["person_mask"]
        V = self.dcm(streams["P"], pmask)
        R = build_relation(V)
        inter = self.dim(streams["P"], streams["O"], pmask, streams["object_mask"])
        scene, persons = self.integration(streams, R, inter["tokens"], batch["subgroups"])
        group_logits, indiv_logits = self.heads(scene, persons)
        return {
            "group_logits": group_logits,
            "indiv_logits": indiv_logits,
            "person_mask": pmask,
            "composition": V,
            "relation": R,
            "adjacency": inter["adjacency"],
            "raw_adjacency": inter["raw_adjacency"],
            "node_mask": inter["node_mask"],
        }
