from .config import (ABLATION_VARIANTS, EDGE_INPUT, NODE_INPUT, ModelConfig,
                     ablate)
from .network import (DualStreamDecoder, GraphEncoder, NodeEncoder, Precoder,
                      RoutingPolicy, build_policy)
from .rollout import (DIHEDRAL_TRANSFORMS, EncodedState, RolloutBatch,
                      apply_dihedral, augmentation_limit, augmented_solve,
                      encode, rollout, sample_onehot_assignment)

__all__ = [
    "ABLATION_VARIANTS", "EDGE_INPUT", "NODE_INPUT", "ModelConfig", "ablate",
    "DualStreamDecoder", "GraphEncoder", "NodeEncoder", "Precoder",
    "RoutingPolicy", "build_policy",
    "DIHEDRAL_TRANSFORMS", "EncodedState", "RolloutBatch", "apply_dihedral",
    "augmentation_limit", "augmented_solve", "encode", "rollout",
    "sample_onehot_assignment",
]
