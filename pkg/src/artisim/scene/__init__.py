from artisim.scene.compose import compose_model, edge_type, reference_poses, unpack_spatial
from artisim.scene.model import (
    DEFAULT_LIMITS,
    JOINT_TYPES,
    ArticulatedModel,
    Joint,
    Link,
    ModelError,
    TreeStructure,
    canonicalize,
    check_arborescence,
    models_equal,
)
from artisim.scene.tree import edge_weights, greedy_tree, softmax_types
from artisim.scene.urdf import URDFError, emit_urdf, parse_urdf

__all__ = [
    "ArticulatedModel",
    "DEFAULT_LIMITS",
    "JOINT_TYPES",
    "Joint",
    "Link",
    "ModelError",
    "TreeStructure",
    "URDFError",
    "canonicalize",
    "check_arborescence",
    "compose_model",
    "edge_type",
    "edge_weights",
    "emit_urdf",
    "greedy_tree",
    "models_equal",
    "parse_urdf",
    "reference_poses",
    "softmax_types",
    "unpack_spatial",
]
