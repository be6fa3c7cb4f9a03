"""Part-wise articulated neural occupancy fields.

Bodies are posed by forward kinematics and linear blend skinning; per-part
canonicalized clouds feed a shared point-set encoder, a shared box-gated
decoder scores queries, and the max over parts composes the body occupancy.
Includes training, iso-surfacing, metrics, and gradient-based pose untangling.
"""

from . import meshio
from .body import (CapsuleBody, KinematicTree, ParametricBody, body_digest,
                   forward_kinematics, load_body, make_capsule_body, regress_joints,
                   save_body, shape_from_transforms, skin_vertices, validate_transforms)
from .errors import DivergenceError, InputError, NumericError, StaleCodesError
from .field import (FieldConfig, FieldState, OccupancyField, build_state,
                    compose_occupancy, decode_part, encode_part, field_forward,
                    field_gradients, load_checkpoint, refresh_codes, save_checkpoint)
from .metrics import (IoUReport, LabeledMesh, bench_throughput,
                      count_penetrations, count_self_intersecting_triangles,
                      extract_mesh, iou, iou_report)
from .parts import (PartBox, PartDecomposition, box_contains, boxes_overlap,
                    canonicalize_cloud, decompose_holistic, decompose_parts,
                    fit_body_boxes, fit_part_box, sample_part_cloud)
from .training import (CapsuleOracle, MeshOracle, TrainConfig, TrainResult,
                       label_occupancy, label_points, mse_loss, random_poses,
                       sample_training_queries, train)
from .untangle import (ResolveConfig, ResolveResult, detect_candidates,
                       displace_scan, resolve_scene_collisions,
                       resolve_self_intersections, sample_overlap_points,
                       scene_collision_loss, self_intersection_loss)

__version__ = "0.1.0"
