"""Open-set point cloud learning with simulated unknown points and
multi-level unknown scoring."""

from .geometry import PointCloud, RigidTransform, aabb, apply_rigid, farthest_point_sample, knn
from .metrics import MetricsReport, ScoreDump, aupr, auroc, detection_error, fpr_at_tpr
from .network import BackboneConfig, OpenSetNet, maxlogit_score, msp_score, total_loss
from .ups import AugmentedCloud, UpsParams, generate_variant, ups_segmentation, uss_classification

__version__ = "0.1.0"
