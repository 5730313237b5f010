"""Training-free geometric refinement of per-point vision-language features."""

from .aggregation import (PipelineResult, anchor_project, global_aggregate,
                          local_aggregate, pool_to_superpoints, run_pipeline,
                          superpoint_to_point)
from .anchors import (AnchorSet, Bandwidths, assign_points, build_anchor_bank,
                      estimate_bandwidth, meanshift, nms_centroids)
from .cloud import (NeighborIndex, PointCloud, build_index, estimate_normals,
                    fps_sample, knn_query, radius_query)
from .config import PipelineConfig, RunConfig, load_run_config, preset
from .fpfh import FpfhParams, compute_fpfh, compute_spfh
from .superpoints import (SuperpointState, compute_mu, init_seeds, ot_assign,
                          refine, scale_constants, update_seeds)
from .tasks import (TextFeatures, ViewProjection, accuracy, classify,
                    fuse_views, miou, segment)
from .transport import Coupling, sh_normalize, sinkhorn_plan, softmax_rows

__version__ = "0.1.0"
