"""Routed sparse attention for video diffusion transformers, at desk scale."""

from .coreset import BucketGeometry, bcs_plan, bcs_pool, coreset_attention, unpool_scatter
from .grid import (ProjectionSet, VideoGrid, flatten_index, spatial_distance,
                   timestep_embedding, unflatten_index)
from .reference import full_attention, masked_attention, recall_by_nearest
from .router import (Branch, compute_gates, route_hard, routed_block_forward_hard,
                     routed_block_forward_soft)
from .sliding import (TileGeometry, sliding_attention, sliding_tile_mask_1d,
                      sliding_tile_mask_3d, tile_center_1d)

__version__ = "0.1.0"
