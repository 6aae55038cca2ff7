"""Dense 3D tracking and pseudo-depth from a single clip via a canonical scene volume."""

from .autodiff import Node, ParamStore, adam_step, backward, constant, forward, parameter
from .fields import (
    CanonicalField, MappingNetwork, ModelConfig, SceneModel, load_checkpoint,
    map_from_canonical, map_to_canonical, positional_encode, query_canonical, save_checkpoint,
)
from .renderer import (
    Camera, cast_ray, cast_rays, composite_weights, project, render_color,
    render_correspondence, render_depth, render_depth_map, render_rays,
)
from .training import TrainConfig, sample_batch, total_loss, train
from .tracking import (
    TrackSet, depth_metrics, run_ablation, track_from_mask, tracking_accuracy,
)

__version__ = "0.1.0"
