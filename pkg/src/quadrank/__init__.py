"""quadrank: learned interest-point detection via transformation-invariant
ranking of image points, with DoG and random-filter baselines and a
repeatability benchmark harness."""

__version__ = "0.1.0"

from .adadelta import AdadeltaState, adadelta_step
from .correspond import (
    CorrespondencePair,
    Quadruple,
    TransformClass,
    WarpSpec,
    make_aligned_pair,
    make_warp_pair,
    sample_epoch,
    sample_quadruple,
    sample_quadruples,
)
from .detect import (
    Detection,
    ResponseVolume,
    compute_volume,
    detect,
    localize_taylor,
    make_dog_model,
    make_random_model,
    nms_3x3x3,
    select_top,
)
from .evaluate import bench_matrix, region_overlap_error, repeatability
from .image import (
    ScalePyramid,
    build_pyramid,
    extract_patch,
    gaussian_blur,
    normalize_patch,
    sample_bilinear,
)
from .imgio import load_image, read_pgm, write_heatmap_pgm, write_pgm
from .model import (
    ResponseModel,
    backward_patch,
    build_model,
    forward_dense,
    forward_patch,
    load_model,
    save_model,
)
from .ranking import agreement, batch_loss, hinge, hinge_grad, misrank_count
from .training import TrainConfig, TrainLog, train, warp_sources
