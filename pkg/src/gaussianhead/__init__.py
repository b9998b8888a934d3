"""One-shot 3D Gaussian talking-head pipeline.

A single source image's features are lifted to a 3D Gaussian cloud
(visible dual-lifting branch plus a prior-mesh completion branch), rendered
by a differentiable tile-based CPU rasterizer, and animated by
audio-conditioned coarse/fine deformation fields. Everything is numpy with
a small reverse-mode autodiff engine; the compositing kernels are numba.
"""

from .core import (CameraPose, GaussianCloud, GaussianPrimitive, OCCLUDED,
                   VISIBLE, build_covariance, merge_clouds, project_gaussians)
from .autodiff import Tensor, concat
from .encoding import HashGridConfig, encode, make_tables
from .rasterizer import (FeatureImage, RasterConfig, RgbDecoder,
                         rasterize, rasterize_backward, rasterize_forward,
                         render_benchmark)
from .reconstruction import (PriorMesh, ReconConfig, ReconParams,
                             init_feature_plane, reconstruct)
from .motion import (AudioFeatureTrack, MotionFieldParams, apply_deformation,
                     dual_branch_animate, motion_field_forward)
from .objectives import LossWeights, lifting_loss, lmd_anchor, psnr, ssim
from .synthetic import ScenePreset, SceneBundle, synth_scene
from .trainer import (HeadModel, MotionModel, TrainingConfig, animate,
                      train_stage1, train_stage2)

__version__ = "0.1.0"
