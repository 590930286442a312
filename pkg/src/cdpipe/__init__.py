"""cdpipe: bi-temporal change detection at desk scale.

Object-level filtering isolates temporally unique detections, a
reverse-diffusion sampler with hierarchical cross-attention refines the
masked difference map, a softmax head labels each pixel with a change type,
and SSIM-guided fusion aligns the result with local structure. Synthetic
scenes, a classical differencing baseline, metrics, and a CLI are included.
"""

from .classify import argmax_labels, class_head, cross_entropy, focal_loss
from .detect import (Detection, DetectionSet, blob_detect, iou, match_unique,
                     rasterize_masks)
from .diffuse import (NoiseSchedule, attention, build_contexts, forward_noise,
                      hierarchical_attention, initial_difference,
                      make_schedule, reverse_step, sample)
from .denoiser import DenoiserParams, denoise, init_denoiser_params
from .errors import CheckpointError, DataError, NumericError
from .evalcli import (MetricsReport, baseline_differencing, cli, confusion,
                      infer, metrics_from_confusion, otsu_threshold)
from .numerics import ParamTensor, avg_pool, conv2d, grad_check, softmax
from .perceptual import fuse, ssim_loss, ssim_map
from .synthdata import Scene, generate_dataset, generate_scene, perturb_detections
from .train import (Config, ModelParams, adam_step, init_model,
                    load_checkpoint, save_checkpoint, surrogate_loss,
                    train_model, unified_loss)

__version__ = "0.1.0"
