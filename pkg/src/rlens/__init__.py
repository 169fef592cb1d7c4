"""Gradient-average transformer relevancy (GATR) and attribution evaluation
for waveform deepfake detectors, with a toy numpy transformer and a synthetic
artifact-planting dataset."""

from ._util import ConfigError, DataError, DegenerateError, RlensError
from .analysis import (CategoryMap, energy_tertiles, energy_vad, load_category_file,
                       localization, normalize_rcq, rcq, region_categories, rma, rra)
from .attribution import (Heatmap, explain, gatr, grad_cam, gradient_row_weights, gradient_shap,
                          interpolate_to_waveform, peak_normalize_heatmap, relevancy_update,
                          weighted_row_average)
from .metrics import eer, faithfulness, perturbation_test, select_fraction
from .model import (ModelConfig, ModelParams, TrainHyper, backward_from_class, finite_diff_check,
                    forward, init_params, load_checkpoint, predict_proba, save_checkpoint, train)
from .signal import (GeneratorSpec, Utterance, Waveform, apply_heatmap, load_dataset, noise_mask,
                     peak_normalize, save_dataset, synth_partial, synth_split, synth_utterance)

__version__ = "0.1.0"
