"""Dendrite core detection with an easy/hard two-stage cascade.

The network code runs on a small numpy autodiff engine in ``nn``; the
modules here build the detector (``cpdn``), the synthetic data
(``synthgen``), the cascade (``pipeline``), the patch refiner (``hsr``) and
the scoring (``evaluation``).
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config, parse_config
from .cpdn import CpdnArch, CpdnModel, build_cpdn, forward, load_model, predict, save_model, train_cpdn
from .errors import (CascadeError, CheckpointError, ConfigurationError, DataError, TrainingError,
                     UsageError)
from .evaluation import (MetricsReport, SweepReport, ablation_run, compute_metrics, evaluate_dataset,
                         match_points, metrics_from_counts)
from .hsr import HsrModel, PatchSamplerConfig, build_hsr, refine, sample_training_patches, train_hsr
from .pipeline import (PipelineConfig, StageOutputs, TrainConfig, binarize_heatmap, crop_out,
                       derive_h2, extract_peaks, merge_heatmaps, run_pipeline, train_cascade)
from .synthgen import SynthConfig, SynthSample, generate_dataset, generate_sample, load_split
