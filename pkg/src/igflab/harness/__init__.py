"""Experiment orchestration: configs, dataset ingestion, run directories and grids."""
from .config import (
    AttackConfig,
    ConfigError,
    DataConfig,
    ExperimentConfig,
    MetricConfig,
    ModelConfig,
    ScenarioConfig,
    UnlearnConfig,
    config_from_dict,
    desk_config,
    load_config,
    reference_config,
)
from .datasets import DATASETS, DatasetUnavailable, data_dir, load_dataset, synthetic
from .grid import emit_grid, emit_tiles, grid_array, tile
from .pipeline import (
    RunResult,
    StageError,
    baseline_mse,
    compare_reductions,
    evaluate_defense,
    load_recon,
    load_run_config,
    make_split,
    afu_config,
    unlearn_method_meta,
    unlearn_model,
    prepare_data,
    run_dir_for,
    run_pipeline,
    verify_run,
)
