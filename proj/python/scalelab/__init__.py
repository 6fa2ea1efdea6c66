"""Desk-scale laboratory for language-model scaling-rule experiments.

The heavy lifting lives in the C++ core (`scalelab._core`); this package
re-exports the operations most useful from Python: compute accounting,
scaling-rule materialization, synthetic corpora, power-law fitting,
crossover detection, and single-run training.
"""

from scalelab._core import (
    ConfigError,
    DataError,
    Model,
    ScalelabError,
    __version__,
    byte_encode,
    chain_entropy,
    chinchilla_tokens,
    config_digest,
    crossover_empirical,
    crossover_fitted,
    detect_instability,
    fit_power_law,
    flops_estimate,
    gen_synthetic,
    load_shard,
    materialize_preset,
    param_count,
    predict_power_law,
    read_ledger,
    rule_presets,
    rule_run_config,
    set_blas_threads,
    train_run,
    width_ladder,
    write_shard,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Model",
    "ScalelabError",
    "__version__",
    "byte_encode",
    "chain_entropy",
    "chinchilla_tokens",
    "config_digest",
    "crossover_empirical",
    "crossover_fitted",
    "detect_instability",
    "fit_power_law",
    "flops_estimate",
    "gen_synthetic",
    "load_shard",
    "materialize_preset",
    "param_count",
    "predict_power_law",
    "read_ledger",
    "rule_presets",
    "rule_run_config",
    "set_blas_threads",
    "train_run",
    "width_ladder",
    "write_shard",
]
