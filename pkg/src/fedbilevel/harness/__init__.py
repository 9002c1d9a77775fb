from .checks import Check, ConstantsReport, check_constants
from .config import (
    ConfigError,
    ConfigNotFound,
    ConfigSyntaxError,
    ConfigValueError,
    ExperimentConfig,
    from_dict,
    parse_config,
    parse_string,
    save_config,
    to_toml,
)
from .experiments import (
    ComparisonReport,
    ExperimentResult,
    bias_study,
    build_hyperclean,
    build_problem,
    compare_variants,
    hyperclean_demo,
    repetition_seed,
    run_experiment,
    worker_count,
)
