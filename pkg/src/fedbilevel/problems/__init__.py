from .base import (
    BilevelProblem,
    DerivedConstants,
    DomainError,
    HeterogeneityReport,
    InvalidArgument,
    ProblemConstants,
    delta_hat_squared,
    hvp_xy_g,
    hvp_yy_g,
    measure_heterogeneity,
    sample_partials,
)
from .data import Dataset, flip_labels, make_logistic_data, partition_dataset, read_csv, write_csv
from .hyperclean import HyperCleanProblem, HyperCleanSpec, make_hyperclean_problem, sigmoid
from .metalearn import MetaLearnSpec, make_metalearn_problem, metalearn_quadratic_spec, random_tasks
from .quadratic import (
    QuadraticBilevelSpec,
    QuadraticProblem,
    exact_hypergradient,
    exact_indirect_grad,
    exact_lower_solution,
    make_quadratic_problem,
    random_quadratic,
    stationary_point,
    upper_value,
)
