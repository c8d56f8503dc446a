from .expr import (
    Expr,
    ParseError,
    DomainError,
    DerivativeOrderError,
    parse,
    evaluate,
    diff,
    nth_derivative_at,
    format_expr,
    free_vars,
    K_MAX_DEFAULT,
)
from .model import (
    CascadeSystem,
    ControlAffineSystem,
    LinearizationResult,
    InvalidSystemError,
    SystemFormatError,
    validate,
    as_control_affine,
    linearize_at,
    observability_matrix,
    preset,
    preset_names,
    load_system,
    load_system_file,
)
from .lie import (
    ObservableWord,
    ObservableCache,
    WordLengthError,
    lie_derivative,
    iterated_observable,
    evaluate_word,
    enumerate_words,
    nested_lie_along_affine,
    L_MAX_DEFAULT,
)
from .obsv import (
    PeriodicityVerdict,
    SystemPeriodicityReport,
    SeparationCertificate,
    RankReport,
    cascade_lflg,
    cascade_lglflg,
    word_lflg,
    word_lglflg,
    detect_period,
    is_aperiodic_system,
    find_separating_observable,
    local_rank,
    rank_condition_value,
)
from .sim import (
    BlowUpError,
    EquilibriumPremiseError,
    FeedbackLaw,
    InputSignal,
    Trajectory,
    DistinguishabilityResult,
    integrate,
    parse_input_spec,
    indistinguishability_experiment,
    distinguishability_experiment,
    output_feedback_equilibria_check,
)
from .gramian import (
    GramianReport,
    empirical_gramian,
    input_sweep,
    shift_comparison_gramian,
)

__version__ = "0.1.0"
