"""Meta-gradient transferable adversarial attacks on tiny convnets."""

from .attacks import (
    METHOD_PRESETS,
    AttackBudget,
    DimTransform,
    MethodConfig,
    RunLog,
    SimAggregation,
    TimTransform,
    fgsm,
    get_method,
    run_attack,
)
from .data import (
    EvalDataset,
    filter_correct,
    load_cifar10_subset,
    make_synthetic,
)
from .errors import (
    ConfigError,
    DatasetFormatError,
    IntegrityError,
    ModelFormatError,
    ShapeError,
    TrainingDivergenceError,
)
from .evaluation import (
    Arm,
    ResultRow,
    ResultTable,
    ablation,
    budget_sweep,
    cosine_analysis,
    emit_csv,
    evaluate_arm,
    evaluate_arms,
    generate_adversarial,
    hyperparam_sweep,
    min_noise_search,
    min_noise_table,
    parse_csv,
)
from .meta import (
    MgaaConfig,
    ensemble_baseline,
    mgaa_attack,
    mgaa_without_meta_train,
)
from .networks import ARCHITECTURES, ArchitectureSpec
from .zoo import (
    DESK_ZOO_MEMBERS,
    ConvNetClassifier,
    ModelZoo,
    ZooMember,
    build_zoo,
)

__version__ = "0.1.0"
