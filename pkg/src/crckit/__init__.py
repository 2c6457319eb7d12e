"""Collaborative representation classifiers, patch voting and benchmark tooling."""

from .classifiers import (
    GLOBAL_METHODS,
    METHODS,
    PATCH_METHODS,
    ResidualVector,
    VoteTally,
    class_residuals,
    classify_global,
    classify_patch,
    classify_pprocrc,
    majority_vote,
)
from .dictionary import (
    CovarianceModel,
    FeatureDictionary,
    build_covariance,
    build_dictionary,
    class_submatrix,
)
from .estimators import CRCClassifier, PatchCRCClassifier
from .patching import (
    LocalDictionary,
    PatchGrid,
    TestPatchSet,
    build_local_dictionaries,
    extract_patches,
    patch_count,
)
from .solvers import (
    ClassPriorWeights,
    CoefficientSolution,
    KernelSpec,
    SolverConfig,
    compute_class_priors,
    crc_solve,
    ecrc_solve,
    eprocrc_solve,
    gpcrc_solve,
    kcrc_solve,
    pcrc_patch_solve,
    pprocrc_cost,
    pprocrc_solve,
    procrc_solve,
    rcrc_solve,
)

__version__ = "0.1.0"
