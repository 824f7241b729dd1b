"""skewlab: a computational laboratory for twisted skew products on T^4."""

from .torus import (
    BasePoint,
    FiberPoint,
    HyperbolicMatrix,
    SplitVector,
    TorusPoint,
    base_apply_power,
    eigen_data,
    recompose,
    reduce_angle,
    split_vector,
    torus_dist,
)
from .skewmap import (
    MapParams,
    PerturbationSpec,
    derivative,
    forward,
    inverse,
    involution_defect,
    make_params,
    perturb,
    standard_map,
)
from .cones import (
    ConeSpec,
    RegionSpec,
    center_expansion_sweep,
    check_center_expansion,
    cone_invariance_sweep,
    in_good_region,
)
from .bundles import (
    invariant_direction,
    lyapunov_batch,
    lyapunov_spectrum,
    transversality_check,
    volume_defect,
)
from .curves import (
    BoxSet,
    CenterCurve,
    extract_cone_subcurves,
    iterate_center_curve,
    make_center_curve,
)
from .leaves import (
    LeafSegment,
    good_fraction,
    grow_leaf_segment,
    heteroclinic_center,
    holonomy,
    holonomy_defect_grid,
    leaf_point,
    leaf_seed_segment,
    line_parameter,
    persistent_good_point,
    sweep_rate,
    sweep_threshold,
)
from .mixing import (
    MixingReport,
    MixingStageError,
    mixing_intersection,
    mixing_threshold,
)

__version__ = "0.1.0"

__all__ = [
    "BasePoint", "FiberPoint", "HyperbolicMatrix", "SplitVector", "TorusPoint",
    "base_apply_power", "eigen_data", "recompose", "reduce_angle",
    "split_vector", "torus_dist",
    "MapParams", "PerturbationSpec", "derivative", "forward", "inverse",
    "involution_defect", "make_params", "perturb", "standard_map",
    "ConeSpec", "RegionSpec", "center_expansion_sweep",
    "check_center_expansion", "cone_invariance_sweep", "in_good_region",
    "invariant_direction", "lyapunov_batch", "lyapunov_spectrum",
    "transversality_check", "volume_defect",
    "BoxSet", "CenterCurve", "extract_cone_subcurves", "iterate_center_curve",
    "make_center_curve",
    "LeafSegment", "good_fraction", "grow_leaf_segment", "heteroclinic_center",
    "holonomy", "holonomy_defect_grid", "leaf_point", "leaf_seed_segment",
    "line_parameter", "persistent_good_point", "sweep_rate", "sweep_threshold",
    "MixingReport", "MixingStageError", "mixing_intersection",
    "mixing_threshold",
    "__version__",
]
