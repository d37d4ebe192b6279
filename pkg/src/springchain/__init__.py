"""Mass-spring-damper car-following chains.

Delayed nonlinear simulation, plant/string-stability analysis over parameter
grids, and real-time square-root recursive least-squares identification of
driving parameters from trajectory data.
"""

__version__ = "0.1.0"

from .model import (
    ChainState,
    ConstantGhost,
    FleetScenario,
    GhostSignal,
    RecordedGhost,
    SinusoidGhost,
    VehicleParams,
    WhiteNoiseGhost,
    eom_rhs,
    equilibrium,
    from_perturbation,
    spacing_policy,
    to_perturbation,
)
from .simulate import (
    HistoryBuffer,
    SimulationDiverged,
    TrajectorySet,
    export_trajectories,
    make_ghost,
    read_trajectory_table,
    simulate,
)
from .stability import (
    CellClass,
    GridSpec,
    LinearizedSystem,
    StabilityMap,
    export_stability_map,
    freq_response,
    linearize,
    plant_margin,
    plant_stable,
    string_stable,
    sweep,
)
from .identify import (
    EstimatorState,
    IdentHyperParams,
    PredictionReport,
    RegressorSample,
    batch_wls_oracle,
    build_regressor,
    predict_and_score,
    srls_iqr_epoch,
    srls_iqr_step,
)
from .dataio import (
    Episode,
    RawTrajectoryTable,
    episode_to_trajectory,
    export_episode,
    extract_episodes,
    load_table,
    lowpass_accel,
    resample,
    validate_episode,
)
