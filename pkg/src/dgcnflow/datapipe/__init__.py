from .cleaning import (
    CAPACITY_PER_LANE,
    CleaningReport,
    EmptyNetworkError,
    ImputationError,
    clean,
    drop_sparse_detectors,
    flag_outliers,
    impute_iterative,
)
from .dataset import DatasetError, PreparedData, RawDataset, load_dataset, prepare, save_dataset
from .features import (
    DEMAND_FEATURES,
    EVACUATION_LAG_HOURS,
    REGULAR_FEATURES,
    EvacuationZone,
    InsufficientHistoryError,
    ZoneConfigError,
    cumulative_evacuation_population,
    extract_demand_features,
    extract_regular_features,
    period_index,
    period_one_hot,
)
from .samples import (
    DegenerateScalerError,
    EmptySampleSetError,
    FlowScaler,
    SampleSet,
    split_indices,
    window_starts,
)
from .series import DetectorSeries, SeriesError, read_csv, write_csv
from .synthetic import (
    ScenarioConfig,
    ScenarioConfigError,
    SyntheticScenario,
    evacuation_surge,
    expected_total_surge,
    generate_synthetic,
)
