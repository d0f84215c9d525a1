"""wattscope: characterize on-board GPU power sensors and correct energy
measurements against a built-in simulator or an external meter."""

from .trace import (
    LoadProfile,
    PowerSample,
    PowerTrace,
    SensorCharacteristics,
    TimeWindow,
    TraceSource,
    TransientClass,
    integrate_energy,
    mean_power,
    mse,
    normalize,
    read_trace,
    run_lengths,
    shift_earlier,
    value_at,
    write_trace,
)
from .simulate import (
    EventMarkers,
    GroundTruthModel,
    PmdConfig,
    PRESETS,
    SensorConfig,
    VirtualExperiment,
    gen_ground_truth,
    get_preset,
    ideal_load_trace,
    query_sensor,
    run_virtual_experiment,
    sample_pmd,
    sample_sensor,
    steady_state_points,
    window_protocol_source,
)
from .characterize import (
    LinearFit,
    NelderMeadResult,
    TransientFit,
    UpdatePeriodEstimate,
    WindowEstimate,
    classify_transient,
    emulate_boxcar,
    estimate_update_period,
    estimate_window,
    estimate_window_protocol,
    fit_load_calibration,
    iterations_for,
    measure_rise_time,
    nelder_mead,
    steady_state_regression,
    window_loss,
)
from .energy import (
    EnergyReport,
    MeasurementPlan,
    RepetitionLog,
    compare_with_reference,
    correct_trace,
    discard_rise,
    measure_energy,
    plan_measurement,
    schedule_shifts,
)
from .ingest import (
    PmdDecodeResult,
    SmiLogRecord,
    align_traces,
    decode_pmd_stream,
    encode_pmd_frame,
    encode_pmd_stream,
    live_sample,
    parse_smi_log,
    parse_smi_records,
)

__version__ = "0.1.0"
