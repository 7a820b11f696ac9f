//! Deterministic two-team tactical simulator and egocentric observations.

mod map;
mod observe;
mod round;

pub use map::{area_of_position, build_default_map, AreaDef, MapSpec, Team, BORDER_Y, GRID, N_AREAS};
pub use observe::{
    occupancy, render_observation, ObsConfig, ObservationFrame, AREA_ONEHOT, EGO, EVENTS, FRAME_DIM,
    LEAK, OBS_DIM, PHASE, VISIBILITY,
};
pub(crate) use round::close_blind_runs;
pub use round::{generate_round, AgentState, Event, EventKind, SimConfig, TrajectoryRound, N_AGENTS};
