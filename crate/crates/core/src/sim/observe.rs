//! Egocentric feature frames rendered from a round.
//!
//! Frame layout (length [`FRAME_DIM`]):
//!
//! | range   | block      | content                                              |
//! |---------|------------|------------------------------------------------------|
//! | 0..2    | ego        | noisy own position / grid size                       |
//! | 2..4    | ego        | cos, sin of facing                                   |
//! | 4..27   | ego        | own-area one-hot                                     |
//! | 27..32  | visibility | visible agents in own area, then N/E/S/W neighbours  |
//! | 32..34  | event      | blindness intensity, recent-event indicator          |
//! | 34      | phase      | noisy round-time fraction                            |
//! | 35..58  | leak       | exact occupancy of all agents (minimap analogue)     |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::map::{MapSpec, N_AREAS};
use super::round::{in_sight, EventKind, TrajectoryRound, N_AGENTS, SMOKE_S};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const EGO: std::ops::Range<usize> = 0..27;
pub const AREA_ONEHOT: std::ops::Range<usize> = 4..27;
pub const VISIBILITY: std::ops::Range<usize> = 27..32;
pub const EVENTS: std::ops::Range<usize> = 32..34;
pub const PHASE: usize = 34;
/// Width of the observation proper (everything before the leak block).
pub const OBS_DIM: usize = 35;
pub const LEAK: std::ops::Range<usize> = OBS_DIM..OBS_DIM + N_AREAS;
pub const FRAME_DIM: usize = OBS_DIM + N_AREAS;

const RECENT_S: f64 = 1.0;
const PHASE_NOISE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsConfig {
    /// Ego-position noise in cells.
    pub noise_std: f64,
    pub vis_radius: f64,
    pub noise_seed: u64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            noise_std: 1.0,
            vis_radius: 10.0,
            noise_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFrame {
    pub features: Vec<f64>,
}

impl ObservationFrame {
    pub fn visibility(&self) -> &[f64] {
        &self.features[VISIBILITY]
    }

    pub fn events(&self) -> &[f64] {
        &self.features[EVENTS]
    }

    pub fn leak(&self) -> &[f64] {
        &self.features[LEAK]
    }
}

/// Occupancy of all ten agents at `tick`, one flag per area.
pub fn occupancy(round: &TrajectoryRound, tick: usize) -> [f64; N_AREAS] {
    let mut occ = [0.0; N_AREAS];
    for s in &round.ticks[tick] {
        occ[s.area as usize] = 1.0;
    }
    occ
}

/// Direction slot (1..=4 for N, E, S, W) of `to` seen from `from`.
fn direction_slot(map: &MapSpec, from: u8, to: u8) -> usize {
    let (fx, fy) = map.area(from).center();
    let (tx, ty) = map.area(to).center();
    let (dx, dy) = (tx - fx, ty - fy);
    if dy.abs() >= dx.abs() {
        if dy < 0.0 {
            1
        } else {
            3
        }
    } else if dx > 0.0 {
        2
    } else {
        4
    }
}

pub fn render_observation(
    map: &MapSpec,
    round: &TrajectoryRound,
    agent_id: usize,
    tick: usize,
    cfg: &ObsConfig,
) -> Result<ObservationFrame> {
    if agent_id >= N_AGENTS {
        return Err(Error::domain(format!("agent id {agent_id} out of range")));
    }
    if tick >= round.n_ticks() {
        return Err(Error::domain(format!(
            "tick {tick} beyond round of {} ticks",
            round.n_ticks()
        )));
    }
    let me = round.state(tick, agent_id);
    let seed = derive_seed(
        cfg.noise_seed,
        &[round.match_id as u64, round.round_id as u64, agent_id as u64, tick as u64],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut f = vec![0.0; FRAME_DIM];
    let scale = map.grid_width as f64;
    let (x, y) = me.pos64();
    f[0] = (x + cfg.noise_std * unit.sample(&mut rng)) / scale;
    f[1] = (y + cfg.noise_std * unit.sample(&mut rng)) / scale;
    f[2] = (me.facing as f64).cos();
    f[3] = (me.facing as f64).sin();
    f[AREA_ONEHOT.start + me.area as usize] = 1.0;

    let tickrate = round.tickrate as f64;
    let blind = me.is_blind(tick);
    if blind {
        f[EVENTS.start] = 1.0;
    } else {
        let smoke_ticks = (SMOKE_S * tickrate).round() as usize;
        let smokes: Vec<(f64, f64)> = round
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Smoke)
            .filter(|e| (e.tick as usize) <= tick && tick < e.tick as usize + smoke_ticks)
            .map(|e| (e.origin[0] as f64, e.origin[1] as f64))
            .collect();
        for other in &round.ticks[tick] {
            if other.agent_id as usize == agent_id {
                continue;
            }
            if !in_sight((x, y), me.facing as f64, other.pos64(), cfg.vis_radius, &smokes) {
                continue;
            }
            let slot = if other.area == me.area {
                0
            } else if map.are_adjacent(me.area, other.area) {
                direction_slot(map, me.area, other.area)
            } else {
                continue;
            };
            f[VISIBILITY.start + slot] += 0.25;
        }
    }

    let recent = (RECENT_S * tickrate).round() as usize;
    let hit = round.events.iter().any(|e| {
        let t = e.tick as usize;
        t <= tick && tick < t + recent.max(1) && e.affected.contains(&(agent_id as u8))
    });
    f[EVENTS.start + 1] = if hit { 1.0 } else { 0.0 };

    f[PHASE] = tick as f64 / round.n_ticks() as f64 + PHASE_NOISE * unit.sample(&mut rng);
    f[LEAK].copy_from_slice(&occupancy(round, tick));
    Ok(ObservationFrame { features: f })
}
