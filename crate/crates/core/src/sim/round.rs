use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::map::{area_of_position, AreaDef, MapSpec, Team, BORDER_Y};
use crate::error::{Error, Result};

pub const N_AGENTS: usize = 10;

/// Walking speed in cells per second.
const SPEED: f64 = 10.0;
const PHASE_MIN_S: f64 = 12.0;
const PHASE_MAX_S: f64 = 24.0;
/// Upper bound on the agents sent to a target's support area each phase.
const MAX_SUPPORT: usize = 2;
pub(crate) const FOV_HALF: f64 = PI / 3.0;
const FLASH_RADIUS: f64 = 10.0;
const FLASH_S: f64 = 2.0;
pub(crate) const SMOKE_RADIUS: f64 = 3.0;
pub(crate) const SMOKE_S: f64 = 8.0;
/// Keeps continuous positions strictly inside their rectangles.
const INSET: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub tickrate: u32,
    pub duration_s: f64,
    /// Flash and smoke throws per second per team.
    pub flash_rate: f64,
    pub vis_radius: f64,
    /// Standard deviation (cells) of the ego-position noise in observations.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tickrate: 64,
            duration_s: 44.0,
            flash_rate: 0.02,
            vis_radius: 10.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Small rounds for laptop-scale experiments.
    pub fn desk() -> Self {
        Self {
            tickrate: 16,
            duration_s: 20.0,
            ..Self::default()
        }
    }

    pub fn n_ticks(&self) -> usize {
        (self.tickrate as f64 * self.duration_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.tickrate == 0 || self.tickrate > u16::MAX as u32 {
            return Err(Error::Config(format!("tickrate {} out of range", self.tickrate)));
        }
        if !(self.duration_s > 0.0) || !self.flash_rate.is_finite() || self.flash_rate < 0.0 {
            return Err(Error::Config("duration_s must be > 0 and flash_rate >= 0".into()));
        }
        if !(self.vis_radius > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("vis_radius must be > 0 and noise_std >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent_id: u8,
    pub team: Team,
    /// Continuous position in cell units.
    pub pos: [f32; 2],
    /// Radians, `atan2(dy, dx)`.
    pub facing: f32,
    pub area: u8,
    /// First tick at which the agent can see again, capped at the round
    /// length; 0 when the agent is not blind at this tick.
    pub blind_until: u32,
}

impl AgentState {
    pub fn is_blind(&self, tick: usize) -> bool {
        (tick as u32) < self.blind_until
    }

    pub fn pos64(&self) -> (f64, f64) {
        (self.pos[0] as f64, self.pos[1] as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Flash,
    Smoke,
    Engage,
}

impl EventKind {
    pub fn code(self) -> u8 {
        match self {
            EventKind::Flash => 0,
            EventKind::Smoke => 1,
            EventKind::Engage => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(EventKind::Flash),
            1 => Some(EventKind::Smoke),
            2 => Some(EventKind::Engage),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u32,
    pub kind: EventKind,
    pub origin: [f32; 2],
    pub affected: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRound {
    pub match_id: u32,
    pub round_id: u32,
    pub tickrate: u16,
    pub map_name: String,
    /// `ticks[t][agent]`, all ten agents at every tick.
    pub ticks: Vec<Vec<AgentState>>,
    pub events: Vec<Event>,
}

impl TrajectoryRound {
    pub fn n_ticks(&self) -> usize {
        self.ticks.len()
    }

    pub fn state(&self, tick: usize, agent: usize) -> &AgentState {
        &self.ticks[tick][agent]
    }

    /// Checks the structural invariants a valid round must satisfy.
    pub fn validate(&self, map: &MapSpec) -> Result<()> {
        for (t, snap) in self.ticks.iter().enumerate() {
            if snap.len() != N_AGENTS {
                return Err(Error::domain(format!("tick {t} has {} agents", snap.len())));
            }
            for (i, s) in snap.iter().enumerate() {
                if s.agent_id as usize != i || s.team != Team::of_agent(i) {
                    return Err(Error::domain(format!("tick {t}: agent slot {i} mislabelled")));
                }
                let area = area_of_position(map, s.pos64())?;
                if area != s.area {
                    return Err(Error::domain(format!(
                        "tick {t} agent {i}: area {} but position lies in {area}",
                        s.area
                    )));
                }
            }
        }
        for e in &self.events {
            if e.tick as usize >= self.ticks.len() || e.affected.iter().any(|&a| a as usize >= N_AGENTS) {
                return Err(Error::domain(format!("event out of range: {e:?}")));
            }
        }
        Ok(())
    }
}

/// Rewrites every nonzero `blind_until` to the end of its contiguous blind
/// run, so a re-flash before recovery extends the whole run.
pub(crate) fn close_blind_runs(ticks: &mut [Vec<AgentState>]) {
    let n = ticks.len() as u32;
    let agents = ticks.first().map_or(0, |s| s.len());
    for agent in 0..agents {
        let mut until = n;
        for t in (0..ticks.len()).rev() {
            let s = &mut ticks[t][agent];
            if s.blind_until > 0 {
                s.blind_until = until;
            } else {
                until = t as u32;
            }
        }
    }
}

struct TeamPlan {
    phase_end: usize,
    target: u8,
}

struct Walker {
    pos: (f64, f64),
    waypoint: (f64, f64),
    speed: f64,
    sway_phase: f64,
    sway_rate: f64,
    facing: f64,
    blind_until: usize,
}

fn point_in(rng: &mut ChaCha8Rng, a: &AreaDef) -> (f64, f64) {
    (
        rng.gen_range(a.x0 as f64 + INSET..a.x1 as f64 - INSET),
        rng.gen_range(a.y0 as f64 + INSET..a.y1 as f64 - INSET),
    )
}

/// The same-side neighbour of `target` with the lowest id.
pub(crate) fn support_area(map: &MapSpec, target: u8, side: Team) -> Option<u8> {
    map.neighbours(target).iter().copied().find(|&a| map.area(a).side == side)
}

fn clamp_to_side(p: (f64, f64), side: Team, map: &MapSpec) -> (f64, f64) {
    let w = map.grid_width as f64;
    let h = map.grid_height as f64;
    let (lo, hi) = match side {
        Team::CT => (INSET, BORDER_Y - INSET),
        Team::T => (BORDER_Y + INSET, h - INSET),
    };
    (p.0.clamp(INSET, w - INSET), p.1.clamp(lo, hi))
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        2.0 * PI - d
    } else {
        d
    }
}

/// Whether a segment passes within `r` of `c`.
pub(crate) fn segment_hits_disc(a: (f64, f64), b: (f64, f64), c: (f64, f64), r: f64) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((c.0 - a.0) * dx + (c.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (px, py) = (a.0 + t * dx - c.0, a.1 + t * dy - c.1);
    px * px + py * py <= r * r
}

/// Viewer at `from` facing `facing` sees `to`: in range, inside the view
/// cone, and not behind an active smoke.
pub(crate) fn in_sight(
    from: (f64, f64),
    facing: f64,
    to: (f64, f64),
    radius: f64,
    smokes: &[(f64, f64)],
) -> bool {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    if dx * dx + dy * dy > radius * radius {
        return false;
    }
    if dx == 0.0 && dy == 0.0 {
        return true;
    }
    if angle_diff(dy.atan2(dx), facing) > FOV_HALF {
        return false;
    }
    !smokes.iter().any(|&c| segment_hits_disc(from, to, c, SMOKE_RADIUS))
}

/// Simulates one round: each team follows a shared per-phase target area,
/// members walk to individual waypoints in or next to it, and utility
/// throws blind or block sight near the mid-map border.
pub fn generate_round(map: &MapSpec, cfg: &SimConfig, seed: u64) -> TrajectoryRound {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ticks = cfg.n_ticks();
    let dt = 1.0 / cfg.tickrate as f64;
    let sides = [Team::T, Team::CT];

    let territory: Vec<Vec<u8>> = sides
        .iter()
        .map(|&s| map.territory(s).map(|a| a.id).collect())
        .collect();
    let spawn = [map.spawn_t, map.spawn_ct];

    let mut walkers: Vec<Walker> = (0..N_AGENTS)
        .map(|i| {
            let team = Team::of_agent(i);
            let pos = point_in(&mut rng, map.area(spawn[team.index()]));
            Walker {
                pos,
                waypoint: pos,
                speed: SPEED * rng.gen_range(0.85..1.15),
                sway_phase: rng.gen_range(0.0..2.0 * PI),
                sway_rate: rng.gen_range(0.3..0.9),
                facing: if team == Team::T { -PI / 2.0 } else { PI / 2.0 },
                blind_until: 0,
            }
        })
        .collect();
    let mut plans: Vec<TeamPlan> = sides
        .iter()
        .map(|s| TeamPlan {
            phase_end: 0,
            target: spawn[s.index()],
        })
        .collect();

    let mut ticks = Vec::with_capacity(n_ticks);
    let mut events = Vec::new();
    let mut smokes: Vec<((f64, f64), usize)> = Vec::new();
    let mut engaged = [[false; N_AGENTS]; N_AGENTS];

    for tick in 0..n_ticks {
        // Team plans: new target and per-agent waypoints at phase boundaries.
        for side in sides {
            let plan = &mut plans[side.index()];
            if tick < plan.phase_end {
                continue;
            }
            let terr = &territory[side.index()];
            let choices: Vec<u8> = terr.iter().copied().filter(|&a| a != plan.target).collect();
            plan.target = choices[rng.gen_range(0..choices.len())];
            let dur = rng.gen_range(PHASE_MIN_S..PHASE_MAX_S);
            plan.phase_end = tick + (dur * cfg.tickrate as f64).round().max(1.0) as usize;
            let support = support_area(map, plan.target, side);
            // One or two agents hold the support area, the rest the target.
            let mut members: Vec<usize> = side.agents().collect();
            let n_support = if support.is_some() { rng.gen_range(1..=MAX_SUPPORT) } else { 0 };
            for k in 0..members.len() {
                let j = rng.gen_range(k..members.len());
                members.swap(k, j);
            }
            for (rank, &i) in members.iter().enumerate() {
                let area = match support {
                    Some(s) if rank < n_support => s,
                    _ => plan.target,
                };
                walkers[i].waypoint = point_in(&mut rng, map.area(area));
            }
        }

        // Motion and facing.
        for (i, w) in walkers.iter_mut().enumerate() {
            let team = Team::of_agent(i);
            let (dx, dy) = (w.waypoint.0 - w.pos.0, w.waypoint.1 - w.pos.1);
            let dist = (dx * dx + dy * dy).sqrt();
            let step = w.speed * dt;
            let jitter = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            if dist > step {
                w.pos = (
                    w.pos.0 + dx / dist * step + jitter.0 * step,
                    w.pos.1 + dy / dist * step + jitter.1 * step,
                );
                w.facing = dy.atan2(dx);
            } else {
                w.pos = (w.waypoint.0 + jitter.0 * step, w.waypoint.1 + jitter.1 * step);
                let base = if team == Team::T { -PI / 2.0 } else { PI / 2.0 };
                let t = tick as f64 * dt;
                w.facing = base + 0.9 * (w.sway_rate * t + w.sway_phase).sin();
            }
            w.pos = clamp_to_side(w.pos, team, map);
        }

        smokes.retain(|&(_, until)| tick < until);

        // Utility: one Bernoulli draw per team per tick for each kind.
        for side in sides {
            for kind in [EventKind::Flash, EventKind::Smoke] {
                if !rng.gen_bool((cfg.flash_rate * dt).clamp(0.0, 1.0)) {
                    continue;
                }
                let thrower = side.agents().start + rng.gen_range(0..5);
                let depth = rng.gen_range(1.0..5.0);
                let oy = match side {
                    Team::T => BORDER_Y - depth,
                    Team::CT => BORDER_Y + depth,
                };
                let ox = (walkers[thrower].pos.0 + rng.gen_range(-6.0..6.0))
                    .clamp(INSET, map.grid_width as f64 - INSET);
                let origin = (ox, oy);
                let active: Vec<(f64, f64)> = smokes.iter().map(|s| s.0).collect();
                let affected: Vec<u8> = match kind {
                    EventKind::Flash => (0..N_AGENTS)
                        .filter(|&j| in_sight(walkers[j].pos, walkers[j].facing, origin, FLASH_RADIUS, &active))
                        .map(|j| j as u8)
                        .collect(),
                    _ => (0..N_AGENTS)
                        .filter(|&j| {
                            let (dx, dy) = (walkers[j].pos.0 - ox, walkers[j].pos.1 - oy);
                            dx * dx + dy * dy <= SMOKE_RADIUS * SMOKE_RADIUS
                        })
                        .map(|j| j as u8)
                        .collect(),
                };
                match kind {
                    EventKind::Flash => {
                        let until = tick + (FLASH_S * cfg.tickrate as f64).round() as usize;
                        for &j in &affected {
                            let w = &mut walkers[j as usize];
                            w.blind_until = w.blind_until.max(until);
                        }
                    }
                    _ => smokes.push((origin, tick + (SMOKE_S * cfg.tickrate as f64).round() as usize)),
                }
                events.push(Event {
                    tick: tick as u32,
                    kind,
                    origin: [ox as f32, oy as f32],
                    affected,
                });
            }
        }

        // Engagements: an enemy pair that newly comes into sight.
        let active: Vec<(f64, f64)> = smokes.iter().map(|s| s.0).collect();
        for i in Team::T.agents() {
            for j in Team::CT.agents() {
                let (a, b) = (&walkers[i], &walkers[j]);
                let sees = |v: &Walker, o: &Walker| {
                    v.blind_until <= tick && in_sight(v.pos, v.facing, o.pos, cfg.vis_radius, &active)
                };
                let now = sees(a, b) || sees(b, a);
                if now && !engaged[i][j] {
                    events.push(Event {
                        tick: tick as u32,
                        kind: EventKind::Engage,
                        origin: [((a.pos.0 + b.pos.0) / 2.0) as f32, ((a.pos.1 + b.pos.1) / 2.0) as f32],
                        affected: vec![i as u8, j as u8],
                    });
                }
                engaged[i][j] = now;
            }
        }

        let snapshot = walkers
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let pos = [w.pos.0 as f32, w.pos.1 as f32];
                let area = area_of_position(map, (pos[0] as f64, pos[1] as f64))
                    .expect("walkers are clamped inside the map");
                AgentState {
                    agent_id: i as u8,
                    team: Team::of_agent(i),
                    pos,
                    facing: w.facing.rem_euclid(2.0 * PI) as f32,
                    area,
                    blind_until: if w.blind_until > tick {
                        w.blind_until.min(n_ticks) as u32
                    } else {
                        0
                    },
                }
            })
            .collect();
        ticks.push(snapshot);
    }

    close_blind_runs(&mut ticks);
    TrajectoryRound {
        match_id: 0,
        round_id: 0,
        tickrate: cfg.tickrate as u16,
        map_name: map.name.clone(),
        ticks,
        events,
    }
}
