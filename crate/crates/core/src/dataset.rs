//! Windowed, labeled samples and team-grouped contrastive batches.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Tensor;
use crate::seed::derive_seed;
use crate::sim::{
    area_of_position, render_observation, MapSpec, ObsConfig, Team, TrajectoryRound, FRAME_DIM,
    LEAK, N_AGENTS, N_AREAS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_s: f64,
    pub fps: f64,
    pub jitter_s: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_s: 5.0,
            fps: 4.0,
            jitter_s: 0.3,
        }
    }
}

impl WindowConfig {
    pub fn frames(&self) -> usize {
        (self.window_s * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.fps > 0.0 && self.jitter_s >= 0.0) || self.frames() == 0 {
            return Err(Error::Config(format!("invalid window settings {self:?}")));
        }
        Ok(())
    }
}

/// Unique id of a round across matches.
pub fn round_uid(round: &TrajectoryRound) -> u64 {
    (round.match_id as u64) << 32 | round.round_id as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// `[T, FRAME_DIM]`.
    pub features: Tensor,
    pub agent_id: u8,
    pub team: Team,
    pub round_uid: u64,
    pub slot_index: u32,
    pub center_tick: u32,
}

impl Segment {
    pub fn key(&self) -> GroupKey {
        GroupKey {
            round_uid: self.round_uid,
            slot_index: self.slot_index,
            team: self.team,
        }
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Ticks sampled by every frame of each slot. Slot `s` nominally starts at
/// `s * window`; the start is shifted by one jitter draw per slot (shared by
/// all agents) and clamped to the round.
pub fn slot_frame_ticks(
    n_ticks: usize,
    tickrate: u32,
    cfg: &WindowConfig,
    seed: u64,
    uid: u64,
) -> Vec<Vec<usize>> {
    let rate = tickrate as f64;
    let frames = cfg.frames();
    let step = rate / cfg.fps;
    let offsets: Vec<usize> = (0..frames).map(|k| (k as f64 * step).round() as usize).collect();
    let span = offsets.last().map_or(0, |&o| o + 1);
    let window_ticks = (cfg.window_s * rate).round() as usize;
    let duration_s = n_ticks as f64 / rate;
    let n_slots = (duration_s / cfg.window_s + 1e-9).floor() as usize;
    if n_slots == 0 || span > n_ticks {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[uid]));
    (0..n_slots)
        .map(|s| {
            let jitter = if cfg.jitter_s > 0.0 {
                (rng.gen_range(-cfg.jitter_s..=cfg.jitter_s) * rate).round() as i64
            } else {
                0
            };
            let start = ((s * window_ticks) as i64 + jitter).clamp(0, (n_ticks - span) as i64) as usize;
            offsets.iter().map(|o| start + o).collect()
        })
        .collect()
}

/// Cuts a round into per-agent windows; output is ordered slot-major, then by
/// agent id. Rounds shorter than one window yield no segments.
pub fn segment_round(
    map: &MapSpec,
    round: &TrajectoryRound,
    cfg: &WindowConfig,
    obs: &ObsConfig,
    seed: u64,
) -> Result<Vec<Segment>> {
    let uid = round_uid(round);
    let slots = slot_frame_ticks(round.n_ticks(), round.tickrate as u32, cfg, seed, uid);
    let mut out = Vec::with_capacity(slots.len() * N_AGENTS);
    for (s, ticks) in slots.iter().enumerate() {
        for agent in 0..N_AGENTS {
            let mut data = Vec::with_capacity(ticks.len() * FRAME_DIM);
            for &t in ticks {
                data.extend(render_observation(map, round, agent, t, obs)?.features);
            }
            out.push(Segment {
                features: Tensor::new(&[ticks.len(), FRAME_DIM], data)?,
                agent_id: agent as u8,
                team: Team::of_agent(agent),
                round_uid: uid,
                slot_index: s as u32,
                center_tick: ticks[ticks.len() / 2] as u32,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub teammate: [u8; N_AREAS],
    pub enemy: [u8; N_AREAS],
}

impl LabelVector {
    pub fn for_task(&self, task: Task) -> &[u8; N_AREAS] {
        match task {
            Task::Tln => &self.teammate,
            Task::Eln => &self.enemy,
        }
    }
}

/// Location-nowcast task: teammates' or enemies' occupied areas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Tln,
    Eln,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Tln, Task::Eln];

    pub fn name(self) -> &'static str {
        match self {
            Task::Tln => "tln",
            Task::Eln => "eln",
        }
    }
}

/// Occupancy of each team at the segment's middle frame, relative to the
/// segment's own team.
pub fn build_labels(map: &MapSpec, round: &TrajectoryRound, segment: &Segment) -> Result<LabelVector> {
    let tick = segment.center_tick as usize;
    if tick >= round.n_ticks() {
        return Err(Error::domain(format!("center tick {tick} beyond round")));
    }
    let mut labels = LabelVector {
        teammate: [0; N_AREAS],
        enemy: [0; N_AREAS],
    };
    for s in &round.ticks[tick] {
        let area = area_of_position(map, s.pos64())? as usize;
        if s.team == segment.team {
            labels.teammate[area] = 1;
        } else {
            labels.enemy[area] = 1;
        }
    }
    Ok(labels)
}

pub fn apply_leak_mask(segment: &Segment, masked: bool) -> Segment {
    let mut out = segment.clone();
    if masked {
        let width = out.features.shape()[1];
        for row in out.features.data_mut().chunks_mut(width) {
            row[LEAK].fill(0.0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[u64] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Round-level split. Sizes are `floor(ratio * n / 100)`; leftover rounds go
/// to train, then val, then test.
pub fn split_rounds(uids: &[u64], ratios: [u32; 3], seed: u64) -> Result<Split> {
    let mut sorted = uids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != uids.len() {
        return Err(Error::domain("duplicate round ids"));
    }
    if sorted.len() < 3 {
        return Err(Error::domain(format!("need at least 3 rounds, got {}", sorted.len())));
    }
    if ratios.iter().sum::<u32>() != 100 {
        return Err(Error::domain(format!("split ratios {ratios:?} must sum to 100")));
    }
    let n = sorted.len();
    let mut sizes = ratios.map(|r| r as usize * n / 100);
    let left = n - sizes.iter().sum::<usize>();
    for s in sizes.iter_mut().take(left) {
        *s += 1;
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |k: usize, rest: &mut Vec<u64>| {
        let mut part: Vec<u64> = rest.drain(..k).collect();
        part.sort_unstable();
        part
    };
    let train = take(sizes[0], &mut sorted);
    let val = take(sizes[1], &mut sorted);
    let test = take(sizes[2], &mut sorted);
    Ok(Split { train, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub round_uid: u64,
    pub slot_index: u32,
    pub team: Team,
}

/// Teammates' segments from one round, slot and team.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub key: GroupKey,
    /// Indices into the segment list, ascending by agent id.
    pub members: Vec<usize>,
}

/// Groups segments by (round, slot, team), in key order.
pub fn group_segments(segments: &[Segment], rounds: &[u64]) -> Vec<Group> {
    let mut map: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        if rounds.binary_search(&s.round_uid).is_ok() {
            map.entry(s.key()).or_default().push(i);
        }
    }
    map.into_iter()
        .map(|(key, mut members)| {
            members.sort_by_key(|&i| segments[i].agent_id);
            Group { key, members }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub groups: Vec<Group>,
}

impl BatchPlan {
    /// Flattened segment order: group by group, members in ascending agent id.
    pub fn indices(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.members.iter().copied()).collect()
    }

    pub fn keys(&self) -> Vec<GroupKey> {
        self.groups.iter().flat_map(|g| g.members.iter().map(move |_| g.key)).collect()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles the groups, keeps `a` members of each (a seeded subset in
/// ascending agent order when `a` is below the team size) and packs `g`
/// groups per batch. Trailing groups that cannot fill a batch are dropped.
pub fn plan_batches(groups: &[Group], g: usize, a: usize, seed: u64) -> Result<Vec<BatchPlan>> {
    if g == 0 || a == 0 {
        return Err(Error::domain("batch needs at least one group of one agent"));
    }
    if groups.len() < g {
        return Err(Error::domain(format!("{} groups cannot fill a batch of {g}", groups.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&Group> = groups.iter().collect();
    order.shuffle(&mut rng);
    let mut plans = Vec::with_capacity(order.len() / g);
    for chunk in order.chunks_exact(g) {
        let mut picked = Vec::with_capacity(g);
        for grp in chunk {
            if grp.members.len() < a {
                return Err(Error::domain(format!(
                    "group {:?} has {} members, need {a}",
                    grp.key,
                    grp.members.len()
                )));
            }
            let members = if grp.members.len() == a {
                grp.members.clone()
            } else {
                let mut pos = rand::seq::index::sample(&mut rng, grp.members.len(), a).into_vec();
                pos.sort_unstable();
                pos.into_iter().map(|p| grp.members[p]).collect()
            };
            picked.push(Group { key: grp.key, members });
        }
        plans.push(BatchPlan { groups: picked });
    }
    Ok(plans)
}

/// `m[i][j] = +1` when samples `i` and `j` share round, slot and team.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairMask {
    pub n: usize,
    pub m: Vec<i8>,
}

impl PairMask {
    pub fn from_keys(keys: &[GroupKey]) -> Self {
        let n = keys.len();
        let m = keys
            .iter()
            .flat_map(|a| keys.iter().map(move |b| if a == b { 1 } else { -1 }))
            .collect();
        Self { n, m }
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.m[i * self.n + j]
    }

    pub fn positives(&self) -> usize {
        self.m.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n, self.n], self.m.iter().map(|&v| v as f64).collect())
            .expect("square mask")
    }
}

pub fn build_pair_mask(plan: &BatchPlan) -> PairMask {
    PairMask::from_keys(&plan.keys())
}

/// Segments with labels for a set of rounds, plus the split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub segments: Vec<Segment>,
    pub labels: Vec<LabelVector>,
    pub split: Split,
}

impl Dataset {
    /// Segments, labels and split for a corpus. Leak masking is applied by
    /// the consumer, so one build serves both arms of the leak check.
    pub fn build(
        map: &MapSpec,
        rounds: &[TrajectoryRound],
        window: &WindowConfig,
        obs: &ObsConfig,
        ratios: [u32; 3],
        seed: u64,
    ) -> Result<Self> {
        let mut segments = Vec::new();
        let mut labels = Vec::new();
        for round in rounds {
            for seg in segment_round(map, round, window, obs, seed)? {
                labels.push(build_labels(map, round, &seg)?);
                segments.push(seg);
            }
        }
        let uids: Vec<u64> = rounds.iter().map(round_uid).collect();
        let split = split_rounds(&uids, ratios, derive_seed(seed, &[0x5e11]))?;
        Ok(Self {
            segments,
            labels,
            split,
        })
    }

    pub fn groups(&self, split: SplitName) -> Vec<Group> {
        group_segments(&self.segments, self.split.get(split))
    }
}

/// Segment archive layout (little-endian):
///
/// ```text
/// magic "XSEG", version u16 = 1, n_segments u32, frames u16, width u16
/// per segment:
///   round_uid u64, slot_index u32, center_tick u32, agent_id u8, team u8 (0 = T, 1 = CT),
///   frames × width f32 features (row-major),
///   23 teammate label bytes, 23 enemy label bytes
/// ```
pub const ARCHIVE_MAGIC: [u8; 4] = *b"XSEG";
pub const ARCHIVE_VERSION: u16 = 1;

fn io_err(source: std::io::Error) -> Error {
    Error::Io { offset: 0, source }
}

pub fn write_archive<W: Write>(mut w: W, items: &[(&Segment, &LabelVector)]) -> Result<()> {
    let (frames, width) = items
        .first()
        .map_or((0, FRAME_DIM), |(s, _)| (s.frames(), s.features.shape()[1]));
    (|| -> std::io::Result<()> {
        w.write_all(&ARCHIVE_MAGIC)?;
        w.write_u16::<LittleEndian>(ARCHIVE_VERSION)?;
        w.write_u32::<LittleEndian>(items.len() as u32)?;
        w.write_u16::<LittleEndian>(frames as u16)?;
        w.write_u16::<LittleEndian>(width as u16)?;
        for (s, l) in items {
            w.write_u64::<LittleEndian>(s.round_uid)?;
            w.write_u32::<LittleEndian>(s.slot_index)?;
            w.write_u32::<LittleEndian>(s.center_tick)?;
            w.write_u8(s.agent_id)?;
            w.write_u8(s.team.index() as u8)?;
            for &v in s.features.data() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
            w.write_all(&l.teammate)?;
            w.write_all(&l.enemy)?;
        }
        w.flush()
    })()
    .map_err(io_err)
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<(Segment, LabelVector)>> {
    let eof = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("segment archive ends early".into())
        } else {
            io_err(e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!("bad archive magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>().map_err(eof)?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: ARCHIVE_VERSION,
        });
    }
    let n = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let frames = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
    let width = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    let mut buf = vec![0f32; frames * width];
    for _ in 0..n {
        let round_uid = r.read_u64::<LittleEndian>().map_err(eof)?;
        let slot_index = r.read_u32::<LittleEndian>().map_err(eof)?;
        let center_tick = r.read_u32::<LittleEndian>().map_err(eof)?;
        let agent_id = r.read_u8().map_err(eof)?;
        let team = match r.read_u8().map_err(eof)? {
            0 => Team::T,
            1 => Team::CT,
            t => return Err(Error::Range(format!("team code {t}"))),
        };
        r.read_f32_into::<LittleEndian>(&mut buf).map_err(eof)?;
        let mut labels = LabelVector {
            teammate: [0; N_AREAS],
            enemy: [0; N_AREAS],
        };
        r.read_exact(&mut labels.teammate).map_err(eof)?;
        r.read_exact(&mut labels.enemy).map_err(eof)?;
        out.push((
            Segment {
                features: Tensor::new(&[frames, width], buf.iter().map(|&v| v as f64).collect())?,
                agent_id,
                team,
                round_uid,
                slot_index,
                center_tick,
            },
            labels,
        ));
    }
    Ok(out)
}
