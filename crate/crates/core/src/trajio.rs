//! `.xego` binary trajectory files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header
//!   0   4  magic "XEGO"
//!   4   2  version (u16) = 1
//!   6   2  tickrate (u16)
//!   8   4  n_ticks (u32)
//!  12   1  n_agents (u8) = 10
//!  13   4  n_events (u32)
//!  17   2  map_name length L (u16)
//!  19   L  map_name (UTF-8)
//! 19+L  4  match_id (u32)
//! 23+L  4  round_id (u32)
//! tick records, n_ticks × 140 bytes; per agent (14 bytes):
//!   pos_x f32, pos_y f32, facing f32, area_id u8, blind flag u8
//! event records, n_events × variable:
//!   tick u32, kind u8, origin_x f32, origin_y f32, count u8, count × agent id u8
//! ```
//!
//! Tick `t` therefore starts at byte `header_size + 140 t`.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, WriteBytesExt};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::close_blind_runs;
use crate::sim::{AgentState, Event, EventKind, Team, TrajectoryRound, N_AGENTS, N_AREAS};

pub const MAGIC: [u8; 4] = *b"XEGO";
pub const VERSION: u16 = 1;
pub const AGENT_RECORD: usize = 14;
pub const TICK_RECORD: usize = N_AGENTS * AGENT_RECORD;
pub const EXTENSION: &str = "xego";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TrajFileHeader {
    pub version: u16,
    pub tickrate: u16,
    pub n_ticks: u32,
    pub n_agents: u8,
    pub n_events: u32,
    pub map_name: String,
    pub match_id: u32,
    pub round_id: u32,
}

impl TrajFileHeader {
    pub fn byte_len(&self) -> usize {
        4 + 2 + 2 + 4 + 1 + 4 + 2 + self.map_name.len() + 4 + 4
    }

    fn of(round: &TrajectoryRound) -> Self {
        Self {
            version: VERSION,
            tickrate: round.tickrate,
            n_ticks: round.n_ticks() as u32,
            n_agents: N_AGENTS as u8,
            n_events: round.events.len() as u32,
            map_name: round.map_name.clone(),
            match_id: round.match_id,
            round_id: round.round_id,
        }
    }
}

/// Counts bytes written and tags I/O failures with the offset they hit.
struct CountingWriter<W> {
    inner: W,
    offset: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.offset += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, f: impl FnOnce(&mut Self) -> io::Result<()>) -> Result<()> {
        let at = self.offset;
        f(self).map_err(|source| Error::Io { offset: at, source })
    }
}

/// Serializes `round`; returns the number of bytes written.
pub fn write_round<W: Write>(round: &TrajectoryRound, sink: W) -> Result<u64> {
    let header = TrajFileHeader::of(round);
    if header.map_name.len() > u16::MAX as usize {
        return Err(Error::domain("map name longer than 65535 bytes"));
    }
    let mut w = CountingWriter { inner: sink, offset: 0 };
    w.put(|w| {
        w.write_all(&MAGIC)?;
        w.write_u16::<LittleEndian>(header.version)?;
        w.write_u16::<LittleEndian>(header.tickrate)?;
        w.write_u32::<LittleEndian>(header.n_ticks)?;
        w.write_u8(header.n_agents)?;
        w.write_u32::<LittleEndian>(header.n_events)?;
        w.write_u16::<LittleEndian>(header.map_name.len() as u16)?;
        w.write_all(header.map_name.as_bytes())?;
        w.write_u32::<LittleEndian>(header.match_id)?;
        w.write_u32::<LittleEndian>(header.round_id)
    })?;

    let mut rec = [0u8; TICK_RECORD];
    for (t, snap) in round.ticks.iter().enumerate() {
        if snap.len() != N_AGENTS {
            return Err(Error::domain(format!("tick {t} has {} agents", snap.len())));
        }
        for (i, s) in snap.iter().enumerate() {
            let r = &mut rec[i * AGENT_RECORD..(i + 1) * AGENT_RECORD];
            r[0..4].copy_from_slice(&s.pos[0].to_le_bytes());
            r[4..8].copy_from_slice(&s.pos[1].to_le_bytes());
            r[8..12].copy_from_slice(&s.facing.to_le_bytes());
            r[12] = s.area;
            r[13] = u8::from(s.is_blind(t));
        }
        w.put(|w| w.write_all(&rec))?;
    }

    for e in &round.events {
        if e.affected.len() > u8::MAX as usize {
            return Err(Error::domain("event affects more than 255 agents"));
        }
        w.put(|w| {
            w.write_u32::<LittleEndian>(e.tick)?;
            w.write_u8(e.kind.code())?;
            w.write_f32::<LittleEndian>(e.origin[0])?;
            w.write_f32::<LittleEndian>(e.origin[1])?;
            w.write_u8(e.affected.len() as u8)?;
            w.write_all(&e.affected)
        })?;
    }
    w.put(|w| w.flush())?;
    Ok(w.offset)
}

/// Reads exactly `buf.len()` bytes or reports how many were available.
fn fill<R: Read>(src: &mut R, buf: &mut [u8], what: &'static str, offset: &mut u64) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match src.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(Error::Truncation {
                    what,
                    expected: buf.len() as u64,
                    available: got as u64,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(source) => {
                return Err(Error::Io {
                    offset: *offset + got as u64,
                    source,
                })
            }
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Incremental parser: header first, then one tick record at a time, then
/// events. Holds a single tick-sized buffer regardless of round length.
pub struct TrajReader<R> {
    src: R,
    header: TrajFileHeader,
    offset: u64,
    next_tick: u32,
    buf: [u8; TICK_RECORD],
}

/// Per-agent fields of one tick record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentRecord {
    pub pos: [f32; 2],
    pub facing: f32,
    pub area: u8,
    pub blind: bool,
}

impl<R: Read> TrajReader<R> {
    pub fn new(mut src: R) -> Result<Self> {
        let mut offset = 0;
        let mut fixed = [0u8; 19];
        fill(&mut src, &mut fixed, "header", &mut offset)?;
        if fixed[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &fixed[0..4])));
        }
        let version = le_u16(&fixed[4..6]);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let n_agents = fixed[12];
        if n_agents as usize != N_AGENTS {
            return Err(Error::Format(format!("n_agents {n_agents}, expected {N_AGENTS}")));
        }
        let name_len = le_u16(&fixed[17..19]) as usize;
        let mut name = vec![0u8; name_len];
        fill(&mut src, &mut name, "header", &mut offset)?;
        let map_name = String::from_utf8(name).map_err(|e| Error::Format(format!("map name: {e}")))?;
        let mut ids = [0u8; 8];
        fill(&mut src, &mut ids, "header", &mut offset)?;
        let header = TrajFileHeader {
            version,
            tickrate: le_u16(&fixed[6..8]),
            n_ticks: le_u32(&fixed[8..12]),
            n_agents,
            n_events: le_u32(&fixed[13..17]),
            map_name,
            match_id: le_u32(&ids[0..4]),
            round_id: le_u32(&ids[4..8]),
        };
        Ok(Self {
            src,
            header,
            offset,
            next_tick: 0,
            buf: [0u8; TICK_RECORD],
        })
    }

    pub fn header(&self) -> &TrajFileHeader {
        &self.header
    }

    /// Next tick record, or `None` after the last one.
    pub fn next_tick(&mut self) -> Result<Option<[AgentRecord; N_AGENTS]>> {
        if self.next_tick >= self.header.n_ticks {
            return Ok(None);
        }
        fill(&mut self.src, &mut self.buf, "tick record", &mut self.offset)?;
        let mut out = [AgentRecord {
            pos: [0.0; 2],
            facing: 0.0,
            area: 0,
            blind: false,
        }; N_AGENTS];
        for (i, a) in out.iter_mut().enumerate() {
            let r = &self.buf[i * AGENT_RECORD..(i + 1) * AGENT_RECORD];
            if r[12] as usize >= N_AREAS {
                return Err(Error::Range(format!(
                    "tick {} agent {i}: area id {} >= {N_AREAS}",
                    self.next_tick, r[12]
                )));
            }
            if r[13] > 1 {
                return Err(Error::Range(format!(
                    "tick {} agent {i}: blind flag {}",
                    self.next_tick, r[13]
                )));
            }
            *a = AgentRecord {
                pos: [le_f32(&r[0..4]), le_f32(&r[4..8])],
                facing: le_f32(&r[8..12]),
                area: r[12],
                blind: r[13] == 1,
            };
        }
        self.next_tick += 1;
        Ok(Some(out))
    }

    /// Reads the event section; call after all ticks were consumed.
    pub fn events(&mut self) -> Result<Vec<Event>> {
        if self.next_tick != self.header.n_ticks {
            return Err(Error::domain("events requested before all ticks were read"));
        }
        let mut events = Vec::new();
        for k in 0..self.header.n_events {
            let mut fixed = [0u8; 14];
            fill(&mut self.src, &mut fixed, "event record", &mut self.offset)?;
            let kind = EventKind::from_code(fixed[4])
                .ok_or_else(|| Error::Range(format!("event {k}: unknown kind {}", fixed[4])))?;
            let tick = le_u32(&fixed[0..4]);
            if tick >= self.header.n_ticks {
                return Err(Error::Range(format!("event {k}: tick {tick} beyond round")));
            }
            let mut affected = vec![0u8; fixed[13] as usize];
            fill(&mut self.src, &mut affected, "event record", &mut self.offset)?;
            if let Some(&bad) = affected.iter().find(|&&a| a as usize >= N_AGENTS) {
                return Err(Error::Range(format!("event {k}: agent id {bad}")));
            }
            events.push(Event {
                tick,
                kind,
                origin: [le_f32(&fixed[5..9]), le_f32(&fixed[9..13])],
                affected,
            });
        }
        Ok(events)
    }
}

/// Parses a whole round. Blindness end ticks are recovered from the
/// per-tick flags.
pub fn read_round<R: Read>(source: R) -> Result<TrajectoryRound> {
    let mut reader = TrajReader::new(source)?;
    let header = reader.header().clone();
    let mut ticks: Vec<Vec<AgentState>> = Vec::with_capacity(header.n_ticks.min(1 << 20) as usize);
    while let Some(rec) = reader.next_tick()? {
        ticks.push(
            rec.iter()
                .enumerate()
                .map(|(i, a)| AgentState {
                    agent_id: i as u8,
                    team: Team::of_agent(i),
                    pos: a.pos,
                    facing: a.facing,
                    area: a.area,
                    blind_until: u32::from(a.blind),
                })
                .collect(),
        );
    }
    let events = reader.events()?;

    close_blind_runs(&mut ticks);

    Ok(TrajectoryRound {
        match_id: header.match_id,
        round_id: header.round_id,
        tickrate: header.tickrate,
        map_name: header.map_name,
        ticks,
        events,
    })
}

#[derive(Debug, Serialize)]
pub struct EventSummary {
    pub flash: usize,
    pub smoke: usize,
    pub engage: usize,
    pub first_tick: Option<u32>,
    pub last_tick: Option<u32>,
}

#[derive(Debug, Serialize)]
pub struct Inspection {
    pub header: TrajFileHeader,
    pub header_bytes: usize,
    pub events: EventSummary,
}

/// Header plus event counts, streaming over the tick records.
pub fn inspect<R: Read>(source: R) -> Result<Inspection> {
    let mut reader = TrajReader::new(source)?;
    while reader.next_tick()?.is_some() {}
    let events = reader.events()?;
    let count = |k: EventKind| events.iter().filter(|e| e.kind == k).count();
    let header = reader.header().clone();
    Ok(Inspection {
        header_bytes: header.byte_len(),
        events: EventSummary {
            flash: count(EventKind::Flash),
            smoke: count(EventKind::Smoke),
            engage: count(EventKind::Engage),
            first_tick: events.iter().map(|e| e.tick).min(),
            last_tick: events.iter().map(|e| e.tick).max(),
        },
        header,
    })
}
