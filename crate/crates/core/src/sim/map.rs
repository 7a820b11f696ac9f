use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_AREAS: usize = 23;
pub const GRID: usize = 48;
/// Row boundary between the CT half (`y < BORDER_Y`) and the T half.
pub const BORDER_Y: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Team {
    T,
    CT,
}

impl Team {
    pub fn of_agent(agent_id: usize) -> Team {
        if agent_id < 5 {
            Team::T
        } else {
            Team::CT
        }
    }

    pub fn other(self) -> Team {
        match self {
            Team::T => Team::CT,
            Team::CT => Team::T,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Team::T => 0,
            Team::CT => 1,
        }
    }

    pub fn agents(self) -> std::ops::Range<usize> {
        match self {
            Team::T => 0..5,
            Team::CT => 5..10,
        }
    }
}

/// Rectangular callout region `[x0, x1) × [y0, y1)` in cell units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaDef {
    pub id: u8,
    pub name: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Side whose agents may occupy the area.
    pub side: Team,
}

impl AreaDef {
    pub fn contains_cell(&self, cx: usize, cy: usize) -> bool {
        cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapSpec {
    pub name: String,
    pub grid_width: usize,
    pub grid_height: usize,
    pub areas: Vec<AreaDef>,
    /// Unordered neighbour pairs `(a, b)` with `a < b`.
    pub adjacency: Vec<(u8, u8)>,
    pub spawn_t: u8,
    pub spawn_ct: u8,
    #[serde(skip)]
    cell_area: Vec<u8>,
    #[serde(skip)]
    neighbours: Vec<Vec<u8>>,
}

const LAYOUT: &[(usize, usize, &[(usize, usize, &str)])] = &[
    (0, 8, &[(0, 16, "Bombsite_B"), (16, 32, "CT_Spawn"), (32, 48, "Bombsite_A")]),
    (8, 16, &[(0, 12, "Market"), (12, 24, "Kitchen"), (24, 36, "Ticket_Booth"), (36, 48, "Jungle")]),
    (16, 24, &[(0, 12, "B_Short"), (12, 24, "Window"), (24, 36, "Connector"), (36, 48, "Stairs")]),
    (24, 32, &[(0, 12, "B_Apartments"), (12, 24, "Mid"), (24, 36, "Catwalk"), (36, 48, "Palace")]),
    (32, 40, &[(0, 12, "Underpass"), (12, 24, "Top_Mid"), (24, 36, "A_Ramp"), (36, 48, "Tetris")]),
    (40, 48, &[(0, 12, "T_Apartments"), (12, 24, "T_Spawn"), (24, 36, "Tunnels"), (36, 48, "T_Stairs")]),
];

/// Two rectangles touch along an edge of positive length.
fn share_edge(a: &AreaDef, b: &AreaDef) -> bool {
    let overlap = |a0: usize, a1: usize, b0: usize, b1: usize| a0.max(b0) < a1.min(b1);
    let vertical = (a.x1 == b.x0 || b.x1 == a.x0) && overlap(a.y0, a.y1, b.y0, b.y1);
    let horizontal = (a.y1 == b.y0 || b.y1 == a.y0) && overlap(a.x0, a.x1, b.x0, b.x1);
    vertical || horizontal
}

/// The fixed 23-area map used by every experiment.
pub fn build_default_map() -> MapSpec {
    let mut areas = Vec::with_capacity(N_AREAS);
    for &(y0, y1, cols) in LAYOUT {
        for &(x0, x1, name) in cols {
            areas.push(AreaDef {
                id: areas.len() as u8,
                name: name.to_string(),
                x0,
                y0,
                x1,
                y1,
                side: if (y0 as f64) < BORDER_Y { Team::CT } else { Team::T },
            });
        }
    }
    let mut adjacency = Vec::new();
    for a in &areas {
        for b in &areas {
            if a.id < b.id && share_edge(a, b) {
                adjacency.push((a.id, b.id));
            }
        }
    }
    let find = |n: &str| areas.iter().find(|a| a.name == n).unwrap().id;
    let (spawn_t, spawn_ct) = (find("T_Spawn"), find("CT_Spawn"));
    MapSpec {
        name: "desk_mirage".to_string(),
        grid_width: GRID,
        grid_height: GRID,
        areas,
        adjacency,
        spawn_t,
        spawn_ct,
        cell_area: Vec::new(),
        neighbours: Vec::new(),
    }
    .indexed()
}

impl MapSpec {
    /// Rebuilds lookup tables (needed after deserialization).
    pub fn indexed(mut self) -> Self {
        self.cell_area = vec![u8::MAX; self.grid_width * self.grid_height];
        for a in &self.areas {
            for cy in a.y0..a.y1 {
                for cx in a.x0..a.x1 {
                    self.cell_area[cy * self.grid_width + cx] = a.id;
                }
            }
        }
        self.neighbours = vec![Vec::new(); self.areas.len()];
        for &(a, b) in &self.adjacency {
            self.neighbours[a as usize].push(b);
            self.neighbours[b as usize].push(a);
        }
        for n in &mut self.neighbours {
            n.sort_unstable();
        }
        self
    }

    pub fn area(&self, id: u8) -> &AreaDef {
        &self.areas[id as usize]
    }

    pub fn area_id(&self, name: &str) -> Option<u8> {
        self.areas.iter().find(|a| a.name == name).map(|a| a.id)
    }

    pub fn neighbours(&self, id: u8) -> &[u8] {
        &self.neighbours[id as usize]
    }

    pub fn are_adjacent(&self, a: u8, b: u8) -> bool {
        self.neighbours[a as usize].binary_search(&b).is_ok()
    }

    pub fn area_of_cell(&self, cx: usize, cy: usize) -> Result<u8> {
        if cx >= self.grid_width || cy >= self.grid_height {
            return Err(Error::domain(format!("cell ({cx}, {cy}) outside the map")));
        }
        Ok(self.cell_area[cy * self.grid_width + cx])
    }

    pub fn territory(&self, side: Team) -> impl Iterator<Item = &AreaDef> {
        self.areas.iter().filter(move |a| a.side == side)
    }

    /// Fraction-free bounds check on a continuous position.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.grid_width as f64 && y < self.grid_height as f64
    }
}

/// Area owning the cell `floor(pos)`.
pub fn area_of_position(map: &MapSpec, pos: (f64, f64)) -> Result<u8> {
    let (x, y) = pos;
    if !(x.is_finite() && y.is_finite()) || !map.contains(x, y) {
        return Err(Error::domain(format!("position ({x}, {y}) outside the playable region")));
    }
    map.area_of_cell(x.floor() as usize, y.floor() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_three_areas_tiling_every_cell() {
        let map = build_default_map();
        assert_eq!(map.areas.len(), N_AREAS);
        for cy in 0..GRID {
            for cx in 0..GRID {
                let owners = map.areas.iter().filter(|a| a.contains_cell(cx, cy)).count();
                assert_eq!(owners, 1, "cell ({cx},{cy})");
                assert!(map.area_of_cell(cx, cy).unwrap() < N_AREAS as u8);
            }
        }
    }

    #[test]
    fn spawns_resolve_to_named_areas() {
        let map = build_default_map();
        let t = map.area(map.spawn_t);
        assert_eq!(t.name, "T_Spawn");
        assert_eq!(map.area_of_cell(t.x0, t.y0).unwrap(), map.spawn_t);
        assert_eq!(map.area(map.spawn_ct).name, "CT_Spawn");
    }

    #[test]
    fn adjacency_is_symmetric_and_connected() {
        let map = build_default_map();
        for &(a, b) in &map.adjacency {
            assert!(map.are_adjacent(a, b) && map.are_adjacent(b, a));
        }
        let mut seen = vec![false; N_AREAS];
        let mut stack = vec![0u8];
        while let Some(a) = stack.pop() {
            if !std::mem::replace(&mut seen[a as usize], true) {
                stack.extend_from_slice(map.neighbours(a));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn centre_and_edges() {
        let map = build_default_map();
        let a = map.area_id("Bombsite_A").unwrap();
        assert_eq!(area_of_position(&map, map.area(a).center()).unwrap(), a);
        // x = 16 is the shared edge of Bombsite_B and CT_Spawn; floor picks CT_Spawn.
        assert_eq!(area_of_position(&map, (16.0, 3.0)).unwrap(), map.spawn_ct);
        assert_eq!(
            area_of_position(&map, (15.999, 3.0)).unwrap(),
            map.area_id("Bombsite_B").unwrap()
        );
        assert!(area_of_position(&map, (48.0, 3.0)).is_err());
        assert!(area_of_position(&map, (-0.1, 3.0)).is_err());
        assert!(area_of_position(&map, (f64::NAN, 3.0)).is_err());
    }

    #[test]
    fn both_halves_have_territory() {
        let map = build_default_map();
        assert_eq!(map.territory(Team::CT).count(), 11);
        assert_eq!(map.territory(Team::T).count(), 12);
    }
}
