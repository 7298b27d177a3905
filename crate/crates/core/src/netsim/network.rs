use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, LANES_PER_INTERSECTION, NUM_PHASES};

pub const ROADNET_FORMAT: &str = "metavim-roadnet-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    N,
    E,
    S,
    W,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::N, Direction::E, Direction::S, Direction::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Direction {
        Self::ALL[i % 4]
    }

    pub fn opposite(self) -> Direction {
        Self::from_index(self.index() + 2)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Straight, Turn::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            Turn::Left => "left",
            Turn::Straight => "straight",
            Turn::Right => "right",
        }
    }
}

/// Leg through which a vehicle leaves after arriving from `approach` and
/// taking `turn` (right-hand traffic).
pub fn exit_leg(approach: Direction, turn: Turn) -> Direction {
    match turn {
        Turn::Straight => approach.opposite(),
        Turn::Left => Direction::from_index(approach.index() + 1),
        Turn::Right => Direction::from_index(approach.index() + 3),
    }
}

/// Canonical incoming/outgoing lane slot: `direction * 3 + turn`.
pub fn lane_slot(direction: Direction, turn: Turn) -> usize {
    direction.index() * 3 + turn.index()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntersectionId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneId(pub usize);

/// One of the four signal phases:
/// 0 NS-straight, 1 NS-left, 2 EW-straight, 3 EW-left. Right turns are
/// permitted in every phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhaseId(u8);

impl PhaseId {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_PHASES {
            Ok(PhaseId(index as u8))
        } else {
            Err(Error::InvalidPhase(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = PhaseId> {
        (0..NUM_PHASES as u8).map(PhaseId)
    }

    pub fn next(self) -> PhaseId {
        PhaseId((self.0 + 1) % NUM_PHASES as u8)
    }

    /// Permitted movements as (incoming slot, nominal outgoing slot) pairs.
    pub fn movements(self) -> &'static [(usize, usize)] {
        &PHASE_TABLE[self.index()]
    }

    pub fn permits(self, incoming_slot: usize) -> bool {
        self.movements().iter().any(|&(i, _)| i == incoming_slot)
    }
}

const fn movement(approach: usize, turn: usize) -> (usize, usize) {
    let leg = match turn {
        0 => (approach + 1) % 4,
        1 => (approach + 2) % 4,
        _ => (approach + 3) % 4,
    };
    (approach * 3 + turn, leg * 3 + turn)
}

const RIGHTS: [(usize, usize); 4] = [movement(0, 2), movement(1, 2), movement(2, 2), movement(3, 2)];

static PHASE_TABLE: [[(usize, usize); 6]; 4] = [
    [movement(0, 1), movement(2, 1), RIGHTS[0], RIGHTS[1], RIGHTS[2], RIGHTS[3]],
    [movement(0, 0), movement(2, 0), RIGHTS[0], RIGHTS[1], RIGHTS[2], RIGHTS[3]],
    [movement(1, 1), movement(3, 1), RIGHTS[0], RIGHTS[1], RIGHTS[2], RIGHTS[3]],
    [movement(1, 0), movement(3, 0), RIGHTS[0], RIGHTS[1], RIGHTS[2], RIGHTS[3]],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Boundary,
    Intersection(IntersectionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaneKind {
    /// Gated by the signal at `intersection`; vehicles arrive from `approach`.
    Incoming {
        intersection: IntersectionId,
        approach: Direction,
        turn: Turn,
    },
    /// Leaves the network through `leg` of `intersection`.
    Exit {
        intersection: IntersectionId,
        leg: Direction,
        turn: Turn,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub name: String,
    pub length_m: f64,
    pub free_flow_s: u32,
    pub capacity: u32,
    pub saturation_flow: f64,
    pub upstream: Endpoint,
    pub downstream: Endpoint,
    pub kind: LaneKind,
}

impl Lane {
    pub fn is_exit(&self) -> bool {
        matches!(self.kind, LaneKind::Exit { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionNode {
    pub id: IntersectionId,
    pub name: String,
    pub grid_pos: Option<[i64; 2]>,
    pub neighbors: [Option<IntersectionId>; 4],
    pub incoming: [LaneId; LANES_PER_INTERSECTION],
    pub outgoing: [LaneId; LANES_PER_INTERSECTION],
}

impl IntersectionNode {
    pub fn neighbor(&self, d: Direction) -> Option<IntersectionId> {
        self.neighbors[d.index()]
    }

    pub fn degree(&self) -> usize {
        self.neighbors.iter().filter(|n| n.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    pub intersections: Vec<IntersectionNode>,
    pub lanes: Vec<Lane>,
    pub entry_lanes: Vec<LaneId>,
    pub exit_lanes: Vec<LaneId>,
    lane_names: BTreeMap<String, LaneId>,
}

// ---- document schema ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneDefaults {
    #[serde(default = "default_length")]
    pub length_m: f64,
    #[serde(default = "default_free_flow")]
    pub free_flow_s: u32,
    #[serde(default = "default_capacity")]
    pub capacity: u32,
    #[serde(default = "default_sat_flow")]
    pub sat_flow: f64,
}

fn default_length() -> f64 {
    300.0
}
fn default_free_flow() -> u32 {
    20
}
fn default_capacity() -> u32 {
    40
}
fn default_sat_flow() -> f64 {
    1.0
}

impl Default for LaneDefaults {
    fn default() -> Self {
        LaneDefaults {
            length_m: default_length(),
            free_flow_s: default_free_flow(),
            capacity: default_capacity(),
            sat_flow: default_sat_flow(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneOverride {
    /// Lane name, e.g. `in:intersection_0_0:N:left`.
    pub lane: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_flow_s: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat_flow: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct NeighborsDoc {
    pub N: Option<String>,
    pub E: Option<String>,
    pub S: Option<String>,
    pub W: Option<String>,
}

impl NeighborsDoc {
    fn get(&self, d: Direction) -> Option<&String> {
        match d {
            Direction::N => self.N.as_ref(),
            Direction::E => self.E.as_ref(),
            Direction::S => self.S.as_ref(),
            Direction::W => self.W.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionDoc {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_pos: Option<[i64; 2]>,
    pub neighbors: NeighborsDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadnetDocument {
    pub format: String,
    pub intersections: Vec<IntersectionDoc>,
    #[serde(default)]
    pub lane_defaults: LaneDefaults,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lane_overrides: Vec<LaneOverride>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSize {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridShorthand {
    grid: GridSize,
    #[serde(default)]
    lane_defaults: LaneDefaults,
}

pub fn grid_intersection_name(row: usize, col: usize) -> String {
    format!("intersection_{row}_{col}")
}

impl RoadnetDocument {
    /// Deterministic expansion of a `rows x cols` grid. Row 0 is the
    /// northernmost row, column 0 the westernmost.
    pub fn grid(rows: usize, cols: usize, lane_defaults: LaneDefaults) -> Self {
        let mut intersections = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let name = |rr: usize, cc: usize| Some(grid_intersection_name(rr, cc));
                intersections.push(IntersectionDoc {
                    id: grid_intersection_name(r, c),
                    grid_pos: Some([r as i64, c as i64]),
                    neighbors: NeighborsDoc {
                        N: if r > 0 { name(r - 1, c) } else { None },
                        E: if c + 1 < cols { name(r, c + 1) } else { None },
                        S: if r + 1 < rows { name(r + 1, c) } else { None },
                        W: if c > 0 { name(r, c - 1) } else { None },
                    },
                });
            }
        }
        RoadnetDocument {
            format: ROADNET_FORMAT.to_string(),
            intersections,
            lane_defaults,
            lane_overrides: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("roadnet document serializes")
    }
}

fn parse_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        field: field.into(),
        message: message.into(),
    }
}

/// Parse either a full roadnet document or the `{"grid": {...}}` shorthand.
pub fn parse_roadnet(text: &str) -> Result<RoadnetDocument> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| parse_err("roadnet", e.to_string()))?;
    let is_grid = value.get("grid").is_some();
    if is_grid {
        let g: GridShorthand = serde_path_to_error::deserialize(value)
            .map_err(|e| parse_err(e.path().to_string(), e.inner().to_string()))?;
        if g.grid.rows == 0 || g.grid.cols == 0 {
            return Err(parse_err("grid", "rows and cols must be at least 1"));
        }
        return Ok(RoadnetDocument::grid(g.grid.rows, g.grid.cols, g.lane_defaults));
    }
    let doc: RoadnetDocument = serde_path_to_error::deserialize(value)
        .map_err(|e| parse_err(e.path().to_string(), e.inner().to_string()))?;
    if doc.format != ROADNET_FORMAT {
        return Err(parse_err(
            "format",
            format!("expected `{ROADNET_FORMAT}`, got `{}`", doc.format),
        ));
    }
    Ok(doc)
}

pub fn load_network(text: &str) -> Result<RoadNetwork> {
    RoadNetwork::from_document(&parse_roadnet(text)?)
}

fn validate_lane_params(name: &str, length: f64, ff: u32, cap: u32, sat: f64) -> Result<()> {
    if cap < 1 {
        return Err(Error::Validation(format!("{name}: capacity must be >= 1")));
    }
    if sat.is_nan() || sat <= 0.0 {
        return Err(Error::Validation(format!("{name}: sat_flow must be > 0")));
    }
    if ff < 1 {
        return Err(Error::Validation(format!("{name}: free_flow_s must be >= 1")));
    }
    if length.is_nan() || length <= 0.0 {
        return Err(Error::Validation(format!("{name}: length_m must be > 0")));
    }
    Ok(())
}

impl RoadNetwork {
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Validation("grid needs at least one row and column".into()));
        }
        Self::from_document(&RoadnetDocument::grid(rows, cols, LaneDefaults::default()))
    }

    pub fn from_document(doc: &RoadnetDocument) -> Result<Self> {
        if doc.intersections.is_empty() {
            return Err(Error::Validation("network has no intersections".into()));
        }
        let d = &doc.lane_defaults;
        validate_lane_params("lane_defaults", d.length_m, d.free_flow_s, d.capacity, d.sat_flow)?;

        let mut ids = BTreeMap::new();
        for (i, node) in doc.intersections.iter().enumerate() {
            if ids.insert(node.id.clone(), IntersectionId(i)).is_some() {
                return Err(Error::Validation(format!("duplicate intersection id `{}`", node.id)));
            }
        }
        let mut neighbors = vec![[None; 4]; doc.intersections.len()];
        for (i, node) in doc.intersections.iter().enumerate() {
            for dir in Direction::ALL {
                if let Some(name) = node.neighbors.get(dir) {
                    let j = *ids.get(name).ok_or_else(|| {
                        Error::Validation(format!(
                            "intersection `{}` names unknown {dir} neighbour `{name}`",
                            node.id
                        ))
                    })?;
                    if j.0 == i {
                        return Err(Error::Validation(format!("intersection `{}` neighbours itself", node.id)));
                    }
                    neighbors[i][dir.index()] = Some(j);
                }
            }
        }
        for (i, node) in doc.intersections.iter().enumerate() {
            for dir in Direction::ALL {
                if let Some(j) = neighbors[i][dir.index()] {
                    if neighbors[j.0][dir.opposite().index()] != Some(IntersectionId(i)) {
                        return Err(Error::Validation(format!(
                            "asymmetric adjacency: `{}` is the {dir} neighbour of `{}` but not vice versa",
                            doc.intersections[j.0].id, node.id
                        )));
                    }
                }
            }
        }

        let mut lanes: Vec<Lane> = Vec::new();
        let mut incoming = vec![[LaneId(0); LANES_PER_INTERSECTION]; doc.intersections.len()];
        let mut exits: BTreeMap<(usize, usize), LaneId> = BTreeMap::new();
        let new_lane = |lanes: &mut Vec<Lane>, name: String, up: Endpoint, down: Endpoint, kind: LaneKind| {
            let id = LaneId(lanes.len());
            lanes.push(Lane {
                id,
                name,
                length_m: d.length_m,
                free_flow_s: d.free_flow_s,
                capacity: d.capacity,
                saturation_flow: d.sat_flow,
                upstream: up,
                downstream: down,
                kind,
            });
            id
        };
        for (i, node) in doc.intersections.iter().enumerate() {
            let here = IntersectionId(i);
            for approach in Direction::ALL {
                let up = match neighbors[i][approach.index()] {
                    Some(j) => Endpoint::Intersection(j),
                    None => Endpoint::Boundary,
                };
                for turn in Turn::ALL {
                    let name = format!("in:{}:{}:{}", node.id, approach, turn.name());
                    let kind = LaneKind::Incoming {
                        intersection: here,
                        approach,
                        turn,
                    };
                    incoming[i][lane_slot(approach, turn)] =
                        new_lane(&mut lanes, name, up, Endpoint::Intersection(here), kind);
                }
            }
            for leg in Direction::ALL {
                if neighbors[i][leg.index()].is_none() {
                    for turn in Turn::ALL {
                        let name = format!("out:{}:{}:{}", node.id, leg, turn.name());
                        let kind = LaneKind::Exit {
                            intersection: here,
                            leg,
                            turn,
                        };
                        let id = new_lane(&mut lanes, name, Endpoint::Intersection(here), Endpoint::Boundary, kind);
                        exits.insert((i, lane_slot(leg, turn)), id);
                    }
                }
            }
        }

        let mut intersections = Vec::with_capacity(doc.intersections.len());
        for (i, node) in doc.intersections.iter().enumerate() {
            let mut outgoing = [LaneId(0); LANES_PER_INTERSECTION];
            for leg in Direction::ALL {
                for turn in Turn::ALL {
                    let slot = lane_slot(leg, turn);
                    outgoing[slot] = match neighbors[i][leg.index()] {
                        Some(j) => incoming[j.0][lane_slot(leg.opposite(), turn)],
                        None => exits[&(i, slot)],
                    };
                }
            }
            intersections.push(IntersectionNode {
                id: IntersectionId(i),
                name: node.id.clone(),
                grid_pos: node.grid_pos,
                neighbors: neighbors[i],
                incoming: incoming[i],
                outgoing,
            });
        }

        let lane_names: BTreeMap<String, LaneId> = lanes.iter().map(|l| (l.name.clone(), l.id)).collect();
        for ov in &doc.lane_overrides {
            let id = *lane_names
                .get(&ov.lane)
                .ok_or_else(|| Error::UnknownLane(ov.lane.clone()))?;
            let lane = &mut lanes[id.0];
            if let Some(v) = ov.length_m {
                lane.length_m = v;
            }
            if let Some(v) = ov.free_flow_s {
                lane.free_flow_s = v;
            }
            if let Some(v) = ov.capacity {
                lane.capacity = v;
            }
            if let Some(v) = ov.sat_flow {
                lane.saturation_flow = v;
            }
            validate_lane_params(&lane.name, lane.length_m, lane.free_flow_s, lane.capacity, lane.saturation_flow)?;
        }

        let entry_lanes = lanes
            .iter()
            .filter(|l| l.upstream == Endpoint::Boundary)
            .map(|l| l.id)
            .collect();
        let exit_lanes = lanes.iter().filter(|l| l.is_exit()).map(|l| l.id).collect();
        Ok(RoadNetwork {
            intersections,
            lanes,
            entry_lanes,
            exit_lanes,
            lane_names,
        })
    }

    pub fn num_intersections(&self) -> usize {
        self.intersections.len()
    }

    pub fn intersection(&self, id: IntersectionId) -> Result<&IntersectionNode> {
        self.intersections
            .get(id.0)
            .ok_or(Error::UnknownIntersection(id.0))
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.0]
    }

    pub fn lane_by_name(&self, name: &str) -> Option<LaneId> {
        self.lane_names.get(name).copied()
    }

    pub fn intersection_by_name(&self, name: &str) -> Option<IntersectionId> {
        self.intersections.iter().find(|n| n.name == name).map(|n| n.id)
    }

    /// Lanes a vehicle may move to after `lane`. Empty for exit lanes.
    pub fn successors(&self, lane: LaneId) -> Vec<LaneId> {
        match self.lanes[lane.0].kind {
            LaneKind::Exit { .. } => Vec::new(),
            LaneKind::Incoming {
                intersection,
                approach,
                turn,
            } => {
                let node = &self.intersections[intersection.0];
                let leg = exit_leg(approach, turn);
                match node.neighbor(leg) {
                    Some(j) => {
                        let next = &self.intersections[j.0];
                        Turn::ALL
                            .iter()
                            .map(|&t| next.incoming[lane_slot(leg.opposite(), t)])
                            .collect()
                    }
                    None => vec![node.outgoing[lane_slot(leg, turn)]],
                }
            }
        }
    }

    /// A route starts on an entry lane, follows permitted movements and ends
    /// on an exit lane.
    pub fn validate_route(&self, route: &[LaneId]) -> Result<()> {
        let first = route
            .first()
            .ok_or_else(|| Error::Validation("empty route".into()))?;
        if let Some(bad) = route.iter().find(|l| l.0 >= self.lanes.len()) {
            return Err(Error::UnknownLane(format!("#{}", bad.0)));
        }
        if self.lanes[first.0].upstream != Endpoint::Boundary {
            return Err(Error::Validation(format!(
                "route starts on `{}`, which is not an entry lane",
                self.lanes[first.0].name
            )));
        }
        for pair in route.windows(2) {
            if !self.successors(pair[0]).contains(&pair[1]) {
                return Err(Error::Validation(format!(
                    "no movement from `{}` to `{}`",
                    self.lanes[pair[0].0].name, self.lanes[pair[1].0].name
                )));
            }
        }
        let last = route[route.len() - 1];
        if !self.lanes[last.0].is_exit() {
            return Err(Error::Validation(format!(
                "route ends on `{}`, which is not an exit lane",
                self.lanes[last.0].name
            )));
        }
        Ok(())
    }

    /// All boundary-to-boundary routes with at most one non-straight turn,
    /// in a deterministic order.
    pub fn boundary_routes(&self) -> Vec<Vec<LaneId>> {
        let mut routes = Vec::new();
        for node in &self.intersections {
            for approach in Direction::ALL {
                if node.neighbor(approach).is_some() {
                    continue;
                }
                let mut visited = BTreeSet::new();
                self.extend_routes(node.id, approach, false, &mut Vec::new(), &mut visited, &mut routes);
            }
        }
        routes
    }

    fn extend_routes(
        &self,
        at: IntersectionId,
        approach: Direction,
        turned: bool,
        prefix: &mut Vec<LaneId>,
        visited: &mut BTreeSet<IntersectionId>,
        out: &mut Vec<Vec<LaneId>>,
    ) {
        if !visited.insert(at) {
            return;
        }
        let node = &self.intersections[at.0];
        for turn in Turn::ALL {
            let turning = turn != Turn::Straight;
            if turned && turning {
                continue;
            }
            prefix.push(node.incoming[lane_slot(approach, turn)]);
            let leg = exit_leg(approach, turn);
            match node.neighbor(leg) {
                Some(j) => self.extend_routes(j, leg.opposite(), turned || turning, prefix, visited, out),
                None => {
                    prefix.push(node.outgoing[lane_slot(leg, turn)]);
                    out.push(prefix.clone());
                    prefix.pop();
                }
            }
            prefix.pop();
        }
        visited.remove(&at);
    }
}
