use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::network::{IntersectionId, LaneId, PhaseId, RoadNetwork};
use crate::demand::ArrivalSchedule;
use crate::{Error, Result, LANES_PER_INTERSECTION, NUM_PHASES, OBS_DIM};

pub const DEFAULT_CONTROL_INTERVAL_S: u32 = 5;
pub const DEFAULT_HORIZON_S: u32 = 3600;

/// What counts towards an intersection's queue length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    /// Vehicles stopped at the stop line.
    #[default]
    Stopped,
    /// Every vehicle on the incoming lanes, moving or not.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    /// Waiting at the network boundary for room on the entry lane.
    Boundary,
    Transit { lane: LaneId, remaining_s: u32 },
    Queued { lane: LaneId },
    Exited,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: usize,
    pub route: Arc<[LaneId]>,
    /// Index into `route` of the lane currently occupied.
    pub leg: usize,
    pub entry_time_s: f64,
    pub exit_time_s: Option<f64>,
    pub position: Position,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LaneState {
    /// (vehicle, remaining seconds), oldest first.
    transit: VecDeque<(usize, u32)>,
    queue: VecDeque<usize>,
    /// Fractional release allowance carried between ticks while green.
    credit: f64,
}

impl LaneState {
    fn occupancy(&self) -> usize {
        self.transit.len() + self.queue.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub lane_counts: [u32; LANES_PER_INTERSECTION],
    pub phase: PhaseId,
}

impl Observation {
    pub fn phase_onehot(&self) -> [f64; NUM_PHASES] {
        let mut v = [0.0; NUM_PHASES];
        v[self.phase.index()] = 1.0;
        v
    }

    /// Raw counts followed by the phase one-hot.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lane_counts.iter().map(|&c| c as f64).collect();
        v.extend(self.phase_onehot());
        v
    }
}

/// Dynamic state of one simulated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    network: Arc<RoadNetwork>,
    schedule: Arc<ArrivalSchedule>,
    seed: u64,
    clock: u32,
    phases: Vec<PhaseId>,
    lanes: Vec<LaneState>,
    vehicles: Vec<Vehicle>,
    next_arrival: usize,
    /// Per entry lane, vehicles whose entry time has passed but which found
    /// the lane full.
    boundary: Vec<VecDeque<usize>>,
    entered: usize,
    exited: usize,
    released_by_lane: Vec<u64>,
}

impl SimState {
    pub fn reset(network: Arc<RoadNetwork>, schedule: Arc<ArrivalSchedule>, seed: u64) -> Self {
        let n_lanes = network.lanes.len();
        SimState {
            phases: vec![PhaseId::new(0).unwrap(); network.num_intersections()],
            lanes: vec![LaneState::default(); n_lanes],
            vehicles: Vec::with_capacity(schedule.len()),
            next_arrival: 0,
            boundary: vec![VecDeque::new(); n_lanes],
            entered: 0,
            exited: 0,
            released_by_lane: vec![0; n_lanes],
            clock: 0,
            seed,
            network,
            schedule,
        }
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn network_arc(&self) -> &Arc<RoadNetwork> {
        &self.network
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn horizon_s(&self) -> u32 {
        self.schedule.horizon_s()
    }

    pub fn phase(&self, id: IntersectionId) -> Result<PhaseId> {
        self.phases
            .get(id.0)
            .copied()
            .ok_or(Error::UnknownIntersection(id.0))
    }

    pub fn phases(&self) -> &[PhaseId] {
        &self.phases
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn pending_arrivals(&self) -> usize {
        self.schedule.len() - self.next_arrival
    }

    /// Vehicles that have been placed on a lane of the network.
    pub fn entered(&self) -> usize {
        self.entered
    }

    pub fn exited(&self) -> usize {
        self.exited
    }

    pub fn on_network(&self) -> usize {
        self.lanes.iter().map(LaneState::occupancy).sum()
    }

    /// Spawned vehicles still waiting at the boundary for room to enter.
    pub fn waiting_at_boundary(&self) -> usize {
        self.boundary.iter().map(VecDeque::len).sum()
    }

    pub fn lane_occupancy(&self, lane: LaneId) -> usize {
        self.lanes[lane.0].occupancy()
    }

    pub fn lane_queue(&self, lane: LaneId) -> usize {
        self.lanes[lane.0].queue.len()
    }

    /// Total vehicles ever released from `lane` through its stop line.
    pub fn released_from(&self, lane: LaneId) -> u64 {
        self.released_by_lane[lane.0]
    }

    /// Set every intersection's phase and advance `dt` one-second ticks.
    pub fn step(&mut self, actions: &[PhaseId], dt: u32) -> Result<()> {
        self.set_phases(actions)?;
        for _ in 0..dt {
            self.tick();
        }
        Ok(())
    }

    /// Like [`SimState::step`] but with raw phase indices.
    pub fn step_indices(&mut self, actions: &[usize], dt: u32) -> Result<()> {
        let phases = actions
            .iter()
            .map(|&a| PhaseId::new(a))
            .collect::<Result<Vec<_>>>()?;
        self.step(&phases, dt)
    }

    pub fn set_phases(&mut self, actions: &[PhaseId]) -> Result<()> {
        if actions.len() != self.phases.len() {
            return Err(Error::ActionCount {
                expected: self.phases.len(),
                got: actions.len(),
            });
        }
        self.phases.copy_from_slice(actions);
        Ok(())
    }

    pub fn set_phase(&mut self, id: IntersectionId, phase: PhaseId) -> Result<()> {
        let slot = self
            .phases
            .get_mut(id.0)
            .ok_or(Error::UnknownIntersection(id.0))?;
        *slot = phase;
        Ok(())
    }

    /// Advance the simulation by one second.
    pub fn tick(&mut self) {
        let now = self.clock;
        self.advance_transit(now);
        self.release_green();
        self.admit_arrivals(now);
        self.clock += 1;
    }

    fn advance_transit(&mut self, now: u32) {
        for lane_idx in 0..self.lanes.len() {
            let is_exit = self.network.lanes[lane_idx].is_exit();
            let lane = &mut self.lanes[lane_idx];
            for entry in lane.transit.iter_mut() {
                entry.1 = entry.1.saturating_sub(1);
            }
            while let Some(&(v, 0)) = lane.transit.front() {
                lane.transit.pop_front();
                let vehicle = &mut self.vehicles[v];
                if is_exit {
                    vehicle.exit_time_s = Some((now + 1) as f64);
                    vehicle.position = Position::Exited;
                    self.exited += 1;
                } else {
                    vehicle.position = Position::Queued { lane: LaneId(lane_idx) };
                    lane.queue.push_back(v);
                }
            }
            for &(v, remaining_s) in &lane.transit {
                self.vehicles[v].position = Position::Transit {
                    lane: LaneId(lane_idx),
                    remaining_s,
                };
            }
        }
    }

    fn release_green(&mut self) {
        let network = Arc::clone(&self.network);
        for node in &network.intersections {
            let phase = self.phases[node.id.0];
            for slot in 0..LANES_PER_INTERSECTION {
                let lane_id = node.incoming[slot];
                if !phase.permits(slot) {
                    self.lanes[lane_id.0].credit = 0.0;
                    continue;
                }
                let sat = network.lanes[lane_id.0].saturation_flow;
                let lane = &mut self.lanes[lane_id.0];
                lane.credit = (lane.credit + sat).min(sat.max(1.0));
                while self.lanes[lane_id.0].credit >= 1.0 {
                    let Some(&v) = self.lanes[lane_id.0].queue.front() else {
                        break;
                    };
                    let vehicle = &self.vehicles[v];
                    let next = vehicle.route[vehicle.leg + 1];
                    let next_lane = &network.lanes[next.0];
                    if self.lanes[next.0].occupancy() >= next_lane.capacity as usize {
                        break;
                    }
                    self.lanes[lane_id.0].queue.pop_front();
                    self.lanes[lane_id.0].credit -= 1.0;
                    self.released_by_lane[lane_id.0] += 1;
                    self.lanes[next.0].transit.push_back((v, next_lane.free_flow_s));
                    let vehicle = &mut self.vehicles[v];
                    vehicle.leg += 1;
                    vehicle.position = Position::Transit {
                        lane: next,
                        remaining_s: next_lane.free_flow_s,
                    };
                }
            }
        }
    }

    fn admit_arrivals(&mut self, now: u32) {
        let arrivals = self.schedule.arrivals();
        while self.next_arrival < arrivals.len() && arrivals[self.next_arrival].time_s < (now + 1) as f64 {
            let a = &arrivals[self.next_arrival];
            let id = self.vehicles.len();
            self.vehicles.push(Vehicle {
                id,
                route: Arc::from(a.route.as_slice()),
                leg: 0,
                entry_time_s: a.time_s,
                exit_time_s: None,
                position: Position::Boundary,
            });
            self.boundary[a.route[0].0].push_back(id);
            self.next_arrival += 1;
        }
        for lane_idx in 0..self.lanes.len() {
            let capacity = self.network.lanes[lane_idx].capacity as usize;
            while let Some(&v) = self.boundary[lane_idx].front() {
                if self.lanes[lane_idx].occupancy() >= capacity {
                    break;
                }
                self.boundary[lane_idx].pop_front();
                self.place(v, LaneId(lane_idx));
            }
        }
    }

    fn place(&mut self, v: usize, lane: LaneId) {
        let free_flow_s = self.network.lanes[lane.0].free_flow_s;
        self.lanes[lane.0].transit.push_back((v, free_flow_s));
        self.vehicles[v].position = Position::Transit {
            lane,
            remaining_s: free_flow_s,
        };
        self.entered += 1;
    }

    /// Put a vehicle directly at the back of the stop-line queue of its first
    /// route lane, as if it had just finished travelling it.
    pub fn insert_queued(&mut self, route: Vec<LaneId>) -> Result<usize> {
        self.network.validate_route(&route)?;
        let lane = route[0];
        if self.lanes[lane.0].occupancy() >= self.network.lanes[lane.0].capacity as usize {
            return Err(Error::Validation(format!(
                "lane `{}` is full",
                self.network.lanes[lane.0].name
            )));
        }
        let id = self.vehicles.len();
        self.vehicles.push(Vehicle {
            id,
            route: Arc::from(route.as_slice()),
            leg: 0,
            entry_time_s: self.clock as f64,
            exit_time_s: None,
            position: Position::Queued { lane },
        });
        self.lanes[lane.0].queue.push_back(id);
        self.entered += 1;
        Ok(id)
    }

    pub fn observe(&self, id: IntersectionId) -> Result<Observation> {
        let node = self.network.intersection(id)?;
        let mut lane_counts = [0u32; LANES_PER_INTERSECTION];
        for (slot, lane) in node.incoming.iter().enumerate() {
            lane_counts[slot] = self.lanes[lane.0].occupancy() as u32;
        }
        Ok(Observation {
            lane_counts,
            phase: self.phases[id.0],
        })
    }

    /// Lane counts divided by lane capacity, followed by the phase one-hot.
    pub fn observe_normalized(&self, id: IntersectionId) -> Result<Vec<f64>> {
        let node = self.network.intersection(id)?;
        let mut v = Vec::with_capacity(OBS_DIM);
        for lane in &node.incoming {
            v.push(self.lanes[lane.0].occupancy() as f64 / self.network.lanes[lane.0].capacity as f64);
        }
        v.extend(Observation::phase_onehot(&Observation {
            lane_counts: [0; LANES_PER_INTERSECTION],
            phase: self.phases[id.0],
        }));
        Ok(v)
    }

    pub fn queue_length(&self, id: IntersectionId) -> Result<usize> {
        self.queue_length_with(id, QueueMode::Stopped)
    }

    pub fn queue_length_with(&self, id: IntersectionId, mode: QueueMode) -> Result<usize> {
        let node = self.network.intersection(id)?;
        Ok(node
            .incoming
            .iter()
            .map(|l| match mode {
                QueueMode::Stopped => self.lanes[l.0].queue.len(),
                QueueMode::Total => self.lanes[l.0].occupancy(),
            })
            .sum())
    }

    /// Sum over the phase's movements of incoming minus outgoing lane count.
    pub fn pressure(&self, id: IntersectionId, phase: PhaseId) -> Result<i64> {
        let node = self.network.intersection(id)?;
        Ok(phase
            .movements()
            .iter()
            .map(|&(i, o)| {
                self.lanes[node.incoming[i].0].occupancy() as i64 - self.lanes[node.outgoing[o].0].occupancy() as i64
            })
            .sum())
    }

    /// Mean of exit minus entry time over every spawned vehicle; vehicles
    /// still travelling count up to the current clock.
    pub fn average_travel_time(&self) -> Result<f64> {
        if self.vehicles.is_empty() {
            return Err(Error::NoVehicles);
        }
        let end = self.clock as f64;
        let total: f64 = self
            .vehicles
            .iter()
            .map(|v| v.exit_time_s.unwrap_or(end) - v.entry_time_s)
            .sum();
        Ok(total / self.vehicles.len() as f64)
    }

    /// Check conservation and capacity bounds.
    pub fn check_invariants(&self) -> Result<()> {
        if self.entered != self.on_network() + self.exited {
            return Err(Error::Validation(format!(
                "conservation violated: entered {} != on network {} + exited {}",
                self.entered,
                self.on_network(),
                self.exited
            )));
        }
        for (lane, state) in self.network.lanes.iter().zip(&self.lanes) {
            if state.occupancy() > lane.capacity as usize {
                return Err(Error::Validation(format!(
                    "lane `{}` holds {} > capacity {}",
                    lane.name,
                    state.occupancy(),
                    lane.capacity
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{build_mixed, MixedProfile};
    use crate::netsim::{lane_slot, Direction, Turn};

    fn empty_state(rows: usize, cols: usize) -> SimState {
        let net = Arc::new(RoadNetwork::grid(rows, cols).unwrap());
        SimState::reset(net, Arc::new(ArrivalSchedule::empty(3600)), 0)
    }

    fn straight_route(state: &SimState, approach: Direction) -> Vec<LaneId> {
        let node = &state.network().intersections[0];
        let leg = approach.opposite();
        vec![
            node.incoming[lane_slot(approach, Turn::Straight)],
            node.outgoing[lane_slot(leg, Turn::Straight)],
        ]
    }

    fn phase(i: usize) -> PhaseId {
        PhaseId::new(i).unwrap()
    }

    #[test]
    fn empty_network_stays_empty() {
        let mut s = empty_state(2, 2);
        for k in 0..20 {
            s.step_indices(&[k % 4, 1, 2, 3], 5).unwrap();
            for i in 0..4 {
                assert_eq!(s.queue_length(IntersectionId(i)).unwrap(), 0);
            }
        }
        assert_eq!(s.clock(), 100);
        assert!(matches!(s.average_travel_time(), Err(Error::NoVehicles)));
    }

    #[test]
    fn green_releases_three_queued_vehicles_in_one_interval() {
        let mut s = empty_state(1, 1);
        let route = straight_route(&s, Direction::N);
        for _ in 0..3 {
            s.insert_queued(route.clone()).unwrap();
        }
        assert_eq!(s.queue_length(IntersectionId(0)).unwrap(), 3);
        s.step(&[phase(0)], 5).unwrap();
        assert_eq!(s.queue_length(IntersectionId(0)).unwrap(), 0);
        assert_eq!(s.released_from(route[0]), 3);
        assert_eq!(s.lane_occupancy(route[1]), 3);
    }

    #[test]
    fn red_movement_never_releases() {
        let mut s = empty_state(1, 1);
        let route = straight_route(&s, Direction::N);
        s.insert_queued(route.clone()).unwrap();
        s.step(&[phase(2)], 3600).unwrap();
        assert_eq!(s.released_from(route[0]), 0);
        assert_eq!(s.queue_length(IntersectionId(0)).unwrap(), 1);
    }

    #[test]
    fn vehicle_exits_after_free_flow() {
        let mut s = empty_state(1, 1);
        let route = straight_route(&s, Direction::W);
        s.insert_queued(route).unwrap();
        s.step(&[phase(2)], 30).unwrap();
        assert_eq!(s.exited(), 1);
        assert_eq!(s.vehicles()[0].exit_time_s, Some(21.0));
        assert_eq!(s.average_travel_time().unwrap(), 21.0);
    }

    #[test]
    fn unfinished_vehicles_count_up_to_clock() {
        let mut s = empty_state(1, 1);
        let route = straight_route(&s, Direction::W);
        s.step(&[phase(0)], 3400).unwrap();
        s.insert_queued(route).unwrap();
        s.step(&[phase(0)], 200).unwrap();
        assert_eq!(s.average_travel_time().unwrap(), 200.0);
    }

    #[test]
    fn observation_counts_and_onehot() {
        let mut s = empty_state(1, 1);
        let o = s.observe(IntersectionId(0)).unwrap();
        assert_eq!(o.to_vec(), [vec![0.0; 12], vec![1.0, 0.0, 0.0, 0.0]].concat());
        let node = s.network().intersections[0].clone();
        let left = vec![node.incoming[0], node.outgoing[lane_slot(Direction::E, Turn::Left)]];
        s.insert_queued(left.clone()).unwrap();
        s.insert_queued(left).unwrap();
        s.set_phase(IntersectionId(0), phase(2)).unwrap();
        let o = s.observe(IntersectionId(0)).unwrap();
        let mut expect = vec![0.0; 16];
        expect[0] = 2.0;
        expect[14] = 1.0;
        assert_eq!(o.to_vec(), expect);
        assert_eq!(s.observe_normalized(IntersectionId(0)).unwrap()[0], 2.0 / 40.0);
        assert!(matches!(s.observe(IntersectionId(3)), Err(Error::UnknownIntersection(3))));
    }

    #[test]
    fn queue_length_sums_lanes() {
        let mut s = empty_state(1, 1);
        let a = straight_route(&s, Direction::N);
        let b = straight_route(&s, Direction::E);
        for _ in 0..3 {
            s.insert_queued(a.clone()).unwrap();
        }
        for _ in 0..4 {
            s.insert_queued(b.clone()).unwrap();
        }
        let q = s.queue_length(IntersectionId(0)).unwrap();
        assert_eq!(q, 7);
        assert_eq!(-1.0 * q as f64, -7.0);
    }

    #[test]
    fn pressure_is_in_minus_out() {
        let mut s = empty_state(1, 1);
        let n = straight_route(&s, Direction::N);
        let sth = straight_route(&s, Direction::S);
        for _ in 0..5 {
            s.insert_queued(n.clone()).unwrap();
        }
        for _ in 0..3 {
            s.insert_queued(sth.clone()).unwrap();
        }
        // Two ticks of green move two vehicles from each approach downstream.
        s.step(&[phase(0)], 2).unwrap();
        assert_eq!(s.lane_occupancy(n[1]), 2);
        assert_eq!(s.lane_occupancy(sth[1]), 2);
        // in 3 and 1, out 2 and 2
        assert_eq!(s.pressure(IntersectionId(0), phase(0)).unwrap(), (3 - 2) + (1 - 2));
        assert_eq!(s.pressure(IntersectionId(0), phase(2)).unwrap(), 0);
    }

    #[test]
    fn bad_actions_are_rejected() {
        let mut s = empty_state(2, 2);
        assert!(matches!(s.step_indices(&[0, 0], 5), Err(Error::ActionCount { .. })));
        assert!(matches!(s.step_indices(&[0, 0, 0, 4], 5), Err(Error::InvalidPhase(4))));
    }

    #[test]
    fn reset_loads_schedule_and_is_deterministic() {
        let net = Arc::new(RoadNetwork::grid(2, 2).unwrap());
        let sched = Arc::new(build_mixed(MixedProfile::Low, &net, 3600, 3).unwrap());
        let a = SimState::reset(net.clone(), sched.clone(), 7);
        let b = SimState::reset(net, sched, 7);
        assert_eq!(a, b);
        assert_eq!(a.pending_arrivals(), 2550);
    }

    #[test]
    fn conservation_and_capacity_under_load() {
        let net = Arc::new(RoadNetwork::grid(2, 2).unwrap());
        let sched = Arc::new(build_mixed(MixedProfile::High, &net, 3600, 1).unwrap());
        let mut s = SimState::reset(net, sched, 1);
        for k in 0..720 {
            s.step_indices(&[k % 4, (k / 3) % 4, 0, 2], 5).unwrap();
            s.check_invariants().unwrap();
        }
        assert_eq!(s.clock(), 3600);
        assert_eq!(s.vehicles().len(), 4770);
        assert!(s.exited() > 0);
        assert!(s.average_travel_time().unwrap() > 0.0);
    }
}
