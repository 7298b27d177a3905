//! Classical signal controllers: Random, Fixedtime, FixedtimeOffset,
//! MaxPressure and SOTL.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netsim::{IntersectionId, Observation, PhaseId, SimState};
use crate::{Error, Result, LANES_PER_INTERSECTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Random,
    Fixedtime,
    FixedtimeOffset,
    #[serde(rename = "maxpressure")]
    MaxPressure,
    Sotl,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::Random,
        ControllerKind::Fixedtime,
        ControllerKind::FixedtimeOffset,
        ControllerKind::MaxPressure,
        ControllerKind::Sotl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Random => "random",
            ControllerKind::Fixedtime => "fixedtime",
            ControllerKind::FixedtimeOffset => "fixedtime_offset",
            ControllerKind::MaxPressure => "maxpressure",
            ControllerKind::Sotl => "sotl",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SotlParams {
    /// Red-approach demand, in vehicle-seconds, needed to request a switch.
    #[serde(default = "default_theta")]
    pub theta_demand: f64,
    #[serde(default = "default_min_green")]
    pub min_green_s: u32,
}

fn default_theta() -> f64 {
    30.0
}

fn default_min_green() -> u32 {
    10
}

impl Default for SotlParams {
    fn default() -> Self {
        SotlParams {
            theta_demand: default_theta(),
            min_green_s: default_min_green(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    /// Green duration per phase of the fixed-time cycle, seconds.
    #[serde(default = "default_plan")]
    pub plan: Vec<u32>,
    /// Per-intersection cycle offsets in seconds; missing entries are 0.
    #[serde(default)]
    pub offsets: Vec<u32>,
    #[serde(default)]
    pub sotl: SotlParams,
    /// Phases the random controller draws from.
    #[serde(default = "default_phases")]
    pub phases: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_plan() -> Vec<u32> {
    vec![30; 4]
}

fn default_phases() -> Vec<usize> {
    (0..4).collect()
}

impl ControllerSpec {
    pub fn new(kind: ControllerKind, seed: u64) -> Self {
        ControllerSpec {
            kind,
            plan: default_plan(),
            offsets: Vec::new(),
            sotl: SotlParams::default(),
            phases: default_phases(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ControllerKind::Fixedtime | ControllerKind::FixedtimeOffset => {
                if self.plan.is_empty() || self.plan.len() > 4 || self.plan.contains(&0) {
                    return Err(Error::Config(format!(
                        "fixed-time plan needs 1 to 4 positive durations, got {:?}",
                        self.plan
                    )));
                }
            }
            ControllerKind::Random => {
                if self.phases.is_empty() {
                    return Err(Error::Config("random controller needs at least one phase".into()));
                }
                for &p in &self.phases {
                    PhaseId::new(p)?;
                }
            }
            ControllerKind::Sotl => {
                if !(self.sotl.theta_demand >= 0.0) {
                    return Err(Error::Config(format!("sotl theta_demand {}", self.sotl.theta_demand)));
                }
            }
            ControllerKind::MaxPressure => {}
        }
        Ok(())
    }
}

/// Uniform draw over `phases`.
pub fn random_phase(phases: &[PhaseId], rng: &mut impl Rng) -> PhaseId {
    phases[rng.random_range(0..phases.len())]
}

/// Phase active at `clock + offset` in a cyclic plan of green durations.
pub fn fixedtime_phase(plan: &[u32], clock: u32, offset: u32) -> Result<PhaseId> {
    if plan.is_empty() || plan.contains(&0) {
        return Err(Error::Config(format!("fixed-time plan {plan:?}")));
    }
    let cycle: u64 = plan.iter().map(|&d| d as u64).sum();
    let mut t = (clock as u64 + offset as u64) % cycle;
    for (i, &d) in plan.iter().enumerate() {
        if t < d as u64 {
            return PhaseId::new(i);
        }
        t -= d as u64;
    }
    unreachable!("position within the cycle always falls in some phase")
}

/// Phase with the highest pressure; ties go to the lowest index.
pub fn maxpressure_phase(state: &SimState, id: IntersectionId) -> Result<PhaseId> {
    let mut best = PhaseId::new(0)?;
    let mut best_p = i64::MIN;
    for phase in PhaseId::all() {
        let p = state.pressure(id, phase)?;
        if p > best_p {
            best = phase;
            best_p = p;
        }
    }
    Ok(best)
}

/// Vehicles waiting on lanes the current phase does not serve.
pub fn red_demand(obs: &Observation) -> u32 {
    (0..LANES_PER_INTERSECTION)
        .filter(|&slot| !obs.phase.permits(slot))
        .map(|slot| obs.lane_counts[slot])
        .sum()
}

/// SOTL rule: hold the current phase until it has been green for at least
/// `min_green_s` and the accumulated red demand reaches `theta_demand`.
pub fn sotl_phase(params: &SotlParams, current: PhaseId, green_elapsed_s: u32, demand: f64) -> PhaseId {
    if green_elapsed_s >= params.min_green_s && demand >= params.theta_demand && demand > 0.0 {
        current.next()
    } else {
        current
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct SotlTracker {
    green_elapsed_s: u32,
    demand: f64,
}

/// A classical controller driving every intersection of a network.
#[derive(Debug, Clone)]
pub struct ClassicalController {
    spec: ControllerSpec,
    rng: ChaCha8Rng,
    phases: Vec<PhaseId>,
    sotl: Vec<SotlTracker>,
}

impl ClassicalController {
    pub fn new(spec: ControllerSpec) -> Result<Self> {
        spec.validate()?;
        let phases = spec
            .phases
            .iter()
            .map(|&p| PhaseId::new(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassicalController {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            phases,
            sotl: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ControllerSpec {
        &self.spec
    }

    /// Phases for every intersection given the state at a decision point.
    /// `interval_s` is the time until the next decision.
    pub fn decide(&mut self, state: &SimState, interval_s: u32) -> Result<Vec<PhaseId>> {
        let n = state.network().num_intersections();
        let mut out = Vec::with_capacity(n);
        match self.spec.kind {
            ControllerKind::Random => {
                for _ in 0..n {
                    out.push(random_phase(&self.phases, &mut self.rng));
                }
            }
            ControllerKind::Fixedtime => {
                for _ in 0..n {
                    out.push(fixedtime_phase(&self.spec.plan, state.clock(), 0)?);
                }
            }
            ControllerKind::FixedtimeOffset => {
                for i in 0..n {
                    let offset = self.spec.offsets.get(i).copied().unwrap_or(0);
                    out.push(fixedtime_phase(&self.spec.plan, state.clock(), offset)?);
                }
            }
            ControllerKind::MaxPressure => {
                for i in 0..n {
                    out.push(maxpressure_phase(state, IntersectionId(i))?);
                }
            }
            ControllerKind::Sotl => {
                self.sotl.resize(n, SotlTracker::default());
                for i in 0..n {
                    let id = IntersectionId(i);
                    let current = state.phase(id)?;
                    let tracker = &mut self.sotl[i];
                    let next = sotl_phase(&self.spec.sotl, current, tracker.green_elapsed_s, tracker.demand);
                    if next != current {
                        *tracker = SotlTracker::default();
                    }
                    let obs = state.observe(id)?;
                    let red = red_demand(&Observation { phase: next, ..obs });
                    tracker.green_elapsed_s += interval_s;
                    tracker.demand += red as f64 * interval_s as f64;
                    out.push(next);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::ArrivalSchedule;
    use crate::netsim::{lane_slot, Direction, RoadNetwork, Turn};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn p(i: usize) -> PhaseId {
        PhaseId::new(i).unwrap()
    }

    #[test]
    fn random_is_uniform_and_seeded() {
        let phases: Vec<PhaseId> = PhaseId::all().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        let draws: Vec<PhaseId> = (0..10_000).map(|_| random_phase(&phases, &mut rng)).collect();
        for d in &draws {
            counts[d.index()] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.23..=0.27).contains(&f), "{f}");
        }
        let mut again = ChaCha8Rng::seed_from_u64(11);
        let replay: Vec<PhaseId> = (0..10_000).map(|_| random_phase(&phases, &mut again)).collect();
        assert_eq!(draws, replay);
        assert!((0..50).all(|_| random_phase(&[p(2)], &mut rng) == p(2)));
    }

    #[test]
    fn fixedtime_lookup() {
        let plan = [30, 30, 30, 30];
        assert_eq!(fixedtime_phase(&plan, 0, 0).unwrap(), p(0));
        assert_eq!(fixedtime_phase(&plan, 95, 0).unwrap(), p(3));
        assert_eq!(fixedtime_phase(&plan, 120, 0).unwrap(), p(0));
        assert_eq!(fixedtime_phase(&plan, 0, 35).unwrap(), p(1));
        assert!(fixedtime_phase(&[30, 0], 0, 0).is_err());
        let mut spec = ControllerSpec::new(ControllerKind::Fixedtime, 0);
        spec.plan = vec![];
        assert!(ClassicalController::new(spec).is_err());
    }

    #[test]
    fn sotl_rule() {
        let params = SotlParams::default();
        assert_eq!(sotl_phase(&params, p(0), 1000, 0.0), p(0));
        assert_eq!(sotl_phase(&params, p(0), 10, 31.0), p(1));
        assert_eq!(sotl_phase(&params, p(3), 10, 31.0), p(0));
        assert_eq!(sotl_phase(&params, p(0), 5, 1e9), p(0));
    }

    fn single() -> SimState {
        let net = Arc::new(RoadNetwork::grid(1, 1).unwrap());
        SimState::reset(net, Arc::new(ArrivalSchedule::empty(3600)), 0)
    }

    fn load(state: &mut SimState, approach: Direction, turn: Turn, n: usize) {
        let node = state.network().intersections[0].clone();
        let slot = lane_slot(approach, turn);
        let leg = crate::netsim::exit_leg(approach, turn);
        let route = vec![node.incoming[slot], node.outgoing[lane_slot(leg, turn)]];
        for _ in 0..n {
            state.insert_queued(route.clone()).unwrap();
        }
    }

    #[test]
    fn maxpressure_picks_heaviest_phase() {
        let mut s = single();
        assert_eq!(maxpressure_phase(&s, IntersectionId(0)).unwrap(), p(0));
        load(&mut s, Direction::E, Turn::Left, 4);
        assert_eq!(maxpressure_phase(&s, IntersectionId(0)).unwrap(), p(3));
        load(&mut s, Direction::N, Turn::Straight, 5);
        assert_eq!(maxpressure_phase(&s, IntersectionId(0)).unwrap(), p(0));
        let mut c = ClassicalController::new(ControllerSpec::new(ControllerKind::MaxPressure, 0)).unwrap();
        assert_eq!(c.decide(&s, 5).unwrap(), vec![p(0)]);
    }

    #[test]
    fn sotl_controller_holds_without_demand_and_switches_with_it() {
        let mut s = single();
        let mut c = ClassicalController::new(ControllerSpec::new(ControllerKind::Sotl, 0)).unwrap();
        for _ in 0..50 {
            let a = c.decide(&s, 5).unwrap();
            assert_eq!(a, vec![p(0)]);
            s.step(&a, 5).unwrap();
        }
        load(&mut s, Direction::E, Turn::Straight, 7);
        let mut seen = Vec::new();
        for _ in 0..4 {
            let a = c.decide(&s, 5).unwrap();
            seen.push(a[0]);
            s.step(&a, 5).unwrap();
        }
        assert_eq!(seen[0], p(0));
        assert!(seen.contains(&p(1)));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(k.name().parse::<ControllerKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("slidingformula".parse::<ControllerKind>().is_err());
    }

    proptest! {
        #[test]
        // Every phase serves six incoming lanes, so adding `shift` vehicles to
        // each incoming lane raises every pressure by the same amount.
        fn maxpressure_invariant_to_uniform_shift(
            counts in proptest::collection::vec(0usize..6, 12),
            shift in 1usize..5,
        ) {
            let mut a = single();
            let mut b = single();
            for approach in Direction::ALL {
                for turn in Turn::ALL {
                    let slot = lane_slot(approach, turn);
                    load(&mut a, approach, turn, counts[slot]);
                    load(&mut b, approach, turn, counts[slot] + shift);
                }
            }
            prop_assert_eq!(
                maxpressure_phase(&a, IntersectionId(0)).unwrap(),
                maxpressure_phase(&b, IntersectionId(0)).unwrap()
            );
        }
    }
}
