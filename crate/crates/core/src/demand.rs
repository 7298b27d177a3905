//! Arrival schedules: explicit replay lists and the synthetic piecewise-rate
//! `mixed_low` / `mixed_high` profiles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::netsim::{LaneId, RoadNetwork};
use crate::{Error, Result};

pub const FLOW_FORMAT: &str = "metavim-flow-v1";
pub const MIXED_HORIZON_S: u32 = 3600;
pub const MIXED_INTERVAL_S: f64 = 600.0;

/// Per-interval arrival rates (veh/s) for the six ten-minute intervals.
pub const MIXED_LOW_RATES: [f64; 6] = [0.30, 0.55, 1.05, 1.05, 0.55, 0.75];
pub const MIXED_HIGH_RATES: [f64; 6] = [0.55, 0.33, 4.00, 0.33, 1.22, 1.52];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time_s: f64,
    pub route: Vec<LaneId>,
}

/// Time-sorted arrivals within `[0, horizon_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSchedule {
    horizon_s: u32,
    arrivals: Vec<Arrival>,
}

impl ArrivalSchedule {
    pub fn new(horizon_s: u32, mut arrivals: Vec<Arrival>) -> Result<Self> {
        for a in &arrivals {
            if !(a.time_s >= 0.0 && a.time_s <= horizon_s as f64) {
                return Err(Error::OutOfRange(format!(
                    "arrival time {} (horizon {horizon_s} s)",
                    a.time_s
                )));
            }
        }
        arrivals.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
        Ok(ArrivalSchedule { horizon_s, arrivals })
    }

    pub fn empty(horizon_s: u32) -> Self {
        ArrivalSchedule {
            horizon_s,
            arrivals: Vec::new(),
        }
    }

    pub fn horizon_s(&self) -> u32 {
        self.horizon_s
    }

    pub fn arrivals(&self) -> &[Arrival] {
        &self.arrivals
    }

    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }

    pub fn count_in(&self, start_s: f64, end_s: f64) -> usize {
        self.arrivals
            .iter()
            .filter(|a| a.time_s >= start_s && a.time_s < end_s)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixedProfile {
    Low,
    High,
}

impl MixedProfile {
    pub fn rates(self) -> [f64; 6] {
        match self {
            MixedProfile::Low => MIXED_LOW_RATES,
            MixedProfile::High => MIXED_HIGH_RATES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Evenly spaced arrivals inside each interval; exact totals.
    #[default]
    Deterministic,
    /// Exponential inter-arrival gaps at the interval rate.
    Poisson,
}

pub fn build_mixed(
    profile: MixedProfile,
    network: &RoadNetwork,
    horizon_s: u32,
    seed: u64,
) -> Result<ArrivalSchedule> {
    build_mixed_with(profile, network, horizon_s, seed, ArrivalProcess::Deterministic)
}

pub fn build_mixed_with(
    profile: MixedProfile,
    network: &RoadNetwork,
    horizon_s: u32,
    seed: u64,
    process: ArrivalProcess,
) -> Result<ArrivalSchedule> {
    if horizon_s != MIXED_HORIZON_S {
        return Err(Error::HorizonMismatch {
            expected: MIXED_HORIZON_S,
            got: horizon_s,
        });
    }
    build_piecewise(&profile.rates(), MIXED_INTERVAL_S, network, horizon_s, seed, process)
}

/// Piecewise-constant rates over consecutive intervals of `interval_s`
/// seconds. Routes are drawn uniformly from the network's boundary routes.
pub fn build_piecewise(
    rates: &[f64],
    interval_s: f64,
    network: &RoadNetwork,
    horizon_s: u32,
    seed: u64,
    process: ArrivalProcess,
) -> Result<ArrivalSchedule> {
    if !(interval_s > 0.0) || rates.len() as f64 * interval_s > horizon_s as f64 + 1e-9 {
        return Err(Error::OutOfRange(format!(
            "{} intervals of {interval_s} s within a {horizon_s} s horizon",
            rates.len()
        )));
    }
    if let Some(r) = rates.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::OutOfRange(format!("rate {r}")));
    }
    let routes = network.boundary_routes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrivals = Vec::new();
    for (k, &rate) in rates.iter().enumerate() {
        let start = k as f64 * interval_s;
        let end = start + interval_s;
        for t in interval_times(start, end, rate, process, &mut rng)? {
            let route = routes[rng.random_range(0..routes.len())].clone();
            arrivals.push(Arrival { time_s: t, route });
        }
    }
    ArrivalSchedule::new(horizon_s, arrivals)
}

fn interval_times(
    start: f64,
    end: f64,
    rate: f64,
    process: ArrivalProcess,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    match process {
        ArrivalProcess::Deterministic => {
            let n = (rate * (end - start)).round() as usize;
            let spacing = (end - start) / n.max(1) as f64;
            Ok((0..n).map(|i| start + i as f64 * spacing).collect())
        }
        ArrivalProcess::Poisson => {
            let exp = Exp::new(rate).map_err(|e| Error::OutOfRange(format!("rate {rate}: {e}")))?;
            let mut times = Vec::new();
            let mut t = start + exp.sample(rng);
            while t < end {
                times.push(t);
                t += exp.sample(rng);
            }
            Ok(times)
        }
    }
}

// ---- flow documents ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDoc {
    /// Lane names from entry lane to exit lane.
    pub route: Vec<String>,
    pub start_s: f64,
    pub end_s: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleDoc {
    pub route: Vec<String>,
    pub entry_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDocument {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicles: Option<Vec<VehicleDoc>>,
}

impl FlowDocument {
    pub fn replay(vehicles: Vec<VehicleDoc>) -> Self {
        FlowDocument {
            format: FLOW_FORMAT.to_string(),
            segments: None,
            vehicles: Some(vehicles),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("flow document serializes")
    }
}

pub fn parse_flow(text: &str) -> Result<FlowDocument> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: FlowDocument = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if doc.format != FLOW_FORMAT {
        return Err(Error::Parse {
            field: "format".into(),
            message: format!("expected `{FLOW_FORMAT}`, got `{}`", doc.format),
        });
    }
    Ok(doc)
}

fn resolve_route(network: &RoadNetwork, names: &[String]) -> Result<Vec<LaneId>> {
    let route = names
        .iter()
        .map(|n| network.lane_by_name(n).ok_or_else(|| Error::UnknownLane(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    network.validate_route(&route)?;
    Ok(route)
}

/// Replay an explicit vehicle list, sorted by entry time.
pub fn build_replay(doc: &FlowDocument, network: &RoadNetwork, horizon_s: u32) -> Result<ArrivalSchedule> {
    let vehicles = doc.vehicles.as_ref().ok_or_else(|| Error::Parse {
        field: "vehicles".into(),
        message: "replay requires an explicit vehicle list".into(),
    })?;
    let arrivals = vehicles
        .iter()
        .map(|v| {
            Ok(Arrival {
                time_s: v.entry_time_s,
                route: resolve_route(network, &v.route)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ArrivalSchedule::new(horizon_s, arrivals)
}

/// Expand both `segments` (evenly spaced at each segment's rate) and
/// `vehicles` into one schedule.
pub fn build_flow(doc: &FlowDocument, network: &RoadNetwork, horizon_s: u32) -> Result<ArrivalSchedule> {
    let mut arrivals = match &doc.vehicles {
        Some(_) => build_replay(doc, network, horizon_s)?.arrivals,
        None => Vec::new(),
    };
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for seg in doc.segments.iter().flatten() {
        if !(seg.start_s >= 0.0 && seg.start_s < seg.end_s && seg.end_s <= horizon_s as f64) {
            return Err(Error::OutOfRange(format!("segment [{}, {})", seg.start_s, seg.end_s)));
        }
        if !(seg.rate >= 0.0) {
            return Err(Error::OutOfRange(format!("segment rate {}", seg.rate)));
        }
        let route = resolve_route(network, &seg.route)?;
        for t in interval_times(seg.start_s, seg.end_s, seg.rate, ArrivalProcess::Deterministic, &mut unused)? {
            arrivals.push(Arrival {
                time_s: t,
                route: route.clone(),
            });
        }
    }
    ArrivalSchedule::new(horizon_s, arrivals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_route(net: &RoadNetwork) -> Vec<String> {
        vec![
            "in:intersection_0_0:W:straight".to_string(),
            "out:intersection_0_0:E:straight".to_string(),
        ]
        .into_iter()
        .inspect(|n| assert!(net.lane_by_name(n).is_some(), "{n}"))
        .collect()
    }

    #[test]
    fn replay_sorts_and_handles_empty() {
        let net = RoadNetwork::grid(1, 1).unwrap();
        let empty = FlowDocument::replay(vec![]);
        assert!(build_replay(&empty, &net, 3600).unwrap().is_empty());

        let route = straight_route(&net);
        let doc = FlowDocument::replay(
            [5.0, 1.0, 9.0]
                .iter()
                .map(|&t| VehicleDoc {
                    route: route.clone(),
                    entry_time_s: t,
                })
                .collect(),
        );
        let parsed = parse_flow(&doc.to_json()).unwrap();
        let s = build_replay(&parsed, &net, 3600).unwrap();
        let times: Vec<f64> = s.arrivals().iter().map(|a| a.time_s).collect();
        assert_eq!(times, vec![1.0, 5.0, 9.0]);
    }

    #[test]
    fn replay_of_1775_records() {
        let net = RoadNetwork::grid(2, 2).unwrap();
        let routes = net.boundary_routes();
        let vehicles = (0..1775)
            .map(|i| VehicleDoc {
                route: routes[i % routes.len()]
                    .iter()
                    .map(|l| net.lane(*l).name.clone())
                    .collect(),
                entry_time_s: (i * 7919 % 3600) as f64,
            })
            .collect();
        let s = build_replay(&FlowDocument::replay(vehicles), &net, 3600).unwrap();
        assert_eq!(s.len(), 1775);
        assert!(s.arrivals().windows(2).all(|w| w[0].time_s <= w[1].time_s));
    }

    #[test]
    fn replay_rejects_unknown_lanes_and_missing_list() {
        let net = RoadNetwork::grid(1, 1).unwrap();
        let doc = FlowDocument::replay(vec![VehicleDoc {
            route: vec!["in:nowhere".into()],
            entry_time_s: 0.0,
        }]);
        assert!(matches!(build_replay(&doc, &net, 3600), Err(Error::UnknownLane(_))));
        let no_list = parse_flow(r#"{"format": "metavim-flow-v1", "segments": []}"#).unwrap();
        assert!(matches!(build_replay(&no_list, &net, 3600), Err(Error::Parse { .. })));
        assert!(parse_flow(r#"{"format": "metavim-flow-v1", "vehicles": [{"route": []}]}"#).is_err());
    }

    #[test]
    fn mixed_profile_totals() {
        let net = RoadNetwork::grid(2, 2).unwrap();
        let low = build_mixed(MixedProfile::Low, &net, 3600, 1).unwrap();
        assert_eq!(low.len(), 2550);
        let high = build_mixed(MixedProfile::High, &net, 3600, 1).unwrap();
        assert_eq!(high.len(), 4770);
        assert_eq!(high.count_in(1200.0, 1800.0), 2400);
        for (k, rate) in MIXED_LOW_RATES.iter().enumerate() {
            let start = k as f64 * 600.0;
            assert_eq!(low.count_in(start, start + 600.0), (rate * 600.0).round() as usize);
        }
        assert!(matches!(
            build_mixed(MixedProfile::Low, &net, 1800, 1),
            Err(Error::HorizonMismatch { .. })
        ));
    }

    #[test]
    fn mixed_is_seeded_and_routes_are_valid() {
        let net = RoadNetwork::grid(2, 2).unwrap();
        let a = build_mixed(MixedProfile::Low, &net, 3600, 9).unwrap();
        let b = build_mixed(MixedProfile::Low, &net, 3600, 9).unwrap();
        let c = build_mixed(MixedProfile::Low, &net, 3600, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for arr in a.arrivals() {
            net.validate_route(&arr.route).unwrap();
        }
    }

    #[test]
    fn zero_rates_give_empty_schedule() {
        let net = RoadNetwork::grid(1, 1).unwrap();
        let s = build_piecewise(&[0.0; 6], 600.0, &net, 3600, 0, ArrivalProcess::Deterministic).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn poisson_is_seeded() {
        let net = RoadNetwork::grid(1, 1).unwrap();
        let a = build_mixed_with(MixedProfile::Low, &net, 3600, 4, ArrivalProcess::Poisson).unwrap();
        let b = build_mixed_with(MixedProfile::Low, &net, 3600, 4, ArrivalProcess::Poisson).unwrap();
        assert_eq!(a, b);
        assert!((a.len() as f64 - 2550.0).abs() < 300.0);
    }

    #[test]
    fn segments_expand_evenly() {
        let net = RoadNetwork::grid(1, 1).unwrap();
        let doc = FlowDocument {
            format: FLOW_FORMAT.into(),
            segments: Some(vec![SegmentDoc {
                route: straight_route(&net),
                start_s: 100.0,
                end_s: 200.0,
                rate: 0.5,
            }]),
            vehicles: None,
        };
        let s = build_flow(&doc, &net, 3600).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.arrivals()[1].time_s, 102.0);
    }
}
