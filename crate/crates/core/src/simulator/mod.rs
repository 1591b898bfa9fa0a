//! Synthetic order-event generation: Poisson arrivals with daily peak
//! periods, lognormal delivery durations stretched by weather and congestion,
//! and spatially contiguous weather episodes.
//!
//! Days are generated from per-day derived RNG streams, so per-day generation
//! could run in parallel and merge-sort by creation time without changing the
//! output; the implementation here runs sequentially.

mod calendar;
mod events;

pub use calendar::{
    peak_at, peak_of_minute, RegimeCalendar, WeatherEvent, PEAK_LABELS, WEATHER_LABELS,
    PEAK_AFTERNOON_TEA, PEAK_BREAKFAST, PEAK_EVENING_RUSH, PEAK_MORNING_RUSH, PEAK_NIGHT_SNACK,
    PEAK_OFF, WEATHER_NEIGHBOR_SPAN,
};
pub use events::{read_events, write_events, OrderEvent, MAX_DURATION_S};

use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{nearest_neighbors, DistrictGeo};

/// Minutes of lag applied to neighbor load before it spills into a district's
/// own congestion; the mechanism that makes neighbor history predictive.
const SPILLOVER_LAG_MIN: usize = 10;

/// Hard floor on a delivery duration, in minutes.
const MIN_DURATION_MIN: f64 = 5.0;

/// All orders resolve within this many seconds of the last creation; the
/// log therefore stays label-complete given a four-hour drain after the last
/// sampled window.
pub const DRAIN_PERIOD_S: i64 = MAX_DURATION_S;

/// Simulation settings. `seed` fixes the full output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub district_count: usize,
    pub days: u32,
    /// Operating window as minutes of day, half-open.
    pub operating_start_min: u32,
    pub operating_end_min: u32,
    /// Base order arrivals per district per minute.
    pub base_rate_per_min: f64,
    /// Arrival multipliers by peak label (off-peak first, Table-2 order).
    pub peak_multipliers: [f64; 6],
    /// Duration multipliers by weather level (normal first).
    pub weather_multipliers: [f64; 4],
    /// Rider capacity per district; congestion grows in open orders/capacity.
    pub rider_capacity: f64,
    pub weather_events_per_day: f64,
    pub weather_event_duration_min: f64,
    /// Epoch second of day 0, 00:00 UTC.
    pub start_epoch: i64,
    pub seed: u64,
    /// Median of the lognormal base duration, minutes.
    pub duration_median_min: f64,
    pub duration_sigma: f64,
    pub congestion_gain: f64,
    /// Weight of lagged neighbor load in a district's congestion.
    pub spillover: f64,
    pub cancel_base: f64,
    pub city_center_lng: f64,
    pub city_center_lat: f64,
    pub city_radius_deg: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            district_count: 30,
            days: 18,
            operating_start_min: 660, // 11:00
            operating_end_min: 960,   // 16:00
            base_rate_per_min: 0.8,
            peak_multipliers: [1.0, 1.5, 3.0, 1.8, 3.0, 1.6],
            weather_multipliers: [1.0, 1.15, 1.35, 1.7],
            rider_capacity: 80.0,
            weather_events_per_day: 2.0,
            weather_event_duration_min: 90.0,
            start_epoch: 1_699_833_600, // a Monday, 00:00 UTC
            seed: 42,
            duration_median_min: 30.0,
            duration_sigma: 0.35,
            congestion_gain: 0.35,
            spillover: 0.5,
            cancel_base: 0.03,
            city_center_lng: 121.45,
            city_center_lat: 31.25,
            city_radius_deg: 0.18,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| -> Result<()> {
            Err(Error::Config(format!("sim.{field}: {why}")))
        };
        if self.district_count < 2 {
            return bad("district_count", "need at least 2 districts");
        }
        if self.days == 0 {
            return bad("days", "must be at least 1");
        }
        if self.operating_start_min >= self.operating_end_min || self.operating_end_min > 1440 {
            return bad("operating_end_min", "window must satisfy start < end <= 1440");
        }
        if !(self.base_rate_per_min > 0.0) {
            return bad("base_rate_per_min", "must be positive");
        }
        if self.peak_multipliers.iter().any(|m| !(*m >= 0.0)) {
            return bad("peak_multipliers", "must be non-negative");
        }
        if self.weather_multipliers.iter().any(|m| !(*m > 0.0)) {
            return bad("weather_multipliers", "must be positive");
        }
        if !(self.rider_capacity > 0.0) {
            return bad("rider_capacity", "must be positive");
        }
        if !(self.weather_events_per_day >= 0.0) {
            return bad("weather_events_per_day", "must be non-negative");
        }
        if !(self.weather_event_duration_min > 0.0) {
            return bad("weather_event_duration_min", "must be positive");
        }
        if !(self.duration_median_min >= MIN_DURATION_MIN) {
            return bad("duration_median_min", "must be at least 5 minutes");
        }
        if !(self.duration_sigma > 0.0) {
            return bad("duration_sigma", "must be positive");
        }
        if !(self.congestion_gain >= 0.0) {
            return bad("congestion_gain", "must be non-negative");
        }
        if !(self.spillover >= 0.0) {
            return bad("spillover", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.cancel_base) {
            return bad("cancel_base", "must be in [0, 1)");
        }
        if !(self.city_radius_deg > 0.0) {
            return bad("city_radius_deg", "must be positive");
        }
        if self.city_center_lat.abs() + self.city_radius_deg >= 85.0 {
            return bad("city_center_lat", "city must stay inside the Mercator band");
        }
        Ok(())
    }

    /// Epoch second at which day `day` begins.
    pub fn day_epoch(&self, day: u32) -> i64 {
        self.start_epoch + day as i64 * 86_400
    }

    /// End of the simulated horizon including the drain period: every order
    /// in the log has resolved by this time.
    pub fn horizon_end(&self) -> i64 {
        self.day_epoch(self.days - 1) + self.operating_end_min as i64 * 60 + DRAIN_PERIOD_S
    }
}

/// Scatters `district_count` district centers over a disk around the city
/// center, deterministically from the seed.
pub fn generate_districts(cfg: &SimConfig) -> Result<Vec<DistrictGeo>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut districts = Vec::with_capacity(cfg.district_count);
    for i in 0..cfg.district_count {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let r = cfg.city_radius_deg * rng.random::<f64>().sqrt();
        let lng = cfg.city_center_lng + r * theta.cos();
        let lat = cfg.city_center_lat + r * theta.sin() * 0.85;
        districts.push(DistrictGeo::from_raw(100 + i as u64, lng, lat)?);
    }
    Ok(districts)
}

/// Per-district stable demand multipliers (lognormal around 1), drawn from a
/// dedicated stream so they do not disturb order generation.
fn demand_factors(cfg: &SimConfig, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let dist = LogNormal::new(0.0, 0.25).expect("valid lognormal");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Generates the full event stream, deriving the weather calendar from the
/// config. Returns events ordered by creation time.
pub fn simulate(cfg: &SimConfig, districts: &[DistrictGeo]) -> Result<Vec<OrderEvent>> {
    if districts.is_empty() {
        return Err(Error::Config("sim: districts must be non-empty".into()));
    }
    cfg.validate()?;
    let calendar = RegimeCalendar::generate(cfg, districts)?;
    simulate_with_calendar(cfg, districts, &calendar)
}

/// Generates the event stream under an explicit weather calendar.
pub fn simulate_with_calendar(
    cfg: &SimConfig,
    districts: &[DistrictGeo],
    calendar: &RegimeCalendar,
) -> Result<Vec<OrderEvent>> {
    if districts.is_empty() {
        return Err(Error::Config("sim: districts must be non-empty".into()));
    }
    cfg.validate()?;
    let mut sorted: Vec<&DistrictGeo> = districts.iter().collect();
    sorted.sort_by_key(|d| d.district_id);

    let span = WEATHER_NEIGHBOR_SPAN.min(sorted.len() - 1);
    let owned: Vec<DistrictGeo> = sorted.iter().map(|d| (*d).clone()).collect();
    let neighbor_map = nearest_neighbors(&owned, span + 1)?;
    let index_of: std::collections::BTreeMap<u64, usize> = sorted
        .iter()
        .enumerate()
        .map(|(i, d)| (d.district_id, i))
        .collect();
    // neighbor indices (excluding self) per district
    let neighbors: Vec<Vec<usize>> = sorted
        .iter()
        .map(|d| {
            neighbor_map[&d.district_id][1..]
                .iter()
                .map(|id| index_of[id])
                .collect()
        })
        .collect();
    let demand = demand_factors(cfg, sorted.len());

    let op_start = cfg.operating_start_min as usize;
    let op_end = cfg.operating_end_min as usize;
    let op_len = op_end - op_start;
    let duration_dist = LogNormal::new(cfg.duration_median_min.ln(), cfg.duration_sigma)
        .map_err(|e| Error::Config(format!("sim.duration_median_min: {e}")))?;

    let mut events = Vec::new();
    for day in 0..cfg.days {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(10 + day as u64);
        let day_epoch = cfg.day_epoch(day);
        let mut seq: u64 = 0;

        // open-order tracking per district: resolution heap + per-minute history
        let mut open: Vec<u32> = vec![0; sorted.len()];
        let mut resolve: Vec<BinaryHeap<std::cmp::Reverse<i64>>> =
            vec![BinaryHeap::new(); sorted.len()];
        let mut history: Vec<Vec<u32>> = vec![vec![0; op_len]; sorted.len()];

        for minute in op_start..op_end {
            let minute_epoch = day_epoch + minute as i64 * 60;
            // resolve orders that completed before this minute
            for (d, heap) in resolve.iter_mut().enumerate() {
                while heap.peek().is_some_and(|t| t.0 <= minute_epoch) {
                    heap.pop();
                    open[d] -= 1;
                }
            }
            for d in 0..sorted.len() {
                history[d][minute - op_start] = open[d];
            }
            for (d, district) in sorted.iter().enumerate() {
                let peak = peak_of_minute(minute as u32);
                let rate = cfg.base_rate_per_min
                    * cfg.peak_multipliers[peak as usize]
                    * demand[d];
                if rate <= 0.0 {
                    continue;
                }
                let n_orders = Poisson::new(rate)
                    .map_err(|e| Error::Config(format!("sim.base_rate_per_min: {e}")))?
                    .sample(&mut rng) as usize;
                if n_orders == 0 {
                    continue;
                }
                // congestion from own open orders plus lagged neighbor load
                let lag_minute = (minute - op_start).checked_sub(SPILLOVER_LAG_MIN);
                let neighbor_load = match lag_minute {
                    Some(lm) if !neighbors[d].is_empty() => {
                        let sum: u32 = neighbors[d].iter().map(|&n| history[n][lm]).sum();
                        sum as f64 / neighbors[d].len() as f64
                    }
                    _ => 0.0,
                };
                let load =
                    (open[d] as f64 + cfg.spillover * neighbor_load) / cfg.rider_capacity;
                let congestion = (1.0 + cfg.congestion_gain * load.powf(1.5)).min(2.5);

                for _ in 0..n_orders {
                    let created_at = minute_epoch + rng.random_range(0..60);
                    let weather = calendar.weather_at(district.district_id, created_at);
                    let weather_mult = cfg.weather_multipliers[weather as usize];
                    let base_min: f64 = duration_dist.sample(&mut rng);
                    let dur_min = (base_min * congestion * weather_mult)
                        .clamp(MIN_DURATION_MIN, 240.0);
                    let dur_s = (dur_min * 60.0).round() as i64;

                    let accept_off = ((dur_s as f64) * rng.random_range(0.02..0.10)) as i64;
                    let arrive_off = ((dur_s as f64) * rng.random_range(0.25..0.45)) as i64;
                    let pickup_off = ((dur_s as f64) * rng.random_range(0.50..0.70)) as i64;

                    let p_cancel = (cfg.cancel_base
                        + 0.15 * ((dur_min - 45.0).max(0.0) / 60.0))
                        .min(0.5);
                    let canceled = rng.random::<f64>() < p_cancel;

                    seq += 1;
                    let order_id = day as u64 * 100_000_000 + seq;
                    let event = if canceled {
                        let cancel_off = ((dur_s as f64)
                            * rng.random_range(0.05..0.90))
                            .max(60.0) as i64;
                        let cancel_off = cancel_off.min(dur_s - 1);
                        let keep = |off: i64| (off < cancel_off).then_some(created_at + off);
                        OrderEvent {
                            order_id,
                            district_id: district.district_id,
                            created_at,
                            accepted_at: keep(accept_off),
                            arrived_store_at: keep(arrive_off),
                            picked_up_at: keep(pickup_off),
                            delivered_at: None,
                            canceled_at: Some(created_at + cancel_off),
                        }
                    } else {
                        OrderEvent {
                            order_id,
                            district_id: district.district_id,
                            created_at,
                            accepted_at: Some(created_at + accept_off),
                            arrived_store_at: Some(created_at + arrive_off),
                            picked_up_at: Some(created_at + pickup_off),
                            delivered_at: Some(created_at + dur_s),
                            canceled_at: None,
                        }
                    };
                    let resolve_at = event.canceled_at.or(event.delivered_at).expect("resolved");
                    resolve[d].push(std::cmp::Reverse(resolve_at));
                    open[d] += 1;
                    events.push(event);
                }
            }
        }
    }
    events.sort_by_key(|e| (e.created_at, e.order_id));
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn tiny_cfg() -> SimConfig {
        SimConfig {
            district_count: 6,
            days: 2,
            operating_start_min: 660,
            operating_end_min: 780,
            seed: 7,
            ..SimConfig::default()
        }
    }

    fn districts_for(cfg: &SimConfig) -> Vec<DistrictGeo> {
        generate_districts(cfg).unwrap()
    }

    #[test]
    fn zero_peak_multipliers_emit_no_orders() {
        let cfg = SimConfig {
            peak_multipliers: [0.0; 6],
            ..tiny_cfg()
        };
        let ds = districts_for(&cfg);
        let events = simulate(&cfg, &ds).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn identical_seeds_give_byte_identical_logs() {
        let cfg = tiny_cfg();
        let ds = districts_for(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.log"), dir.path().join("b.log"));
        write_events(&p1, &simulate(&cfg, &ds).unwrap()).unwrap();
        write_events(&p2, &simulate(&cfg, &ds).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert!(!std::fs::read(&p1).unwrap().is_empty());
    }

    #[test]
    fn lifecycle_invariants_hold_for_all_generated_events() {
        let cfg = tiny_cfg();
        let ds = districts_for(&cfg);
        let events = simulate(&cfg, &ds).unwrap();
        assert!(!events.is_empty());
        for e in &events {
            e.validate().expect("generated event violates invariants");
            // label realizability: each order is eventually delivered or canceled
            assert!(e.delivered_at.is_some() || e.canceled_at.is_some());
            let resolve = e.delivered_at.or(e.canceled_at).unwrap();
            assert!(resolve <= cfg.horizon_end());
        }
    }

    #[test]
    fn evening_rush_multiplier_scales_arrival_rate() {
        // operating 16:00-21:00: off-peak 16-17 and 20-21, evening rush 17-20
        let cfg = SimConfig {
            district_count: 10,
            days: 14,
            operating_start_min: 960,
            operating_end_min: 1260,
            peak_multipliers: [1.0, 1.0, 1.0, 1.0, 3.0, 1.0],
            weather_events_per_day: 0.0,
            congestion_gain: 0.0,
            seed: 3,
            ..SimConfig::default()
        };
        let ds = districts_for(&cfg);
        let events = simulate(&cfg, &ds).unwrap();
        let mut rush = 0u64;
        let mut off = 0u64;
        for e in &events {
            match peak_at(e.created_at) {
                PEAK_EVENING_RUSH => rush += 1,
                PEAK_OFF => off += 1,
                _ => {}
            }
        }
        // evening rush spans 180 min/day, off-peak 120 min/day
        let rush_per_min = rush as f64 / (14.0 * 180.0);
        let off_per_min = off as f64 / (14.0 * 120.0);
        let ratio = rush_per_min / off_per_min;
        assert!(
            (ratio - 3.0).abs() / 3.0 < 0.05,
            "rush/off rate ratio {ratio} not within 5% of 3.0"
        );
    }

    #[test]
    fn extreme_weather_raises_realized_durations() {
        let mut cfg = SimConfig {
            district_count: 8,
            days: 6,
            weather_events_per_day: 0.0,
            seed: 11,
            ..SimConfig::default()
        };
        cfg.base_rate_per_min = 1.2;
        let ds = districts_for(&cfg);
        let target = ds[0].district_id;
        // forced: extreme weather over the first half of each day's window
        let events: Vec<WeatherEvent> = (0..cfg.days)
            .map(|day| {
                let start = cfg.day_epoch(day) + cfg.operating_start_min as i64 * 60;
                WeatherEvent {
                    center_district: target,
                    covered: vec![target],
                    start,
                    end: start + 150 * 60,
                    level: 3,
                }
            })
            .collect();
        let calendar = RegimeCalendar::from_events(cfg.start_epoch, cfg.days, &ds, events);
        let log = simulate_with_calendar(&cfg, &ds, &calendar).unwrap();
        let (mut wx, mut normal) = (Vec::new(), Vec::new());
        for e in log.iter().filter(|e| e.district_id == target) {
            if let Some(dur) = e.duration_minutes() {
                if calendar.weather_at(target, e.created_at) == 3 {
                    wx.push(dur);
                } else {
                    normal.push(dur);
                }
            }
        }
        assert!(wx.len() >= 500, "want >=500 affected orders, got {}", wx.len());
        assert!(normal.len() >= 500);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&wx) > mean(&normal),
            "extreme {} <= normal {}",
            mean(&wx),
            mean(&normal)
        );
    }

    #[test]
    fn event_log_round_trip() {
        let cfg = tiny_cfg();
        let ds = districts_for(&cfg);
        let events = simulate(&cfg, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        write_events(&path, &events).unwrap();
        assert_eq!(read_events(&path).unwrap(), events);
    }

    #[test]
    fn empty_log_round_trips_to_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.log");
        write_events(&path, &[]).unwrap();
        assert!(read_events(&path).unwrap().is_empty());
    }

    #[test]
    fn million_event_log_round_trips_with_identical_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("big.log");
        let p2 = dir.path().join("big2.log");
        let events: Vec<OrderEvent> = (0..1_000_000u64)
            .map(|i| {
                let created = 1_700_000_000 + i as i64;
                OrderEvent {
                    order_id: i,
                    district_id: i % 57,
                    created_at: created,
                    accepted_at: (i % 3 != 0).then_some(created + 60),
                    arrived_store_at: (i % 5 != 0).then_some(created + 600),
                    picked_up_at: (i % 7 != 0).then_some(created + 900),
                    delivered_at: (i % 2 == 0).then_some(created + 1800),
                    canceled_at: (i % 2 == 1).then_some(created + 300),
                }
            })
            .collect();
        write_events(&p1, &events).unwrap();
        let loaded = read_events(&p1).unwrap();
        write_events(&p2, &loaded).unwrap();
        let hash = |p: &std::path::Path| {
            let mut h = Sha256::new();
            h.update(std::fs::read(p).unwrap());
            h.finalize()
        };
        assert_eq!(hash(&p1), hash(&p2));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.log");
        std::fs::write(&path, "1|2|100|||||\nnot-a-record\n").unwrap();
        match read_events(&path) {
            Err(crate::error::Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = SimConfig {
            rider_capacity: 0.0,
            ..SimConfig::default()
        };
        let err = generate_districts(&cfg).unwrap_err();
        assert!(err.to_string().contains("rider_capacity"));
    }
}
