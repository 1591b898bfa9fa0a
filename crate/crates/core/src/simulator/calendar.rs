use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::geo::{nearest_neighbors, DistrictGeo};
use crate::simulator::SimConfig;

/// Peak-period labels; id 0 is the explicit off-peak label, ids 1..=5 are the
/// named peak categories.
pub const PEAK_LABELS: [&str; 6] = [
    "off-peak",
    "breakfast",
    "morning rush",
    "afternoon tea",
    "evening rush",
    "night snack",
];

/// Bad-weather levels; id 0 is normal weather.
pub const WEATHER_LABELS: [&str; 4] = ["normal", "slightly bad", "bad", "extremely bad"];

pub const PEAK_OFF: u8 = 0;
pub const PEAK_BREAKFAST: u8 = 1;
pub const PEAK_MORNING_RUSH: u8 = 2;
pub const PEAK_AFTERNOON_TEA: u8 = 3;
pub const PEAK_EVENING_RUSH: u8 = 4;
pub const PEAK_NIGHT_SNACK: u8 = 5;

/// Fixed daily peak windows, as minute-of-day half-open ranges.
const PEAK_WINDOWS: [(u32, u32, u8); 5] = [
    (420, 540, PEAK_BREAKFAST),       // 07:00-09:00
    (660, 780, PEAK_MORNING_RUSH),    // 11:00-13:00
    (840, 960, PEAK_AFTERNOON_TEA),   // 14:00-16:00
    (1020, 1200, PEAK_EVENING_RUSH),  // 17:00-20:00
    (1260, 1410, PEAK_NIGHT_SNACK),   // 21:00-23:30
];

/// Number of geo neighbors (beyond the epicenter) covered by one weather
/// event; the spatial footprint the spatial encoder is meant to exploit.
pub const WEATHER_NEIGHBOR_SPAN: usize = 5;

/// One spatially contiguous bad-weather episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeatherEvent {
    pub center_district: u64,
    /// Epicenter plus its nearest neighbors.
    pub covered: Vec<u64>,
    /// Epoch second range [start, end).
    pub start: i64,
    pub end: i64,
    /// Level in 1..=3 (normal weather is the absence of an event).
    pub level: u8,
}

/// Per-minute-of-day peak labels plus a per-(district, minute) weather grid.
#[derive(Debug, Clone)]
pub struct RegimeCalendar {
    start_epoch: i64,
    minutes: usize,
    district_index: BTreeMap<u64, usize>,
    /// Row-major [district][minute] weather level.
    weather: Vec<u8>,
    pub events: Vec<WeatherEvent>,
}

/// Peak label for a minute of day (0..1440).
pub fn peak_of_minute(minute_of_day: u32) -> u8 {
    for &(start, end, id) in &PEAK_WINDOWS {
        if (start..end).contains(&minute_of_day) {
            return id;
        }
    }
    PEAK_OFF
}

/// Peak label at an epoch second (UTC).
pub fn peak_at(epoch: i64) -> u8 {
    let minute = (epoch.rem_euclid(86_400) / 60) as u32;
    peak_of_minute(minute)
}

impl RegimeCalendar {
    /// Builds the calendar from explicit weather events. The grid spans
    /// `days` full days from `start_epoch`.
    pub fn from_events(
        start_epoch: i64,
        days: u32,
        districts: &[DistrictGeo],
        events: Vec<WeatherEvent>,
    ) -> Self {
        let minutes = days as usize * 1440;
        let district_index: BTreeMap<u64, usize> = districts
            .iter()
            .enumerate()
            .map(|(i, d)| (d.district_id, i))
            .collect();
        let mut weather = vec![0u8; district_index.len() * minutes];
        for ev in &events {
            let m0 = ((ev.start - start_epoch) / 60).max(0) as usize;
            let m1 = (((ev.end - start_epoch) + 59) / 60).max(0) as usize;
            for id in &ev.covered {
                if let Some(&di) = district_index.get(id) {
                    for m in m0..m1.min(minutes) {
                        let cell = &mut weather[di * minutes + m];
                        *cell = (*cell).max(ev.level);
                    }
                }
            }
        }
        RegimeCalendar {
            start_epoch,
            minutes,
            district_index,
            weather,
            events,
        }
    }

    /// Generates the weather schedule deterministically from the sim config.
    /// The draw stream is independent of order generation, so the schedule
    /// can be rebuilt later from the resolved config alone.
    pub fn generate(cfg: &SimConfig, districts: &[DistrictGeo]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let span = WEATHER_NEIGHBOR_SPAN.min(districts.len().saturating_sub(1));
        let neighbor_map = nearest_neighbors(districts, span + 1)?;
        let mut events = Vec::new();
        for day in 0..cfg.days {
            let day_epoch = cfg.start_epoch + day as i64 * 86_400;
            let n = if cfg.weather_events_per_day > 0.0 {
                Poisson::new(cfg.weather_events_per_day)
                    .map_err(|e| Error::Config(format!("weather_events_per_day: {e}")))?
                    .sample(&mut rng) as usize
            } else {
                0
            };
            for _ in 0..n {
                let center = districts[rng.random_range(0..districts.len())].district_id;
                let level = match rng.random::<f64>() {
                    p if p < 0.45 => 1,
                    p if p < 0.80 => 2,
                    _ => 3,
                };
                let dur_min = cfg.weather_event_duration_min * (0.5 + rng.random::<f64>());
                let lo = cfg.operating_start_min.saturating_sub(30);
                let hi = cfg.operating_end_min.saturating_sub(20).max(lo + 1);
                let start_min = rng.random_range(lo..hi);
                let start = day_epoch + start_min as i64 * 60;
                let end = (start + (dur_min * 60.0) as i64).min(day_epoch + 86_340);
                events.push(WeatherEvent {
                    center_district: center,
                    covered: neighbor_map[&center].clone(),
                    start,
                    end,
                    level,
                });
            }
        }
        Ok(Self::from_events(cfg.start_epoch, cfg.days, districts, events))
    }

    /// Weather level of a district at an epoch second; 0 (normal) outside the
    /// grid or for unknown districts.
    pub fn weather_at(&self, district_id: u64, epoch: i64) -> u8 {
        let Some(&di) = self.district_index.get(&district_id) else {
            return 0;
        };
        let minute = (epoch - self.start_epoch) / 60;
        if minute < 0 || minute as usize >= self.minutes {
            return 0;
        }
        self.weather[di * self.minutes + minute as usize]
    }

    /// True when `epoch` falls inside the calendar grid.
    pub fn covers(&self, epoch: i64) -> bool {
        let minute = (epoch - self.start_epoch) / 60;
        minute >= 0 && (minute as usize) < self.minutes
    }

    pub fn start_epoch(&self) -> i64 {
        self.start_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_windows_cover_expected_minutes() {
        assert_eq!(peak_of_minute(0), PEAK_OFF);
        assert_eq!(peak_of_minute(430), PEAK_BREAKFAST);
        assert_eq!(peak_of_minute(700), PEAK_MORNING_RUSH);
        assert_eq!(peak_of_minute(900), PEAK_AFTERNOON_TEA);
        assert_eq!(peak_of_minute(1100), PEAK_EVENING_RUSH);
        assert_eq!(peak_of_minute(1300), PEAK_NIGHT_SNACK);
        assert_eq!(peak_of_minute(800), PEAK_OFF);
    }

    #[test]
    fn every_minute_has_exactly_one_label() {
        for m in 0..1440 {
            let label = peak_of_minute(m);
            assert!(label < PEAK_LABELS.len() as u8);
        }
    }
}
