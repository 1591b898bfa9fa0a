//! Sliding-window aggregation of order events into the model's inputs: the
//! spatio-temporal feature tensor, the sensitive id vector and the label.
//!
//! The canonical feature order below is frozen; its hash travels with every
//! dataset and checkpoint. All aggregates are computed "as of" a slice end:
//! a lifecycle timestamp is visible only when it is not later than the slice
//! end, and the label alone looks at the future window.

mod dataset;

pub use dataset::{
    assemble_samples, split_dataset, split_summary, Dataset, DatasetHeader, DatasetView,
    FeatureConfig, NormalizationStats, Sample, SplitCounts, Splits,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::sha256_hex;
use crate::geo::DistrictGeo;
use crate::simulator::{peak_of_minute, OrderEvent, RegimeCalendar};

/// Number of spatio-temporal features per (district, slice).
pub const D_A: usize = 31;
/// Number of sensitive (categorical) features per sample.
pub const D_B: usize = 6;
/// Spacing between consecutive time slices: 10 minutes.
pub const SLICE_SPACING_S: i64 = 600;
/// Sample schedule cadence, matching the label horizon: 5 minutes.
pub const TICK_SPACING_S: i64 = 300;
/// The label averages deliveries of orders created in the next 5 minutes.
pub const LABEL_WINDOW_S: i64 = 300;
/// Longest lookback any feature uses: one hour.
pub const LOOKBACK_S: i64 = 3600;
/// A delivery within 40 minutes of creation counts as on time; 40 minutes is
/// also the anomaly threshold used by evaluation.
pub const ON_TIME_MIN: f64 = 40.0;
/// Sentinel for missing values: empty-denominator rates and missing rows.
pub const MISSING: f64 = -1.0;

/// Canonical feature order. Index i of every feature vector holds the
/// feature named here; the golden test pins this list.
pub const FEATURE_NAMES: [&str; D_A] = [
    "pending_store_arrival_gt0m_last60",
    "pending_store_arrival_gt8m_last60",
    "pending_store_arrival_gt15m_last60",
    "pending_pickup_gt0m_last60",
    "pending_pickup_gt8m_last60",
    "pending_pickup_gt15m_last60",
    "pending_acceptance_gt0m_last60",
    "pending_acceptance_gt8m_last60",
    "pending_acceptance_gt15m_last60",
    "uncompleted_last10",
    "uncompleted_last30",
    "uncompleted_last60",
    "completed_last10",
    "completed_last30",
    "completed_last45",
    "completed_last60",
    "canceled_last5",
    "canceled_last10",
    "acceptance_rate_last3",
    "acceptance_rate_last5",
    "acceptance_rate_last10",
    "acceptance_rate_last15",
    "acceptance_rate_last30",
    "completion_rate_last30",
    "completion_rate_last60",
    "on_time_rate_last10",
    "on_time_rate_last30",
    "on_time_rate_last45",
    "on_time_rate_last60",
    "avg_delivery_minutes_last30",
    "avg_delivery_minutes_last60",
];

/// Hash of the canonical feature order; embedded in datasets and checkpoints
/// so artifacts from different orderings can never be mixed.
pub fn feature_order_hash() -> String {
    sha256_hex(FEATURE_NAMES.join("\n").as_bytes())
}

/// Feature values of one (district, slice end) pair, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFeatures {
    pub district_id: u64,
    pub slice_end: i64,
    pub values: [f64; D_A],
}

fn visible(ts: Option<i64>, as_of: i64) -> bool {
    ts.is_some_and(|t| t <= as_of)
}

/// Order counts and rates as of `slice_end` over events of one district.
///
/// Window membership conventions (documented once, mirrored by the test
/// oracle): pending-stage counts, uncompleted counts and the acceptance /
/// completion rates select orders *created* in the window; completed and
/// canceled counts, on-time rates and average delivery times select orders
/// whose completing event falls in the window. A pending order stops counting
/// once it is closed (canceled or delivered) as of the slice end.
pub fn aggregate_slice(events: &[OrderEvent], district_id: u64, slice_end: i64) -> SliceFeatures {
    let mut v = [0.0; D_A];

    // rate accumulators: (numerator, denominator)
    let mut acceptance = [(0u64, 0u64); 5]; // 3/5/10/15/30 min
    let mut completion = [(0u64, 0u64); 2]; // 30/60 min
    let mut on_time = [(0u64, 0u64); 4]; // 10/30/45/60 min
    let mut delivery_sum = [0.0f64; 2]; // 30/60 min
    let mut delivery_cnt = [0u64; 2];

    const ACCEPT_WINDOWS_MIN: [i64; 5] = [3, 5, 10, 15, 30];
    const UNCOMPLETED_WINDOWS_MIN: [i64; 3] = [10, 30, 60];
    const COMPLETED_WINDOWS_MIN: [i64; 4] = [10, 30, 45, 60];
    const CANCELED_WINDOWS_MIN: [i64; 2] = [5, 10];
    const COMPLETION_WINDOWS_MIN: [i64; 2] = [30, 60];
    const AGE_THRESHOLDS_MIN: [i64; 3] = [0, 8, 15];

    for e in events {
        if e.district_id != district_id || e.created_at > slice_end {
            continue;
        }
        let age_s = slice_end - e.created_at;
        let delivered = visible(e.delivered_at, slice_end);
        let canceled = visible(e.canceled_at, slice_end);
        let closed = delivered || canceled;
        let in_create_window = age_s < LOOKBACK_S;
        let in_done_window = delivered && slice_end - e.delivered_at.unwrap() < LOOKBACK_S;
        let in_cancel_window = canceled && slice_end - e.canceled_at.unwrap() < LOOKBACK_S;
        if !in_create_window && !in_done_window && !in_cancel_window {
            continue;
        }

        if in_create_window {
            // pending-stage counts over the last hour, by age since creation
            for (i, &thr) in AGE_THRESHOLDS_MIN.iter().enumerate() {
                if age_s > thr * 60 && !closed {
                    if !visible(e.arrived_store_at, slice_end) {
                        v[i] += 1.0;
                    }
                    if !visible(e.picked_up_at, slice_end) {
                        v[3 + i] += 1.0;
                    }
                    if !visible(e.accepted_at, slice_end) {
                        v[6 + i] += 1.0;
                    }
                }
            }
            for (i, &w) in UNCOMPLETED_WINDOWS_MIN.iter().enumerate() {
                if age_s < w * 60 && !closed {
                    v[9 + i] += 1.0;
                }
            }
            for (i, &w) in ACCEPT_WINDOWS_MIN.iter().enumerate() {
                if age_s < w * 60 {
                    acceptance[i].1 += 1;
                    if visible(e.accepted_at, slice_end) {
                        acceptance[i].0 += 1;
                    }
                }
            }
            for (i, &w) in COMPLETION_WINDOWS_MIN.iter().enumerate() {
                if age_s < w * 60 {
                    completion[i].1 += 1;
                    if delivered {
                        completion[i].0 += 1;
                    }
                }
            }
        }
        if delivered {
            let done_at = e.delivered_at.unwrap();
            let since_done = slice_end - done_at;
            let dur_min = (done_at - e.created_at) as f64 / 60.0;
            for (i, &w) in COMPLETED_WINDOWS_MIN.iter().enumerate() {
                if since_done < w * 60 {
                    v[12 + i] += 1.0;
                }
            }
            for (i, &w) in [10i64, 30, 45, 60].iter().enumerate() {
                if since_done < w * 60 {
                    on_time[i].1 += 1;
                    if dur_min <= ON_TIME_MIN {
                        on_time[i].0 += 1;
                    }
                }
            }
            for (i, &w) in [30i64, 60].iter().enumerate() {
                if since_done < w * 60 {
                    delivery_sum[i] += dur_min;
                    delivery_cnt[i] += 1;
                }
            }
        }
        if canceled {
            let since = slice_end - e.canceled_at.unwrap();
            for (i, &w) in CANCELED_WINDOWS_MIN.iter().enumerate() {
                if since < w * 60 {
                    v[16 + i] += 1.0;
                }
            }
        }
    }

    let rate = |(num, den): (u64, u64)| {
        if den == 0 {
            MISSING
        } else {
            num as f64 / den as f64
        }
    };
    for (i, r) in acceptance.into_iter().enumerate() {
        v[18 + i] = rate(r);
    }
    for (i, r) in completion.into_iter().enumerate() {
        v[23 + i] = rate(r);
    }
    for (i, r) in on_time.into_iter().enumerate() {
        v[25 + i] = rate(r);
    }
    for i in 0..2 {
        v[29 + i] = if delivery_cnt[i] == 0 {
            MISSING
        } else {
            delivery_sum[i] / delivery_cnt[i] as f64
        };
    }

    SliceFeatures {
        district_id,
        slice_end,
        values: v,
    }
}

/// True when the district shows any visible lifecycle timestamp in the
/// one-hour lookback ending at `slice_end`; rows of silent districts become
/// all -1 sentinels.
pub fn has_activity(events: &[OrderEvent], district_id: u64, slice_end: i64) -> bool {
    let lo = slice_end - LOOKBACK_S;
    events.iter().any(|e| {
        e.district_id == district_id
            && [
                Some(e.created_at),
                e.accepted_at,
                e.arrived_store_at,
                e.picked_up_at,
                e.delivered_at,
                e.canceled_at,
            ]
            .into_iter()
            .flatten()
            .any(|t| t > lo && t <= slice_end)
    })
}

/// Mean delivery duration (minutes) of orders created in the 5-minute window
/// after `sample_time`. Canceled orders are excluded; `Ok(None)` means no
/// delivered orders and therefore no sample. An order in the window with no
/// recorded outcome violates the drain-period contract.
pub fn compute_label(
    events: &[OrderEvent],
    district_id: u64,
    sample_time: i64,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut count = 0u64;
    for e in events {
        if e.district_id != district_id
            || e.created_at <= sample_time
            || e.created_at > sample_time + LABEL_WINDOW_S
        {
            continue;
        }
        match (e.delivered_at, e.canceled_at) {
            (Some(d), _) => {
                sum += (d - e.created_at) as f64 / 60.0;
                count += 1;
            }
            (None, Some(_)) => {}
            (None, None) => {
                return Err(Error::Validation(format!(
                    "order {} in label window at {sample_time} has no outcome; \
                     the event log violates the drain-period contract",
                    e.order_id
                )))
            }
        }
    }
    Ok(if count == 0 { None } else { Some(sum / count as f64) })
}

/// Minute-of-day id in [1, 1440]: elapsed minutes, where the midnight
/// boundary reads as 1440 before wrapping to 1.
pub fn minute_of_day_id(epoch: i64) -> u32 {
    let s = epoch.rem_euclid(86_400);
    if s == 0 {
        1440
    } else {
        ((s + 59) / 60) as u32
    }
}

/// Day of week id in [1, 7], 1 = Monday (epoch timestamps are UTC).
pub fn day_of_week_id(epoch: i64) -> u32 {
    let day = epoch.div_euclid(86_400);
    ((day + 3).rem_euclid(7) + 1) as u32
}

/// Fixed id maps for the open vocabularies (city, district), frozen from the
/// training district universe. Id 0 is reserved for unseen values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// city key -> id (the synthetic world has one city, key 0)
    pub city_ids: BTreeMap<u64, u32>,
    pub district_ids: BTreeMap<u64, u32>,
}

impl Vocabulary {
    pub fn from_districts(districts: &[DistrictGeo]) -> Self {
        let mut city_ids = BTreeMap::new();
        city_ids.insert(0u64, 1u32);
        let mut district_ids = BTreeMap::new();
        let mut ids: Vec<u64> = districts.iter().map(|d| d.district_id).collect();
        ids.sort_unstable();
        for (i, id) in ids.into_iter().enumerate() {
            district_ids.insert(id, i as u32 + 1);
        }
        Vocabulary {
            city_ids,
            district_ids,
        }
    }

    pub fn city_id(&self, key: u64) -> u32 {
        self.city_ids.get(&key).copied().unwrap_or(0)
    }

    pub fn district_id(&self, key: u64) -> u32 {
        self.district_ids.get(&key).copied().unwrap_or(0)
    }

    /// Vocabulary sizes in canonical sensitive-feature order, including the
    /// reserved unknown row: city, district, minute, peak, day-of-week,
    /// weather.
    pub fn table_sizes(&self) -> [usize; D_B] {
        [
            self.city_ids.len() + 1,
            self.district_ids.len() + 1,
            1441,
            6,
            8,
            4,
        ]
    }
}

/// Sensitive ids in canonical order: city, district, minute of day, peak
/// label, day of week, weather level.
pub fn build_sensitive(
    district_id: u64,
    sample_time: i64,
    calendar: &RegimeCalendar,
    vocab: &Vocabulary,
) -> [u32; D_B] {
    let minute_index = (sample_time.rem_euclid(86_400) / 60) as u32 % 1440;
    [
        vocab.city_id(0),
        vocab.district_id(district_id),
        minute_of_day_id(sample_time),
        peak_of_minute(minute_index) as u32,
        day_of_week_id(sample_time),
        calendar.weather_at(district_id, sample_time) as u32,
    ]
}

/// Events of one district sorted by creation time, for windowed scans.
#[derive(Debug, Default)]
pub struct EventIndex {
    per_district: BTreeMap<u64, Vec<OrderEvent>>,
}

impl EventIndex {
    pub fn build(events: &[OrderEvent]) -> Self {
        let mut per_district: BTreeMap<u64, Vec<OrderEvent>> = BTreeMap::new();
        for e in events {
            per_district.entry(e.district_id).or_default().push(e.clone());
        }
        for list in per_district.values_mut() {
            list.sort_by_key(|e| (e.created_at, e.order_id));
        }
        EventIndex { per_district }
    }

    pub fn district(&self, id: u64) -> &[OrderEvent] {
        self.per_district.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn district_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.per_district.keys().copied()
    }
}
