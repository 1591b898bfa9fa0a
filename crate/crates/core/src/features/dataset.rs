use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    aggregate_slice, build_sensitive, compute_label, has_activity, EventIndex, Vocabulary, D_A,
    D_B, LABEL_WINDOW_S, LOOKBACK_S, MISSING, SLICE_SPACING_S, TICK_SPACING_S,
};
use crate::fingerprint::sha256_hex;
use crate::geo::NeighborContext;
use crate::simulator::{RegimeCalendar, SimConfig};

/// Feature-pipeline settings: tensor dimensions baked into the dataset and
/// the chronological split in days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Districts per sample: the center plus its m-1 nearest neighbors.
    pub m: usize,
    /// Time slices per district, 10 minutes apart, oldest first.
    pub n: usize,
    pub train_days: u32,
    pub val_days: u32,
    pub test_days: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            m: 10,
            n: 6,
            train_days: 14,
            val_days: 1,
            test_days: 3,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("features.m: must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("features.n: must be at least 1".into()));
        }
        if self.train_days == 0 || self.val_days == 0 || self.test_days == 0 {
            return Err(Error::Config(
                "features: train/val/test day counts must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total_days(&self) -> u32 {
        self.train_days + self.val_days + self.test_days
    }

    /// Minutes of warm-up needed after the operating window opens before the
    /// oldest slice of a sample has its full one-hour lookback.
    pub fn warmup_minutes(&self) -> i64 {
        LOOKBACK_S / 60 + (self.n as i64 - 1) * (SLICE_SPACING_S / 60)
    }
}

/// One training record: the flattened spatio-temporal tensor (district-major,
/// slices oldest first), sensitive ids, and the label in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub district_id: u64,
    pub sample_time: i64,
    /// Length m * n * D_A.
    pub x_a: Vec<f64>,
    pub x_b: [u32; D_B],
    pub label: f64,
}

/// Sample schedule: ticks every 5 minutes inside each day's operating window,
/// starting only once the warm-up lookback fits and ending so the label
/// window stays inside operating hours.
pub fn schedule_ticks(sim: &SimConfig, feat: &FeatureConfig) -> Result<Vec<i64>> {
    feat.validate()?;
    if feat.total_days() != sim.days {
        return Err(Error::Config(format!(
            "features: split days {} must equal simulated days {}",
            feat.total_days(),
            sim.days
        )));
    }
    let first_min = sim.operating_start_min as i64 + feat.warmup_minutes();
    let last_min = sim.operating_end_min as i64 - LABEL_WINDOW_S / 60;
    if first_min > last_min {
        return Err(Error::Config(format!(
            "features: operating window too short for warm-up ({} min needed)",
            feat.warmup_minutes() + LABEL_WINDOW_S / 60
        )));
    }
    let mut ticks = Vec::new();
    for day in 0..sim.days {
        let day_epoch = sim.day_epoch(day);
        let mut m = first_min;
        while m <= last_min {
            ticks.push(day_epoch + m * 60);
            m += TICK_SPACING_S / 60;
        }
    }
    Ok(ticks)
}

/// Builds one sample per (district, tick) with a computable label. Rows of
/// silent districts are the -1 sentinel (imposed again after normalization).
/// Output is sorted by (sample_time, district_id).
pub fn assemble_samples(
    index: &EventIndex,
    contexts: &[NeighborContext],
    calendar: &RegimeCalendar,
    vocab: &Vocabulary,
    ticks: &[i64],
    feat: &FeatureConfig,
) -> Result<Vec<Sample>> {
    feat.validate()?;
    for t in ticks {
        if !calendar.covers(*t) {
            return Err(Error::Range(format!(
                "schedule tick {t} outside the simulated horizon"
            )));
        }
    }
    for ctx in contexts {
        if ctx.neighbor_ids.len() != feat.m {
            return Err(Error::Config(format!(
                "features.m: neighbor context of district {} has {} members, config wants {}",
                ctx.center_id,
                ctx.neighbor_ids.len(),
                feat.m
            )));
        }
    }
    // aggregate cache: slices are shared between overlapping samples
    let mut cache: HashMap<(u64, i64), Option<[f64; D_A]>> = HashMap::new();
    let mut samples = Vec::new();
    for ctx in contexts {
        let center_events = index.district(ctx.center_id);
        for &tick in ticks {
            let Some(label) = compute_label(center_events, ctx.center_id, tick)? else {
                continue;
            };
            let mut x_a = Vec::with_capacity(feat.m * feat.n * D_A);
            for &member in &ctx.neighbor_ids {
                let member_events = index.district(member);
                for slice in 0..feat.n {
                    let slice_end = tick - (feat.n as i64 - 1 - slice as i64) * SLICE_SPACING_S;
                    let row = cache.entry((member, slice_end)).or_insert_with(|| {
                        has_activity(member_events, member, slice_end)
                            .then(|| aggregate_slice(member_events, member, slice_end).values)
                    });
                    match row {
                        Some(values) => x_a.extend_from_slice(&values[..]),
                        None => x_a.extend(std::iter::repeat(MISSING).take(D_A)),
                    }
                }
            }
            samples.push(Sample {
                district_id: ctx.center_id,
                sample_time: tick,
                x_a,
                x_b: build_sensitive(ctx.center_id, tick, calendar, vocab),
                label,
            });
        }
    }
    samples.sort_by_key(|s| (s.sample_time, s.district_id));
    Ok(samples)
}

/// Per-feature z-score statistics fitted on the training split only,
/// excluding -1 sentinels. Constant features are flagged and normalize to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
    pub count: Vec<u64>,
}

impl NormalizationStats {
    pub fn fit(train: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract(
                "normalization requires a non-empty training split".into(),
            ));
        }
        let mut sum = vec![0.0; D_A];
        let mut sum_sq = vec![0.0; D_A];
        let mut count = vec![0u64; D_A];
        for s in train {
            for (i, &v) in s.x_a.iter().enumerate() {
                let d = i % D_A;
                if v != MISSING {
                    sum[d] += v;
                    sum_sq[d] += v * v;
                    count[d] += 1;
                }
            }
        }
        let mut mean = vec![0.0; D_A];
        let mut std = vec![1.0; D_A];
        let mut constant = vec![false; D_A];
        for d in 0..D_A {
            if count[d] == 0 {
                constant[d] = true;
                continue;
            }
            mean[d] = sum[d] / count[d] as f64;
            let var = (sum_sq[d] / count[d] as f64 - mean[d] * mean[d]).max(0.0);
            let sd = var.sqrt();
            if sd == 0.0 {
                constant[d] = true;
            } else {
                std[d] = sd;
            }
        }
        Ok(NormalizationStats {
            mean,
            std,
            constant,
            count,
        })
    }

    /// Z-scores every non-sentinel element in place; -1 values pass through
    /// so the sentinel stays unambiguous in model input space.
    pub fn apply(&self, sample: &mut Sample) {
        for (i, v) in sample.x_a.iter_mut().enumerate() {
            let d = i % D_A;
            if *v == MISSING {
                continue;
            }
            *v = if self.constant[d] {
                0.0
            } else {
                (*v - self.mean[d]) / self.std[d]
            };
        }
    }

    /// Inverse transform; constant features recover their (constant) mean.
    pub fn invert(&self, sample: &mut Sample) {
        for (i, v) in sample.x_a.iter_mut().enumerate() {
            let d = i % D_A;
            if *v == MISSING {
                continue;
            }
            *v = if self.constant[d] {
                self.mean[d]
            } else {
                *v * self.std[d] + self.mean[d]
            };
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("stats serialize").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Contiguous index ranges of the chronologically sorted sample list.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl SplitCounts {
    pub fn to_splits(self) -> Splits {
        let train = 0..self.train as usize;
        let val = train.end..train.end + self.val as usize;
        let test = val.end..val.end + self.test as usize;
        Splits { train, val, test }
    }
}

/// Splits chronologically sorted samples by sample time alone: the first
/// `train_days` days train, then validation days, then test days.
pub fn split_dataset(
    samples: &[Sample],
    start_epoch: i64,
    feat: &FeatureConfig,
) -> Result<Splits> {
    let train_end = start_epoch + feat.train_days as i64 * 86_400;
    let val_end = train_end + feat.val_days as i64 * 86_400;
    let test_end = val_end + feat.test_days as i64 * 86_400;
    let mut last = i64::MIN;
    for s in samples {
        if s.sample_time < last {
            return Err(Error::Contract("samples must be sorted by time".into()));
        }
        last = s.sample_time;
        if s.sample_time < start_epoch || s.sample_time >= test_end {
            return Err(Error::Range(format!(
                "sample at {} outside the configured split horizon",
                s.sample_time
            )));
        }
    }
    let train_len = samples.partition_point(|s| s.sample_time < train_end);
    let val_len = samples[train_len..].partition_point(|s| s.sample_time < val_end);
    let splits = Splits {
        train: 0..train_len,
        val: train_len..train_len + val_len,
        test: train_len + val_len..samples.len(),
    };
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::Config(format!(
            "empty split: train {}, validation {}, test {}",
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        )));
    }
    Ok(splits)
}

/// Self-describing dataset header, serialized as the first line of the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub m: usize,
    pub n: usize,
    pub d_a: usize,
    pub d_b: usize,
    pub sample_count: u64,
    pub feature_order_hash: String,
    pub stats_hash: String,
    /// Hash over the event log, district file and feature config that
    /// produced this dataset.
    pub input_fingerprint: String,
    pub splits: SplitCounts,
    pub start_epoch: i64,
    pub n_x: u32,
    pub n_y: u32,
    pub vocab: Vocabulary,
    /// Neighbor ids and relative coordinates per center district, center
    /// first — everything the model needs to embed spatial positions.
    pub contexts: Vec<SerializedContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedContext {
    pub center_id: u64,
    pub neighbor_ids: Vec<u64>,
    pub relative_coords: Vec<(u32, u32)>,
}

impl From<&NeighborContext> for SerializedContext {
    fn from(c: &NeighborContext) -> Self {
        SerializedContext {
            center_id: c.center_id,
            neighbor_ids: c.neighbor_ids.clone(),
            relative_coords: c.relative_coords.clone(),
        }
    }
}

/// In-memory dataset: header plus chronologically sorted samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

const DATASET_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "sttm-dataset";

impl Dataset {
    pub fn new(header: DatasetHeader, samples: Vec<Sample>) -> Self {
        Dataset { header, samples }
    }

    pub fn record_len(&self) -> usize {
        8 + 8 + self.header.m * self.header.n * self.header.d_a * 8 + self.header.d_b * 4 + 8
    }

    pub fn splits(&self) -> Splits {
        self.header.splits.to_splits()
    }

    pub fn context_of(&self, center_id: u64) -> Option<&SerializedContext> {
        self.header
            .contexts
            .iter()
            .find(|c| c.center_id == center_id)
    }

    /// Writes the dataset: one JSON header line, then fixed-size little-endian
    /// binary records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{DATASET_MAGIC} {}", serde_json::to_string(&self.header)?)?;
        for s in &self.samples {
            w.write_all(&s.district_id.to_le_bytes())?;
            w.write_all(&s.sample_time.to_le_bytes())?;
            for v in &s.x_a {
                w.write_all(&v.to_le_bytes())?;
            }
            for id in &s.x_b {
                w.write_all(&id.to_le_bytes())?;
            }
            w.write_all(&s.label.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut header_line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = r.read(&mut byte)?;
            if n == 0 || byte[0] == b'\n' {
                break;
            }
            header_line.push(byte[0]);
        }
        let header_text = String::from_utf8(header_line).map_err(|_| Error::Parse {
            line: 1,
            message: "dataset header is not UTF-8".into(),
        })?;
        let json = header_text
            .strip_prefix(DATASET_MAGIC)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing '{DATASET_MAGIC}' magic"),
            })?
            .trim_start();
        let header: DatasetHeader = serde_json::from_str(json).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad dataset header: {e}"),
        })?;
        if header.version != DATASET_VERSION {
            return Err(Error::Compatibility(format!(
                "dataset version {} unsupported (expected {DATASET_VERSION})",
                header.version
            )));
        }
        let xa_len = header.m * header.n * header.d_a;
        let mut samples = Vec::with_capacity(header.sample_count as usize);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let record_len = 8 + 8 + xa_len * 8 + header.d_b * 4 + 8;
        if buf.len() != record_len * header.sample_count as usize {
            return Err(Error::Parse {
                line: 2,
                message: format!(
                    "dataset body is {} bytes, expected {} ({} records of {})",
                    buf.len(),
                    record_len * header.sample_count as usize,
                    header.sample_count,
                    record_len
                ),
            });
        }
        let mut off = 0;
        let take8 = |buf: &[u8], off: &mut usize| {
            let v: [u8; 8] = buf[*off..*off + 8].try_into().unwrap();
            *off += 8;
            v
        };
        let take4 = |buf: &[u8], off: &mut usize| {
            let v: [u8; 4] = buf[*off..*off + 4].try_into().unwrap();
            *off += 4;
            v
        };
        for _ in 0..header.sample_count {
            let district_id = u64::from_le_bytes(take8(&buf, &mut off));
            let sample_time = i64::from_le_bytes(take8(&buf, &mut off));
            let mut x_a = Vec::with_capacity(xa_len);
            for _ in 0..xa_len {
                x_a.push(f64::from_le_bytes(take8(&buf, &mut off)));
            }
            let mut x_b = [0u32; D_B];
            for slot in &mut x_b {
                *slot = u32::from_le_bytes(take4(&buf, &mut off));
            }
            let label = f64::from_le_bytes(take8(&buf, &mut off));
            samples.push(Sample {
                district_id,
                sample_time,
                x_a,
                x_b,
                label,
            });
        }
        Ok(Dataset { header, samples })
    }
}

/// Builds a dataset header for freshly assembled samples.
#[allow(clippy::too_many_arguments)]
pub fn make_header(
    feat: &FeatureConfig,
    samples: &[Sample],
    splits: &Splits,
    stats: &NormalizationStats,
    input_fingerprint: String,
    start_epoch: i64,
    n_x: u32,
    n_y: u32,
    vocab: Vocabulary,
    contexts: &[NeighborContext],
) -> DatasetHeader {
    DatasetHeader {
        version: DATASET_VERSION,
        m: feat.m,
        n: feat.n,
        d_a: D_A,
        d_b: D_B,
        sample_count: samples.len() as u64,
        feature_order_hash: crate::features::feature_order_hash(),
        stats_hash: stats.hash(),
        input_fingerprint,
        splits: SplitCounts {
            train: splits.train.len() as u64,
            val: splits.val.len() as u64,
            test: splits.test.len() as u64,
        },
        start_epoch,
        n_x,
        n_y,
        vocab,
        contexts: contexts.iter().map(SerializedContext::from).collect(),
    }
}

/// Restriction of a dataset to its first `m` context members and most recent
/// `n` slices; used by the hyperparameter sweeps without re-featurizing.
#[derive(Clone, Copy)]
pub struct DatasetView<'a> {
    pub dataset: &'a Dataset,
    pub m: usize,
    pub n: usize,
}

impl<'a> DatasetView<'a> {
    pub fn full(dataset: &'a Dataset) -> Self {
        DatasetView {
            dataset,
            m: dataset.header.m,
            n: dataset.header.n,
        }
    }

    pub fn new(dataset: &'a Dataset, m: usize, n: usize) -> Result<Self> {
        if m == 0 || m > dataset.header.m || n == 0 || n > dataset.header.n {
            return Err(Error::Config(format!(
                "view ({m}, {n}) exceeds dataset dimensions ({}, {})",
                dataset.header.m, dataset.header.n
            )));
        }
        Ok(DatasetView { dataset, m, n })
    }

    pub fn len(&self) -> usize {
        self.dataset.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.samples.is_empty()
    }

    pub fn sample(&self, idx: usize) -> &Sample {
        &self.dataset.samples[idx]
    }

    /// Copies the (m, n)-restricted tensor of sample `idx` into `out`
    /// (length m * n * D_A), keeping district-major, oldest-first layout.
    pub fn fill_x_a(&self, idx: usize, out: &mut [f64]) {
        let src = &self.dataset.samples[idx].x_a;
        let (full_n, d) = (self.dataset.header.n, self.dataset.header.d_a);
        let skip = full_n - self.n;
        let mut w = 0;
        for member in 0..self.m {
            for slice in 0..self.n {
                let base = (member * full_n + skip + slice) * d;
                out[w..w + d].copy_from_slice(&src[base..base + d]);
                w += d;
            }
        }
    }

    /// Relative coordinates of the first `m` context members of the sample's
    /// center district.
    pub fn coords(&self, idx: usize) -> Result<&'a [(u32, u32)]> {
        let center = self.dataset.samples[idx].district_id;
        let ctx = self.dataset.context_of(center).ok_or_else(|| {
            Error::Compatibility(format!("dataset has no context for district {center}"))
        })?;
        Ok(&ctx.relative_coords[..self.m])
    }
}

/// Per-split sample/district counts, printable as the dataset summary table.
#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub split: String,
    pub samples: usize,
    pub districts: usize,
}

pub fn split_summary(dataset: &Dataset) -> Vec<SplitSummary> {
    let splits = dataset.splits();
    [
        ("train", splits.train),
        ("validation", splits.val),
        ("test", splits.test),
    ]
    .into_iter()
    .map(|(name, range)| {
        let districts: std::collections::BTreeSet<u64> = dataset.samples[range.clone()]
            .iter()
            .map(|s| s.district_id)
            .collect();
        SplitSummary {
            split: name.to_string(),
            samples: range.len(),
            districts: districts.len(),
        }
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::build_neighbor_contexts;
    use crate::simulator::{generate_districts, simulate, RegimeCalendar};

    fn tiny_sim() -> SimConfig {
        SimConfig {
            district_count: 5,
            days: 3,
            operating_start_min: 660,
            operating_end_min: 840, // 3h window
            base_rate_per_min: 2.0,
            seed: 5,
            ..SimConfig::default()
        }
    }

    fn tiny_feat() -> FeatureConfig {
        FeatureConfig {
            m: 3,
            n: 2,
            train_days: 1,
            val_days: 1,
            test_days: 1,
        }
    }

    fn build_tiny() -> (SimConfig, FeatureConfig, Dataset) {
        let sim = tiny_sim();
        let feat = tiny_feat();
        let mut districts = generate_districts(&sim).unwrap();
        let events = simulate(&sim, &districts).unwrap();
        let calendar = RegimeCalendar::generate(&sim, &districts).unwrap();
        let vocab = Vocabulary::from_districts(&districts);
        let (contexts, _) = build_neighbor_contexts(&mut districts, feat.m, 10, 10).unwrap();
        let index = EventIndex::build(&events);
        let ticks = schedule_ticks(&sim, &feat).unwrap();
        let mut samples =
            assemble_samples(&index, &contexts, &calendar, &vocab, &ticks, &feat).unwrap();
        let splits = split_dataset(&samples, sim.start_epoch, &feat).unwrap();
        let stats = NormalizationStats::fit(&samples[splits.train.clone()]).unwrap();
        for s in &mut samples {
            stats.apply(s);
        }
        let header = make_header(
            &feat,
            &samples,
            &splits,
            &stats,
            "test".into(),
            sim.start_epoch,
            10,
            10,
            vocab,
            &contexts,
        );
        (sim, feat, Dataset::new(header, samples))
    }

    #[test]
    fn sample_count_matches_enumeration_oracle() {
        let sim = tiny_sim();
        let feat = tiny_feat();
        let mut districts = generate_districts(&sim).unwrap();
        let events = simulate(&sim, &districts).unwrap();
        let calendar = RegimeCalendar::generate(&sim, &districts).unwrap();
        let vocab = Vocabulary::from_districts(&districts);
        let (contexts, _) = build_neighbor_contexts(&mut districts, feat.m, 10, 10).unwrap();
        let index = EventIndex::build(&events);
        let ticks = schedule_ticks(&sim, &feat).unwrap();
        let samples =
            assemble_samples(&index, &contexts, &calendar, &vocab, &ticks, &feat).unwrap();

        // oracle: direct enumeration of (district, tick) pairs with a label
        let mut expected = 0usize;
        for d in &districts {
            for &t in &ticks {
                if compute_label(index.district(d.district_id), d.district_id, t)
                    .unwrap()
                    .is_some()
                {
                    expected += 1;
                }
            }
        }
        assert_eq!(samples.len(), expected);
        assert!(expected > 0);
    }

    #[test]
    fn m_equals_one_reduces_to_center_only() {
        let sim = tiny_sim();
        let feat = FeatureConfig {
            m: 1,
            ..tiny_feat()
        };
        let mut districts = generate_districts(&sim).unwrap();
        let events = simulate(&sim, &districts).unwrap();
        let calendar = RegimeCalendar::generate(&sim, &districts).unwrap();
        let vocab = Vocabulary::from_districts(&districts);
        let (contexts, _) = build_neighbor_contexts(&mut districts, 1, 10, 10).unwrap();
        let index = EventIndex::build(&events);
        let ticks = schedule_ticks(&sim, &feat).unwrap();
        let samples =
            assemble_samples(&index, &contexts, &calendar, &vocab, &ticks, &feat).unwrap();
        assert!(!samples.is_empty());
        assert_eq!(samples[0].x_a.len(), feat.n * D_A);
    }

    #[test]
    fn silent_neighbor_rows_are_all_missing() {
        // two districts, orders only in the first; the second serves as a
        // neighbor and must appear as -1 rows
        let sim = SimConfig {
            district_count: 2,
            days: 3,
            base_rate_per_min: 1.0,
            ..tiny_sim()
        };
        let feat = FeatureConfig {
            m: 2,
            ..tiny_feat()
        };
        let mut districts = generate_districts(&sim).unwrap();
        let events: Vec<_> = simulate(&sim, &districts)
            .unwrap()
            .into_iter()
            .filter(|e| e.district_id == districts[0].district_id)
            .collect();
        let calendar = RegimeCalendar::generate(&sim, &districts).unwrap();
        let vocab = Vocabulary::from_districts(&districts);
        let silent = districts[1].district_id;
        let (contexts, _) = build_neighbor_contexts(&mut districts, 2, 10, 10).unwrap();
        let index = EventIndex::build(&events);
        let ticks = schedule_ticks(&sim, &feat).unwrap();
        let samples =
            assemble_samples(&index, &contexts, &calendar, &vocab, &ticks, &feat).unwrap();
        let with_silent_neighbor: Vec<_> = samples
            .iter()
            .filter(|s| s.district_id != silent)
            .collect();
        assert!(!with_silent_neighbor.is_empty());
        for s in with_silent_neighbor {
            // member index 1 is the only other district: the silent one
            let row = &s.x_a[feat.n * D_A..2 * feat.n * D_A];
            assert!(row.iter().all(|v| *v == MISSING));
        }
    }

    #[test]
    fn normalization_zero_mean_unit_std_and_no_leakage() {
        let sim = tiny_sim();
        let feat = tiny_feat();
        let mut districts = generate_districts(&sim).unwrap();
        let events = simulate(&sim, &districts).unwrap();
        let calendar = RegimeCalendar::generate(&sim, &districts).unwrap();
        let vocab = Vocabulary::from_districts(&districts);
        let (contexts, _) = build_neighbor_contexts(&mut districts, feat.m, 10, 10).unwrap();
        let index = EventIndex::build(&events);
        let ticks = schedule_ticks(&sim, &feat).unwrap();
        let samples =
            assemble_samples(&index, &contexts, &calendar, &vocab, &ticks, &feat).unwrap();
        let splits = split_dataset(&samples, sim.start_epoch, &feat).unwrap();
        let stats = NormalizationStats::fit(&samples[splits.train.clone()]).unwrap();

        // stats computed on train, applied everywhere, never refitted
        let hash_before = stats.hash();
        let mut normalized = samples.clone();
        for s in &mut normalized {
            stats.apply(s);
        }
        assert_eq!(stats.hash(), hash_before);

        // training split itself normalizes to mean ~0, std ~1 per feature
        let mut sum = vec![0.0; D_A];
        let mut sum_sq = vec![0.0; D_A];
        let mut count = vec![0u64; D_A];
        for s in &normalized[splits.train.clone()] {
            for (i, &v) in s.x_a.iter().enumerate() {
                if v != MISSING {
                    let d = i % D_A;
                    sum[d] += v;
                    sum_sq[d] += v * v;
                    count[d] += 1;
                }
            }
        }
        for d in 0..D_A {
            if count[d] == 0 || stats.constant[d] {
                continue;
            }
            let mean = sum[d] / count[d] as f64;
            let var = sum_sq[d] / count[d] as f64 - mean * mean;
            assert!(mean.abs() < 1e-9, "feature {d} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "feature {d} std {}", var.sqrt());
        }

        // round trip recovers raw features
        let mut recovered = normalized.clone();
        for s in &mut recovered {
            stats.invert(s);
        }
        for (orig, rec) in samples.iter().zip(&recovered) {
            for (a, b) in orig.x_a.iter().zip(&rec.x_a) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn split_boundaries_are_chronological_and_partition() {
        let (_, _, ds) = build_tiny();
        let splits = ds.splits();
        assert!(!splits.train.is_empty());
        assert!(!splits.val.is_empty());
        assert!(!splits.test.is_empty());
        let max_train = ds.samples[splits.train.clone()]
            .iter()
            .map(|s| s.sample_time)
            .max()
            .unwrap();
        let min_val = ds.samples[splits.val.clone()]
            .iter()
            .map(|s| s.sample_time)
            .min()
            .unwrap();
        assert!(max_train < min_val);
        // union == all, pairwise disjoint (contiguous ranges)
        assert_eq!(
            splits.train.len() + splits.val.len() + splits.test.len(),
            ds.samples.len()
        );
    }

    #[test]
    fn default_synthetic_split_is_14_1_3() {
        let feat = FeatureConfig::default();
        assert_eq!(
            (feat.train_days, feat.val_days, feat.test_days),
            (14, 1, 3)
        );
        assert_eq!(feat.total_days(), SimConfig::default().days);
    }

    #[test]
    fn dataset_file_round_trip() {
        let (_, _, ds) = build_tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.sttm");
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn dataset_view_slices_recent_history() {
        let (_, feat, ds) = build_tiny();
        let view = DatasetView::new(&ds, 2, 1).unwrap();
        let mut out = vec![0.0; 2 * D_A];
        view.fill_x_a(0, &mut out);
        let s = &ds.samples[0];
        // most recent slice of member 0 and member 1
        assert_eq!(&out[..D_A], &s.x_a[(feat.n - 1) * D_A..feat.n * D_A]);
        assert_eq!(
            &out[D_A..],
            &s.x_a[(feat.n + feat.n - 1) * D_A..2 * feat.n * D_A]
        );
        assert!(DatasetView::new(&ds, 99, 1).is_err());
    }

    #[test]
    fn summary_counts_districts_per_split() {
        let (_, _, ds) = build_tiny();
        let summary = split_summary(&ds);
        assert_eq!(summary.len(), 3);
        assert_eq!(summary[0].split, "train");
        assert!(summary.iter().all(|s| s.samples > 0 && s.districts > 0));
    }
}
