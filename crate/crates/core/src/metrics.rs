//! Per-stage latency recording and nearest-rank reports.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub const STAGE_CAPACITY: usize = 100_000;

/// Timestamps (µs since the pipeline epoch) for one unit of work passing through a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSample {
    pub capture_ts_us: u64,
    pub recv_ts_us: u64,
    pub processed_ts_us: u64,
    pub publish_ts_us: u64,
}

impl StageSample {
    pub fn new(
        capture_ts_us: u64,
        recv_ts_us: u64,
        processed_ts_us: u64,
        publish_ts_us: u64,
    ) -> Self {
        Self {
            capture_ts_us,
            recv_ts_us,
            processed_ts_us,
            publish_ts_us,
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.capture_ts_us <= self.recv_ts_us
            && self.recv_ts_us <= self.processed_ts_us
            && self.processed_ts_us <= self.publish_ts_us
    }

    fn value(&self, metric: Metric) -> u64 {
        match metric {
            Metric::Processing => self.processed_ts_us - self.recv_ts_us,
            Metric::Publish => self.publish_ts_us - self.processed_ts_us,
            Metric::EndToEnd => self.publish_ts_us - self.capture_ts_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Processing,
    Publish,
    EndToEnd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Processing, Metric::Publish, Metric::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Processing => "processing",
            Metric::Publish => "publish",
            Metric::EndToEnd => "end_to_end",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Default)]
struct State {
    stages: BTreeMap<String, VecDeque<StageSample>>,
    rejected: u64,
}

/// Thread-safe recorder; clones share the same storage.
#[derive(Clone)]
pub struct Metrics {
    capacity: usize,
    state: Arc<Mutex<State>>,
}

impl Default for Metrics {
    fn default() -> Self {
        Self::with_capacity(STAGE_CAPACITY)
    }
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Arc::new(Mutex::new(State::default())),
        }
    }

    /// Appends `sample` to the stage's ring. Out-of-order samples are counted and dropped.
    pub fn record(&self, stage: &str, sample: StageSample) -> bool {
        let mut st = self.state.lock().expect("metrics poisoned");
        if !sample.is_ordered() {
            st.rejected += 1;
            return false;
        }
        let ring = match st.stages.get_mut(stage) {
            Some(r) => r,
            None => st.stages.entry(stage.to_string()).or_default(),
        };
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(sample);
        true
    }

    pub fn count(&self, stage: &str) -> usize {
        self.state
            .lock()
            .expect("metrics poisoned")
            .stages
            .get(stage)
            .map_or(0, VecDeque::len)
    }

    pub fn rejected(&self) -> u64 {
        self.state.lock().expect("metrics poisoned").rejected
    }

    pub fn stages(&self) -> Vec<String> {
        self.state
            .lock()
            .expect("metrics poisoned")
            .stages
            .keys()
            .cloned()
            .collect()
    }

    /// Snapshot report; `None` when nothing was recorded.
    pub fn report(&self) -> Option<LatencyReport> {
        let snapshot: Vec<(String, Vec<StageSample>)> = {
            let st = self.state.lock().expect("metrics poisoned");
            st.stages
                .iter()
                .filter(|(_, r)| !r.is_empty())
                .map(|(k, r)| (k.clone(), r.iter().copied().collect()))
                .collect()
        };
        if snapshot.is_empty() {
            return None;
        }
        let mut rows = Vec::new();
        for (stage, samples) in snapshot {
            for metric in Metric::ALL {
                let mut values: Vec<u64> = samples.iter().map(|s| s.value(metric)).collect();
                values.sort_unstable();
                let secs = |us: u64| us as f64 / 1e6;
                rows.push(ReportRow {
                    stage: stage.clone(),
                    metric,
                    count: values.len(),
                    p50: secs(nearest_rank(&values, 0.50)),
                    p95: secs(nearest_rank(&values, 0.95)),
                    max: secs(*values.last().expect("non-empty")),
                });
            }
        }
        Some(LatencyReport { rows })
    }
}

/// Nearest-rank quantile of sorted, non-empty data: element `ceil(p * n)` (1-based).
pub fn nearest_rank<T: Copy>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub stage: String,
    pub metric: Metric,
    pub count: usize,
    /// Seconds.
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyReport {
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "stage,metric,count,p50,p95,max";

impl LatencyReport {
    pub fn row(&self, stage: &str, metric: Metric) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.stage == stage && r.metric == metric)
    }

    pub fn stage_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.rows.iter().map(|r| r.stage.as_str()).collect();
        names.dedup();
        names
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.stage,
                r.metric.name(),
                r.count,
                r.p50,
                r.p95,
                r.max
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Format("latency csv: missing header".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!("latency csv: bad row {line:?}")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("latency csv: bad number {s:?}")))
            };
            rows.push(ReportRow {
                stage: cols[0].to_string(),
                metric: Metric::parse(cols[1])
                    .ok_or_else(|| Error::Format(format!("latency csv: metric {:?}", cols[1])))?,
                count: cols[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("latency csv: count {:?}", cols[2])))?,
                p50: num(cols[3])?,
                p95: num(cols[4])?,
                max: num(cols[5])?,
            });
        }
        Ok(Self { rows })
    }
}
