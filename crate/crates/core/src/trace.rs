//! CDR internet-activity ingestion and step aggregation.
//!
//! Raw records follow the public grid-square CDR layout (tab separated,
//! `square_id, time_interval_ms, country_code, sms_in, sms_out, call_in,
//! call_out, internet_traffic`). Only the square id, the interval start and
//! the internet column are consumed. Records are summed into a dense
//! step-by-cell matrix, [`SteppedTrace`], which drives packet arrivals in the
//! environment.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MS_PER_HOUR: i64 = 3_600_000;
pub const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;

/// 2013-11-01 00:00 CET, the first interval of the Milan CDR release.
pub const MILAN_ORIGIN_MS: i64 = 1_383_260_400_000;

/// Default aggregation step, in seconds.
pub const DEFAULT_STEP_SECONDS: u32 = 300;

const CDR_COLUMNS: usize = 8;
const CDR_INTERNET_COLUMN: usize = 7;

/// Maximum fraction of malformed rows tolerated before a file is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityRecord {
    pub cell_id: u32,
    pub timestamp_ms: i64,
    pub internet_activity: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CdrLoad {
    pub records: Vec<ActivityRecord>,
    /// Non-blank rows read, including malformed ones.
    pub rows: usize,
    pub malformed: usize,
}

/// Loads the internet-activity column of a CDR file.
///
/// Rows whose internet field is empty or absent carry no internet activity
/// and are dropped silently. Rows that cannot be parsed are counted in
/// [`CdrLoad::malformed`]; more than 10% malformed rows fails the load.
pub fn load_cdr_file(path: &Path, cell_filter: Option<&HashSet<u32>>) -> Result<CdrLoad> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let load = parse_cdr(BufReader::new(file), cell_filter).map_err(io_err)?;
    if load.rows > 0 && load.malformed as f64 > MAX_MALFORMED_FRACTION * load.rows as f64 {
        return Err(Error::MalformedCdr {
            path: path.to_path_buf(),
            malformed: load.malformed,
            total: load.rows,
        });
    }
    Ok(load)
}

fn parse_cdr<R: BufRead>(reader: R, cell_filter: Option<&HashSet<u32>>) -> std::io::Result<CdrLoad> {
    let mut load = CdrLoad::default();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        load.rows += 1;
        match parse_cdr_row(line) {
            Ok(Some(rec)) => {
                if cell_filter.is_none_or(|f| f.contains(&rec.cell_id)) {
                    load.records.push(rec);
                }
            }
            Ok(None) => {}
            Err(()) => load.malformed += 1,
        }
    }
    Ok(load)
}

fn parse_cdr_row(line: &str) -> Result<Option<ActivityRecord>, ()> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() > CDR_COLUMNS {
        return Err(());
    }
    let cell_id: u32 = fields[0].trim().parse().map_err(|_| ())?;
    if cell_id == 0 {
        return Err(());
    }
    let timestamp_ms: i64 = fields
        .get(1)
        .ok_or(())?
        .trim()
        .parse()
        .map_err(|_| ())?;
    let internet = match fields.get(CDR_INTERNET_COLUMN).map(|s| s.trim()) {
        None | Some("") => return Ok(None),
        Some(s) => s.parse::<f64>().map_err(|_| ())?,
    };
    if !internet.is_finite() || internet < 0.0 {
        return Err(());
    }
    Ok(Some(ActivityRecord {
        cell_id,
        timestamp_ms,
        internet_activity: internet,
    }))
}

/// Writes records in the CDR layout with every non-internet column empty.
pub fn write_cdr<W: Write>(mut out: W, records: &[ActivityRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(
            out,
            "{}\t{}\t\t\t\t\t\t{}",
            r.cell_id, r.timestamp_ms, r.internet_activity
        )?;
    }
    Ok(())
}

/// Half-open time range `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub start_ms: i64,
    pub end_ms: i64,
}

impl Horizon {
    pub fn new(start_ms: i64, end_ms: i64) -> Self {
        Self { start_ms, end_ms }
    }

    pub fn days(start_ms: i64, days: i64) -> Self {
        Self::new(start_ms, start_ms + days * MS_PER_DAY)
    }

    pub fn contains(&self, t_ms: i64) -> bool {
        t_ms >= self.start_ms && t_ms < self.end_ms
    }

    pub fn len_ms(&self) -> i64 {
        self.end_ms - self.start_ms
    }
}

/// Dense per-step, per-cell activity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SteppedTrace {
    cell_ids: Vec<u32>,
    step_duration_s: u32,
    origin_ms: i64,
    n_steps: usize,
    // row-major: step, then cell
    values: Vec<f64>,
}

impl SteppedTrace {
    pub fn new(
        cell_ids: Vec<u32>,
        step_duration_s: u32,
        origin_ms: i64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if cell_ids.is_empty() {
            return Err(Error::InvalidTrace("no cells".into()));
        }
        if step_duration_s == 0 {
            return Err(Error::InvalidTrace("zero step duration".into()));
        }
        if !values.len().is_multiple_of(cell_ids.len()) {
            return Err(Error::InvalidTrace(format!(
                "{} values do not fill rows of {} cells",
                values.len(),
                cell_ids.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidTrace(format!("entry {bad} is not a nonnegative number")));
        }
        let unique: HashSet<_> = cell_ids.iter().collect();
        if unique.len() != cell_ids.len() {
            return Err(Error::InvalidTrace("duplicate cell id".into()));
        }
        Ok(Self {
            n_steps: values.len() / cell_ids.len(),
            cell_ids,
            step_duration_s,
            origin_ms,
            values,
        })
    }

    pub fn cell_ids(&self) -> &[u32] {
        &self.cell_ids
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step_duration_s(&self) -> u32 {
        self.step_duration_s
    }

    pub fn origin_ms(&self) -> i64 {
        self.origin_ms
    }

    pub fn step_start_ms(&self, step: usize) -> i64 {
        self.origin_ms + step as i64 * i64::from(self.step_duration_s) * 1000
    }

    pub fn horizon(&self) -> Horizon {
        Horizon::new(self.origin_ms, self.step_start_ms(self.n_steps))
    }

    pub fn row(&self, step: usize) -> &[f64] {
        let n = self.n_cells();
        &self.values[step * n..(step + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_cells())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step_total(&self, step: usize) -> f64 {
        self.row(step).iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_step_total(&self) -> f64 {
        if self.n_steps == 0 {
            0.0
        } else {
            self.total() / self.n_steps as f64
        }
    }

    /// Rows `[start, end)` as a new trace with the origin shifted accordingly.
    pub fn slice_steps(&self, start: usize, end: usize) -> SteppedTrace {
        assert!(start <= end && end <= self.n_steps, "step range out of bounds");
        let n = self.n_cells();
        SteppedTrace {
            cell_ids: self.cell_ids.clone(),
            step_duration_s: self.step_duration_s,
            origin_ms: self.step_start_ms(start),
            n_steps: end - start,
            values: self.values[start * n..end * n].to_vec(),
        }
    }

    /// Restricts the trace to `cells`, in the given order.
    pub fn select_cells(&self, cells: &[u32]) -> Result<SteppedTrace> {
        let cols = cells
            .iter()
            .map(|id| {
                self.cell_ids
                    .iter()
                    .position(|c| c == id)
                    .ok_or_else(|| Error::InvalidTrace(format!("cell {id} not in trace")))
            })
            .collect::<Result<Vec<_>>>()?;
        let values = self
            .rows()
            .flat_map(|row| cols.iter().map(move |&c| row[c]))
            .collect();
        SteppedTrace::new(cells.to_vec(), self.step_duration_s, self.origin_ms, values)
    }

    /// Appends `later` after `self`. Both must share cells and step length and
    /// `later` must start where `self` ends.
    pub fn concat(&self, later: &SteppedTrace) -> Result<SteppedTrace> {
        if self.cell_ids != later.cell_ids || self.step_duration_s != later.step_duration_s {
            return Err(Error::InvalidTrace("concatenating incompatible traces".into()));
        }
        if later.origin_ms != self.step_start_ms(self.n_steps) {
            return Err(Error::InvalidTrace("traces are not contiguous".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&later.values);
        SteppedTrace::new(self.cell_ids.clone(), self.step_duration_s, self.origin_ms, values)
    }

    /// Writes `step_index,cell_<id>,...` CSV. Each entry of `comments` becomes
    /// a leading `# ` line; the origin and step length follow as one more
    /// comment so the file can be read back losslessly.
    pub fn write_csv<W: Write>(&self, out: W, comments: &[String]) -> std::io::Result<()> {
        let mut out = BufWriter::new(out);
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(
            out,
            "# origin_ms={} step_duration_s={}",
            self.origin_ms, self.step_duration_s
        )?;
        write!(out, "step_index")?;
        for id in &self.cell_ids {
            write!(out, ",cell_{id}")?;
        }
        writeln!(out)?;
        for (i, row) in self.rows().enumerate() {
            write!(out, "{i}")?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<SteppedTrace> {
        let mut origin_ms = MILAN_ORIGIN_MS;
        let mut step_duration_s = DEFAULT_STEP_SECONDS;
        let mut cell_ids: Option<Vec<u32>> = None;
        let mut values = Vec::new();
        let mut expected_step = 0usize;
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::TraceCsv {
                line: lineno,
                msg: e.to_string(),
            })?;
            let line = line.trim_end_matches('\r');
            let bad = |msg: String| Error::TraceCsv { line: lineno, msg };
            if let Some(comment) = line.strip_prefix('#') {
                for tok in comment.split_whitespace() {
                    if let Some(v) = tok.strip_prefix("origin_ms=") {
                        origin_ms = v.parse().map_err(|_| bad(format!("bad origin `{v}`")))?;
                    } else if let Some(v) = tok.strip_prefix("step_duration_s=") {
                        step_duration_s =
                            v.parse().map_err(|_| bad(format!("bad step duration `{v}`")))?;
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            match &cell_ids {
                None => {
                    if fields.next() != Some("step_index") {
                        return Err(bad("header must start with `step_index`".into()));
                    }
                    let ids = fields
                        .map(|f| {
                            f.strip_prefix("cell_")
                                .and_then(|id| id.parse().ok())
                                .ok_or_else(|| bad(format!("bad column `{f}`")))
                        })
                        .collect::<Result<Vec<u32>>>()?;
                    cell_ids = Some(ids);
                }
                Some(ids) => {
                    let step: usize = fields
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("missing step index".into()))?;
                    if step != expected_step {
                        return Err(bad(format!("expected step {expected_step}, found {step}")));
                    }
                    expected_step += 1;
                    let before = values.len();
                    for f in fields {
                        values.push(
                            f.parse::<f64>()
                                .map_err(|_| bad(format!("bad value `{f}`")))?,
                        );
                    }
                    if values.len() - before != ids.len() {
                        return Err(bad(format!("expected {} values", ids.len())));
                    }
                }
            }
        }
        let cell_ids = cell_ids.ok_or(Error::TraceCsv {
            line: 0,
            msg: "missing header".into(),
        })?;
        SteppedTrace::new(cell_ids, step_duration_s, origin_ms, values)
    }

    pub fn save_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        self.write_csv(file, comments).map_err(io_err)
    }

    pub fn load_csv(path: &Path) -> Result<SteppedTrace> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        SteppedTrace::read_csv(BufReader::new(file))
    }
}

#[derive(Debug, Clone)]
pub struct Aggregation {
    pub trace: SteppedTrace,
    /// Records whose timestamp falls outside the horizon.
    pub skipped_outside: usize,
    /// Records for cells not in the requested cell list.
    pub skipped_unknown_cell: usize,
}

/// Sums record activity into `[step_start, step_start + step_duration)` bins.
pub fn aggregate_steps(
    records: &[ActivityRecord],
    cell_ids: &[u32],
    step_duration_s: u32,
    horizon: Horizon,
) -> Result<Aggregation> {
    if cell_ids.is_empty() {
        return Err(Error::InvalidTrace("no cells to aggregate".into()));
    }
    let step_ms = i64::from(step_duration_s) * 1000;
    if step_ms == 0 || horizon.len_ms() <= 0 || horizon.len_ms() % step_ms != 0 {
        return Err(Error::InvalidTrace(format!(
            "step of {step_duration_s} s does not divide a horizon of {} ms",
            horizon.len_ms()
        )));
    }
    let n_steps = (horizon.len_ms() / step_ms) as usize;
    let n_cells = cell_ids.len();
    let column: std::collections::HashMap<u32, usize> =
        cell_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut values = vec![0.0; n_steps * n_cells];
    let mut skipped_outside = 0;
    let mut skipped_unknown_cell = 0;
    for r in records {
        if !horizon.contains(r.timestamp_ms) {
            skipped_outside += 1;
            continue;
        }
        let Some(&col) = column.get(&r.cell_id) else {
            skipped_unknown_cell += 1;
            continue;
        };
        let step = ((r.timestamp_ms - horizon.start_ms) / step_ms) as usize;
        values[step * n_cells + col] += r.internet_activity;
    }
    Ok(Aggregation {
        trace: SteppedTrace::new(cell_ids.to_vec(), step_duration_s, horizon.start_ms, values)?,
        skipped_outside,
        skipped_unknown_cell,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSplit {
    pub train: SteppedTrace,
    pub test: SteppedTrace,
    pub split_fraction: f64,
}

/// Chronological split: the first `floor(fraction * rows)` rows train.
pub fn split_train_test(trace: &SteppedTrace, fraction: f64) -> Result<TraceSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidTrace(format!("split fraction {fraction} not in (0, 1)")));
    }
    if trace.n_steps() < 2 {
        return Err(Error::InvalidTrace("need at least 2 rows to split".into()));
    }
    let n = trace.n_steps();
    let train_rows = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
    Ok(TraceSplit {
        train: trace.slice_steps(0, train_rows),
        test: trace.slice_steps(train_rows, n),
        split_fraction: fraction,
    })
}

/// Shape of the synthetic diurnal load.
///
/// Each cell gets a log-normal scale `s_c`. The value at step `t` is
/// `s_c * max(0, 1 + amplitude * cos(2π (hour_t - peak_hour) / 24))
///  + s_c * amplitude * noise * e_t` with `e_t ~ Exp(1)`, and the scales are
/// normalised so the expected step total over whole days is
/// `mean_step_total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiurnalProfile {
    pub mean_step_total: f64,
    pub amplitude: f64,
    pub peak_hour: f64,
    pub noise: f64,
    pub cell_scale_sigma: f64,
    pub utc_offset_hours: f64,
    pub origin_ms: i64,
    pub step_duration_s: u32,
}

impl Default for DiurnalProfile {
    fn default() -> Self {
        Self {
            mean_step_total: 400.0,
            amplitude: 0.5,
            peak_hour: 15.0,
            noise: 0.2,
            cell_scale_sigma: 0.5,
            utc_offset_hours: 1.0,
            origin_ms: MILAN_ORIGIN_MS,
            step_duration_s: DEFAULT_STEP_SECONDS,
        }
    }
}

/// Local wall-clock hour in `[0, 24)` of an epoch timestamp.
pub fn local_hour(t_ms: i64, utc_offset_hours: f64) -> f64 {
    let offset_ms = (utc_offset_hours * MS_PER_HOUR as f64).round() as i64;
    (t_ms + offset_ms).rem_euclid(MS_PER_DAY) as f64 / MS_PER_HOUR as f64
}

/// Deterministic synthetic trace for cells `1..=n_cells`.
pub fn generate_synthetic_trace(
    n_cells: usize,
    n_steps: usize,
    seed: u64,
    profile: &DiurnalProfile,
) -> Result<SteppedTrace> {
    if n_cells == 0 || n_steps == 0 {
        return Err(Error::InvalidTrace("synthetic trace needs ≥1 cell and ≥1 step".into()));
    }
    if !(profile.mean_step_total >= 0.0 && profile.amplitude >= 0.0 && profile.noise >= 0.0) {
        return Err(Error::InvalidTrace("profile parameters must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = profile.cell_scale_sigma.max(0.0);
    let lognormal = LogNormal::new(0.0, sigma)
        .map_err(|e| Error::InvalidTrace(format!("cell scale: {e}")))?;
    let raw: Vec<f64> = (0..n_cells).map(|_| lognormal.sample(&mut rng)).collect();
    let raw_total: f64 = raw.iter().sum();
    let level = profile.mean_step_total / (1.0 + profile.amplitude * profile.noise);
    let base: Vec<f64> = raw.iter().map(|s| s / raw_total * level).collect();

    let step_ms = i64::from(profile.step_duration_s) * 1000;
    let mut values = Vec::with_capacity(n_cells * n_steps);
    for t in 0..n_steps {
        let hour = local_hour(
            profile.origin_ms + t as i64 * step_ms,
            profile.utc_offset_hours,
        );
        let phase = 2.0 * std::f64::consts::PI * (hour - profile.peak_hour) / 24.0;
        let diurnal = (1.0 + profile.amplitude * phase.cos()).max(0.0);
        for b in &base {
            let e: f64 = Exp1.sample(&mut rng);
            let v = b * diurnal + b * profile.amplitude * profile.noise * e;
            values.push(v.max(0.0));
        }
    }
    SteppedTrace::new(
        (1..=n_cells as u32).collect(),
        profile.step_duration_s,
        profile.origin_ms,
        values,
    )
}
