use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::simenv::{ActionChoice, Transition};
use crate::{Error, Result};

/// Completed requests per metrics window.
pub const WINDOW_SIZE: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Test => "test",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "test" => Ok(Phase::Test),
            other => Err(Error::InvalidArgument(format!("unknown phase `{other}`"))),
        }
    }
}

/// Aggregates over one window of completed requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsWindow {
    pub phase: Phase,
    pub window: usize,
    pub mean_reward: f64,
    pub mean_satisfaction: f64,
    pub mean_delay: f64,
    /// Fraction of requests resolved by a direct cloud call.
    pub llm_direct_freq: f64,
    /// Population variance, across servers, of each server's mean reward.
    pub reward_variance: f64,
}

/// Running sums for the current window.
#[derive(Clone, Debug)]
pub struct WindowAccumulator {
    phase: Phase,
    size: usize,
    next_index: usize,
    count: usize,
    reward: f64,
    satisfaction: f64,
    delay: f64,
    direct: usize,
    per_server: Vec<(f64, usize)>,
}

impl WindowAccumulator {
    pub fn new(phase: Phase, servers: usize) -> Self {
        Self::with_size(phase, servers, WINDOW_SIZE)
    }

    pub fn with_size(phase: Phase, servers: usize, size: usize) -> Self {
        WindowAccumulator {
            phase,
            size: size.max(1),
            next_index: 0,
            count: 0,
            reward: 0.0,
            satisfaction: 0.0,
            delay: 0.0,
            direct: 0,
            per_server: vec![(0.0, 0); servers],
        }
    }

    /// Adds one completed request; returns a window when it fills up.
    pub fn record(&mut self, t: &Transition) -> Option<MetricsWindow> {
        self.count += 1;
        self.reward += t.reward;
        self.satisfaction += t.satisfaction;
        self.delay += t.delay;
        if t.action == ActionChoice::Cloud {
            self.direct += 1;
        }
        if let Some(slot) = self.per_server.get_mut(t.server) {
            slot.0 += t.reward;
            slot.1 += 1;
        }
        (self.count == self.size).then(|| self.flush_window())
    }

    /// Emits the final partial window, if any.
    pub fn finish(&mut self) -> Option<MetricsWindow> {
        (self.count > 0).then(|| self.flush_window())
    }

    fn flush_window(&mut self) -> MetricsWindow {
        let n = self.count as f64;
        let means: Vec<f64> = self
            .per_server
            .iter()
            .filter(|(_, c)| *c > 0)
            .map(|(s, c)| s / *c as f64)
            .collect();
        let reward_variance = if means.is_empty() {
            0.0
        } else {
            let m = means.iter().sum::<f64>() / means.len() as f64;
            means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64
        };
        let w = MetricsWindow {
            phase: self.phase,
            window: self.next_index,
            mean_reward: self.reward / n,
            mean_satisfaction: self.satisfaction / n,
            mean_delay: self.delay / n,
            llm_direct_freq: self.direct as f64 / n,
            reward_variance,
        };
        self.next_index += 1;
        self.count = 0;
        self.reward = 0.0;
        self.satisfaction = 0.0;
        self.delay = 0.0;
        self.direct = 0;
        self.per_server.iter_mut().for_each(|s| *s = (0.0, 0));
        w
    }
}

/// Feeds `t` into `acc`, appending a finished window to `out`.
pub fn record_window(acc: &mut WindowAccumulator, t: &Transition, out: &mut Vec<MetricsWindow>) {
    if let Some(w) = acc.record(t) {
        out.push(w);
    }
}

/// Whole-phase aggregates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub requests: usize,
    pub mean_reward: f64,
    pub mean_satisfaction: f64,
    pub mean_delay: f64,
    pub llm_direct_freq: f64,
    /// Decisions the environment had to downgrade (e.g. cache hit on an
    /// empty store).
    pub fallbacks: usize,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct SummaryAccumulator {
    requests: usize,
    reward: f64,
    satisfaction: f64,
    delay: f64,
    direct: usize,
    fallbacks: usize,
}

impl SummaryAccumulator {
    pub(crate) fn record(&mut self, t: &Transition) {
        self.requests += 1;
        self.reward += t.reward;
        self.satisfaction += t.satisfaction;
        self.delay += t.delay;
        self.direct += usize::from(t.action == ActionChoice::Cloud);
        self.fallbacks += usize::from(t.is_fallback());
    }

    pub(crate) fn finish(&self) -> PhaseSummary {
        let n = self.requests.max(1) as f64;
        PhaseSummary {
            requests: self.requests,
            mean_reward: self.reward / n,
            mean_satisfaction: self.satisfaction / n,
            mean_delay: self.delay / n,
            llm_direct_freq: self.direct as f64 / n,
            fallbacks: self.fallbacks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub windows: Vec<MetricsWindow>,
    pub train: PhaseSummary,
    pub test: PhaseSummary,
}

impl MetricsReport {
    pub fn windows_of(&self, phase: Phase) -> impl Iterator<Item = &MetricsWindow> {
        self.windows.iter().filter(move |w| w.phase == phase)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    #[serde(rename = "csv")]
    Csv,
    #[serde(rename = "json-lines")]
    JsonLines,
}

impl ReportFormat {
    /// `.jsonl`/`.json` select JSON lines, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => ReportFormat::JsonLines,
            _ => ReportFormat::Csv,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 7] = [
    "phase",
    "window",
    "mean_reward",
    "mean_satisfaction",
    "mean_delay",
    "llm_direct_freq",
    "reward_variance",
];

/// Shortest round-trip decimal, zero-padded to at least 9 significant digits.
pub fn format_float(x: f64) -> String {
    let s = format!("{x}");
    if !x.is_finite() {
        return s;
    }
    let digits = s
        .chars()
        .filter(char::is_ascii_digit)
        .skip_while(|&c| c == '0')
        .count();
    if digits >= 9 {
        return s;
    }
    let pad = 9 - digits.max(1) + usize::from(digits == 0);
    let mut out = s;
    if !out.contains('.') {
        out.push('.');
    }
    out.extend(std::iter::repeat_n('0', pad));
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine {
    Config {
        seed: u64,
        config: Box<ExperimentConfig>,
    },
    Window(MetricsWindow),
    Summary {
        phase: Phase,
        summary: PhaseSummary,
    },
}

/// Writes the report to `path`; see [`write_report`].
pub fn emit_report(
    report: &MetricsReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_report(report, &mut out, format)?;
    out.flush()?;
    Ok(())
}

/// Writes the report. CSV holds the window table only; JSON lines starts with
/// the resolved config and ends with the phase summaries.
pub fn write_report<W: Write>(report: &MetricsReport, out: W, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(CSV_COLUMNS)?;
            for win in &report.windows {
                w.write_record([
                    win.phase.to_string(),
                    win.window.to_string(),
                    format_float(win.mean_reward),
                    format_float(win.mean_satisfaction),
                    format_float(win.mean_delay),
                    format_float(win.llm_direct_freq),
                    format_float(win.reward_variance),
                ])?;
            }
            w.flush()?;
        }
        ReportFormat::JsonLines => {
            let mut out = out;
            let mut line = |l: &ReportLine| -> Result<()> {
                serde_json::to_writer(&mut out, l)?;
                out.write_all(b"\n")?;
                Ok(())
            };
            line(&ReportLine::Config {
                seed: report.config.seed,
                config: Box::new(report.config.clone()),
            })?;
            for w in &report.windows {
                line(&ReportLine::Window(w.clone()))?;
            }
            line(&ReportLine::Summary {
                phase: Phase::Train,
                summary: report.train.clone(),
            })?;
            line(&ReportLine::Summary {
                phase: Phase::Test,
                summary: report.test.clone(),
            })?;
            out.flush()?;
        }
    }
    Ok(())
}

/// Reads the window table of a CSV report.
pub fn parse_csv_windows(path: impl AsRef<Path>) -> Result<Vec<MetricsWindow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|e| Error::Parse {
                line,
                msg: format!("column {}: {e}", CSV_COLUMNS[k]),
            })
        };
        out.push(MetricsWindow {
            phase: rec[0].parse()?,
            window: rec[1].parse().map_err(|e| Error::Parse {
                line,
                msg: format!("window: {e}"),
            })?,
            mean_reward: f(2)?,
            mean_satisfaction: f(3)?,
            mean_delay: f(4)?,
            llm_direct_freq: f(5)?,
            reward_variance: f(6)?,
        });
    }
    Ok(out)
}

/// Reads a JSON-lines report back into a [`MetricsReport`].
pub fn parse_json_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let reader = BufReader::new(File::open(path)?);
    let mut config = None;
    let mut windows = Vec::new();
    let (mut train, mut test) = (None, None);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match parsed {
            ReportLine::Config { config: c, .. } => config = Some(*c),
            ReportLine::Window(w) => windows.push(w),
            ReportLine::Summary {
                phase: Phase::Train,
                summary,
            } => train = Some(summary),
            ReportLine::Summary {
                phase: Phase::Test,
                summary,
            } => test = Some(summary),
        }
    }
    let missing = |what: &str| Error::Parse {
        line: 0,
        msg: format!("report has no {what} line"),
    };
    Ok(MetricsReport {
        config: config.ok_or_else(|| missing("config"))?,
        windows,
        train: train.ok_or_else(|| missing("train summary"))?,
        test: test.ok_or_else(|| missing("test summary"))?,
    })
}
