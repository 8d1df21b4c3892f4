//! Metric records, repeated-run timing and report output.

pub mod stats;
pub mod validation;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::{Error, Result};

pub use stats::Summary;
pub use validation::{
    instrumentation_overhead, moving_average, test_forward, test_gradient, test_optimizer, test_training,
    DivergenceCurves, DivergencePoint, ForwardReport, GradientReport, InstrumentationOverhead, Norms, Outcome,
    Sequential, TrainingReport, TrainingScheme,
};

/// Timed runs per measurement unless overridden.
pub const DEFAULT_RUNS: usize = 30;

/// One measured value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub unit: String,
    /// Run index for repeated measurements, step index for training streams.
    pub index: usize,
    /// Nanoseconds since the start of the measurement.
    pub wall_ns: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Repeated {
    /// Seconds per run.
    pub summary: Summary,
    pub records: Vec<MetricRecord>,
}

/// Failure of a repeated measurement; the completed runs are kept.
#[derive(Debug, thiserror::Error)]
#[error("run {run} failed: {source}")]
pub struct Aborted {
    pub run: usize,
    pub records: Vec<MetricRecord>,
    #[source]
    pub source: Error,
}

/// Executes `task` once untimed, then `runs` timed times.
pub fn run_repeated<F>(name: &str, runs: usize, mut task: F) -> std::result::Result<Repeated, Aborted>
where
    F: FnMut(usize) -> Result<()>,
{
    let origin = Instant::now();
    let mut records = Vec::with_capacity(runs);
    if runs == 0 {
        return Err(Aborted { run: 0, records, source: Error::InvalidArgument("runs must be >= 1".into()) });
    }
    if let Err(source) = task(0) {
        return Err(Aborted { run: 0, records, source });
    }
    for run in 0..runs {
        let t0 = Instant::now();
        if let Err(source) = task(run + 1) {
            return Err(Aborted { run, records, source });
        }
        let secs = t0.elapsed().as_secs_f64();
        records.push(MetricRecord {
            name: name.to_string(),
            value: secs * 1e3,
            unit: "ms".into(),
            index: run,
            wall_ns: origin.elapsed().as_nanos() as u64,
            worker: None,
        });
    }
    let samples: Vec<f64> = records.iter().map(|r| r.value / 1e3).collect();
    let summary = Summary::of(&samples).map_err(|source| Aborted { run: runs, records: records.clone(), source })?;
    Ok(Repeated { summary, records })
}

/// Opens `path` for writing, `-` meaning stdout.
pub fn open_output(path: &str) -> Result<Box<dyn Write>> {
    if path == "-" {
        Ok(Box::new(std::io::stdout()))
    } else {
        let f = std::fs::File::create(Path::new(path)).map_err(|e| Error::io(path, e))?;
        Ok(Box::new(std::io::BufWriter::new(f)))
    }
}

/// CSV with columns `metric,run,step,value,unit`. Repeated measurements
/// fill `run`, training streams fill `step`.
pub fn write_csv<W: Write>(out: W, records: &[MetricRecord], per_step: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::InvalidArgument(format!("csv output: {e}"));
    w.write_record(["metric", "run", "step", "value", "unit"]).map_err(err)?;
    for r in records {
        let idx = r.index.to_string();
        let (run, step) = if per_step { ("", idx.as_str()) } else { (idx.as_str(), "") };
        let value = if r.unit == "ms" { format!("{:.3}", r.value) } else { format!("{}", r.value) };
        w.write_record([r.name.as_str(), run, step, value.as_str(), r.unit.as_str()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

/// JSON summary of a timing measurement, in milliseconds with 3 decimals.
pub fn summary_json(name: &str, s: &Summary) -> serde_json::Value {
    let ms = |v: f64| (v * 1e6).round() / 1e3;
    serde_json::json!({
        "metric": name,
        "unit": "ms",
        "n": s.n,
        "median": ms(s.median),
        "ci_low": ms(s.ci_low),
        "ci_high": ms(s.ci_high),
        "min": ms(s.min),
        "max": ms(s.max),
    })
}
