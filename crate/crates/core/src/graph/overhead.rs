//! Framework overhead: whole-graph time against the sum of operator times.

use std::collections::BTreeMap;
use std::time::Instant;

use super::events::Events;
use super::exec::{execute, NodeTimes};
use super::NetworkGraph;
use crate::metrics::Summary;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone)]
pub struct OverheadReport {
    /// Seconds per execution.
    pub whole: Summary,
    /// Seconds spent inside operator calls per execution.
    pub nodes: Summary,
    /// `median(whole) / median(nodes) − 1`.
    pub overhead_ratio: f64,
}

/// Times `runs` executions (after one warmup). Both quantities come from
/// the same executions, so the ratio is never negative.
pub fn framework_overhead(
    g: &NetworkGraph,
    feeds: &BTreeMap<String, Tensor>,
    loss: Option<&str>,
    runs: usize,
) -> Result<OverheadReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let mut whole = Vec::with_capacity(runs);
    let mut nodes = Vec::with_capacity(runs);
    for i in 0..=runs {
        let mut times = NodeTimes::default();
        let t0 = Instant::now();
        execute(g, feeds, &[], loss, &mut Events::new(), Some(&mut times))?;
        let total = t0.elapsed();
        if i > 0 {
            whole.push(total.as_secs_f64());
            nodes.push(times.total().as_secs_f64());
        }
    }
    let whole = Summary::of(&whole)?;
    let nodes = Summary::of(&nodes)?;
    let overhead_ratio = if nodes.median > 0.0 { whole.median / nodes.median - 1.0 } else { 0.0 };
    Ok(OverheadReport { whole, nodes, overhead_ratio })
}
