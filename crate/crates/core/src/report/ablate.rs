use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_err, line_chart, Series, Summary};
use crate::config::ExperimentConfig;
use crate::error::{io_err, Result};
use crate::rehearsal::Strategy;
use crate::router::VotingMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    RehearsalSize,
    Sampling,
    Alpha,
    Depth,
    Order,
    Voting,
}

impl Axis {
    pub const ALL: [Axis; 6] = [Axis::RehearsalSize, Axis::Sampling, Axis::Alpha, Axis::Depth, Axis::Order, Axis::Voting];

    /// Axes along which Avg is expected not to decrease.
    pub fn expects_monotone(self) -> bool {
        self == Axis::RehearsalSize
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| format!("unknown axis {s:?} (expected rehearsal_size, sampling, alpha, depth, order or voting)"))
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::RehearsalSize => "rehearsal_size",
            Axis::Sampling => "sampling",
            Axis::Alpha => "alpha",
            Axis::Depth => "depth",
            Axis::Order => "order",
            Axis::Voting => "voting",
        })
    }
}

/// Labeled configurations along `axis`, everything else taken from `base`.
pub fn grid(axis: Axis, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::RehearsalSize => [100, 150, 200]
            .into_iter()
            .map(|n| (n.to_string(), with(&|c| c.rehearsal.capacity = n)))
            .collect(),
        Axis::Sampling => Strategy::ALL
            .into_iter()
            .map(|s| (s.to_string(), with(&|c| c.rehearsal.strategy = s)))
            .collect(),
        Axis::Alpha => [1.0, 5.0, 10.0, 15.0, 20.0]
            .into_iter()
            .map(|a| (a.to_string(), with(&|c| c.router.alpha = a)))
            .collect(),
        Axis::Depth => [1, 2, 3]
            .into_iter()
            .map(|d| (d.to_string(), with(&|c| c.router.depth = d)))
            .collect(),
        Axis::Order => {
            let o1 = base.order.clone();
            let o2: Vec<u8> = o1.iter().rev().copied().collect();
            let mut o3 = o1.clone();
            o3.rotate_left(o1.len() / 2);
            [("O1", o1), ("O2", o2), ("O3", o3)]
                .into_iter()
                .map(|(name, o)| (name.to_string(), with(&|c| c.order = o.clone())))
                .collect()
        }
        Axis::Voting => [VotingMode::Soft, VotingMode::Hard]
            .into_iter()
            .map(|v| (v.to_string(), with(&|c| c.voting = v)))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub avg: f64,
    pub last: f64,
    pub domain_accuracy: Option<f64>,
    /// Set when Avg fell below the previous grid point on a monotone axis.
    pub violation: bool,
}

impl AblationRow {
    pub fn new(axis: Axis, value: String, s: &Summary) -> Self {
        AblationRow {
            axis,
            value,
            avg: s.avg,
            last: s.last,
            domain_accuracy: s.final_domain_accuracy(),
            violation: false,
        }
    }
}

/// Grid values whose Avg is below their predecessor's; empty on axes
/// without an expected trend.
pub fn monotone_violations(rows: &[AblationRow]) -> Vec<String> {
    if !rows.first().is_some_and(|r| r.axis.expects_monotone()) {
        return Vec::new();
    }
    rows.windows(2).filter(|w| w[1].avg < w[0].avg).map(|w| w[1].value.clone()).collect()
}

/// Marks violations in place.
fn flag(rows: &mut [AblationRow]) {
    let bad = monotone_violations(rows);
    for r in rows.iter_mut() {
        r.violation = bad.contains(&r.value);
    }
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut rows = rows.to_vec();
    flag(&mut rows);
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| format_err(path, e))).collect()
}

pub fn ablation_svg(axis: Axis, rows: &[AblationRow]) -> String {
    let labels: Vec<String> = rows.iter().map(|r| r.value.clone()).collect();
    let series = [
        Series {
            name: "Avg".into(),
            points: rows.iter().enumerate().map(|(i, r)| (i, r.avg)).collect(),
        },
        Series {
            name: "Last".into(),
            points: rows.iter().enumerate().map(|(i, r)| (i, r.last)).collect(),
        },
    ];
    line_chart(&format!("Ablation: {axis}"), &axis.to_string(), &labels, &series)
}

pub fn ablation_markdown(axis: Axis, rows: &[AblationRow]) -> String {
    let mut out = format!("| {axis} | Avg | Last | domain accuracy |\n|---|---|---|---|\n");
    for r in rows {
        let d = r.domain_accuracy.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into());
        out += &format!("| {} | {:.4} | {:.4} | {d} |\n", r.value, r.avg, r.last);
    }
    if axis.expects_monotone() {
        let bad = monotone_violations(rows);
        if bad.is_empty() {
            out += "\nAvg is nondecreasing along the grid.\n";
        } else {
            out += &format!("\nAvg decreases at: {}\n", bad.join(", "));
        }
    }
    out
}
