//! Per-case metric rows and summary statistics.

use std::fmt::Write as _;

use super::{percentile_sorted, Region};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMetrics {
    pub region: Region,
    pub dice: f64,
    pub hd95: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl RegionMetrics {
    pub fn values(&self) -> [f64; 4] {
        [self.dice, self.hd95, self.sensitivity, self.specificity]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub id: String,
    /// In [`Region::ALL`] order.
    pub regions: Vec<RegionMetrics>,
}

pub const METRIC_NAMES: [&str; 4] = ["dice", "hd95", "sensitivity", "specificity"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

impl Summary {
    pub const ROWS: [&'static str; 5] = ["Mean", "StdDev", "Median", "25quantile", "75quantile"];

    pub fn rows(&self) -> [f64; 5] {
        [self.mean, self.sd, self.median, self.p25, self.p75]
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("summary input"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean,
        sd,
        median: percentile_sorted(&sorted, 50.0),
        p25: percentile_sorted(&sorted, 25.0),
        p75: percentile_sorted(&sorted, 75.0),
    })
}

/// Summaries indexed `[region][metric]`.
pub fn summarize_cases(cases: &[CaseMetrics]) -> Result<Vec<(Region, [Summary; 4])>> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluated cases"));
    }
    Region::ALL
        .iter()
        .enumerate()
        .map(|(r, &region)| {
            let column = |m: usize| -> Result<Summary> {
                let values: Vec<f64> = cases.iter().map(|c| c.regions[r].values()[m]).collect();
                summarize(&values)
            };
            Ok((region, [column(0)?, column(1)?, column(2)?, column(3)?]))
        })
        .collect()
}

/// Tab-separated rows `case, region, dice, hd95, sensitivity, specificity`,
/// then a blank line and the summary block.
pub fn to_tsv(cases: &[CaseMetrics]) -> Result<String> {
    let mut s = String::new();
    let header = format!("case\tregion\t{}", METRIC_NAMES.join("\t"));
    writeln!(s, "{header}").expect("string write");
    for c in cases {
        for r in &c.regions {
            let v = r.values();
            writeln!(s, "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", c.id, r.region.name(), v[0], v[1], v[2], v[3])
                .expect("string write");
        }
    }
    writeln!(s).expect("string write");
    writeln!(s, "statistic\tregion\t{}", METRIC_NAMES.join("\t")).expect("string write");
    let summary = summarize_cases(cases)?;
    for (row, name) in Summary::ROWS.iter().enumerate() {
        for (region, stats) in &summary {
            write!(s, "{name}\t{}", region.name()).expect("string write");
            for st in stats {
                write!(s, "\t{:.6}", st.rows()[row]).expect("string write");
            }
            writeln!(s).expect("string write");
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_summary() {
        let s = summarize(&[0.7]).unwrap();
        assert_eq!(s.rows(), [0.7, 0.0, 0.7, 0.7, 0.7]);
    }

    #[test]
    fn two_values() {
        let s = summarize(&[0.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.median, s.sd), (0.5, 0.5, 0.5));
    }

    #[test]
    fn five_values_by_hand() {
        // Sorted 1, 2, 4, 7, 11: positions 1, 2, 3 for the quartiles and median.
        let s = summarize(&[7.0, 1.0, 11.0, 4.0, 2.0]).unwrap();
        assert_eq!((s.p25, s.median, s.p75, s.mean), (2.0, 4.0, 7.0, 5.0));
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.p25, s.median, s.p75), (1.75, 2.5, 3.25));
        assert!(summarize(&[]).is_err());
    }
}
