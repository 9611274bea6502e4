//! Multi-seed experiments: ablation variants and one-parameter sweeps.
//!
//! Seed `s` of a cell generates data with `data.seed + s` and trains with
//! `train.seed + s`, so every variant and sweep value sees the same datasets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{generate_synthetic, SyntheticData};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::trainer::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fine branch alone with plain cross-entropy.
    Baseline,
    /// Both branches, penalty disabled.
    NoGce,
    /// Fine branch alone with the penalty.
    NoTwoBranch,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::NoGce, Variant::NoTwoBranch, Variant::Full];

    /// Applies the variant on top of `base`, whose `penalty.b` is the one
    /// used by the penalized variants.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let (two_branch, penalized) = match self {
            Variant::Baseline => (false, false),
            Variant::NoGce => (true, false),
            Variant::NoTwoBranch => (false, true),
            Variant::Full => (true, true),
        };
        cfg.train.two_branch = two_branch;
        if !penalized {
            cfg.train.penalty.b = 1.0;
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::NoGce => "no-gce",
            Variant::NoTwoBranch => "no-two-branch",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Datasets for seeds `0..n`, generated once and shared between cells.
pub fn seed_datasets(cfg: &RunConfig, seeds: usize) -> Result<Vec<SyntheticData>> {
    (0..seeds as u64)
        .map(|s| {
            let mut spec = cfg.data.clone();
            spec.seed = spec.seed.wrapping_add(s);
            generate_synthetic(&spec)
        })
        .collect()
}

/// Trains on one seed's data and evaluates the final network.
pub fn run_cell(cfg: &RunConfig, data: &SyntheticData, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = train_cfg.seed.wrapping_add(seed);
    let (net, _) = train(cfg.trunk.clone(), &data.train, &data.eval, train_cfg)?;
    evaluate(&net, &data.eval.samples, data.tree())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean_fine_top1: f64,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub std_fine_top1: f64,
    pub mean_violation_rate: f64,
    pub seeds: usize,
}

impl Summary {
    pub fn of(reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = reports.len() as f64;
        let mean = reports.iter().map(|r| r.fine_top1).sum::<f64>() / n;
        let var = if reports.len() > 1 {
            reports.iter().map(|r| (r.fine_top1 - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Self {
            mean_fine_top1: mean,
            std_fine_top1: var.sqrt(),
            mean_violation_rate: reports.iter().map(|r| r.violation_rate).sum::<f64>() / n,
            seeds: reports.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub reports: Vec<EvalReport>,
    pub summary: Summary,
}

/// One row per variant; `data[s]` is the dataset for seed `s`.
pub fn ablation(cfg: &RunConfig, variants: &[Variant], data: &[SyntheticData]) -> Result<Vec<AblationRow>> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    variants
        .iter()
        .map(|&variant| {
            let vcfg = variant.configure(cfg);
            let reports = data
                .iter()
                .enumerate()
                .map(|(s, d)| run_cell(&vcfg, d, s as u64))
                .collect::<Result<Vec<_>>>()?;
            let summary = Summary::of(&reports)?;
            Ok(AblationRow {
                variant,
                reports,
                summary,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Hierarchy penalty.
    B,
    /// Coarse:fine loss ratio.
    R,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::B => "train.penalty.b",
            SweepParam::R => "train.penalty.r",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::B => "b",
            SweepParam::R => "r",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b" => Ok(SweepParam::B),
            "r" => Ok(SweepParam::R),
            _ => Err(Error::InvalidConfig(format!("unknown sweep parameter {s:?} (expected b or r)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: String,
    #[serde(flatten)]
    pub summary: Summary,
}

pub const SWEEP_HEADER: [&str; 6] = ["param", "value", "mean_fine_top1", "std_fine_top1", "mean_violation_rate", "seeds"];

/// Runs every value on every seed's dataset. Rows come back sorted by the
/// value string.
pub fn sweep(cfg: &RunConfig, param: SweepParam, values: &[String], data: &[SyntheticData]) -> Result<Vec<SweepRow>> {
    if values.is_empty() || data.is_empty() {
        return Err(Error::EmptyInput);
    }
    // Validate every value up front so a typo fails before any training.
    let configs = values
        .iter()
        .map(|v| cfg.with_overrides(&[format!("{}={}", param.key(), quote(param, v))]))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = values
        .iter()
        .zip(&configs)
        .map(|(value, vcfg)| {
            let reports = data
                .iter()
                .enumerate()
                .map(|(s, d)| run_cell(vcfg, d, s as u64))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                param,
                value: value.clone(),
                summary: Summary::of(&reports)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.value.cmp(&b.value));
    Ok(rows)
}

fn quote(param: SweepParam, value: &str) -> String {
    match param {
        SweepParam::B => value.to_string(),
        SweepParam::R => format!("\"{value}\""),
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.param.to_string(),
            r.value.clone(),
            r.summary.mean_fine_top1.to_string(),
            r.summary.std_fine_top1.to_string(),
            r.summary.mean_violation_rate.to_string(),
            r.summary.seeds.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(fine_top1: f64, violation_rate: f64) -> EvalReport {
        EvalReport {
            samples: 10,
            fine_top1,
            coarse_top1_via_fine: 0.0,
            coarse_top1_head: 0.0,
            violation_rate,
            intra_coarse_error_rate: 0.0,
            confusion: vec![],
        }
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[report(0.5, 0.1), report(0.7, 0.3), report(0.9, 0.2)]).unwrap();
        assert!((s.mean_fine_top1 - 0.7).abs() < 1e-15);
        assert!((s.std_fine_top1 - 0.2).abs() < 1e-15);
        assert!((s.mean_violation_rate - 0.2).abs() < 1e-15);
        assert_eq!(Summary::of(&[report(0.4, 0.0)]).unwrap().std_fine_top1, 0.0);
        assert!(Summary::of(&[]).is_err());
    }

    #[test]
    fn variants_set_branch_and_penalty() {
        let mut base = RunConfig::default();
        base.train.penalty.b = 2.5;
        let flags: Vec<_> = Variant::ALL
            .iter()
            .map(|v| {
                let c = v.configure(&base);
                (c.train.two_branch, c.train.penalty.b)
            })
            .collect();
        assert_eq!(flags, [(false, 1.0), (true, 1.0), (false, 2.5), (true, 2.5)]);
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn sweep_rejects_bad_values_before_training() {
        let cfg = RunConfig::default();
        let data = seed_datasets(&cfg, 1).unwrap();
        assert!(sweep(&cfg, SweepParam::B, &["0.5".into()], &data).is_err());
        assert!(matches!(
            sweep(&cfg, SweepParam::R, &["3:0".into()], &data),
            Err(Error::InvalidConfig(_))
        ));
        assert!(sweep(&cfg, SweepParam::B, &[], &data).is_err());
        assert!(sweep(&cfg, SweepParam::B, &["2".into()], &[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![SweepRow {
            param: SweepParam::R,
            value: "7:3".into(),
            summary: Summary::of(&[report(0.5, 0.25)]).unwrap(),
        }];
        assert_eq!(
            sweep_csv(&rows),
            "param,value,mean_fine_top1,std_fine_top1,mean_violation_rate,seeds\nr,7:3,0.5,0,0.25,1\n"
        );
    }
}
