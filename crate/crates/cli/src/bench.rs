//! Constant-tightness sweeps: one finite-mode pipeline per grid cell,
//! run in parallel, rows kept in grid order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bishadow::charts::seq_pnorm;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, FamilyName, Mode};
use crate::{constants, engine_exit_code, exit, output, prepare, solve, Failure};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub lambda_u: Option<f64>,
    pub lambda_s: Option<f64>,
    pub status: &'static str,
    pub detail: String,
    pub l: Option<f64>,
    pub delta: Option<f64>,
    pub achieved: Option<f64>,
    pub size_norm: Option<f64>,
    /// `|d|_p / |max(delta_i, gamma_i)|_p`.
    pub measured_ratio: Option<f64>,
    pub ratio_to_l: Option<f64>,
}

/// The grid: every `(lambda_u, lambda_s)` pair for the coupled family,
/// otherwise the single configured cell.
pub fn grid(config: &ExperimentConfig) -> Vec<ExperimentConfig> {
    if config.family != FamilyName::Coupled || (config.bench_lambda_u.is_empty() && config.bench_lambda_s.is_empty()) {
        return vec![config.clone()];
    }
    let us = if config.bench_lambda_u.is_empty() {
        config.lambda_u.into_iter().collect()
    } else {
        config.bench_lambda_u.clone()
    };
    let ss = if config.bench_lambda_s.is_empty() {
        config.lambda_s.into_iter().collect()
    } else {
        config.bench_lambda_s.clone()
    };
    let mut cells = Vec::with_capacity(us.len() * ss.len());
    for &lu in &us {
        for &ls in &ss {
            let mut c = config.clone();
            c.lambda_u = Some(lu);
            c.lambda_s = Some(ls);
            cells.push(c);
        }
    }
    cells
}

pub fn run_cell(config: &ExperimentConfig) -> BenchRow {
    let mut row = BenchRow {
        lambda_u: config.lambda_u,
        lambda_s: config.lambda_s,
        status: "ok",
        detail: String::new(),
        l: None,
        delta: None,
        achieved: None,
        size_norm: None,
        measured_ratio: None,
        ratio_to_l: None,
    };
    let flag = |mut row: BenchRow, f: Failure| {
        row.status = match f.code {
            exit::CERTIFICATION => "infeasible",
            exit::CONVERGENCE => "nonconvergence",
            exit::VIOLATION => "violation",
            exit::PRECONDITION => "precondition",
            _ => "error",
        };
        row.detail = f.message;
        row
    };
    let prepared = match prepare(config) {
        Ok(p) => p,
        Err(f) => return flag(row, f),
    };
    let (tilde, cons) = match constants(&prepared, config, Mode::Finite) {
        Ok(c) => c,
        Err(f) => return flag(row, f),
    };
    row.l = Some(cons.l);
    row.delta = Some(cons.delta);
    let result = match solve(&prepared, config, Mode::Finite, tilde, cons) {
        Ok(r) => r,
        Err(e) => return flag(row, Failure::new(engine_exit_code(&e), e.to_string())),
    };
    let combined: Vec<f64> = result.defects.iter().zip(&result.gaps).map(|(a, b)| a.max(*b)).collect();
    let size = seq_pnorm(&combined, result.p);
    row.achieved = Some(result.achieved_norm);
    row.size_norm = Some(size);
    if size > 0.0 {
        let ratio = result.achieved_norm / size;
        row.measured_ratio = Some(ratio);
        row.ratio_to_l = Some(ratio / cons.l);
    }
    row
}

pub fn run_bench(config: &ExperimentConfig) -> Vec<BenchRow> {
    grid(config).par_iter().map(run_cell).collect()
}

pub fn sweep_csv(rows: &[BenchRow], config: &ExperimentConfig) -> String {
    let mut s = String::from("cell,lambda_u,lambda_s,mu_u,mu_s,status,L,delta,achieved_norm,size_norm,measured_ratio,ratio_to_L,detail\n");
    let num = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for (n, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{n},{},{},{},{},{},{},{},{},{},{},{},{}",
            num(r.lambda_u),
            num(r.lambda_s),
            num(Some(config.mu_u)),
            num(Some(config.mu_s)),
            r.status,
            num(r.l),
            num(r.delta),
            num(r.achieved),
            num(r.size_norm),
            num(r.measured_ratio),
            num(r.ratio_to_l),
            r.detail.replace([',', '\n'], ";"),
        );
    }
    s
}

pub(crate) fn cmd_bench(config: &ExperimentConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<String, Failure> {
    let rows = run_bench(config);
    output::write_text(&out.join("sweep.csv"), &sweep_csv(&rows, config), files)?;
    let ok = rows.iter().filter(|r| r.status == "ok").count();
    Ok(format!("{} cells, {ok} solved", rows.len()))
}
