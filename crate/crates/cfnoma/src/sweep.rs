//! Experiment driver: evaluates every (sweep point, topology) cell, emits
//! plot-ready CSV plus a reproduction manifest, and reduces raw rows into
//! per-group means with confidence intervals.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::clustering::{self, Algorithm};
use crate::error::{Error, Result};
use crate::ia::{ia_maximize, IaData, IaOptions};
use crate::mc::{mc_verify, McOracleConfig};
use crate::model::{estimation_stats, generate_topology, large_scale_fading, Topology};
use crate::scenario::{PaMode, RunManifest, ScenarioConfig, SweepPoint, SystemKind};
use crate::seeds;
use crate::sse::{self, SeRecord};

/// Stable schema of the raw results file.
pub const CSV_HEADER: &str =
    "scenario,seed,algorithm,pa_mode,system,M,K,L,zeta,p_total_dbm,sse_bits_per_hz,status,iters";

#[derive(Debug, Clone)]
pub struct Row {
    pub scenario: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub pa_mode: PaMode,
    pub system: SystemKind,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub zeta: f64,
    pub p_total_dbm: f64,
    pub sse: Option<f64>,
    pub status: String,
    pub iters: usize,
}

impl Row {
    pub fn to_csv(&self) -> String {
        let sse = match self.sse {
            Some(v) => format!("{v:.12}"),
            None => "nan".into(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.seed,
            self.algorithm.name(),
            self.pa_mode.name(),
            self.system.name(),
            self.m,
            self.k,
            self.l,
            self.zeta,
            self.p_total_dbm,
            sse,
            self.status,
            self.iters
        )
    }
}

/// Evaluate one (sweep point, topology) cell into a row plus the per-user
/// record. Failures become rows with an error status; the sweep continues.
fn evaluate_cell(cfg: &ScenarioConfig, point: &SweepPoint, topo_idx: usize) -> (Row, Option<SeRecord>) {
    let seed = seeds::derive(cfg.master_seed, point.index as u64, topo_idx as u64);
    let mut row = Row {
        scenario: point.index,
        seed,
        algorithm: point.algorithm,
        pa_mode: cfg.pa_mode,
        system: point.system,
        m: point.num_aps,
        k: point.num_antennas,
        l: point.num_clusters,
        zeta: point.zeta,
        p_total_dbm: point.p_total_dbm,
        sse: None,
        status: "ok".into(),
        iters: 0,
    };
    match evaluate_inner(cfg, point, seed) {
        Ok((sse, per_user, iters)) => {
            row.sse = Some(sse);
            row.iters = iters;
            let record = SeRecord {
                scenario: format!("{}:{}", cfg.name, point.index),
                seed,
                algorithm: point.algorithm.name().into(),
                p_max_dbm: point.p_total_dbm,
                zeta: point.zeta,
                k: point.num_antennas,
                m: point.num_aps,
                sse,
                per_user_se: serde_json::to_string(&per_user).unwrap_or_default(),
            };
            (row, Some(record))
        }
        Err(e) => {
            row.status = format!("error: {e}").replace([',', '\n'], ";");
            (row, None)
        }
    }
}

fn evaluate_inner(
    cfg: &ScenarioConfig,
    point: &SweepPoint,
    seed: u64,
) -> Result<(f64, Vec<f64>, usize)> {
    match point.system {
        SystemKind::Cf => {
            let sys = cfg.system_config(point)?;
            let topo = generate_topology(&sys, seed);
            let beta = large_scale_fading(&topo, &sys, seed)?;
            let grouped = clustering::cluster(point.algorithm, &beta, sys.num_clusters, seed)?;
            let (gamma0, _) = estimation_stats(&beta, &grouped, &sys)?;
            let ordered = clustering::order_within_cluster(&gamma0, &grouped)?;
            let (gamma, _) = estimation_stats(&beta, &ordered, &sys)?;
            let (pa, iters) = match cfg.pa_mode {
                PaMode::Fixed => (
                    sse::fixed_pa(&gamma, &ordered, &sys, cfg.fractional_alpha)?,
                    0,
                ),
                PaMode::Optimized => {
                    let data = IaData::CellFree {
                        gamma: &gamma,
                        beta: &beta,
                    };
                    let opts = IaOptions {
                        epsilon: cfg.ia_epsilon,
                        max_outer: cfg.ia_max_outer,
                        alpha: cfg.fractional_alpha,
                        ..IaOptions::default()
                    };
                    let (pa, hist) = ia_maximize(&sys, &data, &ordered, &opts)?;
                    (pa, hist.iterations)
                }
            };
            let rho = pa.as_cell_free()?;
            let sse_total = sse::sum_se_cf(rho, &gamma, &beta, &ordered, &sys)?;
            let per_user: Result<Vec<f64>> = (0..sys.num_ues)
                .map(|ue| sse::user_se_cf(ue, rho, &gamma, &beta, &ordered, &sys))
                .collect();
            Ok((sse_total, per_user?, iters))
        }
        SystemKind::Co => {
            let sys = cfg.collocated_config(point)?;
            // Same UE drop as the cell-free run; the single site sits at the
            // disc center.
            let cf_sys = cfg.system_config(point)?;
            let cf_topo = generate_topology(&cf_sys, seed);
            let topo = Topology {
                ap_positions: vec![[0.0, 0.0]],
                ue_positions: cf_topo.ue_positions,
                seed,
            };
            let beta_mat = large_scale_fading(&topo, &sys, seed)?;
            let grouped =
                clustering::cluster(point.algorithm, &beta_mat, sys.num_clusters, seed)?;
            let (gamma0, _) = estimation_stats(&beta_mat, &grouped, &sys)?;
            let ordered = clustering::order_within_cluster(&gamma0, &grouped)?;
            let beta: Vec<f64> = beta_mat.as_slice().to_vec();
            let gamma = sse::gamma_co(&beta, &ordered, &sys)?;
            let total_budget: f64 = sys.dl_power_budget.iter().sum();
            let (pa, iters) = match cfg.pa_mode {
                PaMode::Fixed => (
                    sse::fixed_pa_co(&gamma, &ordered, total_budget, cfg.fractional_alpha)?,
                    0,
                ),
                PaMode::Optimized => {
                    let data = IaData::Collocated {
                        gamma: &gamma,
                        beta: &beta,
                    };
                    let opts = IaOptions {
                        epsilon: cfg.ia_epsilon,
                        max_outer: cfg.ia_max_outer,
                        alpha: cfg.fractional_alpha,
                        ..IaOptions::default()
                    };
                    let (pa, hist) = ia_maximize(&sys, &data, &ordered, &opts)?;
                    (pa, hist.iterations)
                }
            };
            let rho = pa.as_collocated()?;
            let sse_total = sse::sum_se_co(rho, &gamma, &beta, &ordered, &sys)?;
            let per_user: Result<Vec<f64>> = (0..sys.num_ues)
                .map(|ue| sse::user_se_co(ue, rho, &gamma, &beta, &ordered, &sys))
                .collect();
            Ok((sse_total, per_user?, iters))
        }
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub rows: usize,
    pub failures: usize,
}

/// Run the full sweep and write `results.csv`, `per_user.csv`, and
/// `manifest.json` into `out_dir`. Cells fan out over a thread pool; rows
/// are merged in (sweep point, topology) order regardless of completion
/// order, so output bytes are schedule-independent.
pub fn run_sweep(cfg: &ScenarioConfig, out_dir: &Path, threads: Option<usize>) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir)?;
    let points = cfg.sweep_points();
    let cells: Vec<(usize, usize)> = points
        .iter()
        .flat_map(|p| (0..cfg.num_topologies).map(move |t| (p.index, t)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let results: Vec<(Row, Option<SeRecord>, f64)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(pi, ti)| {
                let t0 = Instant::now();
                let (row, rec) = evaluate_cell(cfg, &points[pi], ti);
                (row, rec, t0.elapsed().as_secs_f64())
            })
            .collect()
    });
    let _total = started.elapsed();

    let mut failures = 0usize;
    let mut results_csv = String::from(CSV_HEADER);
    results_csv.push('\n');
    let mut per_user_csv = String::from(SeRecord::csv_header());
    per_user_csv.push('\n');
    let mut timings = vec![0.0f64; points.len()];
    for (row, rec, dt) in &results {
        if row.status != "ok" {
            failures += 1;
        }
        results_csv.push_str(&row.to_csv());
        results_csv.push('\n');
        if let Some(rec) = rec {
            per_user_csv.push_str(&rec.to_csv_row());
            per_user_csv.push('\n');
        }
        timings[row.scenario] += dt;
    }
    std::fs::write(out_dir.join("results.csv"), &results_csv)?;
    std::fs::write(out_dir.join("per_user.csv"), &per_user_csv)?;

    let manifest = RunManifest {
        resolved_config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: points
            .iter()
            .map(|p| {
                (0..cfg.num_topologies)
                    .map(|t| seeds::derive(cfg.master_seed, p.index as u64, t as u64))
                    .collect()
            })
            .collect(),
        timings_s: timings,
    };
    let mut f = std::fs::File::create(out_dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;

    Ok(RunSummary {
        rows: results.len(),
        failures,
    })
}

// ---------------------------------------------------------------------------
// Reduction
// ---------------------------------------------------------------------------

/// Group raw rows and emit mean plus normal-approximation 95% interval.
pub fn reduce_results(input: &Path, output: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(input).map_err(|e| Error::Parse {
        path: input.display().to_string(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: input.display().to_string(),
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                path: input.display().to_string(),
                message: format!("missing column {name}"),
            })
    };
    let (c_alg, c_pa, c_sys, c_m, c_k, c_l, c_zeta, c_p, c_sse, c_status) = (
        col("algorithm")?,
        col("pa_mode")?,
        col("system")?,
        col("M")?,
        col("K")?,
        col("L")?,
        col("zeta")?,
        col("p_total_dbm")?,
        col("sse_bits_per_hz")?,
        col("status")?,
    );
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String, String, String, String, String, String, String), Vec<f64>> =
        BTreeMap::new();
    let mut any = false;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: input.display().to_string(),
            message: e.to_string(),
        })?;
        any = true;
        if &record[c_status] != "ok" {
            continue;
        }
        let sse: f64 = record[c_sse].parse().map_err(|_| Error::Parse {
            path: input.display().to_string(),
            message: format!("bad sse value {}", &record[c_sse]),
        })?;
        let key = (
            record[c_alg].to_string(),
            record[c_pa].to_string(),
            record[c_sys].to_string(),
            record[c_m].to_string(),
            record[c_k].to_string(),
            record[c_l].to_string(),
            record[c_zeta].to_string(),
            record[c_p].to_string(),
        );
        groups.entry(key).or_default().push(sse);
    }
    if !any {
        return Err(Error::InvalidInput("no rows to reduce".into()));
    }
    let mut out =
        String::from("algorithm,pa_mode,system,M,K,L,zeta,p_total_dbm,n,mean_sse,ci95_half\n");
    for ((alg, pa, sys, m, k, l, zeta, p), values) in &groups {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ci = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        out.push_str(&format!(
            "{alg},{pa},{sys},{m},{k},{l},{zeta},{p},{},{mean:.12},{ci:.12}\n",
            values.len()
        ));
    }
    std::fs::write(output, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Closed-form verification entry point
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct VerifyOutcome {
    pub worst_term_error: f64,
    pub worst_se_error: f64,
    pub resamples: usize,
    pub passed: bool,
}

/// Monte Carlo check of the closed forms on a few topologies of the first
/// sweep point.
pub fn verify_config(cfg: &ScenarioConfig) -> Result<VerifyOutcome> {
    let points = cfg.sweep_points();
    let point = &points[0];
    let sys = cfg.system_config(point)?;
    let mut worst_term: f64 = 0.0;
    let mut worst_se: f64 = 0.0;
    let mut resamples = 0;
    for instance in 0..cfg.mc.instances {
        let seed = seeds::derive(cfg.master_seed, point.index as u64, instance as u64);
        let topo = generate_topology(&sys, seed);
        let beta = large_scale_fading(&topo, &sys, seed)?;
        let grouped = clustering::cluster(point.algorithm, &beta, sys.num_clusters, seed)?;
        let (gamma0, _) = estimation_stats(&beta, &grouped, &sys)?;
        let ordered = clustering::order_within_cluster(&gamma0, &grouped)?;
        let (gamma, _) = estimation_stats(&beta, &ordered, &sys)?;
        let pa = sse::fixed_pa(&gamma, &ordered, &sys, cfg.fractional_alpha)?;
        let mc = McOracleConfig {
            num_realizations: cfg.mc.num_realizations,
            seed,
            tolerance: cfg.mc.tolerance,
        };
        let report = mc_verify(&sys, &beta, &ordered, &pa, &mc)?;
        worst_term = worst_term.max(report.worst_term_error());
        worst_se = worst_se.max(report.worst_se_error());
        resamples += report.resamples;
        eprintln!(
            "instance {instance}: worst term error {:.4}, worst SE error {:.4}, resamples {}",
            report.worst_term_error(),
            report.worst_se_error(),
            report.resamples
        );
    }
    Ok(VerifyOutcome {
        worst_term_error: worst_term,
        worst_se_error: worst_se,
        resamples,
        passed: worst_term <= cfg.mc.tolerance && worst_se <= cfg.mc.tolerance,
    })
}

/// Convenience used by tests: fixed-PA sum SE of one cell-free instance.
pub fn quick_cf_sse(cfg: &ScenarioConfig, algorithm: Algorithm, seed: u64) -> Result<f64> {
    let points = cfg.sweep_points();
    let mut point = points[0].clone();
    point.algorithm = algorithm;
    let sys = cfg.system_config(&point)?;
    let topo = generate_topology(&sys, seed);
    let beta = large_scale_fading(&topo, &sys, seed)?;
    let grouped = clustering::cluster(algorithm, &beta, sys.num_clusters, seed)?;
    let (gamma0, _) = estimation_stats(&beta, &grouped, &sys)?;
    let ordered = clustering::order_within_cluster(&gamma0, &grouped)?;
    let (gamma, _) = estimation_stats(&beta, &ordered, &sys)?;
    let pa = sse::fixed_pa(&gamma, &ordered, &sys, cfg.fractional_alpha)?;
    sse::sum_se_cf(pa.as_cell_free()?, &gamma, &beta, &ordered, &sys)
}

/// Shared by tests: build a ready-to-evaluate cell-free instance.
pub struct CfInstance {
    pub sys: crate::model::SystemConfig,
    pub beta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub clustering: clustering::Clustering,
}

pub fn build_cf_instance(
    cfg: &ScenarioConfig,
    algorithm: Algorithm,
    seed: u64,
) -> Result<CfInstance> {
    let points = cfg.sweep_points();
    let mut point = points[0].clone();
    point.algorithm = algorithm;
    let sys = cfg.system_config(&point)?;
    let topo = generate_topology(&sys, seed);
    let beta = large_scale_fading(&topo, &sys, seed)?;
    let grouped = clustering::cluster(algorithm, &beta, sys.num_clusters, seed)?;
    let (gamma0, _) = estimation_stats(&beta, &grouped, &sys)?;
    let ordered = clustering::order_within_cluster(&gamma0, &grouped)?;
    let (gamma, _) = estimation_stats(&beta, &ordered, &sys)?;
    Ok(CfInstance {
        sys,
        beta,
        gamma,
        clustering: ordered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ScenarioConfig {
        let json = r#"{"num_aps":4,"num_ues":4,"num_antennas":6,"num_clusters":2,
                       "num_topologies":2,"p_total_dbm":[30],"systems":["cf","co"],
                       "algorithms":["improved"]}"#;
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), json).unwrap();
        crate::scenario::parse_config(f.path()).unwrap()
    }

    #[test]
    fn sweep_writes_expected_row_count_and_is_deterministic() {
        let cfg = small_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = run_sweep(&cfg, d1.path(), Some(2)).unwrap();
        let s2 = run_sweep(&cfg, d2.path(), Some(1)).unwrap();
        assert_eq!(s1.rows, 2 * 2); // 2 sweep points (cf, co) x 2 topologies
        assert_eq!(s1.failures, 0);
        assert_eq!(s2.failures, 0);
        let c1 = std::fs::read(d1.path().join("results.csv")).unwrap();
        let c2 = std::fs::read(d2.path().join("results.csv")).unwrap();
        assert_eq!(c1, c2, "thread count must not change output bytes");
        let text = String::from_utf8(c1).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        // Rerunning from the manifest reproduces the file too.
        let cfg2 = crate::scenario::parse_config(&d1.path().join("manifest.json")).unwrap();
        let d3 = tempfile::tempdir().unwrap();
        run_sweep(&cfg2, d3.path(), None).unwrap();
        let c3 = std::fs::read(d3.path().join("results.csv")).unwrap();
        assert_eq!(c2, c3);
    }

    #[test]
    fn reducer_means_and_intervals() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.csv");
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        // Two symmetric values a +/- d: mean a, and a single-row group.
        text.push_str("0,1,improved,fixed,cf,4,6,2,0.05,30,10.000000000000,ok,0\n");
        text.push_str("0,2,improved,fixed,cf,4,6,2,0.05,30,14.000000000000,ok,0\n");
        text.push_str("1,3,kmeans,fixed,cf,4,6,2,0.05,30,7.000000000000,ok,0\n");
        text.push_str("1,4,kmeans,fixed,cf,4,6,2,0.05,30,nan,error: x,0\n");
        std::fs::write(&raw, text).unwrap();
        let out = dir.path().join("summary.csv");
        reduce_results(&raw, &out).unwrap();
        let summary = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("improved,fixed,cf,4,6,2,0.05,30,2,12.0"));
        assert!(lines[2].starts_with("kmeans,fixed,cf,4,6,2,0.05,30,1,7.0"));
        assert!(lines[2].ends_with(",0.000000000000"));
    }

    #[test]
    fn reducer_rejects_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.csv");
        std::fs::write(&raw, format!("{CSV_HEADER}\n")).unwrap();
        assert!(reduce_results(&raw, &dir.path().join("out.csv")).is_err());
    }

    #[test]
    fn ci_shrinks_with_sample_size() {
        // Synthetic: same variance, n = 25 vs n = 100 -> CI ratio ~ 2.
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.csv");
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        let mut rng = crate::seeds::stream(1, 2);
        use rand::Rng;
        for i in 0..25 {
            let v: f64 = 10.0 + rng.random_range(-1.0..1.0);
            text.push_str(&format!("0,{i},improved,fixed,cf,1,1,1,0,30,{v},ok,0\n"));
        }
        for i in 0..100 {
            let v: f64 = 10.0 + rng.random_range(-1.0..1.0);
            text.push_str(&format!("1,{i},kmeans,fixed,cf,1,1,1,0,30,{v},ok,0\n"));
        }
        std::fs::write(&raw, text).unwrap();
        let out = dir.path().join("summary.csv");
        reduce_results(&raw, &out).unwrap();
        let summary = std::fs::read_to_string(&out).unwrap();
        let mut ci25 = 0.0;
        let mut ci100 = 0.0;
        for line in summary.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            let n: usize = parts[8].parse().unwrap();
            let ci: f64 = parts[10].parse().unwrap();
            if n == 25 {
                ci25 = ci;
            } else {
                ci100 = ci;
            }
        }
        let ratio = ci25 / ci100;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }
}
