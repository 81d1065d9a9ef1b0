//! Cross-seed aggregation of finished experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use super::record::{read_csv, SCHEMA_VERSION};
use super::run::{Manifest, RunSummary};
use crate::agents::Mode;
use crate::error::{Error, Result};

/// Equal env-step bins per run before averaging across seeds.
pub const BINS: usize = 100;

/// Index of a report directory; distinct from the experiment manifest name.
pub const REPORT_FILE: &str = "report.json";

/// Mean of the points falling in each of `bins` equal step intervals over
/// `[0, total]`; empty bins repeat the previous value, leading empty bins
/// stay `None`.
pub fn bin_curve(points: &[(u64, f64)], total: u64, bins: usize) -> Vec<Option<f64>> {
    let total = total.max(1);
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for &(step, v) in points {
        let b = ((step as u128 * bins as u128) / total as u128).min(bins as u128 - 1) as usize;
        sums[b] += v;
        counts[b] += 1;
    }
    let mut out = Vec::with_capacity(bins);
    let mut last = None;
    for b in 0..bins {
        if counts[b] > 0 {
            last = Some(sums[b] / counts[b] as f64);
        }
        out.push(last);
    }
    out
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One-sided sign-test p-value: probability of at least `wins` successes
/// in `n` fair coin flips.
pub fn sign_test_p(wins: u64, n: u64) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    1.0 - b.cdf(wins - 1)
}

/// `(a, b)` metric pairs for runs of two modes sharing a seed.
pub fn paired_by_seed(runs: &[RunSummary], a: Mode, b: Mode, metric: impl Fn(&RunSummary) -> Option<f64>) -> Vec<(u64, f64, f64)> {
    let mut out = Vec::new();
    for ra in runs.iter().filter(|r| r.mode == a) {
        if let Some(rb) = runs.iter().find(|r| r.mode == b && r.seed == ra.seed) {
            if let (Some(x), Some(y)) = (metric(ra), metric(rb)) {
                out.push((ra.seed, x, y));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub mode: Mode,
    pub bin: usize,
    pub env_step: u64,
    pub runs: usize,
    pub train_mean: Option<f64>,
    pub train_std: Option<f64>,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub panel: String,
    pub mode: Mode,
    pub runs: usize,
    pub failed: usize,
    pub final_eval_mean: Option<f64>,
    pub final_eval_std: Option<f64>,
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MseRow {
    pub env: String,
    pub mode: Mode,
    pub runs: usize,
    pub refit: bool,
    pub mean_raw: f64,
    pub std_raw: f64,
    pub mean_normalized: f64,
    pub std_normalized: f64,
}

/// MSE mean and spread per (env, mode) over the runs that report one.
pub fn mse_table(manifests: &[Manifest]) -> Vec<MseRow> {
    let mut groups: BTreeMap<(String, Mode), Vec<(f64, f64, bool)>> = BTreeMap::new();
    for m in manifests {
        for r in &m.runs {
            if let Some(h) = r.held_out_mse {
                groups
                    .entry((m.config.env.name.to_string(), r.mode))
                    .or_default()
                    .push((h.raw, h.normalized, h.refit));
            }
        }
    }
    groups
        .into_iter()
        .map(|((env, mode), v)| {
            let (mean_raw, std_raw) = mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>());
            let (mean_normalized, std_normalized) = mean_std(&v.iter().map(|x| x.1).collect::<Vec<_>>());
            MseRow {
                env,
                mode,
                runs: v.len(),
                refit: v.iter().any(|x| x.2),
                mean_raw,
                std_raw,
                mean_normalized,
                std_normalized,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportManifest {
    pub schema_version: u32,
    pub sources: Vec<ReportSource>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportSource {
    pub dir: String,
    pub label: String,
    pub panel: String,
    pub config: serde_json::Value,
}

/// Experiment directories under `input`: itself if it holds a manifest,
/// otherwise its immediate subdirectories that do, in name order.
pub fn discover(input: &Path) -> Result<Vec<PathBuf>> {
    if input.join(Manifest::FILE).is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(Manifest::FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Report(format!("no experiment manifests under {}", input.display())));
    }
    Ok(dirs)
}

/// `{env}_{algo}`; experiments with a two-phase schedule form their own
/// panel per pretraining fraction.
pub fn panel_name(m: &Manifest) -> String {
    let base = format!("{}_{}", m.config.env.name, m.config.train.algo);
    if m.config.run_modes().iter().any(|&mode| matches!(mode, Mode::ReprFirst | Mode::PolicyFirst)) {
        format!("{base}_pretrain{}", m.config.train.pretrain_frac)
    } else {
        base
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Report(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Report(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn aggregate(curves: &[Vec<Option<f64>>], bin: usize) -> (usize, Option<f64>, Option<f64>) {
    let xs: Vec<f64> = curves.iter().filter_map(|c| c[bin]).collect();
    if xs.is_empty() {
        return (0, None, None);
    }
    let (m, s) = mean_std(&xs);
    (xs.len(), Some(m), Some(s))
}

/// Aggregates every experiment under `input` into `out`: one curve file per
/// (env, algorithm) panel, a summary, the MSE table and a manifest.
pub fn report(input: &Path, out: &Path) -> Result<ReportManifest> {
    let dirs = discover(input)?;
    let manifests = dirs.iter().map(|d| Manifest::load(d)).collect::<Result<Vec<_>>>()?;
    let mut panels: BTreeMap<String, Vec<(usize, &Manifest)>> = BTreeMap::new();
    for (i, m) in manifests.iter().enumerate() {
        panels.entry(panel_name(m)).or_default().push((i, m));
    }
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for (panel, members) in &panels {
        let key = members[0].1.config.comparison_key();
        if let Some((i, _)) = members.iter().find(|(_, m)| m.config.comparison_key() != key) {
            return Err(Error::Report(format!(
                "refusing to pool {} with {}: configurations differ",
                dirs[*i].display(),
                dirs[members[0].0].display()
            )));
        }
        let total = members[0].1.config.train.env_steps as u64;
        let mut by_mode: BTreeMap<Mode, (Vec<Vec<Option<f64>>>, Vec<Vec<Option<f64>>>, Vec<&RunSummary>)> = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, m) in members {
            for r in &m.runs {
                if !seen.insert(r.run_id.clone()) {
                    return Err(Error::Report(format!("run {} appears twice in panel {panel}", r.run_id)));
                }
                let rows = read_csv(&dirs[*i].join(&r.csv))?;
                let train: Vec<(u64, f64)> = rows.iter().filter_map(|x| x.episode_return.map(|v| (x.env_step, v))).collect();
                let eval: Vec<(u64, f64)> = rows.iter().filter_map(|x| x.eval_return_mean.map(|v| (x.env_step, v))).collect();
                let entry = by_mode.entry(r.mode).or_default();
                entry.0.push(bin_curve(&train, total, BINS));
                entry.1.push(bin_curve(&eval, total, BINS));
                entry.2.push(r);
            }
        }
        let mut curve_rows = Vec::new();
        for (mode, (train, eval, runs)) in &by_mode {
            for bin in 0..BINS {
                let (n_train, train_mean, train_std) = aggregate(train, bin);
                let (n_eval, eval_mean, eval_std) = aggregate(eval, bin);
                curve_rows.push(CurveRow {
                    mode: *mode,
                    bin,
                    env_step: (bin as u64 + 1) * total / BINS as u64,
                    runs: n_train.max(n_eval),
                    train_mean,
                    train_std,
                    eval_mean,
                    eval_std,
                });
            }
            let stat = |f: &dyn Fn(&RunSummary) -> Option<f64>| {
                let xs: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
                if xs.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_std(&xs);
                    (Some(m), Some(s))
                }
            };
            let (final_eval_mean, final_eval_std) = stat(&|r| r.final_eval_return);
            let (auc_mean, auc_std) = stat(&|r| r.eval_auc);
            summary.push(SummaryRow {
                panel: panel.clone(),
                mode: *mode,
                runs: runs.len(),
                failed: runs.iter().filter(|r| r.error.is_some()).count(),
                final_eval_mean,
                final_eval_std,
                auc_mean,
                auc_std,
            });
        }
        let name = format!("curves_{panel}.csv");
        write_rows(&out.join(&name), &curve_rows)?;
        files.push(name);
    }
    write_rows(&out.join("summary.csv"), &summary)?;
    files.push("summary.csv".into());
    write_rows(&out.join("mse_table.csv"), &mse_table(&manifests))?;
    files.push("mse_table.csv".into());
    let manifest = ReportManifest {
        schema_version: SCHEMA_VERSION,
        sources: dirs
            .iter()
            .zip(&manifests)
            .map(|(d, m)| ReportSource {
                dir: d.display().to_string(),
                label: m.label.clone(),
                panel: panel_name(m),
                config: serde_json::to_value(&m.config).expect("config serialises"),
            })
            .collect(),
        files: files.clone(),
    };
    std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
