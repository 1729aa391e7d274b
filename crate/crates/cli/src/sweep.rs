//! Named multi-seed ablation presets.

use std::path::Path;
use std::thread;

use clap::ValueEnum;
use perfusion_core::reward::{MetricSummary, Wiring};

use crate::commands::append_csv;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{RunDir, RunManifest};
use crate::pipeline::{self, PF_VARIANTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Plug-in wiring ablation of the reward model on style-only labels.
    PrmAblation,
    /// Group objective / personalization ablation of the denoiser.
    PfAblation,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::PrmAblation => "prm-ablation",
            Preset::PfAblation => "pf-ablation",
        }
    }

    pub fn default_seeds(self) -> usize {
        match self {
            Preset::PrmAblation => 3,
            Preset::PfAblation => 5,
        }
    }

    /// The preset's adjustments on top of the resolved config.
    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        match self {
            Preset::PrmAblation => ExperimentConfig {
                style_only: true,
                ..cfg.clone()
            },
            Preset::PfAblation => cfg.clone(),
        }
    }
}

/// Configs of `n` seeds counted up from the base seed.
pub fn seed_configs(cfg: &ExperimentConfig, n: usize) -> Vec<ExperimentConfig> {
    (0..n as u64)
        .map(|i| ExperimentConfig {
            seed: cfg.seed + i,
            ..cfg.clone()
        })
        .collect()
}

/// Maps `f` over `items` with up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

pub const PRM_SUMMARY_HEADER: &str = "seed,variant,map,gauc,n_groups,n_skipped";
pub const PF_SUMMARY_HEADER: &str = "seed,variant,n,mean_oracle";

fn metric_row(seed: u64, variant: &str, m: &MetricSummary) -> String {
    format!("{seed},{variant},{},{},{},{}", m.map, m.gauc, m.n_groups, m.n_skipped)
}

/// Runs `preset` over `seeds` seeds (its default when `None`). Each seed gets
/// a `seed-<n>` subdirectory with its own config and manifest; the top
/// directory holds `summary.csv`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    preset: Preset,
    seeds: Option<usize>,
    jobs: usize,
    out: &Path,
) -> CliResult<RunManifest> {
    let n = seeds.unwrap_or(preset.default_seeds());
    if n == 0 || jobs == 0 {
        return Err(CliError::Config("--seeds and --jobs must be positive".into()));
    }
    let base = preset.apply(cfg);
    let mut run = RunDir::create(out, &format!("sweep-{}", preset.name()), &base)?;
    let configs = seed_configs(&base, n);
    let rows = par_map(&configs, jobs, |c| -> CliResult<Vec<String>> {
        let dir = out.join(format!("seed-{}", c.seed));
        let mut seed_run = RunDir::create(&dir, preset.name(), c)?;
        let rows = match preset {
            Preset::PrmAblation => {
                let (res, _) = pipeline::run_rm_ablation(c, &Wiring::ALL)?;
                let mut rows = vec![metric_row(c.seed, "backbone", &res.baseline)];
                rows.extend(res.wirings.iter().map(|(w, m)| metric_row(c.seed, w.name(), m)));
                rows
            }
            Preset::PfAblation => {
                let (res, ..) = pipeline::run_pf_ablation(c)?;
                PF_VARIANTS
                    .iter()
                    .map(|v| {
                        let n = res.oracle.iter().find(|(k, _)| k == v).map_or(0, |(_, s)| s.len());
                        format!("{},{v},{n},{}", c.seed, res.mean_of(v))
                    })
                    .collect()
            }
        };
        let header = match preset {
            Preset::PrmAblation => PRM_SUMMARY_HEADER,
            Preset::PfAblation => PF_SUMMARY_HEADER,
        };
        append_csv(&seed_run.file("results.csv"), header, &rows)?;
        seed_run.produced("results.csv");
        seed_run.finish()?;
        Ok(rows)
    });
    let mut all = Vec::new();
    for (c, r) in configs.iter().zip(rows) {
        all.extend(r?);
        run.produced(&format!("seed-{}/results.csv", c.seed));
    }
    let header = match preset {
        Preset::PrmAblation => PRM_SUMMARY_HEADER,
        Preset::PfAblation => PF_SUMMARY_HEADER,
    };
    let summary = run.file("summary.csv");
    if summary.exists() {
        std::fs::remove_file(&summary).map_err(|e| CliError::io(&summary, e))?;
    }
    append_csv(&summary, header, &all)?;
    run.produced("summary.csv");
    run.finish()
}
