//! depshaper: shape the spatial density of simulated micro-particles by
//! optimizing electrode potentials.
//!
//! Exit codes: 0 success, 2 input error, 3 capacitance fit failure,
//! 4 solve finished with the dynamics constraint unsatisfied.

mod scenario;

use clap::{Parser, Subcommand};
use depshaper_core::capmodel::{self, CapError, CapacitanceSamples};
use depshaper_core::field::force_discrete;
use depshaper_core::kde::{kde_evaluate, DensityGrid};
use depshaper_core::solver::{
    rollout, solve_collocation, solve_continuous, write_trajectory_csv, CollocationConfig,
    CollocationVars, ContinuousConfig, PotentialMap, SolveStatus, TrajectoryNets,
};
use scenario::{Scenario, ScenarioMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "depshaper", version, about = "particle density shaping via learned electrode potentials")]
struct Cli {
    /// Worker threads (falls back to DEPSHAPER_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic capacitance samples as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        #[arg(long, default_value_t = 0.5)]
        c: f64,
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
        /// Samples span [-xi_max, xi_max].
        #[arg(long, default_value_t = 3.0)]
        xi_max: f64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_rel: f64,
    },
    /// Fit the capacitance model to a samples CSV.
    Fit {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        terms: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the density-shaping solver on a scenario.
    Solve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force deterministic output (byte-reproducible reports).
        #[arg(long)]
        deterministic: bool,
    },
    /// Integrate the learned control forward and compare endpoints.
    Rollout {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Checkpoint {
    Continuous {
        trajectory: TrajectoryNets,
        potential: PotentialMap,
    },
    Collocation {
        vars: CollocationVars,
        times: Vec<f64>,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    scenario_sha256: String,
    seed: u64,
    deterministic: bool,
    mode: &'a str,
}

#[derive(Serialize)]
struct RolloutSummary {
    median_endpoint_gap: f64,
    max_endpoint_gap: f64,
    bandwidth_h1: f64,
    median_gap_over_bandwidth: f64,
    clamped_particles: usize,
    per_particle_gap: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("DEPSHAPER_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let code = match cli.cmd {
        Cmd::Synth { out, seed, a, c, delta, xi_max, count, noise_rel } => {
            cmd_synth(&out, seed, a, c, delta, xi_max, count, noise_rel)
        }
        Cmd::Fit { samples, terms, delta, out } => cmd_fit(&samples, terms, delta, &out),
        Cmd::Solve { scenario, out, seed, deterministic } => {
            cmd_solve(&scenario, &out, seed, deterministic)
        }
        Cmd::Rollout { scenario, checkpoint, out } => cmd_rollout(&scenario, &checkpoint, &out),
    };
    ExitCode::from(code)
}

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    code
}

fn ensure_dir(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    seed: u64,
    a: f64,
    c: f64,
    delta: f64,
    xi_max: f64,
    count: usize,
    noise_rel: f64,
) -> u8 {
    if count < 2 || xi_max <= 0.0 || a <= 0.0 || c <= 0.0 || delta <= 0.0 {
        return fail(2, "synth needs count >= 2 and positive a, c, delta, xi_max");
    }
    let grid: Vec<f64> = (0..count)
        .map(|i| -xi_max + 2.0 * xi_max * i as f64 / (count - 1) as f64)
        .collect();
    let samples = capmodel::synth_samples(a, c, delta, &grid, noise_rel, seed);
    if let Err(e) = ensure_dir(out) {
        return fail(2, e);
    }
    let path = out.join("samples.csv");
    let mut buf = Vec::new();
    if let Err(e) = samples.write_csv(&mut buf).and_then(|_| fs::write(&path, buf)) {
        return fail(2, e);
    }
    println!("wrote {} samples to {}", samples.len(), path.display());
    0
}

fn cmd_fit(samples_path: &Path, terms: usize, delta: f64, out: &Path) -> u8 {
    if terms == 0 {
        return fail(2, "--terms must be positive");
    }
    if delta <= 0.0 {
        return fail(2, "--delta must be positive");
    }
    let file = match fs::File::open(samples_path) {
        Ok(f) => f,
        Err(e) => return fail(2, format!("{}: {e}", samples_path.display())),
    };
    let samples = match CapacitanceSamples::read_csv(std::io::BufReader::new(file)) {
        Ok(s) => s,
        Err(e) => return fail(2, e),
    };
    let model = match capmodel::fit(&samples, terms, delta) {
        Ok(m) => m,
        Err(e @ CapError::NonConvergence { .. }) => return fail(3, e),
        Err(e) => return fail(2, e),
    };
    let rms = capmodel::fit_rms(&model, &samples);
    if let Err(e) = ensure_dir(out) {
        return fail(2, e);
    }
    let path = out.join("model.json");
    if let Err(e) = fs::write(&path, model.to_json()) {
        return fail(2, e);
    }
    println!("fit rms {rms:e}, model written to {}", path.display());
    0
}

fn load_scenario(path: &Path, seed: Option<u64>, deterministic: bool) -> Result<(Scenario, String), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut sc = Scenario::from_json(&text)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    if deterministic {
        sc.deterministic = true;
    }
    let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
    Ok((sc, hash))
}

fn write_grid(dir: &Path, stem: &str, grid: &DensityGrid) -> std::io::Result<()> {
    let mut csv = Vec::new();
    grid.write_csv(&mut csv)?;
    fs::write(dir.join(format!("{stem}.csv")), csv)?;
    let mut pgm = Vec::new();
    grid.write_pgm(&mut pgm)?;
    fs::write(dir.join(format!("{stem}.pgm")), pgm)
}

fn cmd_solve(scenario_path: &Path, out: &Path, seed: Option<u64>, deterministic: bool) -> u8 {
    let (sc, hash) = match load_scenario(scenario_path, seed, deterministic) {
        Ok(v) => v,
        Err(e) => return fail(2, e),
    };
    let problem = match sc.build_problem() {
        Ok(p) => p,
        Err(e) => return fail(2, e),
    };
    if let Err(e) = ensure_dir(out) {
        return fail(2, e);
    }

    let (report, trajectories, checkpoint, snapshots) = match sc.mode {
        ScenarioMode::ContinuousMap => {
            let mut traj = TrajectoryNets::init(
                &problem.initial,
                problem.horizon,
                sc.networks.trajectory_hidden,
                sc.seed,
            );
            let mut map = PotentialMap::init(
                &problem.domain,
                problem.horizon,
                problem.v_max,
                sc.networks.potential_hidden,
                sc.seed ^ 0x706F74656E7469,
            );
            let cfg = ContinuousConfig {
                max_iters: sc.optimizer.max_iters,
                lr: sc.optimizer.lr,
                box_weight: sc.optimizer.box_weight,
                stop_fraction: sc.optimizer.stop_fraction,
                deterministic: sc.deterministic,
            };
            let report = match solve_continuous(&problem, &mut traj, &mut map, &cfg) {
                Ok(r) => r,
                Err(e) => return fail(2, e),
            };
            let rows: Vec<Vec<[f64; 2]>> = problem
                .times
                .iter()
                .map(|&t| (0..traj.len()).map(|i| traj.position(i, t)).collect())
                .collect();
            let snaps: Vec<(f64, DensityGrid)> = sc
                .snapshot_times_s
                .iter()
                .map(|&t| (t, map.grid_snapshot(problem.target.geom, t)))
                .collect();
            (
                report,
                rows,
                Checkpoint::Continuous { trajectory: traj, potential: map },
                snaps,
            )
        }
        ScenarioMode::DiscreteCollocation => {
            let cfg = CollocationConfig {
                max_iters: sc.optimizer.max_iters,
                lr: sc.optimizer.lr,
                volt_init_frac: sc.collocation.volt_init_frac,
                seed: sc.seed,
                stop_fraction: sc.optimizer.stop_fraction,
                deterministic: sc.deterministic,
            };
            let (report, vars) = match solve_collocation(&problem, &cfg) {
                Ok(v) => v,
                Err(e) => return fail(2, e),
            };
            let rows = vars.positions.clone();
            let times = problem.times.clone();
            (report, rows, Checkpoint::Collocation { vars, times }, Vec::new())
        }
    };

    let io = (|| -> std::io::Result<()> {
        fs::write(
            out.join("report.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
        let mut csv = Vec::new();
        write_trajectory_csv(&problem.times, &trajectories, &mut csv)?;
        fs::write(out.join("trajectory.csv"), csv)?;
        let initial_kde = kde_evaluate(&problem.initial, problem.bandwidth, problem.target.geom);
        write_grid(out, "kde_initial", &initial_kde)?;
        write_grid(out, "kde_final", &report.final_kde)?;
        write_grid(out, "target", &problem.target)?;
        for (t, grid) in &snapshots {
            write_grid(out, &format!("potential_t{t}"), grid)?;
        }
        fs::write(
            out.join("checkpoint.json"),
            serde_json::to_string_pretty(&checkpoint).expect("checkpoint serializes"),
        )?;
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION"),
            scenario_sha256: hash.clone(),
            seed: sc.seed,
            deterministic: sc.deterministic,
            mode: match sc.mode {
                ScenarioMode::ContinuousMap => "continuous_map",
                ScenarioMode::DiscreteCollocation => "discrete_collocation",
            },
        };
        fs::write(
            out.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    })();
    if let Err(e) = io {
        return fail(2, e);
    }

    println!(
        "solve finished: {} iterations, mse {:.3e} -> {:.3e} (reduction {:.1}%), residual {:.3e}",
        report.iterations,
        report.initial_mse,
        report.final_mse,
        100.0 * report.mse_reduction,
        report.final_residual_mean,
    );
    match report.status {
        SolveStatus::Converged => 0,
        SolveStatus::ResidualWarning => {
            eprintln!("warning: dynamics residual above tolerance");
            4
        }
    }
}

fn cmd_rollout(scenario_path: &Path, checkpoint_path: &Path, out: &Path) -> u8 {
    let (sc, _) = match load_scenario(scenario_path, None, false) {
        Ok(v) => v,
        Err(e) => return fail(2, e),
    };
    let problem = match sc.build_problem() {
        Ok(p) => p,
        Err(e) => return fail(2, e),
    };
    let text = match fs::read_to_string(checkpoint_path) {
        Ok(t) => t,
        Err(e) => return fail(2, format!("{}: {e}", checkpoint_path.display())),
    };
    let checkpoint: Checkpoint = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => return fail(2, format!("checkpoint: {e}")),
    };

    let rule = match problem.gh_rule() {
        Ok(r) => r,
        Err(e) => return fail(2, e),
    };
    let (result, predicted) = match &checkpoint {
        Checkpoint::Continuous { trajectory, potential } => {
            if trajectory.len() != problem.initial.len() {
                return fail(
                    2,
                    format!(
                        "checkpoint has {} trajectory nets for {} particles",
                        trajectory.len(),
                        problem.initial.len()
                    ),
                );
            }
            let force = potential.force_fn(&problem.consts, &rule);
            let r = rollout(
                &problem.times,
                sc.rollout_substeps,
                problem.consts.mu,
                &problem.domain,
                force,
                &problem.initial,
            );
            (r, trajectory.endpoints())
        }
        Checkpoint::Collocation { vars, times } => {
            if times.len() != problem.times.len() || vars.positions[0].len() != problem.initial.len()
            {
                return fail(2, "checkpoint shape does not match the scenario");
            }
            let volts = vars.volts.clone();
            let times_cl = times.clone();
            let array = problem.array.clone();
            let cap = problem.cap.clone();
            // piecewise-constant potentials from the left sample
            let force = move |x: [f64; 2], t: f64| {
                let k = match times_cl.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
                    Ok(k) => k,
                    Err(k) => k.saturating_sub(1),
                };
                force_discrete(x, &array, &volts[k.min(volts.len() - 1)], &cap)
            };
            let r = rollout(
                &problem.times,
                sc.rollout_substeps,
                problem.consts.mu,
                &problem.domain,
                force,
                &problem.initial,
            );
            let predicted = vars.positions.last().unwrap().clone();
            (r, predicted)
        }
    };

    let mut gaps: Vec<f64> = result
        .endpoints()
        .iter()
        .zip(&predicted)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .collect();
    let per_particle = gaps.clone();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = gaps[gaps.len() / 2];
    let max = *gaps.last().unwrap();
    let summary = RolloutSummary {
        median_endpoint_gap: median,
        max_endpoint_gap: max,
        bandwidth_h1: problem.bandwidth.h1,
        median_gap_over_bandwidth: median / problem.bandwidth.h1,
        clamped_particles: result.clamped.iter().filter(|&&c| c).count(),
        per_particle_gap: per_particle,
    };

    let io = (|| -> std::io::Result<()> {
        ensure_dir(out)?;
        let mut csv = Vec::new();
        write_trajectory_csv(&result.times, &result.positions, &mut csv)?;
        fs::write(out.join("rollout.csv"), csv)?;
        fs::write(
            out.join("endpoint_summary.json"),
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
        Ok(())
    })();
    if let Err(e) = io {
        return fail(2, e);
    }
    println!(
        "rollout done: median endpoint gap {:.3e} ({:.2} bandwidths), {} clamped",
        summary.median_endpoint_gap,
        summary.median_gap_over_bandwidth,
        summary.clamped_particles
    );
    0
}
