use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vstab_core::controllers::{ControllerKind, MarginSettings};
use vstab_core::harness::{self, ReportFormat, Scenario};
use vstab_core::helm::{self, Continuation};
use vstab_core::powerflow::{self, GeneratorMode, PowerFlowOptions};
use vstab_core::stochastic::{NoiseRealization, OuParams, SlowDrift, WienerParams};
use vstab_core::{covariance, dynamics, Error, Execution, Network, Result};

#[derive(Parser)]
#[command(name = "vstab", version, about = "Voltage stability under stochastic load")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Newton power flow at one loading factor.
    Powerflow {
        case: String,
        #[arg(long, default_value_t = 0.0)]
        scale: f64,
        #[command(flatten)]
        dir: Direction,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Holomorphic-embedding continuation up to the nose.
    Cpf {
        case: String,
        #[command(flatten)]
        dir: Direction,
        #[arg(long, default_value_t = helm::DEFAULT_TERMS)]
        terms: usize,
        /// Upper end of the sampled curve; defaults to 0.99 of the collapse loading.
        #[arg(long)]
        smax: Option<f64>,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also compare against Newton and print the error curve.
        #[arg(long)]
        validate: bool,
    },
    /// Generate or inspect noise files.
    Noise {
        #[command(subcommand)]
        action: NoiseAction,
    },
    /// Stationary voltage variance at one loading factor.
    Covariance {
        case: String,
        #[arg(long, default_value_t = 0.0)]
        scale: f64,
        /// OU rate and standard deviation, `RATE,STD`.
        #[arg(long, default_value = "1,0.01", value_parser = parse_ou)]
        ou: (f64, f64),
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collapse loading, margin loading and critical variances.
    Margin {
        case: String,
        #[command(flatten)]
        dir: Direction,
        #[arg(long, default_value_t = 0.99)]
        sp: f64,
        #[arg(long, default_value_t = 600.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-6)]
        diffusion: f64,
        #[arg(long, default_value = "1,0.01", value_parser = parse_ou)]
        ou: (f64, f64),
    },
    /// One controller on one seed.
    Simulate {
        scenario: String,
        #[arg(long)]
        controller: ControllerKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        over: Overrides,
        /// Directory for the trajectory and controller log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every configured controller on a seed set with shared noise.
    Compare {
        scenario: String,
        /// Use seeds 1..=k instead of the scenario's list.
        #[arg(long)]
        seeds: Option<u64>,
        #[command(flatten)]
        over: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export long-format series, trajectories and logs.
        #[arg(long)]
        full: bool,
    },
    /// Summarize an exported comparison.
    Report { dir: PathBuf },
}

#[derive(Subcommand)]
enum NoiseAction {
    Gen {
        case: String,
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long, default_value_t = 0.01)]
        std: f64,
        /// `fixed:S`, `ramp:RATE` or `wiener:D` (one Wiener step per second).
        #[arg(long, default_value = "fixed:0", value_parser = parse_drift)]
        drift: SlowDrift,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect { file: PathBuf },
}

#[derive(Args)]
struct Direction {
    /// `bus,k` file replacing the case's loading direction.
    #[arg(long)]
    kfile: Option<PathBuf>,
}

impl Direction {
    fn resolve(&self, net: &Network) -> Result<Vec<f64>> {
        match &self.kfile {
            Some(p) => net.direction_from_file(p),
            None => Ok(net.loading_direction()),
        }
    }
}

/// Flags that take precedence over the scenario file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
}

impl Overrides {
    fn apply(&self, sc: &mut Scenario) -> Result<()> {
        if let Some(h) = self.horizon {
            sc.horizon = h;
        }
        if let Some(dt) = self.dt {
            sc.integration.dt = dt;
        }
        sc.validate()
    }
}

fn parse_ou(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected RATE,STD")?;
    let rate = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let std = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((rate, std))
}

fn parse_drift(s: &str) -> std::result::Result<SlowDrift, String> {
    let (kind, v) = s.split_once(':').ok_or("expected KIND:VALUE")?;
    let v = v.parse::<f64>().map_err(|e| e.to_string())?;
    match kind {
        "fixed" => Ok(SlowDrift::Fixed { s: v }),
        "ramp" => Ok(SlowDrift::Ramp { rate: v }),
        "wiener" => Ok(SlowDrift::Wiener(WienerParams { d: v, step: 1.0 })),
        other => Err(format!("unknown drift `{other}`")),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Powerflow { case, scale, dir, out } => {
            let net = Network::resolve(&case)?;
            let k = dir.resolve(&net)?;
            let base = powerflow::solve_base(&net)?;
            let sol = if scale == 0.0 {
                base
            } else {
                powerflow::solve_newton(
                    &net,
                    &net.scaled_loads(scale, &k),
                    &base.voltages,
                    &GeneratorMode::Dispatch,
                    &PowerFlowOptions::default(),
                )?
            };
            let mut csv = String::from("bus,v,theta,p,q\n");
            for (b, (v, s)) in net.buses.iter().zip(sol.voltages.iter().zip(&sol.injections)) {
                let _ = writeln!(csv, "{},{},{},{},{}", b.id, v.norm(), v.arg(), s.re, s.im);
            }
            emit(&csv, out.as_deref())?;
            eprintln!("converged in {} iterations, max mismatch {:.3e}", sol.iterations, sol.max_mismatch);
        }
        Command::Cpf {
            case,
            dir,
            terms,
            smax,
            points,
            out,
            validate,
        } => {
            let net = Network::resolve(&case)?;
            let k = dir.resolve(&net)?;
            let base = powerflow::solve_base(&net)?;
            let cont = Continuation::run(&net, &base, &k, terms, exec)?;
            let s_c = cont.s_c();
            let top = smax.unwrap_or(0.99 * s_c);
            let n = points.max(2);
            let grid: Vec<f64> = (0..n).map(|i| top * i as f64 / (n - 1) as f64).collect();
            let mut csv = String::from("s,bus,v,theta\n");
            for &s in &grid {
                let v = cont.voltages(s)?;
                for (b, v) in net.buses.iter().zip(&v) {
                    let _ = writeln!(csv, "{s},{},{},{}", b.id, v.norm(), v.arg());
                }
            }
            emit(&csv, out.as_deref())?;
            println!("s_c = {s_c:.7} (nose bus {})", cont.critical.bus);
            if validate {
                let errs = helm::compare_with_newton(&net, &base, &k, &cont, &grid)?;
                println!("s,max_error");
                for e in errs {
                    match e.max_error {
                        Some(x) => println!("{},{x:e}", e.s),
                        None => println!("{},", e.s),
                    }
                }
            }
        }
        Command::Noise { action } => match action {
            NoiseAction::Gen {
                case,
                rate,
                std,
                drift,
                dt,
                steps,
                seed,
                out,
            } => {
                let net = Network::resolve(&case)?;
                let dae = dynamics::assemble_dae(&net, None)?;
                let ou = OuParams::uniform(dae.noise_buses(), rate, std);
                let noise = NoiseRealization::generate(&ou, &drift, dt, steps, seed)?;
                noise.write(&out)?;
                println!("wrote {} steps for {} buses to {}", steps, noise.buses.len(), out.display());
            }
            NoiseAction::Inspect { file } => {
                let noise = NoiseRealization::read(&file)?;
                println!("seed {} dt {} steps {} buses {:?}", noise.seed, noise.dt, noise.n_steps(), noise.buses);
                let (lo, hi) = noise
                    .slow
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
                println!("slow loading in [{lo}, {hi}]");
                println!("bus,mean,std");
                let n = noise.fast.len() as f64;
                for (j, b) in noise.buses.iter().enumerate() {
                    let mean = noise.fast.iter().map(|u| u[j]).sum::<f64>() / n;
                    let var = noise.fast.iter().map(|u| (u[j] - mean).powi(2)).sum::<f64>() / n;
                    println!("{b},{mean},{}", var.sqrt());
                }
            }
        },
        Command::Covariance { case, scale, ou, out } => {
            let net = Network::resolve(&case)?;
            let mut dae = dynamics::assemble_dae(&net, None)?;
            let params = OuParams::uniform(dae.noise_buses(), ou.0, ou.1);
            let res = covariance::predict(&mut dae, scale, &params)?;
            let mut csv = String::from("bus,variance,std\n");
            for (b, v) in net.buses.iter().zip(&res.voltage_variances) {
                let _ = writeln!(csv, "{},{v},{}", b.id, v.max(0.0).sqrt());
            }
            emit(&csv, out.as_deref())?;
        }
        Command::Margin {
            case,
            dir,
            sp,
            horizon,
            diffusion,
            ou,
        } => {
            let net = Network::resolve(&case)?;
            let k = dir.resolve(&net)?;
            let base = powerflow::solve_base(&net)?;
            let s_c = Continuation::run(&net, &base, &k, helm::DEFAULT_TERMS, exec)?.s_c();
            let margin = MarginSettings {
                sp_star: sp,
                horizon,
                diffusion,
            };
            let s_m = vstab_core::stochastic::margin_loading(&vstab_core::stochastic::FirstPassageSpec {
                s_c,
                sp_star: margin.sp_star,
                horizon: margin.horizon,
                d: margin.diffusion,
            })?;
            println!("s_c = {s_c:.7}");
            println!("s_m = {s_m:.7}");
            let dae = dynamics::assemble_dae(&net, None)?;
            let params = OuParams::uniform(dae.noise_buses(), ou.0, ou.1);
            let monitored = if net.pocket.is_empty() {
                dae.noise_buses()
            } else {
                net.pocket.clone()
            };
            let set = covariance::critical_variances(&dae, s_m, &params, &monitored, 0.0)?;
            println!("bus,critical_variance");
            for (b, v) in set.buses.iter().zip(&set.variances) {
                println!("{b},{v:e}");
            }
        }
        Command::Simulate {
            scenario,
            controller,
            seed,
            over,
            out,
        } => {
            let mut sc = Scenario::resolve(&scenario)?;
            over.apply(&mut sc)?;
            if out.is_some() {
                sc.output = out;
            }
            let r = harness::run_kind(&sc, controller, seed)?;
            match r.collapse_time {
                Some(t) => println!("{} seed {}: collapse at {t:.2} s", r.label, r.seed),
                None => println!("{} seed {}: no collapse within {} s", r.label, r.seed, sc.horizon),
            }
            println!("load increase {:.2}%, final b_svc {:.4}", r.load_increase, r.final_b_svc);
        }
        Command::Compare {
            scenario,
            seeds,
            over,
            out,
            full,
        } => {
            let mut sc = Scenario::resolve(&scenario)?;
            over.apply(&mut sc)?;
            if let Some(k) = seeds {
                sc.seeds = (1..=k).collect();
                sc.validate()?;
            }
            let report = harness::compare_controllers(&sc, exec)?;
            let dir = out.or_else(|| sc.output.clone());
            if let Some(dir) = dir {
                let format = if full { ReportFormat::Full } else { ReportFormat::Summary };
                let files = harness::export_report(&report, &dir, format)?;
                eprintln!("wrote {} files to {}", files.len(), dir.display());
            }
            print_summary(&harness::summary(&report));
        }
        Command::Report { dir } => {
            let summary = harness::read_summary(&dir)?;
            print_summary(&summary);
            let p = dir.join("results.csv");
            let text = std::fs::read_to_string(&p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            let rows = harness::parse_results_csv(&text)?;
            println!("seed,controller,survival,load_increase_pct");
            for r in rows {
                println!("{},{},{},{}", r.seed, r.controller, r.survival, r.load_increase);
            }
        }
    }
    Ok(())
}

fn print_summary(s: &harness::ReportSummary) {
    println!("scenario {} over {} seeds", s.scenario, s.seeds.len());
    for (c, m) in s.controllers.iter().zip(&s.mean_survival) {
        println!("  {c:<8} mean survival {m:.2} s");
    }
    println!("ordering verdict {:.2}, load ordering verdict {:.2}", s.ordering_verdict, s.load_ordering_verdict);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(2)
        }
    }
}
