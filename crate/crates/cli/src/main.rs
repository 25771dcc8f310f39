use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gtn_calib::artifacts::ArtifactStore;
use gtn_calib::config::parse_override;
use gtn_calib::stages;
use gtn_calib::{Error, ExperimentConfig, Order};
use serde::Serialize;

/// Sequential Bayesian calibration of GTN damage parameters.
#[derive(Debug, Parser)]
#[command(name = "gtn-calib", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override a configuration value, e.g. `--set tmcmc.particles=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory, overriding `output_dir`.
    #[arg(long, env = "GTN_CALIB_OUT", global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw the Latin hypercube design.
    Design(Common),
    /// Run the simulator on every design row.
    Simulate(Common),
    /// Fit the FD and field PCA bases and score every row.
    Reduce(Common),
    /// Train one GP per retained score.
    Train(Common),
    /// Score the surrogates on the held-out rows.
    Validate(Common),
    /// Run update sequences on the observed specimen.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Update order; repeatable. Defaults to all four.
        #[arg(long = "order")]
        orders: Vec<Order>,
        /// Observation repeat; repeatable. Defaults to every configured repeat.
        #[arg(long = "repeat")]
        repeats: Vec<usize>,
    },
    /// Re-simulate at a posterior MAP and export the stress and void fields.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "FD_DIC")]
        order: Order,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Compare update orders across the stored repeats.
    Compare(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Design(c)
            | Command::Simulate(c)
            | Command::Reduce(c)
            | Command::Train(c)
            | Command::Validate(c)
            | Command::Compare(c) => c,
            Command::Infer { common, .. } | Command::Recover { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Design(_) => "design",
            Command::Simulate(_) => "simulate",
            Command::Reduce(_) => "reduce",
            Command::Train(_) => "train",
            Command::Validate(_) => "validate",
            Command::Infer { .. } => "infer",
            Command::Recover { .. } => "recover",
            Command::Compare(_) => "compare",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonConvergence(_) => 3,
        Error::Artifact(_) | Error::HashMismatch { .. } => 4,
        _ => 5,
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut overrides = c
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = c.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let mut cfg = ExperimentConfig::load(c.config.as_deref(), &overrides)?;
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cmd: &Command) -> Result<(), Error> {
    let common = cmd.common();
    let cfg = load_config(common)?;
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut store = ArtifactStore::open(&cfg.output_dir)?;
    store.put(
        &format!("config/{}.toml", cmd.name()),
        cfg.relocatable().to_toml()?.as_bytes(),
    )?;
    match cmd {
        Command::Design(_) => {
            let d = stages::stage_design(&cfg, &mut store)?;
            println!(
                "design: {} rows ({} redrawn) in {}",
                d.rows.len(),
                d.redraws,
                store.root().display()
            );
        }
        Command::Simulate(_) => {
            let d = stages::stage_simulate(&cfg, &mut store)?;
            println!(
                "simulate: {} rows kept, {} excluded, {} train / {} test",
                d.set.rows.len(),
                d.set.exclusions.len(),
                d.train.len(),
                d.test.len()
            );
        }
        Command::Reduce(_) => {
            let (_, rep) = stages::stage_reduce(&cfg, &mut store)?;
            println!(
                "reduce: k_FD = {} ({:.4}), k_FIELD = {} ({:.4})",
                rep.fd_basis.retained,
                rep.fd_basis.retained_ratio(),
                rep.field_basis.retained,
                rep.field_basis.retained_ratio()
            );
        }
        Command::Train(_) => {
            let s = stages::stage_train(&cfg, &mut store)?;
            println!("train: {} FD and {} field emulators", s.fd.len(), s.field.len());
        }
        Command::Validate(_) => print(&stages::stage_validate(&cfg, &mut store)?)?,
        Command::Infer { orders, repeats, .. } => {
            let orders = if orders.is_empty() {
                Order::ALL.to_vec()
            } else {
                orders.clone()
            };
            let repeats = if repeats.is_empty() {
                (0..cfg.experiment.repeats).collect()
            } else {
                repeats.clone()
            };
            let out = stages::stage_infer(&cfg, &mut store, &orders, &repeats)?;
            for s in &out.summaries {
                let last = s.stages.last().expect("sequences have stages");
                println!(
                    "infer: {} rep {}: MAP {:?}, widths {:?}, max R̂ {:.4}{}",
                    s.order,
                    s.repeat,
                    last.map,
                    last.hpd_widths,
                    last.split_rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    if s.converged { "" } else { " (not converged)" }
                );
            }
            if !out.converged() {
                return Err(Error::NonConvergence(
                    "split-R̂ above the gate; samples are persisted for inspection".into(),
                ));
            }
        }
        Command::Recover { order, repeat, .. } => print(&stages::stage_recover(&cfg, &mut store, *order, *repeat)?)?,
        Command::Compare(_) => print(&stages::stage_compare(&cfg, &mut store)?)?,
    }
    store.save()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::NonConvergence("x".into())), 3);
        assert_eq!(exit_code(&Error::Artifact("x".into())), 4);
        let h = Error::HashMismatch {
            path: "a".into(),
            expected: "b".into(),
            actual: "c".into(),
        };
        assert_eq!(exit_code(&h), 4);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 5);
    }

    #[test]
    fn orders_parse_from_flags() {
        let cli = Cli::try_parse_from(["gtn-calib", "infer", "--order", "DIC_FD", "--order", "FD_ONLY"]).unwrap();
        let Command::Infer { orders, .. } = cli.command else {
            panic!()
        };
        assert_eq!(orders, vec![Order::DicFd, Order::FdOnly]);
        assert!(Cli::try_parse_from(["gtn-calib", "infer", "--order", "FD_THEN_DIC"]).is_err());
    }
}
