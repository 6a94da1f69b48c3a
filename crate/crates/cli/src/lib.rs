//! Command-line front end: argument parsing, config resolution and the
//! mapping from errors to exit codes.

pub mod commands;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dcmil_core::kv::KvFile;
use dcmil_core::RunConfig;
use dcmil_dataio::SyntheticSpec;
use dcmil_trainer::{Result, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dcmil", about = "Dual-curriculum multiple-instance survival analysis on tiled images")]
pub struct Cli {
    /// Key-value config file; defaults to `<out>/config.cfg` when present, else desk defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "DCMIL_RUN_DIR")]
    pub out: Option<PathBuf>,
    /// Overrides `rng_seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restricts fold-wise commands to one fold.
    #[arg(long, global = true)]
    pub fold: Option<usize>,
    /// Cohort directory holding manifest.csv.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Writes a synthetic cohort (manifest, tiles, ground truth) to the output directory.
    GenerateData,
    /// Trains the instance encoder of every fold.
    TrainC1,
    /// Trains the soft-bag survival model on top of saved encoders.
    TrainC2,
    /// Scores held-out folds from saved checkpoints; writes metrics, plots and exports.
    Evaluate,
    /// Monte-Carlo dropout confidence of encoder predictions on held-out folds.
    Uncertainty,
    /// Distances of tumor instance representations to the normal-tissue centroid.
    CompareNormal,
    /// Renders the summary figures and tables of a finished run.
    Report,
}

/// Resolved inputs shared by every command.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: RunConfig,
    pub spec: SyntheticSpec,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub fold: Option<usize>,
}

impl Context {
    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| TrainError::Invalid("this command needs --data <cohort directory>".into()))
    }

    /// Folds selected by `--fold`, or all of them.
    pub fn folds(&self) -> Result<Vec<usize>> {
        match self.fold {
            Some(f) if f >= self.cfg.folds => Err(TrainError::Invalid(format!(
                "--fold {f} is out of range for {} folds",
                self.cfg.folds
            ))),
            Some(f) => Ok(vec![f]),
            None => Ok((0..self.cfg.folds).collect()),
        }
    }
}

/// Synthetic defaults matched to the run geometry.
pub fn spec_for(cfg: &RunConfig) -> SyntheticSpec {
    SyntheticSpec {
        tile_side_fine: cfg.tile_side(cfg.magnifications - 1),
        levels: cfg.magnifications,
        threshold_months: cfg.risk_threshold_months,
        rng_seed: cfg.rng_seed,
        ..SyntheticSpec::default()
    }
}

/// Parses run keys and `synthetic.*` keys from one file; unknown keys are rejected.
pub fn load_config(text: Option<&str>, seed: Option<u64>) -> Result<(RunConfig, SyntheticSpec)> {
    let mut kv = KvFile::parse(text.unwrap_or(""))?;
    let mut cfg = RunConfig::take_from(&mut kv)?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    let spec = spec_for(&cfg).take_from(&mut kv)?;
    kv.finish()?;
    Ok((cfg, spec))
}

fn resolve(cli: &Cli) -> Result<Context> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| TrainError::Invalid("no output directory: pass --out or set DCMIL_RUN_DIR".into()))?;
    let path = match &cli.config {
        Some(p) if !p.is_file() => return Err(TrainError::Missing(format!("config file {}", p.display()))),
        Some(p) => Some(p.clone()),
        None => Some(out.join("config.cfg")).filter(|p| p.is_file()),
    };
    let text = path.map(std::fs::read_to_string).transpose()?;
    let (cfg, spec) = load_config(text.as_deref(), cli.seed)?;
    Ok(Context {
        cfg,
        spec,
        out,
        data: cli.data.clone(),
        fold: cli.fold,
    })
}

pub fn execute(command: Command, ctx: &Context) -> Result<()> {
    match command {
        Command::GenerateData => commands::generate_data(ctx),
        Command::TrainC1 => commands::train_c1(ctx),
        Command::TrainC2 => commands::train_c2(ctx),
        Command::Evaluate => commands::evaluate(ctx),
        Command::Uncertainty => commands::uncertainty(ctx),
        Command::CompareNormal => commands::compare_normal(ctx),
        Command::Report => report::report(ctx),
    }
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match resolve(&cli).and_then(|ctx| execute(cli.command, &ctx)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_reads_run_and_synthetic_keys() {
        let (cfg, spec) = load_config(Some("token_dim = 16\nsynthetic.n_patients = 12\n"), None).unwrap();
        assert_eq!(cfg.token_dim, 16);
        assert_eq!(spec.n_patients, 12);
        assert_eq!(spec.tile_side_fine, cfg.tile_side(cfg.magnifications - 1));
        assert_eq!(spec.rng_seed, cfg.rng_seed);
    }

    #[test]
    fn seed_flag_overrides_config_and_data() {
        let (cfg, spec) = load_config(Some("rng_seed = 3\n"), Some(11)).unwrap();
        assert_eq!((cfg.rng_seed, spec.rng_seed), (11, 11));
        let (cfg, _) = load_config(None, None).unwrap();
        assert_eq!(cfg, RunConfig::desk());
    }

    #[test]
    fn unknown_and_malformed_keys_are_validation_errors() {
        for text in ["tokn_dim = 3\n", "token_dim = many\n", "synthetic.n_patients = 0\n", "no equals sign\n"] {
            let e = load_config(Some(text), None).unwrap_err();
            assert!(e.is_validation(), "{text}: {e}");
        }
    }

    #[test]
    fn fold_selection_is_bounded() {
        let (cfg, spec) = load_config(None, None).unwrap();
        let mut ctx = Context {
            cfg,
            spec,
            out: PathBuf::from("unused"),
            data: None,
            fold: None,
        };
        assert_eq!(ctx.folds().unwrap(), vec![0, 1, 2, 3, 4]);
        ctx.fold = Some(2);
        assert_eq!(ctx.folds().unwrap(), vec![2]);
        ctx.fold = Some(5);
        assert!(ctx.folds().unwrap_err().is_validation());
        assert!(ctx.data_dir().unwrap_err().is_validation());
    }
}
