//! `tamperscope`: dataset generation, training, evaluation, prediction and
//! sub-band inspection.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use config::{CliConfig, KEYS};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Core(tamperscope::Error),
}

impl From<tamperscope::Error> for CliError {
    fn from(e: tamperscope::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "filesystem error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    /// 2 config/input, 3 I/O, 4 divergence, 5 version mismatch.
    pub fn exit_code(&self) -> u8 {
        use tamperscope::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::Io { .. } => 3,
                E::Divergence { .. } => 4,
                E::Version(_) => 5,
                _ => 2,
            },
        }
    }
}

fn subcommand(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value config file"),
    );
    for (key, help) in KEYS {
        cmd = cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help));
    }
    cmd
}

fn cli() -> Command {
    Command::new("tamperscope")
        .about("Wavelet-guided forgery detection, localization and explanation")
        .subcommand_required(true)
        .subcommand(subcommand("generate", "Write a synthetic tamper dataset (needs --out)"))
        .subcommand(subcommand("train", "Train on a dataset's train split (needs --data, --out)"))
        .subcommand(subcommand(
            "eval",
            "Score a checkpoint on a dataset split (needs --checkpoint, --data, --report)",
        ))
        .subcommand(subcommand(
            "predict",
            "Run a checkpoint on one P6 image (needs --checkpoint, --image, --out)",
        ))
        .subcommand(subcommand(
            "decompose",
            "Write the four Haar sub-bands and the HH energy map (needs --image, --out)",
        ))
}

/// Defaults, then `--config`, then individual flags.
fn resolve(m: &ArgMatches) -> Result<CliConfig, CliError> {
    let mut c = CliConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        c.apply_file(path.as_ref())?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            c.set(key, v).map_err(CliError::Config)?;
        }
    }
    Ok(c)
}

fn run() -> Result<(), CliError> {
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand is required");
    let c = resolve(m)?;
    match name {
        "generate" => commands::generate(&c),
        "train" => commands::train(&c),
        "eval" => commands::eval(&c),
        "predict" => commands::predict(&c),
        "decompose" => commands::decompose(&c),
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
