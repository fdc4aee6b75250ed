use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};

use freqdiff::Result;
use freqdiff_cli::commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_sweep_t, cmd_synth, cmd_train,
};
use freqdiff_cli::config::{RunConfig, KEYS};
use freqdiff_cli::exit_code;

const COMMANDS: [(&str, &str); 6] = [
    (
        "gen-data",
        "Generate a phantom dataset container and its manifest",
    ),
    ("train", "Train a model through the full curriculum"),
    (
        "synth",
        "Synthesize the missing modalities of a test set for one mask",
    ),
    ("eval", "Score a model over a list of masks (or all 14)"),
    (
        "ablate",
        "Train or reuse ablation variants and compare them",
    ),
    (
        "sweep-t",
        "Train or reuse models across step counts and time sampling",
    ),
];

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn subcommand(name: &'static str, about: &'static str, defaults: &RunConfig) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value file applied before the flags below"),
    );
    for key in KEYS.iter().filter(|k| k.commands.contains(&name)) {
        let mut arg = Arg::new(key.name)
            .long(flag(key.name))
            .value_name("VALUE")
            .help(key.help);
        let default = defaults.get(key.name).expect("every key has a value");
        if !default.is_empty() {
            // Shown in --help; only values typed on the command line are applied.
            arg = arg.default_value(default);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    let defaults = RunConfig::default();
    COMMANDS.iter().fold(
        Command::new("freqdiff")
            .about("Frequency-guided diffusion for missing-modality synthesis on phantom data")
            .subcommand_required(true)
            .arg_required_else_help(true),
        |cmd, &(name, about)| cmd.subcommand(subcommand(name, about, &defaults)),
    )
}

fn resolve(matches: &ArgMatches, name: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for key in KEYS.iter().filter(|k| k.commands.contains(&name)) {
        if matches.value_source(key.name) == Some(ValueSource::CommandLine) {
            let value = matches.get_one::<String>(key.name).expect("value present");
            cfg.set(key.name, value)?;
        }
    }
    Ok(cfg)
}

fn run(name: &str, matches: &ArgMatches) -> Result<String> {
    let cfg = resolve(matches, name)?;
    match name {
        "gen-data" => cmd_gen_data(&cfg),
        "train" => cmd_train(&cfg),
        "synth" => cmd_synth(&cfg),
        "eval" => cmd_eval(&cfg),
        "ablate" => cmd_ablate(&cfg),
        "sweep-t" => cmd_sweep_t(&cfg),
        _ => unreachable!("clap only accepts known subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("freqdiff {name}: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_valid() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_defaults_only_when_given() {
        let m = cli()
            .try_get_matches_from(["freqdiff", "train", "--steps", "50"])
            .unwrap();
        let cfg = resolve(m.subcommand_matches("train").unwrap(), "train").unwrap();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.lr, RunConfig::default().lr);
    }

    #[test]
    fn flags_override_config_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "steps = 25\nlr = 0.001\n").unwrap();
        let m = cli()
            .try_get_matches_from([
                "freqdiff",
                "train",
                "--config",
                path.to_str().unwrap(),
                "--steps",
                "100",
            ])
            .unwrap();
        let cfg = resolve(m.subcommand_matches("train").unwrap(), "train").unwrap();
        assert_eq!((cfg.steps, cfg.lr), (100, 0.001));
    }

    #[test]
    fn flags_belong_to_their_commands() {
        assert!(cli()
            .try_get_matches_from(["freqdiff", "gen-data", "--lr", "1"])
            .is_err());
        assert!(cli()
            .try_get_matches_from(["freqdiff", "eval", "--masks", "all14"])
            .is_ok());
    }
}
