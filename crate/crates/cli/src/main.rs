use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cchart_cli::config::{RunConfig, KEYS};
use cchart_cli::{cmd_compare, cmd_evaluate, cmd_featurize, cmd_generate, cmd_train, CliError};
use clap::{Arg, ArgAction, ArgMatches, Command};

fn kebab(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn cli() -> Command {
    let mut cmd = Command::new("cchart")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Channel charting: synthetic CSI, features, triplet training and chart metrics")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("flat key = value configuration file"),
        )
        .arg(
            Arg::new("threads")
                .long("threads")
                .global(true)
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .help("worker thread cap"),
        );
    for (key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(kebab(key))
                .global(true)
                .value_name("VALUE")
                .help(*help)
                .help_heading("Configuration overrides"),
        );
    }
    let path = |name: &'static str, help: &'static str| {
        Arg::new(name)
            .long(name)
            .value_name("PATH")
            .required(true)
            .value_parser(clap::value_parser!(PathBuf))
            .help(help)
    };
    cmd.subcommand(
        Command::new("generate")
            .about("simulate a CSI dataset (CCD1)")
            .arg(path("out", "dataset file to write")),
    )
    .subcommand(
        Command::new("featurize")
            .about("write the feature vectors of a dataset as CSV")
            .arg(path("data", "CCD1 dataset"))
            .arg(path("out", "CSV file to write")),
    )
    .subcommand(
        Command::new("train")
            .about("select triplets, train a chart model, write checkpoint and loss history")
            .arg(path("data", "CCD1 dataset"))
            .arg(path("out-dir", "output directory")),
    )
    .subcommand(
        Command::new("evaluate")
            .about("embed a dataset, write chart CSV/SVG and metrics JSON")
            .arg(path("model", "CCM1 checkpoint"))
            .arg(path("data", "CCD1 dataset"))
            .arg(path("out-dir", "output directory")),
    )
    .subcommand(
        Command::new("compare")
            .about("train and evaluate several configs on one dataset")
            .arg(
                Arg::new("run")
                    .long("run")
                    .value_name("NAME=FILE")
                    .action(ArgAction::Append)
                    .required(true)
                    .help("named config overlay, repeatable"),
            )
            .arg(
                Arg::new("data")
                    .long("data")
                    .value_name("PATH")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("CCD1 dataset (generated from the base config when absent)"),
            )
            .arg(path("out-dir", "output directory")),
    )
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", p.display())))
    }
}

fn run(m: &ArgMatches) -> Result<(), CliError> {
    if let Some(&n) = m.get_one::<usize>("threads") {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    let path = |k: &str| sub.get_one::<PathBuf>(k).expect("required").clone();
    match name {
        "generate" => {
            let s = cmd_generate(&cfg, &path("out"))?;
            println!(
                "N={} B={} W={} duration={:.1} s",
                s.n, s.antennas, s.subcarriers, s.duration_s
            );
        }
        "featurize" => {
            require_file(&path("data"))?;
            let f = cmd_featurize(&path("data"), &path("out"))?;
            println!("F={f}");
        }
        "train" => {
            require_file(&path("data"))?;
            let out = cmd_train(&cfg, &path("data"), &path("out-dir"))?;
            let last = out.result.history.last().expect("at least one epoch");
            println!(
                "epochs={} steps={} final mean main loss={:.6} mean inertial loss={:.6} (per-term means)",
                out.result.history.len(),
                out.result.steps,
                last.mean_main,
                last.mean_inertial
            );
            println!("checkpoint {}", out.checkpoint.display());
        }
        "evaluate" => {
            require_file(&path("model"))?;
            require_file(&path("data"))?;
            let out = cmd_evaluate(&cfg, &path("model"), &path("data"), &path("out-dir"))?;
            match &out.report {
                Some(r) => println!("{}", serde_json::to_string(r).expect("report serializes")),
                None => println!("no ground truth: metrics omitted"),
            }
            println!("chart {}", out.chart_csv.display());
        }
        "compare" => {
            let mut runs = Vec::new();
            for spec in sub.get_many::<String>("run").into_iter().flatten() {
                let (label, file) = spec
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--run expects NAME=FILE, got {spec:?}")))?;
                let mut run_cfg = cfg.clone();
                run_cfg.apply_file(std::path::Path::new(file))?;
                runs.push((label.to_string(), run_cfg));
            }
            let data = sub.get_one::<PathBuf>("data");
            if let Some(d) = data {
                require_file(d)?;
            }
            let rows = cmd_compare(&cfg, &runs, data.map(|p| p.as_path()), &path("out-dir"))?;
            print!("{}", cchart_cli::compare_table(&rows));
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
