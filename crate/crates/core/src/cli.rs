//! The `mgt` command line: `mgt <command> [--config FILE] [--key value]...`.
//!
//! Every command resolves its settings, creates the output directory and
//! writes the resolved settings to `config.txt` there before doing any work.
//! Exit codes: 0 success, 1 failed check or numeric failure, 2 usage,
//! configuration or input error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checks::gradient_suite;
use crate::config::{RunConfig, KEYS, SEED_ENV};
use crate::error::{Error, Result};
use crate::experiments::{fit_to_dataset, load_dataset, robustness_curve, run_ablation, train_run, ABLATION_HEADER};
use crate::data::Dataset;
use crate::model::MgtModel;
use crate::train::{checkpoint, evaluate, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const COMMANDS: &[(&str, &str)] = &[
    ("train", "train a model; writes metrics.csv and best.mgtc"),
    ("eval", "evaluate --checkpoint on the test split; writes eval.csv"),
    ("gradcheck", "compare analytic gradients with finite differences"),
    ("ablate", "train the sphere-map/MRC grid and the 1-3 scale sweep; writes ablation.csv"),
    ("robustness", "evaluate --checkpoint with points removed; writes robustness.csv"),
    ("gendata", "write the synthetic dataset (manifest.txt, train.pcs, test.pcs)"),
];

pub fn usage() -> String {
    let mut s = String::from("usage: mgt <command> [--config FILE] [--key value]...\n\ncommands:\n");
    for (name, help) in COMMANDS {
        let _ = writeln!(s, "  {name:<11} {help}");
    }
    s.push_str("\nkeys (default):\n");
    for (key, default, help) in KEYS {
        let _ = writeln!(s, "  --{key:<15} {help} ({default})");
    }
    let _ = writeln!(s, "\n{SEED_ENV} overrides the seed from the config file; --seed overrides both.");
    s
}

/// Parsed command line before settings are resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

pub fn parse_args(args: &[String]) -> Result<Invocation> {
    let (command, rest) = args
        .split_first()
        .ok_or_else(|| Error::config("missing command"))?;
    if !COMMANDS.iter().any(|(c, _)| c == command) {
        return Err(Error::config(format!("unknown command `{command}`")));
    }
    let mut config_file = None;
    let mut overrides = Vec::new();
    let mut it = rest.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("expected --key, got `{flag}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key == "config" {
            config_file = Some(PathBuf::from(value));
        } else {
            overrides.push((key, value));
        }
    }
    Ok(Invocation {
        command: command.clone(),
        config_file,
        overrides,
    })
}

fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::NonFinite { .. } => EXIT_CHECK,
        _ => EXIT_USAGE,
    }
}

/// Runs one command and returns the process exit code. Progress goes to
/// stdout, errors to stderr.
pub fn run(args: &[String]) -> i32 {
    if args.is_empty() || args.iter().any(|a| a == "--help" || a == "-h" || a == "help") {
        print!("{}", usage());
        return if args.is_empty() { EXIT_USAGE } else { EXIT_OK };
    }
    let outcome = parse_args(args).and_then(|inv| {
        let seed_env = std::env::var(SEED_ENV).ok();
        let config = RunConfig::resolve(inv.config_file.as_deref(), seed_env.as_deref(), &inv.overrides)?;
        execute(&inv.command, &config)
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mgt: {e}");
            exit_code(&e)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `command` with already resolved settings.
pub fn execute(command: &str, config: &RunConfig) -> Result<i32> {
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    write(&config.out.join("config.txt"), &config.render())?;
    match command {
        "train" => cmd_train(config),
        "eval" => cmd_eval(config),
        "gradcheck" => cmd_gradcheck(config),
        "ablate" => cmd_ablate(config),
        "robustness" => cmd_robustness(config),
        "gendata" => cmd_gendata(config),
        other => Err(Error::config(format!("unknown command `{other}`"))),
    }
}

fn cmd_train(config: &RunConfig) -> Result<i32> {
    let data = load_dataset(config)?;
    let fitted = fit_to_dataset(config, &data);
    println!(
        "training on {} clouds ({} classes, {} points), testing on {}",
        data.train.len(),
        data.num_classes(),
        data.n_points(),
        data.test.len()
    );
    let metrics_path = config.out.join("metrics.csv");
    let mut log = format!("{METRICS_HEADER}\n");
    let started = Instant::now();
    let mut io_error = None;
    let (best, outcome) = train_run(&fitted, &data, |r| {
        println!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  OA {:.4}  mAcc {:.4}  {:.0}s",
            r.epoch,
            r.lr,
            r.train_loss,
            r.test_oa,
            r.test_macc,
            started.elapsed().as_secs_f64()
        );
        log.push_str(&r.csv_row());
        log.push('\n');
        if let Err(e) = write(&metrics_path, &log) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    checkpoint::save(&config.out.join("best.mgtc"), &best, &fitted.train)?;
    println!(
        "best OA {:.4} at epoch {}; wrote {}",
        outcome.best_oa,
        outcome.best_epoch,
        config.out.display()
    );
    Ok(EXIT_OK)
}

fn required_checkpoint(config: &RunConfig) -> Result<&Path> {
    config
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("--checkpoint is required"))
}

/// Loads the checkpoint and the dataset and checks that they fit together.
fn checkpoint_and_data(config: &RunConfig) -> Result<(MgtModel, Dataset)> {
    let (model, _) = checkpoint::load(required_checkpoint(config)?)?;
    let data = load_dataset(config)?;
    let m = model.config();
    if m.num_classes != data.num_classes() || m.channels != data.channels() {
        return Err(Error::config(format!(
            "checkpoint expects {} classes x {} channels, dataset has {} x {}",
            m.num_classes,
            m.channels,
            data.num_classes(),
            data.channels()
        )));
    }
    Ok((model, data))
}

fn cmd_eval(config: &RunConfig) -> Result<i32> {
    let (model, data) = checkpoint_and_data(config)?;
    let metrics = evaluate(&model, &data.test)?;
    println!("OA {:.4}  mAcc {:.4}  ({} clouds)", metrics.oa, metrics.macc, metrics.total());
    write(
        &config.out.join("eval.csv"),
        &format!("oa,macc\n{},{}\n", metrics.oa, metrics.macc),
    )?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(config: &RunConfig) -> Result<i32> {
    let started = Instant::now();
    let groups = gradient_suite(config.step, config.tolerance)?;
    let mut csv = String::from("group,param,checked,max_error,worst_index,analytic,numeric\n");
    let mut passed = true;
    for g in &groups {
        let r = &g.report;
        println!(
            "{:<20} max rel error {:.3e}  {}",
            g.group,
            r.max_error(),
            if r.passed() { "ok" } else { "FAIL" }
        );
        for p in &r.params {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                g.group, p.name, p.checked, p.max_error, p.worst_index, p.analytic, p.numeric
            );
        }
        for p in r.failures() {
            println!(
                "  {} [{}]: analytic {:e} vs numeric {:e}",
                p.name, p.worst_index, p.analytic, p.numeric
            );
        }
        passed &= r.passed();
    }
    write(&config.out.join("gradcheck.csv"), &csv)?;
    println!(
        "step {:e}, tolerance {:e}: {} in {:.1}s",
        config.step,
        config.tolerance,
        if passed { "passed" } else { "FAILED" },
        started.elapsed().as_secs_f64()
    );
    Ok(if passed { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_ablate(config: &RunConfig) -> Result<i32> {
    let data = load_dataset(config)?;
    let path = config.out.join("ablation.csv");
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut io_error = None;
    run_ablation(config, &data, &[], |r| {
        match &r.reused {
            Some(from) => println!("{}: OA {:.4} (same configuration as {from})", r.cell, r.oa),
            None => println!("{}: OA {:.4}  mAcc {:.4}", r.cell, r.oa, r.macc),
        }
        csv.push_str(&r.csv_row());
        csv.push('\n');
        if let Err(e) = write(&path, &csv) {
            io_error.get_or_insert(e);
        }
    })?;
    match io_error {
        Some(e) => Err(e),
        None => Ok(EXIT_OK),
    }
}

fn cmd_robustness(config: &RunConfig) -> Result<i32> {
    let (model, data) = checkpoint_and_data(config)?;
    let curve = robustness_curve(&model, &data.test, &config.keep, config.train.seed)?;
    let mut csv = String::from("keep,oa\n");
    for (keep, oa) in &curve {
        println!("keep {keep:>5}  OA {oa:.4}");
        let _ = writeln!(csv, "{keep},{oa}");
    }
    write(&config.out.join("robustness.csv"), &csv)?;
    Ok(EXIT_OK)
}

fn cmd_gendata(config: &RunConfig) -> Result<i32> {
    let data = crate::data::generate_synthetic(config.per_class, config.points, config.train.seed)?;
    let manifest = data.save(&config.out)?;
    println!(
        "wrote {} train and {} test clouds; manifest {}",
        data.train.len(),
        data.test.len(),
        manifest.display()
    );
    Ok(EXIT_OK)
}
