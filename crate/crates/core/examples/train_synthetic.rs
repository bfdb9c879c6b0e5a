//! Trains the desk-scale model on the four synthetic shapes and prints one
//! line per epoch.
//!
//! cargo run --release --example train_synthetic -- [--key value]...
//!
//! Keys are the same as for the `mgt` binary, e.g. `--epochs 10 --attention dot`.

use std::time::Instant;

use mgt::config::RunConfig;
use mgt::data::generate_synthetic;
use mgt::model::MgtModel;
use mgt::train::train;

fn main() -> mgt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let overrides: Vec<(String, String)> = args
        .chunks(2)
        .map(|kv| (kv[0].trim_start_matches("--").to_string(), kv.get(1).cloned().unwrap_or_default()))
        .collect();
    let mut config = RunConfig::resolve(None, None, &overrides)?;

    let data = generate_synthetic(config.per_class, config.points, config.train.seed)?;
    config.model.num_classes = data.num_classes();
    let mut model = MgtModel::new(config.model.clone(), config.train.seed)?;
    println!(
        "{} train / {} test clouds, {} parameters, {} attention",
        data.train.len(),
        data.test.len(),
        model.parameter_count(),
        config.model.attention.kind
    );

    let started = Instant::now();
    let outcome = train(&mut model, &data.train, &data.test, &config.train, |r| {
        println!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  OA {:.3}  mAcc {:.3}  [{:.0}s]",
            r.epoch,
            r.lr,
            r.train_loss,
            r.test_oa,
            r.test_macc,
            started.elapsed().as_secs_f64()
        );
    })?;
    println!("best OA {:.3} at epoch {}", outcome.best_oa, outcome.best_epoch);
    Ok(())
}
