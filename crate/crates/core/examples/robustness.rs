//! Trains a short run on the synthetic shapes, then evaluates it with more
//! and more points removed by farthest point sampling.
//!
//! cargo run --release --example robustness -- [epochs]

use mgt::config::RunConfig;
use mgt::experiments::{load_dataset, robustness_curve, train_run};

fn main() -> mgt::Result<()> {
    let epochs = std::env::args().nth(1).map_or(10, |a| a.parse().expect("epoch count"));
    let mut config = RunConfig::default();
    config.train.epochs = epochs;
    let data = load_dataset(&config)?;
    let (model, outcome) = train_run(&config, &data, |r| println!("epoch {:>2}  OA {:.3}", r.epoch, r.test_oa))?;
    println!("best OA {:.3} at epoch {}", outcome.best_oa, outcome.best_epoch);

    let n = data.n_points();
    let keep: Vec<usize> = [1, 2, 4, 8, 16].iter().map(|d| n / d).collect();
    for (k, oa) in robustness_curve(&model, &data.test, &keep, config.train.seed)? {
        println!("{k:>4} of {n} points  OA {oa:.3}");
    }
    Ok(())
}
