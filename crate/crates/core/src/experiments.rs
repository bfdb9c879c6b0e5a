//! Multi-run procedures shared by the command line and the examples:
//! dataset resolution, a full training run, the ablation grid and the
//! missing-point robustness sweep.

use std::fmt;

use crate::config::RunConfig;
use crate::data::{fps_drop, generate_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Scale, ScaleConfig};
use crate::model::MgtModel;
use crate::slfe::SlfeAblation;
use crate::train::{evaluate, train, EpochRecord, TrainOutcome};

/// The dataset named by `config`, or the synthetic shapes when none is set.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.dataset {
        Some(path) => Dataset::load(path),
        None => generate_synthetic(config.per_class, config.points, config.train.seed),
    }
}

/// Copy of `config` with class and channel counts taken from `data`.
pub fn fit_to_dataset(config: &RunConfig, data: &Dataset) -> RunConfig {
    let mut c = config.clone();
    c.model.num_classes = data.num_classes();
    c.model.channels = data.channels();
    c
}

/// Trains a freshly initialized model. Initialization uses the training
/// seed, so the run depends on `config` and `data` only.
pub fn train_run(
    config: &RunConfig,
    data: &Dataset,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MgtModel, TrainOutcome)> {
    let config = fit_to_dataset(config, data);
    let mut model = MgtModel::new(config.model.clone(), config.train.seed)?;
    let outcome = train(&mut model, &data.train, &data.test, &config.train, on_epoch)?;
    let mut best = model.clone();
    best.params = outcome.best_params.clone();
    Ok((best, outcome))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub ablation: SlfeAblation,
    pub scales: ScaleConfig,
}

impl fmt::Display for AblationCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (sphere_map={}, mrc={}, scales={})",
            self.name, self.ablation.sphere_map, self.ablation.mrc, self.scales
        )
    }
}

/// Scale ladder for the 1/2/3-scale sweep: the configured scales, extended
/// by doubling K and halving S when fewer than three are given.
pub fn scale_ladder(scales: &ScaleConfig) -> Result<Vec<ScaleConfig>> {
    let mut all = scales.scales().to_vec();
    while all.len() < 3 {
        let last = *all.last().expect("scale configs are non-empty");
        all.push(Scale {
            k: last.k * 2,
            s: (last.s / 2).max(1),
        });
    }
    (1..=3).map(|n| ScaleConfig::new(all[..n].to_vec())).collect()
}

/// The 2x2 {sphere mapping, MRC} grid at the configured scales (cells A to
/// D, D with both on) followed by the 1, 2 and 3 scale sweep with both on.
pub fn ablation_cells(config: &RunConfig) -> Result<Vec<AblationCell>> {
    let grid = [("A", false, false), ("B", true, false), ("C", false, true), ("D", true, true)];
    let mut cells: Vec<AblationCell> = grid
        .iter()
        .map(|&(name, sphere_map, mrc)| AblationCell {
            name: name.to_string(),
            ablation: SlfeAblation { sphere_map, mrc },
            scales: config.model.scales.clone(),
        })
        .collect();
    for (n, scales) in scale_ladder(&config.model.scales)?.into_iter().enumerate() {
        cells.push(AblationCell {
            name: format!("scales{}", n + 1),
            ablation: SlfeAblation::default(),
            scales,
        });
    }
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub cell: AblationCell,
    pub oa: f64,
    pub macc: f64,
    pub best_epoch: usize,
    pub final_loss: f64,
    /// Name of an earlier cell with the identical configuration whose run
    /// was reused, if any.
    pub reused: Option<String>,
}

pub const ABLATION_HEADER: &str = "cell,sphere_map,mrc,scales,oa,macc,best_epoch,final_loss";

impl AblationResult {
    /// Summary of a finished training run of `cell`.
    pub fn from_outcome(cell: AblationCell, outcome: &TrainOutcome) -> Self {
        AblationResult {
            oa: outcome.best_oa,
            macc: outcome.log[outcome.best_epoch - 1].test_macc,
            best_epoch: outcome.best_epoch,
            final_loss: outcome.log.last().expect("non-empty log").train_loss,
            reused: None,
            cell,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.cell.name,
            self.cell.ablation.sphere_map,
            self.cell.ablation.mrc,
            self.cell.scales.to_string().replace(',', " "),
            self.oa,
            self.macc,
            self.best_epoch,
            self.final_loss
        )
    }
}

/// Trains every cell with the shared seed. Cells whose configuration equals
/// an earlier cell, or one of the finished runs in `prior`, reuse that run,
/// since training is deterministic.
pub fn run_ablation(
    config: &RunConfig,
    data: &Dataset,
    prior: &[AblationResult],
    mut on_cell: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut results: Vec<AblationResult> = Vec::new();
    for cell in ablation_cells(config)? {
        let earlier = prior
            .iter()
            .chain(&results)
            .find(|r| r.cell.ablation == cell.ablation && r.cell.scales == cell.scales)
            .cloned();
        let result = match earlier {
            Some(r) => AblationResult {
                cell,
                reused: Some(r.cell.name.clone()),
                ..r
            },
            None => {
                let mut c = config.clone();
                c.model.ablation = cell.ablation;
                c.model.scales = cell.scales.clone();
                let (_, outcome) =
                    train_run(&c, data, |_| {}).map_err(|e| e.context(format!("ablation cell {}", cell.name)))?;
                AblationResult::from_outcome(cell, &outcome)
            }
        };
        on_cell(&result);
        results.push(result);
    }
    Ok(results)
}

/// Overall accuracy on `test` after keeping `keep` farthest-point-sampled
/// points of every cloud, one entry per `keep` value in the given order.
/// Cloud `i` uses sampler seed `seed + i`.
pub fn robustness_curve(model: &MgtModel, test: &[PointCloud], keep: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    let mut curve = Vec::with_capacity(keep.len());
    for &k in keep {
        if let Some(c) = test.iter().find(|c| c.len() < k) {
            return Err(Error::config(format!("keep {k} exceeds the {} points per cloud", c.len())));
        }
        let dropped = test
            .iter()
            .enumerate()
            .map(|(i, c)| fps_drop(c, k, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let metrics = evaluate(model, &dropped).map_err(|e| e.context(format!("keep {k}")))?;
        curve.push((k, metrics.oa));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_extends_and_keeps_prefixes() {
        let ladder = scale_ladder(&ScaleConfig::parse("16:16,32:8").unwrap()).unwrap();
        let names: Vec<String> = ladder.iter().map(ToString::to_string).collect();
        assert_eq!(names, vec!["16:16", "16:16,32:8", "16:16,32:8,64:4"]);
    }

    #[test]
    fn grid_has_four_plus_three_cells() {
        let cells = ablation_cells(&RunConfig::default()).unwrap();
        assert_eq!(cells.len(), 7);
        let d = &cells[3];
        assert_eq!(d.name, "D");
        assert_eq!(d.ablation, RunConfig::default().model.ablation);
        assert_eq!(d.scales, RunConfig::default().model.scales);
        assert_eq!(cells[5].scales, d.scales);
    }
}
