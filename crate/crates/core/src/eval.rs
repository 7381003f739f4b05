//! Metrics, the brute-force bit-allocation oracle, and the ablation harness
//! (component ablation plus lambda / group-count / vector-length sweeps).

use serde::{Deserialize, Serialize};

use crate::edsg::{quantize_matrix_with, PipelineOverrides, QuantizeConfig};
use crate::error::{Error, Result};
use crate::fim::KroneckerFim;
use crate::tensorio::WeightMatrix;
use crate::toymodel::{generate, TaskParams};
use crate::wcsg::{global_distortion, SensitivityProfile};

/// Error scalars for a (W, W_hat) pair.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub euclid_mse: f64,
    pub fisher_distortion: f64,
    pub kl_quadratic_value: f64,
    pub global_distortion: f64,
}

pub fn metrics(
    w: &WeightMatrix,
    w_hat: &WeightMatrix,
    fim: &KroneckerFim,
    profile: &SensitivityProfile,
) -> Result<Metrics> {
    if !w.same_shape(w_hat) {
        return Err(Error::Validation(format!(
            "shape mismatch: {}x{} vs {}x{}",
            w.rows(),
            w.cols(),
            w_hat.rows(),
            w_hat.cols()
        )));
    }
    let err_data: Vec<f64> = w
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(a, b)| a - b)
        .collect();
    let euclid_mse =
        err_data.iter().map(|e| e * e).sum::<f64>() / (w.rows() * w.cols()) as f64;
    let err = WeightMatrix::new(w.rows(), w.cols(), err_data)?;
    let fisher_distortion = fim.kl_quadratic(&err)?;
    Ok(Metrics {
        euclid_mse,
        fisher_distortion,
        kl_quadratic_value: fisher_distortion,
        global_distortion: global_distortion(&profile.energies, &profile.bits)?,
    })
}

/// Exhaustively enumerates integer allocations over `bit_choices` summing to
/// `budget` and returns the minimizer of the shifted distortion; ties break
/// lexicographically. Ground truth for `allocate_bits`.
pub fn allocation_oracle(energies: &[f64], budget: u32, bit_choices: &[u32]) -> Result<Vec<u32>> {
    let c = energies.len();
    if c == 0 || c > 6 {
        return Err(Error::Validation(format!(
            "oracle supports 1..=6 channels, got {c}"
        )));
    }
    if bit_choices.is_empty() || bit_choices.len() > 5 {
        return Err(Error::Validation(format!(
            "oracle supports 1..=5 bit choices, got {}",
            bit_choices.len()
        )));
    }
    let mut best: Option<(f64, Vec<u32>)> = None;
    let mut current = vec![bit_choices[0]; c];
    // odometer over choices^c, scanned in lexicographic order
    let mut idx = vec![0usize; c];
    loop {
        let total: u32 = current.iter().sum();
        if total == budget {
            let d: f64 = energies
                .iter()
                .zip(&current)
                .map(|(&e, &b)| (e + 1.0) * (-2.0 * b as f64).exp2())
                .sum();
            let better = match &best {
                None => true,
                Some((bd, _)) => d < *bd, // lexicographic: strict improvement only
            };
            if better {
                best = Some((d, current.clone()));
            }
        }
        // advance odometer
        let mut pos = c;
        loop {
            if pos == 0 {
                return best.map(|(_, a)| a).ok_or_else(|| {
                    Error::Infeasible(format!(
                        "no allocation over {bit_choices:?} sums to {budget} for {c} channels"
                    ))
                });
            }
            pos -= 1;
            if idx[pos] + 1 < bit_choices.len() {
                idx[pos] += 1;
                current[pos] = bit_choices[idx[pos]];
                break;
            }
            idx[pos] = 0;
            current[pos] = bit_choices[0];
        }
    }
}

/// Sweep / ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Lambda,
    GroupCount,
    VectorLength,
    Components,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "group_count" | "group-count" => Ok(Axis::GroupCount),
            "vector_length" | "vector-length" => Ok(Axis::VectorLength),
            "components" => Ok(Axis::Components),
            other => Err(Error::Validation(format!("unknown axis {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::GroupCount => "group_count",
            Axis::VectorLength => "vector_length",
            Axis::Components => "components",
        }
    }
}

/// One row of an ablation report.
#[derive(Debug, Clone, Serialize)]
pub struct AblationPoint {
    pub setting: String,
    pub loss_delta_calib: f64,
    pub loss_delta_holdout: f64,
    pub fisher_distortion: f64,
    pub euclid_mse: f64,
    pub avg_bits: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub points: Vec<AblationPoint>,
    pub config_snapshot: QuantizeConfig,
    pub seed: u64,
}

impl AblationReport {
    /// Fixed CSV column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "setting,loss_delta_calib,loss_delta_holdout,fisher_distortion,euclid_mse,avg_bits\n",
        );
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.setting,
                p.loss_delta_calib,
                p.loss_delta_holdout,
                p.fisher_distortion,
                p.euclid_mse,
                p.avg_bits
            ));
        }
        out
    }
}

/// One end-to-end pipeline run against a generated task, measured on both
/// the calibration and holdout splits.
pub fn run_point(
    params: &TaskParams,
    cfg: &QuantizeConfig,
    overrides: PipelineOverrides,
    setting: String,
) -> Result<AblationPoint> {
    let task = generate(params)?;
    let holdout = generate(&params.holdout())?;
    let bundle = task.grad_samples(&task.weight)?;
    let (q, profile) = quantize_matrix_with(&task.weight, &bundle, cfg, overrides)?;
    let w_hat = crate::edsg::decode(&q)?;
    let fim = crate::fim::estimate_kronecker_fim(&bundle, 0.0)?
        .with_relative_damping(crate::fim::DEFAULT_RELATIVE_DAMPING);
    let m = metrics(&task.weight, &w_hat, &fim, &profile)?;
    Ok(AblationPoint {
        setting,
        loss_delta_calib: task.loss_delta(&task.weight, &w_hat)?,
        loss_delta_holdout: holdout.loss_delta(&task.weight, &w_hat)?,
        fisher_distortion: m.fisher_distortion,
        euclid_mse: m.euclid_mse,
        avg_bits: profile.avg_bits(),
    })
}

/// Component ablation: (a) plain k-means PQ (lambda = 0, uniform bits),
/// (b) +EDSG (lambda on, uniform bits), (c) full pipeline, all at the same
/// average bits per weight and seed.
pub fn run_components_ablation(params: &TaskParams, cfg: &QuantizeConfig) -> Result<AblationReport> {
    let rows = [
        (
            "kmeans",
            QuantizeConfig {
                lambda: 0.0,
                ..cfg.clone()
            },
            PipelineOverrides {
                force_uniform_bits: true,
            },
        ),
        (
            "kmeans+edsg",
            cfg.clone(),
            PipelineOverrides {
                force_uniform_bits: true,
            },
        ),
        ("kmeans+edsg+wcsg", cfg.clone(), PipelineOverrides::default()),
    ];
    let mut points = Vec::with_capacity(rows.len());
    for (name, row_cfg, overrides) in rows {
        points.push(run_point(params, &row_cfg, overrides, name.to_string())?);
    }
    Ok(AblationReport {
        axis: Axis::Components,
        points,
        config_snapshot: cfg.clone(),
        seed: params.seed,
    })
}

/// One pipeline run per axis value, everything else fixed; rows in value
/// order.
pub fn run_sweep(
    params: &TaskParams,
    cfg: &QuantizeConfig,
    axis: Axis,
    values: &[f64],
) -> Result<AblationReport> {
    if axis == Axis::Components {
        return run_components_ablation(params, cfg);
    }
    if values.is_empty() {
        return Err(Error::Validation("sweep needs at least one value".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut row_cfg = cfg.clone();
        let setting = match axis {
            Axis::Lambda => {
                if value < 0.0 {
                    return Err(Error::Validation(format!("lambda {value} < 0")));
                }
                row_cfg.lambda = value;
                format!("{value}")
            }
            Axis::GroupCount => {
                let g = value as usize;
                if g == 0 || (value - g as f64).abs() > 0.0 {
                    return Err(Error::Validation(format!("group count {value} not a positive integer")));
                }
                row_cfg.group_count = g;
                format!("{g}")
            }
            Axis::VectorLength => {
                let v = value as usize;
                if v == 0 || (value - v as f64).abs() > 0.0 {
                    return Err(Error::Validation(format!("vector length {value} not a positive integer")));
                }
                row_cfg.vector_length = v;
                format!("{v}")
            }
            Axis::Components => unreachable!(),
        };
        points.push(
            run_point(params, &row_cfg, PipelineOverrides::default(), setting)
                .map_err(|e| e.at_stage("sweep-row"))?,
        );
    }
    Ok(AblationReport {
        axis,
        points,
        config_snapshot: cfg.clone(),
        seed: params.seed,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Multi-seed protocol: regenerate the task per seed, run the sweep, and
/// report the per-point median of every scalar column.
pub fn run_sweep_multi_seed(
    base: &TaskParams,
    cfg: &QuantizeConfig,
    axis: Axis,
    values: &[f64],
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Validation("need at least one seed".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let params = TaskParams {
            seed,
            ..base.clone()
        };
        let cfg = QuantizeConfig { seed, ..cfg.clone() };
        per_seed.push(run_sweep(&params, &cfg, axis, values)?);
    }
    let rows = per_seed[0].points.len();
    let mut points = Vec::with_capacity(rows);
    for r in 0..rows {
        let col = |f: fn(&AblationPoint) -> f64| {
            let mut vals: Vec<f64> = per_seed.iter().map(|rep| f(&rep.points[r])).collect();
            median(&mut vals)
        };
        points.push(AblationPoint {
            setting: per_seed[0].points[r].setting.clone(),
            loss_delta_calib: col(|p| p.loss_delta_calib),
            loss_delta_holdout: col(|p| p.loss_delta_holdout),
            fisher_distortion: col(|p| p.fisher_distortion),
            euclid_mse: col(|p| p.euclid_mse),
            avg_bits: col(|p| p.avg_bits),
        });
    }
    Ok(AblationReport {
        axis,
        points,
        config_snapshot: cfg.clone(),
        seed: seeds[0],
    })
}
