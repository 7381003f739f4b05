//! Desk-scale calibration substrate: a linear-softmax classifier with exact
//! gradients, an exact dense Fisher matrix, and a closed-form KL oracle.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{GradientBundle, WeightMatrix};

/// Calibration task: weight of a linear-softmax model `p(y|x) = softmax(Wx)`,
/// a set of inputs, and one label per input.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub weight: WeightMatrix,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub rng_seed: u64,
}

/// Shape/seed summary persisted alongside the task files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSummary {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub seed: u64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn logits(w: &WeightMatrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl ToyTask {
    pub fn validate_against(&self, w: &WeightMatrix) -> Result<()> {
        if w.rows() < 2 {
            return Err(Error::Validation("toy task needs M >= 2 classes".into()));
        }
        if self.inputs.is_empty() {
            return Err(Error::Validation("toy task needs inputs".into()));
        }
        for (i, x) in self.inputs.iter().enumerate() {
            if x.len() != w.cols() {
                return Err(Error::Validation(format!(
                    "input {i} has dim {} but weight has {} cols",
                    x.len(),
                    w.cols()
                )));
            }
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= w.rows() {
                return Err(Error::Validation(format!("label {i} = {y} out of range")));
            }
        }
        if self.labels.len() != self.inputs.len() {
            return Err(Error::Validation("one label per input required".into()));
        }
        Ok(())
    }

    /// Mean cross-entropy of `w` on the calibration set.
    pub fn loss(&self, w: &WeightMatrix) -> Result<f64> {
        self.validate_against(w)?;
        let mut total = 0.0;
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            let p = softmax(&logits(w, x));
            total -= p[y].max(1e-300).ln();
        }
        Ok(total / self.inputs.len() as f64)
    }

    /// Exact analytic gradient `(softmax(Wx) - onehot(y)) x^T`, averaged.
    pub fn grad(&self, w: &WeightMatrix) -> Result<WeightMatrix> {
        Ok(self.grad_samples(w)?.mean())
    }

    /// One gradient sample per input, in input order.
    pub fn grad_samples(&self, w: &WeightMatrix) -> Result<GradientBundle> {
        self.validate_against(w)?;
        let (m, n) = (w.rows(), w.cols());
        let mut samples = Vec::with_capacity(self.inputs.len());
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            let mut p = softmax(&logits(w, x));
            p[y] -= 1.0;
            let mut data = Vec::with_capacity(m * n);
            for pc in &p {
                for xv in x {
                    data.push(pc * xv);
                }
            }
            samples.push(WeightMatrix::new(m, n, data)?);
        }
        GradientBundle::new(samples)
    }

    /// Exact model-distribution Fisher matrix over the calibration inputs,
    /// `(MN)x(MN)` with row-major vec convention; class expectations are
    /// summed exactly, never sampled.
    pub fn empirical_fim_dense(&self, w: &WeightMatrix) -> Result<DMatrix<f64>> {
        self.validate_against(w)?;
        let (m, n) = (w.rows(), w.cols());
        let d = m * n;
        if d > 64 {
            return Err(Error::Validation(format!(
                "dense FIM oracle limited to M*N <= 64, got {d}"
            )));
        }
        let mut fim = DMatrix::<f64>::zeros(d, d);
        for x in &self.inputs {
            let p = softmax(&logits(w, x));
            // score for class y: row r of grad is (1[r==y] - p_r) x^T
            for (y, &py) in p.iter().enumerate() {
                let mut score = vec![0.0; d];
                for r in 0..m {
                    let coef = if r == y { 1.0 - p[r] } else { -p[r] };
                    for c in 0..n {
                        score[r * n + c] = coef * x[c];
                    }
                }
                for i in 0..d {
                    if score[i] == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        // s[i]*s[j] first: fp-commutative, keeps exact symmetry
                        fim[(i, j)] += score[i] * score[j] * py;
                    }
                }
            }
        }
        fim /= self.inputs.len() as f64;
        Ok(fim)
    }

    /// Mean exact categorical KL between the two models over the inputs.
    pub fn kl_between(&self, w: &WeightMatrix, w2: &WeightMatrix) -> Result<f64> {
        self.validate_against(w)?;
        self.validate_against(w2)?;
        let mut total = 0.0;
        for x in &self.inputs {
            let p = softmax(&logits(w, x));
            let q = softmax(&logits(w2, x));
            for (pi, qi) in p.iter().zip(&q) {
                if *pi > 0.0 {
                    total += pi * (pi.max(1e-300) / qi.max(1e-300)).ln();
                }
            }
        }
        Ok(total / self.inputs.len() as f64)
    }

    /// Loss delta `loss(w_hat) - loss(w)`, the desk-scale PPL-delta analogue.
    pub fn loss_delta(&self, w: &WeightMatrix, w_hat: &WeightMatrix) -> Result<f64> {
        Ok(self.loss(w_hat)? - self.loss(w)?)
    }

}

/// Generation knobs for the shipped seeded tasks.
#[derive(Debug, Clone)]
pub struct TaskParams {
    pub m: usize,
    pub n: usize,
    pub samples: usize,
    pub seed: u64,
    /// Per-row scale of the label-generating matrix; length m (cycled if
    /// shorter). Unequal scales create heterogeneous channel sensitivity.
    pub row_scales: Vec<f64>,
    /// The task weight is this fraction of the generating matrix, leaving a
    /// genuine calibration gradient pointing back toward it.
    pub weight_shrink: f64,
    /// Data split: 0 draws the calibration inputs/labels, 1 the holdout
    /// split, from independent streams over the same generating model.
    pub split: u64,
}

impl TaskParams {
    pub fn default_shape(m: usize, n: usize, samples: usize) -> Self {
        Self {
            m,
            n,
            samples,
            seed: 0,
            row_scales: vec![2.5, 0.3, 1.2, 0.1],
            weight_shrink: 0.45,
            split: 0,
        }
    }

    /// Same task with fresh inputs/labels from the holdout stream.
    pub fn holdout(&self) -> Self {
        Self {
            split: self.split + 1,
            ..self.clone()
        }
    }

    /// The default desk task: M=4, N=8, 256 standard-normal inputs.
    pub fn default_task(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default_shape(4, 8, 256)
        }
    }

    /// Larger, strongly anisotropic task where 2-bit quantization is lossy.
    pub fn heterogeneous_task(seed: u64) -> Self {
        Self {
            seed,
            row_scales: vec![
                0.8, 0.7, 0.6, 0.5, 0.12, 0.11, 0.1, 0.09, 0.08, 0.07, 0.06, 0.05, 0.05, 0.05,
                0.05, 0.05,
            ],
            weight_shrink: 0.45,
            ..Self::default_shape(16, 32, 2048)
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and seeded
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministically generates a task: anisotropic generating matrix,
/// standard-normal inputs, labels sampled from the generating model, and the
/// task weight shrunk away from it.
pub fn generate(params: &TaskParams) -> Result<ToyTask> {
    if params.m < 2 {
        return Err(Error::Validation(format!("M must be >= 2, got {}", params.m)));
    }
    if params.n == 0 || params.samples == 0 {
        return Err(Error::Validation("N and sample count must be >= 1".into()));
    }
    // generator stream depends only on the seed; the data stream also mixes
    // in the split, so calibration and holdout share one generating model
    let mut gen_rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut gen_data = Vec::with_capacity(params.m * params.n);
    for r in 0..params.m {
        let scale = params.row_scales[r % params.row_scales.len().max(1)];
        for _ in 0..params.n {
            gen_data.push(scale * standard_normal(&mut gen_rng));
        }
    }
    let generator = WeightMatrix::new(params.m, params.n, gen_data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(
        params
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(params.split.wrapping_add(1)),
    );
    let mut inputs = Vec::with_capacity(params.samples);
    let mut labels = Vec::with_capacity(params.samples);
    for _ in 0..params.samples {
        let x: Vec<f64> = (0..params.n).map(|_| standard_normal(&mut rng)).collect();
        let p = softmax(&logits(&generator, &x));
        let draw: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut label = params.m - 1;
        for (y, &py) in p.iter().enumerate() {
            acc += py;
            if draw < acc {
                label = y;
                break;
            }
        }
        inputs.push(x);
        labels.push(label);
    }

    let weight_data: Vec<f64> = generator
        .data()
        .iter()
        .map(|&v| v * params.weight_shrink)
        .collect();
    let weight = WeightMatrix::new(params.m, params.n, weight_data)?;
    Ok(ToyTask {
        weight,
        inputs,
        labels,
        rng_seed: params.seed,
    })
}

/// Inputs as an S x N matrix for RSQT persistence.
pub fn inputs_matrix(task: &ToyTask) -> Result<WeightMatrix> {
    let n = task.inputs[0].len();
    let data: Vec<f64> = task.inputs.iter().flatten().copied().collect();
    WeightMatrix::new(task.inputs.len(), n, data)
}
