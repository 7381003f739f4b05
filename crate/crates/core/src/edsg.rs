//! Projection-regularized grouped product quantization: reshape channels into
//! v-vectors, shift targets along the natural-gradient field, fit per-group
//! codebooks with seeded weighted k-means, encode indices, decode the matrix.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::{estimate_kronecker_fim, KroneckerFim, DEFAULT_RELATIVE_DAMPING};
use crate::tensorio::{GradientBundle, GroupBlock, QuantizedTensor, WeightMatrix};
use crate::wcsg::{build_profile, ChannelMetric, SensitivityProfile};

/// Metric used inside k-means distance computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    Euclidean,
    FisherDiagonal,
}

/// Pipeline configuration; JSON keys match the field names exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeConfig {
    pub vector_length: usize,
    pub group_count: usize,
    pub target_bits: f64,
    pub lambda: f64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
    pub metric_mode: MetricMode,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            vector_length: 6,
            group_count: 4,
            target_bits: 2.0,
            lambda: 0.05,
            kmeans_iters: 50,
            kmeans_tol: 1e-8,
            seed: 0,
            metric_mode: MetricMode::FisherDiagonal,
        }
    }
}

impl QuantizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vector_length == 0 {
            return Err(Error::Validation("vector_length must be >= 1".into()));
        }
        if self.group_count == 0 {
            return Err(Error::Validation("group_count must be >= 1".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Validation(format!("lambda must be >= 0: {}", self.lambda)));
        }
        if self.target_bits < 1.0 {
            return Err(Error::Validation(format!(
                "target_bits must be >= 1: {}",
                self.target_bits
            )));
        }
        Ok(())
    }
}

/// One v-vector cut from a channel row, with its quantization target.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorView {
    pub group: usize,
    pub channel: usize,
    pub position: usize,
    pub values: Vec<f64>,
    pub shifted_target: Vec<f64>,
}

/// K x v centroids plus the diagonal metric they were fitted under.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<Vec<f64>>,
    pub metric_weights: Vec<f64>,
}

pub fn weighted_dist2(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(w)
        .map(|((x, y), m)| m * (x - y) * (x - y))
        .sum()
}

/// Cuts each channel row into consecutive length-v chunks, zero-padding the
/// tail. Vector order: group order, then channel order within the group,
/// then position.
pub fn reshape_to_vectors(
    w: &WeightMatrix,
    groups: &[Vec<usize>],
    v: usize,
) -> Result<Vec<Vec<VectorView>>> {
    if v == 0 {
        return Err(Error::Validation("vector length must be >= 1".into()));
    }
    let mut seen = vec![false; w.rows()];
    let per_channel = w.cols().div_ceil(v);
    let mut out = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        let mut views = Vec::with_capacity(group.len() * per_channel);
        for &c in group {
            if c >= w.rows() || seen[c] {
                return Err(Error::Validation(format!(
                    "group {gi}: channel {c} out of range or repeated"
                )));
            }
            seen[c] = true;
            let row = w.row(c);
            for p in 0..per_channel {
                let mut values = vec![0.0; v];
                for j in 0..v {
                    let col = p * v + j;
                    if col < w.cols() {
                        values[j] = row[col];
                    }
                }
                views.push(VectorView {
                    group: gi,
                    channel: c,
                    position: p,
                    shifted_target: values.clone(),
                    values,
                });
            }
        }
        out.push(views);
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Validation("groups do not cover every channel".into()));
    }
    Ok(out)
}

/// Fills `shifted_target = values + lambda * field` chunk-wise; the padded
/// tail region of the field is zero by construction.
pub fn build_targets(
    groups: &mut [Vec<VectorView>],
    field: &WeightMatrix,
    lambda: f64,
) -> Result<()> {
    for views in groups.iter_mut() {
        for view in views.iter_mut() {
            if view.channel >= field.rows() {
                return Err(Error::Validation(format!(
                    "shift field rows {} do not cover channel {}",
                    field.rows(),
                    view.channel
                )));
            }
            let row = field.row(view.channel);
            let v = view.values.len();
            for j in 0..v {
                let col = view.position * v + j;
                let shift = if col < field.cols() { row[col] } else { 0.0 };
                view.shifted_target[j] = view.values[j] + lambda * shift;
            }
        }
    }
    Ok(())
}

/// Seeded k-means++ followed by Lloyd iterations under the diagonal metric.
/// Empty clusters are repaired by re-seeding at the farthest member of the
/// largest-inertia cluster. The objective never increases.
pub fn fit_codebook(
    targets: &[&[f64]],
    k: usize,
    metric_weights: &[f64],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<Codebook> {
    fit_codebook_traced(targets, k, metric_weights, iters, tol, seed).map(|(cb, _)| cb)
}

/// `fit_codebook` plus the assignment objective recorded at every Lloyd
/// iteration (empty for the k >= n shortcut).
pub fn fit_codebook_traced(
    targets: &[&[f64]],
    k: usize,
    metric_weights: &[f64],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    if targets.is_empty() {
        return Err(Error::Validation("no targets to cluster".into()));
    }
    if k == 0 {
        return Err(Error::Validation("codebook size must be >= 1".into()));
    }
    let v = targets[0].len();
    if metric_weights.len() != v || metric_weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
        return Err(Error::Validation("metric weights must be positive, length v".into()));
    }
    for t in targets {
        if t.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite target vector".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = targets.len();

    // k >= n is the lossless regime: each point becomes its own centroid and
    // surplus centroids duplicate the last point; no Lloyd pass needed
    if k >= n {
        let mut centroids: Vec<Vec<f64>> = targets.iter().map(|t| t.to_vec()).collect();
        centroids.resize(k, targets[n - 1].to_vec());
        return Ok((
            Codebook {
                centroids,
                metric_weights: metric_weights.to_vec(),
            },
            Vec::new(),
        ));
    }

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(targets[rng.gen_range(0..n)].to_vec());
    let mut d2: Vec<f64> = targets
        .iter()
        .map(|t| weighted_dist2(t, &centroids[0], metric_weights))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all points covered; duplicate a random point
            targets[rng.gen_range(0..n)].to_vec()
        } else {
            let mut draw = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if draw < d {
                    pick = i;
                    break;
                }
                draw -= d;
            }
            targets[pick].to_vec()
        };
        for (i, t) in targets.iter().enumerate() {
            d2[i] = d2[i].min(weighted_dist2(t, &next, metric_weights));
        }
        centroids.push(next);
    }

    let mut assign = vec![0usize; n];
    let mut objective = f64::INFINITY;
    let mut trace = Vec::new();
    for _ in 0..iters {
        // assignment step; ties go to the lowest centroid index
        let mut new_obj = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = weighted_dist2(t, &centroids[0], metric_weights);
            for (ci, c) in centroids.iter().enumerate().skip(1) {
                let d = weighted_dist2(t, c, metric_weights);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assign[i] = best;
            new_obj += best_d;
        }
        debug_assert!(
            new_obj <= objective * (1.0 + 1e-12) + 1e-300,
            "k-means objective increased: {objective} -> {new_obj}"
        );
        trace.push(new_obj);

        // update step: centroids are member means (per-dimension, so the
        // diagonal metric does not change the minimizer)
        let mut sums = vec![vec![0.0; v]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (i, t) in targets.iter().enumerate() {
            counts[assign[i]] += 1;
            for j in 0..v {
                sums[assign[i]][j] += t[j];
            }
        }
        for (ci, c) in centroids.iter_mut().enumerate() {
            if counts[ci] > 0 {
                for j in 0..v {
                    c[j] = sums[ci][j] / counts[ci] as f64;
                }
            }
        }

        // empty-cluster repair: re-seed at the farthest member of the
        // largest-inertia cluster
        let empty: Vec<usize> = (0..centroids.len()).filter(|&ci| counts[ci] == 0).collect();
        if !empty.is_empty() && n >= 1 {
            let mut inertia = vec![0.0; centroids.len()];
            for (i, t) in targets.iter().enumerate() {
                inertia[assign[i]] += weighted_dist2(t, &centroids[assign[i]], metric_weights);
            }
            for ci in empty {
                let donor = (0..centroids.len())
                    .max_by(|&a, &b| inertia[a].partial_cmp(&inertia[b]).unwrap())
                    .unwrap();
                let far = (0..n)
                    .filter(|&i| assign[i] == donor)
                    .max_by(|&a, &b| {
                        weighted_dist2(targets[a], &centroids[donor], metric_weights)
                            .partial_cmp(&weighted_dist2(
                                targets[b],
                                &centroids[donor],
                                metric_weights,
                            ))
                            .unwrap()
                            .then(b.cmp(&a))
                    });
                if let Some(far) = far {
                    centroids[ci] = targets[far].to_vec();
                    assign[far] = ci;
                    inertia[donor] -= weighted_dist2(targets[far], &centroids[donor], metric_weights);
                }
            }
        }

        let converged = objective.is_finite()
            && (objective - new_obj).abs() <= tol * objective.abs().max(1e-300);
        objective = new_obj;
        if converged {
            break;
        }
    }

    Ok((
        Codebook {
            centroids,
            metric_weights: metric_weights.to_vec(),
        },
        trace,
    ))
}

/// Nearest-centroid assignment of each vector's shifted target under the
/// codebook's diagonal metric; ties break toward the lowest centroid index.
pub fn encode(views: &[VectorView], codebook: &Codebook) -> Vec<u32> {
    views
        .iter()
        .map(|view| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, c) in codebook.centroids.iter().enumerate() {
                let d = weighted_dist2(&view.shifted_target, c, &codebook.metric_weights);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            best as u32
        })
        .collect()
}

/// Assembles the decoded matrix by placing each indexed centroid at its
/// channel/position and stripping the padding.
pub fn decode(q: &QuantizedTensor) -> Result<WeightMatrix> {
    q.validate()?;
    let v = q.vector_length;
    let per_channel = q.vectors_per_channel();
    let mut data = vec![0.0; q.rows * q.cols];
    for g in &q.groups {
        for (ci, &channel) in g.channel_indices.iter().enumerate() {
            for p in 0..per_channel {
                let idx = g.indices[ci * per_channel + p] as usize;
                let centroid = &g.codebook[idx * v..(idx + 1) * v];
                for j in 0..v {
                    let col = p * v + j;
                    if col < q.cols {
                        data[channel as usize * q.cols + col] = centroid[j];
                    }
                }
            }
        }
    }
    WeightMatrix::new(q.rows, q.cols, data)
}

pub const MAX_CODEBOOK: usize = 1 << 16;

/// `K_g = 2^round(b_g * v)` clamped to `[1, 2^16]`, so the index cost per
/// weight equals the group bit-width.
pub fn codebook_size(group_bits: f64, v: usize) -> usize {
    let exp = (group_bits * v as f64).round().max(0.0) as u32;
    if exp as usize >= 17 {
        MAX_CODEBOOK
    } else {
        (1usize << exp).clamp(1, MAX_CODEBOOK)
    }
}

/// Knobs for the ablation harness; `Default` is the full pipeline.
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOverrides {
    /// Force uniform per-channel bits (disables WCSG allocation) while
    /// keeping the sensitivity-derived group layout.
    pub force_uniform_bits: bool,
}

/// Full pipeline: FIM -> natural gradient -> channel energies -> bit
/// allocation -> grouping -> per-group codebook fit + encode.
pub fn quantize_matrix(
    w: &WeightMatrix,
    bundle: &GradientBundle,
    cfg: &QuantizeConfig,
) -> Result<(QuantizedTensor, SensitivityProfile)> {
    quantize_matrix_with(w, bundle, cfg, PipelineOverrides::default())
}

pub fn quantize_matrix_with(
    w: &WeightMatrix,
    bundle: &GradientBundle,
    cfg: &QuantizeConfig,
    overrides: PipelineOverrides,
) -> Result<(QuantizedTensor, SensitivityProfile)> {
    cfg.validate()?;
    if bundle.rows() != w.rows() || bundle.cols() != w.cols() {
        return Err(Error::Validation(format!(
            "gradient bundle {}x{} does not match weights {}x{}",
            bundle.rows(),
            bundle.cols(),
            w.rows(),
            w.cols()
        ))
        .at_stage("input"));
    }
    let group_count = cfg.group_count.min(w.rows());

    let fim = estimate_kronecker_fim(bundle, 0.0)
        .map_err(|e| e.at_stage("fim"))?
        .with_relative_damping(DEFAULT_RELATIVE_DAMPING);
    let fim = if fim.damping() > 0.0 {
        fim
    } else {
        fim.with_damping(1e-12) // all-zero gradients still need an invertible metric
    };
    let mean_grad = bundle.mean();
    let natgrad = fim
        .damped_inverse_apply(&mean_grad)
        .map_err(|e| e.at_stage("natural-gradient"))?;

    let metric = ChannelMetric::from_kronecker(&fim);
    let budget = cfg.target_bits * w.rows() as f64;
    let mut profile = build_profile(&mean_grad, &metric, budget, group_count)
        .map_err(|e| e.at_stage("wcsg"))?;
    if overrides.force_uniform_bits {
        let uniform = (budget / w.rows() as f64).round().max(1.0);
        for b in profile.bits.iter_mut() {
            *b = uniform;
        }
        for g in profile.groups.iter_mut() {
            g.b_g = uniform;
        }
    }

    // descent shift: the negative natural gradient field
    let shift = {
        let src = natgrad.matrix.data();
        let data: Vec<f64> = src.iter().map(|x| -x).collect();
        WeightMatrix::new(w.rows(), w.cols(), data).map_err(|e| e.at_stage("natural-gradient"))?
    };

    let layout: Vec<Vec<usize>> = profile.groups.iter().map(|g| g.channels.clone()).collect();
    let mut views =
        reshape_to_vectors(w, &layout, cfg.vector_length).map_err(|e| e.at_stage("reshape"))?;
    build_targets(&mut views, &shift, cfg.lambda).map_err(|e| e.at_stage("targets"))?;

    let v = cfg.vector_length;
    let pad = (v - w.cols() % v) % v;
    let mut blocks = Vec::with_capacity(views.len());
    for (gi, group_views) in views.iter().enumerate() {
        let k = codebook_size(profile.groups[gi].b_g, v);
        let weights = group_metric_weights(&fim, &profile.groups[gi].channels, w.cols(), v, cfg);
        let targets: Vec<&[f64]> = group_views
            .iter()
            .map(|view| view.shifted_target.as_slice())
            .collect();
        let codebook = fit_codebook(
            &targets,
            k,
            &weights,
            cfg.kmeans_iters,
            cfg.kmeans_tol,
            cfg.seed.wrapping_add(gi as u64).wrapping_mul(0x9e3779b97f4a7c15),
        )
        .map_err(|e| e.at_stage("codebook"))?;
        let indices = encode(group_views, &codebook);
        let mut flat = Vec::with_capacity(codebook.centroids.len() * v);
        for c in &codebook.centroids {
            flat.extend_from_slice(c);
        }
        blocks.push(GroupBlock {
            channel_indices: profile.groups[gi].channels.iter().map(|&c| c as u32).collect(),
            group_bits: profile.groups[gi].b_g as f32,
            codebook: flat,
            indices,
        });
    }

    let q = QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        vector_length: v,
        pad,
        mean_gradient_digest: bundle.digest(),
        groups: blocks,
    };
    q.validate().map_err(|e| e.at_stage("artifact"))?;
    Ok((q, profile))
}

/// Diagonal Fisher weights for one group: the Kronecker diagonal restricted
/// to a vector's coordinates, averaged over the group's channels and
/// positions so one codebook serves the whole group. Padded columns
/// contribute only damping.
fn group_metric_weights(
    fim: &KroneckerFim,
    channels: &[usize],
    cols: usize,
    v: usize,
    cfg: &QuantizeConfig,
) -> Vec<f64> {
    if cfg.metric_mode == MetricMode::Euclidean {
        return vec![1.0; v];
    }
    let d = fim.damping().max(1e-12);
    let per_channel = cols.div_ceil(v);
    let mut acc = vec![0.0; v];
    for &c in channels {
        let out_w = fim.f_out()[(c, c)] + d;
        for p in 0..per_channel {
            for j in 0..v {
                let col = p * v + j;
                let in_w = if col < cols { fim.f_in()[(col, col)] } else { 0.0 } + d;
                acc[j] += out_w * in_w;
            }
        }
    }
    let count = (channels.len() * per_channel) as f64;
    for a in acc.iter_mut() {
        *a = (*a / count).max(1e-300);
    }
    acc
}
