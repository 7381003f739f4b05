//! Per-channel curvature energy, budgeted bit allocation and
//! sensitivity-ordered channel grouping.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fim::KroneckerFim;
use crate::tensorio::WeightMatrix;

/// Per-channel restriction of the Kronecker metric:
/// `F_c = (f_out_diag[c] + d) * (F_I + d I)`.
#[derive(Debug, Clone)]
pub struct ChannelMetric {
    pub f_in: DMatrix<f64>,
    pub f_out_diag: Vec<f64>,
    pub damping: f64,
}

impl ChannelMetric {
    pub fn from_kronecker(fim: &KroneckerFim) -> Self {
        Self {
            f_in: fim.f_in().clone(),
            f_out_diag: fim.f_out().diagonal().iter().copied().collect(),
            damping: fim.damping(),
        }
    }
}

/// One sensitivity group: member channels plus the unified bit-width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Group {
    pub channels: Vec<usize>,
    pub b_g: f64,
}

/// Everything WCSG derives from a gradient bundle for one weight matrix.
#[derive(Debug, Clone, Serialize)]
pub struct SensitivityProfile {
    pub energies: Vec<f64>,
    pub shifted: Vec<f64>,
    pub bits: Vec<f64>,
    pub budget: f64,
    pub groups: Vec<Group>,
    /// Set when all energies were zero and the allocation fell back to uniform.
    pub uniform_fallback: bool,
}

/// `I_c = 1/2 * g_c^T F_c^{-1} g_c` with the diagonal-output channel metric.
pub fn channel_sensitivity(mean_grad: &WeightMatrix, metric: &ChannelMetric) -> Result<Vec<f64>> {
    let m = mean_grad.rows();
    let n = mean_grad.cols();
    if metric.f_in.nrows() != n || metric.f_out_diag.len() != m {
        return Err(Error::Validation(format!(
            "metric shapes ({} diag, {}x{} F_I) do not match gradient {}x{}",
            metric.f_out_diag.len(),
            metric.f_in.nrows(),
            metric.f_in.ncols(),
            m,
            n
        )));
    }
    let mut damped = metric.f_in.clone();
    for i in 0..n {
        damped[(i, i)] += metric.damping;
    }
    let chol = Cholesky::new(damped).ok_or_else(|| {
        Error::Numeric(format!(
            "F_I + {:.3e} I is singular; increase damping",
            metric.damping
        ))
    })?;
    let mut energies = Vec::with_capacity(m);
    for c in 0..m {
        let g = DVector::from_row_slice(mean_grad.row(c));
        let solved = chol.solve(&g);
        let quad = g.dot(&solved);
        let scale = metric.f_out_diag[c] + metric.damping;
        if scale <= 0.0 {
            return Err(Error::Numeric(format!(
                "channel {c}: non-positive output curvature {scale}"
            )));
        }
        energies.push((0.5 * quad / scale).max(0.0));
    }
    Ok(energies)
}

/// Result of `allocate_bits`.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAllocation {
    pub bits: Vec<f64>,
    pub uniform_fallback: bool,
}

/// Shift energies by +1 and allocate `b_c = B * log2(I_c) / sum(log2 I_c)`.
///
/// Integer mode rounds and repairs to the exact budget: the residual is
/// absorbed by the channels with the largest (r > 0) or smallest (r < 0)
/// fractional parts of the raw allocation, every bit-count is clamped to
/// >= 1, and the final bit multiset is assigned to channels in descending
/// energy order so monotonicity survives the repair.
pub fn allocate_bits(energies: &[f64], budget: f64, integer_mode: bool) -> Result<BitAllocation> {
    let c = energies.len();
    if c == 0 {
        return Err(Error::Validation("no channels to allocate".into()));
    }
    if budget <= 0.0 {
        return Err(Error::Validation(format!("budget must be > 0: {budget}")));
    }
    if let Some(&e) = energies.iter().find(|&&e| e < 0.0 || !e.is_finite()) {
        return Err(Error::Validation(format!("bad channel energy {e}")));
    }
    let logs: Vec<f64> = energies.iter().map(|&e| (e + 1.0).log2()).collect();
    let log_sum: f64 = logs.iter().sum();

    if log_sum == 0.0 {
        // all energies zero: uniform fallback with a warning marker
        let bits = if integer_mode {
            let b = budget.round() as i64;
            let base = b / c as i64;
            let extra = (b - base * c as i64) as usize;
            (0..c)
                .map(|i| (base + if i < extra { 1 } else { 0 }).max(1) as f64)
                .collect()
        } else {
            vec![budget / c as f64; c]
        };
        return Ok(BitAllocation {
            bits,
            uniform_fallback: true,
        });
    }

    let raw: Vec<f64> = logs.iter().map(|&l| budget * l / log_sum).collect();
    if !integer_mode {
        return Ok(BitAllocation {
            bits: raw,
            uniform_fallback: false,
        });
    }

    let total = budget.round() as i64;
    let mut bits: Vec<i64> = raw.iter().map(|&r| (r.round() as i64).max(1)).collect();
    let mut residual = total - bits.iter().sum::<i64>();

    // order channels by fractional part for residual absorption
    let frac = |i: usize| raw[i] - raw[i].floor();
    let mut order: Vec<usize> = (0..c).collect();
    while residual != 0 {
        if residual > 0 {
            order.sort_by(|&a, &b| frac(b).partial_cmp(&frac(a)).unwrap().then(a.cmp(&b)));
            let take = residual.min(c as i64) as usize;
            for &i in order.iter().take(take) {
                bits[i] += 1;
            }
            residual -= take as i64;
        } else {
            order.sort_by(|&a, &b| frac(a).partial_cmp(&frac(b)).unwrap().then(a.cmp(&b)));
            let mut absorbed = 0i64;
            for &i in &order {
                if absorbed == -residual {
                    break;
                }
                if bits[i] > 1 {
                    bits[i] -= 1;
                    absorbed += 1;
                }
            }
            if absorbed == 0 {
                return Err(Error::Infeasible(format!(
                    "budget {total} below the 1-bit floor for {c} channels"
                )));
            }
            residual += absorbed;
        }
    }

    // re-assign the repaired multiset in descending-energy order
    let mut by_energy: Vec<usize> = (0..c).collect();
    by_energy.sort_by(|&a, &b| {
        energies[b]
            .partial_cmp(&energies[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut sorted_bits = bits.clone();
    sorted_bits.sort_unstable_by(|a, b| b.cmp(a));
    let mut out = vec![0.0; c];
    for (rank, &ch) in by_energy.iter().enumerate() {
        out[ch] = sorted_bits[rank] as f64;
    }
    Ok(BitAllocation {
        bits: out,
        uniform_fallback: false,
    })
}

/// The descending-energy order used for grouping: ties break toward the
/// lower channel index.
pub fn sensitivity_order(energies: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| {
        energies[b]
            .partial_cmp(&energies[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Sorts channels by descending energy, partitions them into `group_count`
/// uniform chunks of size ceil(M/G), and assigns each group the rounded mean
/// of its members' bits, repaired so the weighted group total matches the
/// per-channel total as closely as integer group widths allow.
pub fn group_channels(energies: &[f64], bits: &[f64], group_count: usize) -> Result<Vec<Group>> {
    let m = energies.len();
    if bits.len() != m {
        return Err(Error::Validation(format!(
            "{} energies but {} bit entries",
            m,
            bits.len()
        )));
    }
    if group_count == 0 || group_count > m {
        return Err(Error::Validation(format!(
            "group count {group_count} outside 1..={m}"
        )));
    }
    let order = sensitivity_order(energies);
    let chunk = m.div_ceil(group_count);
    let mut groups: Vec<Group> = Vec::new();
    for g in 0..group_count {
        let lo = g * chunk;
        if lo >= m {
            break; // trailing chunks can be empty when G does not divide M
        }
        let hi = ((g + 1) * chunk).min(m);
        let members: Vec<usize> = order[lo..hi].to_vec();
        let mean = members.iter().map(|&c| bits[c]).sum::<f64>() / members.len() as f64;
        groups.push(Group {
            channels: members,
            b_g: mean.round().max(1.0),
        });
    }

    // repair the weighted total toward the channel budget
    let budget = bits.iter().sum::<f64>().round() as i64;
    let total = |gs: &[Group]| {
        gs.iter()
            .map(|g| g.b_g as i64 * g.channels.len() as i64)
            .sum::<i64>()
    };
    let mut residual = budget - total(&groups);
    let count = groups.len();
    while residual != 0 {
        let mut changed = false;
        if residual > 0 {
            for gi in 0..count {
                let sz = groups[gi].channels.len() as i64;
                if sz <= residual {
                    groups[gi].b_g += 1.0;
                    residual -= sz;
                    changed = true;
                }
            }
        } else {
            for gi in (0..count).rev() {
                let sz = groups[gi].channels.len() as i64;
                if sz <= -residual && groups[gi].b_g > 1.0 {
                    groups[gi].b_g -= 1.0;
                    residual += sz;
                    changed = true;
                }
            }
        }
        if !changed {
            break; // leftover smaller than any adjustable group
        }
    }
    // sort member ids ascending; group order itself stays sensitivity-ranked
    for g in groups.iter_mut() {
        g.channels.sort_unstable();
    }
    Ok(groups)
}

/// `sum_c (I_c + 1) * 2^(-2 b_c)`, the sensitivity-weighted distortion.
pub fn global_distortion(energies: &[f64], bits: &[f64]) -> Result<f64> {
    if energies.len() != bits.len() {
        return Err(Error::Validation(format!(
            "{} energies vs {} bits",
            energies.len(),
            bits.len()
        )));
    }
    Ok(energies
        .iter()
        .zip(bits)
        .map(|(&e, &b)| (e + 1.0) * (-2.0 * b).exp2())
        .sum())
}

/// Bundles sensitivity analysis into one profile: energies from the metric,
/// integer bit allocation against `budget`, then grouping.
pub fn build_profile(
    mean_grad: &WeightMatrix,
    metric: &ChannelMetric,
    budget: f64,
    group_count: usize,
) -> Result<SensitivityProfile> {
    let energies = channel_sensitivity(mean_grad, metric)?;
    let alloc = allocate_bits(&energies, budget, true)?;
    let groups = group_channels(&energies, &alloc.bits, group_count)?;
    Ok(SensitivityProfile {
        shifted: energies.iter().map(|&e| e + 1.0).collect(),
        bits: alloc.bits,
        budget,
        groups,
        uniform_fallback: alloc.uniform_fallback,
        energies,
    })
}

impl SensitivityProfile {
    /// Bits per weight implied by the group widths.
    pub fn avg_bits(&self) -> f64 {
        let m: usize = self.groups.iter().map(|g| g.channels.len()).sum();
        self.groups
            .iter()
            .map(|g| g.b_g * g.channels.len() as f64)
            .sum::<f64>()
            / m as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_metric_pythagorean_energy() {
        let metric = ChannelMetric {
            f_in: DMatrix::identity(2, 2),
            f_out_diag: vec![1.0],
            damping: 0.0,
        };
        let g = WeightMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let e = channel_sensitivity(&g, &metric).unwrap();
        assert!((e[0] - 12.5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_zero_energy() {
        let metric = ChannelMetric {
            f_in: DMatrix::identity(3, 3),
            f_out_diag: vec![2.0, 5.0],
            damping: 1e-3,
        };
        let g = WeightMatrix::zeros(2, 3);
        let e = channel_sensitivity(&g, &metric).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
    }

    #[test]
    fn uniform_energies_uniform_bits() {
        let a = allocate_bits(&[1.0, 1.0, 1.0, 1.0], 8.0, true).unwrap();
        assert_eq!(a.bits, vec![2.0, 2.0, 2.0, 2.0]);
        assert!(!a.uniform_fallback);
    }

    #[test]
    fn log_proportional_worked_example() {
        // shifted [4,2], logs [2,1] -> 6 * [2/3, 1/3] = [4, 2]
        let a = allocate_bits(&[3.0, 1.0], 6.0, true).unwrap();
        assert_eq!(a.bits, vec![4.0, 2.0]);
        let real = allocate_bits(&[3.0, 1.0], 6.0, false).unwrap();
        assert!((real.bits[0] - 4.0).abs() < 1e-12);
        assert!((real.bits[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_energies_uniform_fallback() {
        let a = allocate_bits(&[0.0, 0.0], 4.0, true).unwrap();
        assert_eq!(a.bits, vec![2.0, 2.0]);
        assert!(a.uniform_fallback);
    }

    #[test]
    fn integer_budget_conserved_and_monotone() {
        let energies = [9.0, 0.4, 3.3, 0.1, 7.7];
        let a = allocate_bits(&energies, 13.0, true).unwrap();
        assert_eq!(a.bits.iter().sum::<f64>(), 13.0);
        for i in 0..energies.len() {
            for j in 0..energies.len() {
                if energies[i] >= energies[j] {
                    assert!(a.bits[i] >= a.bits[j], "{:?} vs {energies:?}", a.bits);
                }
            }
        }
    }

    #[test]
    fn group_single_group_means_all() {
        let groups = group_channels(&[5.0, 3.0, 2.0, 1.0], &[3.0, 2.0, 2.0, 1.0], 1).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].b_g, 2.0);
        assert_eq!(groups[0].channels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn group_identity_partition() {
        let bits = [3.0, 2.0, 2.0, 1.0];
        let energies = [5.0, 3.0, 2.0, 1.0];
        let groups = group_channels(&energies, &bits, 4).unwrap();
        assert_eq!(groups.len(), 4);
        for g in &groups {
            assert_eq!(g.channels.len(), 1);
            assert_eq!(g.b_g, bits[g.channels[0]]);
        }
    }

    #[test]
    fn group_budget_conservation_example() {
        // M=6, G=2, pre-sorted energies; totals 9 + 3 = 12 without repair
        let energies = [5.0, 4.0, 3.0, 2.0, 1.0, 0.0];
        let bits = [3.0, 3.0, 2.0, 2.0, 1.0, 1.0];
        let groups = group_channels(&energies, &bits, 2).unwrap();
        assert_eq!(groups[0].channels, vec![0, 1, 2]);
        assert_eq!(groups[0].b_g, 3.0);
        assert_eq!(groups[1].channels, vec![3, 4, 5]);
        assert_eq!(groups[1].b_g, 1.0);
        let total: f64 = groups
            .iter()
            .map(|g| g.b_g * g.channels.len() as f64)
            .sum();
        assert_eq!(total, 12.0);
    }

    #[test]
    fn too_many_groups_rejected() {
        assert!(group_channels(&[1.0, 2.0], &[1.0, 1.0], 3).is_err());
    }

    #[test]
    fn distortion_arithmetic() {
        let d = global_distortion(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        let tiny = global_distortion(&[0.0, 0.0], &[30.0, 30.0]).unwrap();
        assert!(tiny <= 2.0 * 2f64.powi(-58));
    }

    #[test]
    fn scale_invariance_of_ordering() {
        let energies = [4.0, 0.3, 2.2, 9.9];
        let scaled: Vec<f64> = energies.iter().map(|e| e * 37.5).collect();
        assert_eq!(sensitivity_order(&energies), sensitivity_order(&scaled));
    }
}
