//! Split-conformal thresholds over terminal trajectory scores.
//!
//! With `M` calibration scores from successful rollouts, the threshold is
//! the `ceil((M + 1)(1 - delta))`-th smallest score. For an exchangeable
//! test rollout the probability that its terminal score exceeds the
//! threshold is at most `delta`, and because cumulative scores never
//! decrease, that bounds the probability of a false alarm at any step.
//! When the rank exceeds `M` no finite threshold keeps the guarantee and the
//! threshold is `+inf`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, invalid, Result};

pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(serialize_with = "ser_gamma", deserialize_with = "de_gamma")]
    pub gamma: f64,
    pub delta: f64,
    pub m: usize,
    pub quantile_index: usize,
    /// Sorted calibration scores.
    pub terminal_scores: Vec<f64>,
}

impl CalibrationResult {
    /// `true` when the threshold is infinite and the detector can never fire.
    pub fn is_vacuous(&self) -> bool {
        self.gamma == f64::INFINITY
    }
}

fn ser_gamma<S: Serializer>(gamma: &f64, s: S) -> Result<S::Ok, S::Error> {
    if gamma.is_infinite() && *gamma > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*gamma)
    }
}

fn de_gamma<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Gamma {
        Number(f64),
        Text(String),
    }
    match Gamma::deserialize(d)? {
        Gamma::Number(v) => Ok(v),
        Gamma::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Gamma::Text(t) => Err(serde::de::Error::custom(format!("invalid gamma `{t}`"))),
    }
}

/// `ceil((m + 1)(1 - delta))`, robust to the product landing a rounding
/// error above an integer.
pub fn quantile_index(m: usize, delta: f64) -> usize {
    let raw = (m as f64 + 1.0) * (1.0 - delta);
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        raw.ceil() as usize
    }
}

pub fn conformal_threshold(terminal_scores: &[f64], delta: f64) -> Result<CalibrationResult> {
    if terminal_scores.is_empty() {
        return Err(invalid("calibration needs at least one terminal score"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if terminal_scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("calibration scores must be finite"));
    }
    let mut sorted = terminal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let index = quantile_index(m, delta).max(1);
    let gamma = if index <= m { sorted[index - 1] } else { f64::INFINITY };
    Ok(CalibrationResult { gamma, delta, m, quantile_index: index, terminal_scores: sorted })
}

/// Fraction of scores strictly above `gamma`.
pub fn empirical_fpr(nominal_terminal_scores: &[f64], gamma: f64) -> Result<f64> {
    if nominal_terminal_scores.is_empty() {
        return Err(invalid("empirical FPR needs at least one score"));
    }
    if nominal_terminal_scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("scores must be finite"));
    }
    let exceed = nominal_terminal_scores.iter().filter(|&&s| s > gamma).count();
    Ok(exceed as f64 / nominal_terminal_scores.len() as f64)
}

/// Mean and ridge-regularized inverse covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` inverse of the ridged covariance.
    pub covariance_inverse: Vec<f64>,
}

/// Smallest ridge applied when the covariance trace vanishes.
const RIDGE_FLOOR: f64 = 1e-8;

impl EmbeddingStats {
    /// Fits mean and covariance (`n - 1` denominator, zero for a single
    /// point) plus a ridge of `1e-6 * trace / dim`.
    pub fn fit<'a, I>(embeddings: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let points: Vec<&[f64]> = embeddings.into_iter().collect();
        let first = points.first().ok_or_else(|| invalid("no embeddings to fit"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(invalid("embeddings must have at least one dimension"));
        }
        for p in &points {
            check_dim(dim, p.len())?;
        }
        let n = points.len() as f64;
        let mut mean = DVector::<f64>::zeros(dim);
        for p in &points {
            mean += DVector::from_column_slice(p);
        }
        mean /= n;
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for p in &points {
            let c = DVector::from_column_slice(p) - &mean;
            cov += &c * c.transpose();
        }
        if points.len() > 1 {
            cov /= n - 1.0;
        }
        let ridge = (1e-6 * cov.trace() / dim as f64).max(RIDGE_FLOOR);
        for i in 0..dim {
            cov[(i, i)] += ridge;
        }
        let inverse = cov
            .cholesky()
            .ok_or_else(|| invalid("embedding covariance is not positive definite"))?
            .inverse();
        // Symmetrize against rounding in the inverse.
        let inverse = (&inverse + inverse.transpose()) * 0.5;
        Ok(Self {
            mean: mean.as_slice().to_vec(),
            covariance_inverse: inverse.transpose().as_slice().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn inverse_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance_inverse)
    }
}

/// For each trajectory, embedding statistics fit on every other trajectory.
pub fn leave_trajectory_out_stats(embeddings_by_trajectory: &[Vec<Vec<f64>>]) -> Result<Vec<EmbeddingStats>> {
    if embeddings_by_trajectory.len() < 2 {
        return Err(invalid("leave-trajectory-out needs at least two trajectories"));
    }
    let mut points = embeddings_by_trajectory.iter().flatten();
    if let Some(first) = points.next() {
        for p in points {
            check_dim(first.len(), p.len())?;
        }
    }
    (0..embeddings_by_trajectory.len())
        .map(|held_out| {
            EmbeddingStats::fit(
                embeddings_by_trajectory
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != held_out)
                    .flat_map(|(_, traj)| traj.iter().map(Vec::as_slice)),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_49_of_50() {
        let scores: Vec<f64> = (1..=50).map(f64::from).collect();
        let cal = conformal_threshold(&scores, 0.05).unwrap();
        assert_eq!(cal.quantile_index, 49);
        assert_eq!(cal.gamma, 49.0);
        assert_eq!(cal.m, 50);
    }

    #[test]
    fn small_calibration_set_is_vacuous() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        let cal = conformal_threshold(&scores, 0.05).unwrap();
        assert_eq!(cal.quantile_index, 11);
        assert_eq!(cal.gamma, f64::INFINITY);
        assert!(cal.is_vacuous());
    }

    #[test]
    fn exact_integer_products_are_not_bumped() {
        // 20 * 0.95 = 19 exactly in real arithmetic
        assert_eq!(quantile_index(19, 0.05), 19);
        assert_eq!(quantile_index(9, 0.1), 9);
        assert_eq!(quantile_index(50, 0.05), 49);
    }

    #[test]
    fn ties_occupy_consecutive_ranks() {
        let cal = conformal_threshold(&[3.0, 1.0, 3.0, 3.0, 2.0], 0.5).unwrap();
        // ceil(6 * 0.5) = 3 -> third smallest of {1,2,3,3,3}
        assert_eq!(cal.quantile_index, 3);
        assert_eq!(cal.gamma, 3.0);
        assert_eq!(cal.terminal_scores, vec![1.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn threshold_errors() {
        assert!(conformal_threshold(&[], 0.05).is_err());
        assert!(conformal_threshold(&[1.0], 0.0).is_err());
        assert!(conformal_threshold(&[1.0], 1.0).is_err());
        assert!(conformal_threshold(&[f64::NAN], 0.1).is_err());
    }

    #[test]
    fn fpr_counts_strict_exceedance() {
        assert_eq!(empirical_fpr(&[1.0, 2.0], 3.0).unwrap(), 0.0);
        assert_eq!(empirical_fpr(&[1.0, 2.0, 3.0, 4.0], 3.0).unwrap(), 0.25);
        assert_eq!(empirical_fpr(&[1e300], f64::INFINITY).unwrap(), 0.0);
        assert!(empirical_fpr(&[], 1.0).is_err());
    }

    #[test]
    fn gamma_serializes_inf_as_string() {
        let cal = conformal_threshold(&[1.0, 2.0], 0.05).unwrap();
        let json = serde_json::to_string(&cal).unwrap();
        assert!(json.contains("\"gamma\":\"inf\""));
        let back: CalibrationResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cal);
        let finite = conformal_threshold(&[1.0, 2.0], 0.5).unwrap();
        let back: CalibrationResult = serde_json::from_str(&serde_json::to_string(&finite).unwrap()).unwrap();
        assert_eq!(back.gamma, 2.0);
    }

    #[test]
    fn lto_uses_only_other_trajectories() {
        let a = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let b = vec![vec![10.0, 10.0], vec![12.0, 14.0], vec![11.0, 9.0]];
        let stats = leave_trajectory_out_stats(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(stats[0], EmbeddingStats::fit(b.iter().map(Vec::as_slice)).unwrap());
        assert_eq!(stats[1], EmbeddingStats::fit(a.iter().map(Vec::as_slice)).unwrap());
        assert_eq!(stats[0].mean, vec![11.0, 11.0]);
    }

    #[test]
    fn lto_is_blind_to_held_out_points() {
        let base = vec![
            vec![vec![0.0, 1.0]],
            vec![vec![1.0, 0.5], vec![0.2, 0.1]],
            vec![vec![3.0, -1.0]],
        ];
        let mut perturbed = base.clone();
        perturbed[1] = vec![vec![1e3, -1e3]];
        let s0 = leave_trajectory_out_stats(&base).unwrap();
        let s1 = leave_trajectory_out_stats(&perturbed).unwrap();
        assert_eq!(s0[1], s1[1]);
        assert_ne!(s0[0], s1[0]);
    }

    #[test]
    fn identical_embeddings_get_a_ridge() {
        let traj = vec![vec![1.0, 2.0, 3.0]; 4];
        let stats = leave_trajectory_out_stats(&[traj.clone(), traj]).unwrap();
        assert!(stats[0].covariance_inverse.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lto_errors() {
        assert!(leave_trajectory_out_stats(&[vec![vec![1.0]]]).is_err());
        assert!(leave_trajectory_out_stats(&[vec![vec![1.0]], vec![vec![1.0, 2.0]]]).is_err());
    }
}
