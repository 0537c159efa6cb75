//! Classification metrics: zero-one loss, ranked probability score,
//! confusion matrices and the plausibility analysis.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::predict::{Category, CategoryProbs};

/// Proportion of observations classified incorrectly.
pub fn zero_one_loss(preds: &[Category], obs: &[Category]) -> Result<f64> {
    if preds.len() != obs.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: obs.len() });
    }
    if preds.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let wrong = preds.iter().zip(obs).filter(|(p, o)| p != o).count();
    Ok(wrong as f64 / preds.len() as f64)
}

/// Ranked probability score for one forecast over the R = 4 ordered
/// categories:
///
/// ```text
/// RPS = 1/(R-1) · Σ_{i=1}^{R-1} ( Σ_{j<=i} (p_j − a_j) )²
/// ```
///
/// where `a` is the one-hot indicator of the observed category. Zero for a
/// point mass on the observed category; 1 when all mass sits three
/// categories away.
pub fn rps(p: &CategoryProbs, observed: Category) -> f64 {
    let probs = p.as_array();
    let mut cum = 0.0;
    let mut score = 0.0;
    for i in 0..3 {
        cum += probs[i] - if observed.index() == i { 1.0 } else { 0.0 };
        score += cum * cum;
    }
    score / 3.0
}

/// Mean RPS over rows: the model-level score.
pub fn mean_rps(probs: &[CategoryProbs], obs: &[Category]) -> Result<f64> {
    if probs.len() != obs.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: obs.len() });
    }
    if probs.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    Ok(probs.iter().zip(obs).map(|(p, &o)| rps(p, o)).sum::<f64>() / probs.len() as f64)
}

/// 4×4 confusion counts indexed `(observed, predicted)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[Category], obs: &[Category]) -> Result<ConfusionMatrix> {
        if preds.len() != obs.len() {
            return Err(Error::LengthMismatch { left: preds.len(), right: obs.len() });
        }
        let mut m = ConfusionMatrix::default();
        for (p, o) in preds.iter().zip(obs) {
            m.counts[o.index()][p.index()] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return f64::NAN;
        }
        self.trace() as f64 / t as f64
    }

    /// Rows normalized to proportions; a row with no observations stays
    /// all zero.
    pub fn row_normalized(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            let row_total: u64 = self.counts[i].iter().sum();
            if row_total > 0 {
                for j in 0..4 {
                    out[i][j] = self.counts[i][j] as f64 / row_total as f64;
                }
            }
        }
        out
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..4 {
            for j in 0..4 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

/// Confusion matrix in the observed-by-predicted orientation.
pub fn confusion(preds: &[Category], obs: &[Category]) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_pairs(preds, obs)
}

/// For every threshold `q` and category `c`: the fraction of rows observed
/// in `c` whose assigned probability for `c` is at least `q`. Categories
/// with no observed rows report NaN.
pub fn plausibility_curve(
    probs: &[CategoryProbs],
    obs: &[Category],
    thresholds: &[f64],
) -> Result<Vec<[f64; 4]>> {
    if probs.len() != obs.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: obs.len() });
    }
    for &q in thresholds {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::BadConfig {
                detail: alloc::format!("plausibility threshold must lie in (0,1), got {q}"),
            });
        }
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &q in thresholds {
        let mut row = [f64::NAN; 4];
        for c in Category::ALL {
            let total = obs.iter().filter(|&&o| o == c).count();
            if total == 0 {
                continue;
            }
            let plausible = probs
                .iter()
                .zip(obs)
                .filter(|(p, &o)| o == c && p.get(c) >= q)
                .count();
            row[c.index()] = plausible as f64 / total as f64;
        }
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_one_loss_basics() {
        use Category::*;
        let a = vec![Rest, Low, Medium, High, Rest];
        assert_eq!(zero_one_loss(&a, &a).unwrap(), 0.0);
        let b = vec![Low, Rest, High, Medium, Low];
        assert_eq!(zero_one_loss(&a, &b).unwrap(), 1.0);
        // 2 wrong of 5 -> 0.4, the scale the pooled score is reported on.
        let c = vec![Rest, Low, Medium, Medium, Low];
        assert_eq!(zero_one_loss(&c, &a).unwrap(), 0.4);
        assert!(zero_one_loss(&a[..2], &b).is_err());
        assert!(zero_one_loss(&[], &[]).is_err());
    }

    #[test]
    fn rps_perfect_forecast_is_zero() {
        for c in Category::ALL {
            assert_eq!(rps(&CategoryProbs::point_mass(c), c), 0.0);
        }
    }

    #[test]
    fn rps_uniform_forecast_against_rest() {
        let uniform = CategoryProbs::from_array([0.25; 4]);
        let v = rps(&uniform, Category::Rest);
        // (1/3)·[(-3/4)² + (-1/2)² + (-1/4)²] = 7/24.
        assert!((v - 0.2916666666666667).abs() < 1e-12);
    }

    #[test]
    fn rps_displaced_point_masses_are_ordered() {
        let one = rps(&CategoryProbs::point_mass(Category::Low), Category::Rest);
        let two = rps(&CategoryProbs::point_mass(Category::Medium), Category::Rest);
        let three = rps(&CategoryProbs::point_mass(Category::High), Category::Rest);
        assert!((one - 1.0 / 3.0).abs() < 1e-15);
        assert!((two - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(three, 1.0);
        assert!(one < two && two < three);
    }

    #[test]
    fn rps_stays_in_unit_interval() {
        let mut r = crate::rng::stream_rng(8, 0);
        use rand::Rng;
        for _ in 0..1000 {
            let raw: [f64; 4] = [r.random(), r.random(), r.random(), r.random()];
            let total: f64 = raw.iter().sum();
            let p = CategoryProbs::from_array([
                raw[0] / total,
                raw[1] / total,
                raw[2] / total,
                raw[3] / total,
            ]);
            let c = Category::from_index((r.random::<f64>() * 4.0) as usize % 4);
            let v = rps(&p, c);
            assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn confusion_identities() {
        use Category::*;
        let obs = vec![Rest, Rest, Low, Medium, High, High, Low, Medium];
        let preds = vec![Rest, Low, Low, Medium, High, Medium, Rest, Medium];
        let m = confusion(&preds, &obs).unwrap();
        // Hand tally: rows observed, columns predicted.
        assert_eq!(m.counts[0], [1, 1, 0, 0]);
        assert_eq!(m.counts[1], [1, 1, 0, 0]);
        assert_eq!(m.counts[2], [0, 0, 2, 0]);
        assert_eq!(m.counts[3], [0, 0, 1, 1]);
        let loss = zero_one_loss(&preds, &obs).unwrap();
        assert!((loss - (1.0 - m.trace() as f64 / m.total() as f64)).abs() < 1e-15);
        // Row normalization sums to one on non-empty rows.
        let rn = m.row_normalized();
        for row in rn {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_single_observation() {
        let m = confusion(&[Category::High], &[Category::Low]).unwrap();
        assert_eq!(m.counts[1][3], 1);
        assert_eq!(m.total(), 1);
        // Perfect predictions give the identity row-normalized matrix.
        use Category::*;
        let obs = vec![Rest, Low, Medium, High];
        let m = confusion(&obs, &obs).unwrap();
        let rn = m.row_normalized();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(rn[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn plausibility_thresholds_and_monotonicity() {
        use Category::*;
        let probs = vec![
            CategoryProbs::from_array([0.6, 0.3, 0.05, 0.05]),
            CategoryProbs::from_array([0.1, 0.5, 0.3, 0.1]),
            CategoryProbs::from_array([0.3, 0.4, 0.2, 0.1]),
        ];
        let obs = vec![Rest, Low, Rest];
        let grid: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
        let curves = plausibility_curve(&probs, &obs, &grid).unwrap();
        // Small thresholds count everything.
        assert_eq!(curves[0][0], 1.0);
        assert_eq!(curves[0][1], 1.0);
        // Monotone non-increasing per category.
        for c in 0..2 {
            for w in curves.windows(2) {
                assert!(w[1][c] <= w[0][c] + 1e-12);
            }
        }
        // Empty categories report NaN.
        assert!(curves[0][3].is_nan());
        assert!(plausibility_curve(&probs, &obs, &[0.0]).is_err());
        assert!(plausibility_curve(&probs, &obs, &[1.0]).is_err());
    }
}
