use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{mlp_forward, MlpParams, Mode};
use crate::tensor::Tensor;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of `split` rows whose argmax prediction equals the label.
pub fn test_accuracy(params: &MlpParams, x: &Tensor, y: &[usize], split: &[usize]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let probs = mlp_forward(params, &x.select_rows(split)?, Mode::Eval, None)?;
    let correct = split
        .iter()
        .enumerate()
        .filter(|&(r, &i)| argmax(probs.row(r)) == y[i])
        .count();
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateCurve {
    pub mean: Vec<f64>,
    /// Population standard deviation (divisor `n`).
    pub std: Vec<f64>,
    pub n_seeds: usize,
}

impl AggregateCurve {
    pub const CSV_HEADER: &'static str = "cycle,mean_acc,std_acc,n_seeds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (c, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.push_str(&format!("{c},{m},{s},{}\n", self.n_seeds));
        }
        out
    }
}

/// Per-cycle mean and population std across seeds. Values are summed in
/// sorted order, so the result does not depend on the order of `curves`.
pub fn aggregate_curves(curves: &[Vec<f64>]) -> Result<AggregateCurve> {
    let first = curves.first().ok_or(Error::Empty("curves"))?;
    if let Some(bad) = curves.iter().find(|c| c.len() != first.len()) {
        return Err(Error::LengthMismatch {
            what: "curve",
            expected: first.len(),
            got: bad.len(),
        });
    }
    let n = curves.len() as f64;
    let mut mean = Vec::with_capacity(first.len());
    let mut std = Vec::with_capacity(first.len());
    for c in 0..first.len() {
        let mut vals: Vec<f64> = curves.iter().map(|v| v[c]).collect();
        vals.sort_by(f64::total_cmp);
        let m = vals.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = vals.iter().map(|v| (v - m) * (v - m)).collect();
        sq.sort_by(f64::total_cmp);
        mean.push(m);
        std.push((sq.iter().sum::<f64>() / n).sqrt());
    }
    Ok(AggregateCurve {
        mean,
        std,
        n_seeds: curves.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    #[test]
    fn accuracy_counts() {
        // logits equal the features: class = argmax of the row
        let params = MlpParams::from_layers(
            Activation::Relu,
            0.0,
            vec![Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()],
            vec![Tensor::zeros(1, 2)],
        )
        .unwrap();
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 1.0],
            vec![0.5, 0.5],
        ])
        .unwrap();
        let all = [0, 1, 2, 3];
        assert_eq!(
            test_accuracy(&params, &x, &[0, 1, 0, 0], &all).unwrap(),
            1.0
        );
        assert_eq!(
            test_accuracy(&params, &x, &[1, 0, 1, 1], &all).unwrap(),
            0.0
        );
        assert_eq!(
            test_accuracy(&params, &x, &[0, 1, 1, 0], &all).unwrap(),
            0.75
        );
        assert!(test_accuracy(&params, &x, &[0; 4], &[]).is_err());
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn two_point_population_std() {
        let a = aggregate_curves(&[vec![0.9], vec![0.8]]).unwrap();
        assert!((a.mean[0] - 0.85).abs() < 1e-15);
        assert!((a.std[0] - 0.05).abs() < 1e-15);
        let single = aggregate_curves(&[vec![0.3, 0.7]]).unwrap();
        assert_eq!(single.std, vec![0.0, 0.0]);
        assert!(aggregate_curves(&[vec![0.1], vec![0.1, 0.2]]).is_err());
        assert!(aggregate_curves(&[]).is_err());
    }

    #[test]
    fn eight_values_match_exact_rational_oracle() {
        // thousandths, so mean and variance are exact rationals
        let milli: [i128; 8] = [912, 875, 990, 801, 934, 889, 956, 843];
        let curves: Vec<Vec<f64>> = milli.iter().map(|&m| vec![m as f64 / 1000.0]).collect();
        let a = aggregate_curves(&curves).unwrap();
        let sum: i128 = milli.iter().sum();
        // var * 64e6 = 8 Σ m^2 - (Σ m)^2, over n^2 = 64 and 1000^2
        let num = 8 * milli.iter().map(|m| m * m).sum::<i128>() - sum * sum;
        let mean = sum as f64 / 8000.0;
        let std = (num as f64 / 64.0e6).sqrt();
        assert!((a.mean[0] - mean).abs() < 1e-12);
        assert!((a.std[0] - std).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let curves = vec![
            vec![0.1, 0.7],
            vec![0.33, 0.2],
            vec![0.9, 0.4],
            vec![0.123, 0.456],
        ];
        let base = aggregate_curves(&curves).unwrap();
        let mut rev = curves.clone();
        rev.reverse();
        assert_eq!(aggregate_curves(&rev).unwrap(), base);
        rev.swap(0, 2);
        assert_eq!(aggregate_curves(&rev).unwrap(), base);
    }
}
