use ndarray::Array2;
use statrs::function::erf::erf_inv;

use crate::error::{Error, Result};

/// Default number of confidence levels on the uniform grid `k / (n - 1)`.
pub const CALIBRATION_LEVELS: usize = 100;

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.len() < 2 {
        return Err(Error::Shape(format!(
            "r_squared needs two equal lists of length >= 2, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("ground truth is constant".into()));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

fn check_inputs(truth: &[f64], means: &[f64], sigmas: &[f64], levels: usize) -> Result<()> {
    if truth.len() != means.len() || truth.len() != sigmas.len() || truth.is_empty() {
        return Err(Error::Shape(
            "truth, means and sigmas must be non-empty and equally long".into(),
        ));
    }
    if levels < 2 {
        return Err(Error::Config(
            "at least two confidence levels are needed".into(),
        ));
    }
    if sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("every sigma must be positive".into()));
    }
    Ok(())
}

/// Empirical coverage of central Gaussian intervals at `levels` uniform
/// confidence levels from 0 to 1.
pub fn calibration_curve(
    truth: &[f64],
    means: &[f64],
    sigmas: &[f64],
    levels: usize,
) -> Result<Vec<(f64, f64)>> {
    check_inputs(truth, means, sigmas, levels)?;
    // standardized absolute errors, sorted, so each level is one binary search
    let mut scores: Vec<f64> = truth
        .iter()
        .zip(means)
        .zip(sigmas)
        .map(|((y, m), s)| (y - m).abs() / s)
        .collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len() as f64;
    Ok((0..levels)
        .map(|k| {
            let c = k as f64 / (levels - 1) as f64;
            let z = std::f64::consts::SQRT_2 * erf_inv(c);
            let inside = scores.partition_point(|&s| s <= z);
            (c, inside as f64 / n)
        })
        .collect())
}

/// Trapezoidal area between the coverage curve and the diagonal.
pub fn auce(truth: &[f64], means: &[f64], sigmas: &[f64], levels: usize) -> Result<f64> {
    let curve = calibration_curve(truth, means, sigmas, levels)?;
    Ok(curve
        .windows(2)
        .map(|w| {
            let (c0, p0) = w[0];
            let (c1, p1) = w[1];
            0.5 * (c1 - c0) * ((p0 - c0).abs() + (p1 - c1).abs())
        })
        .sum())
}

/// Pearson correlation between every pair of columns of an `n x k` table.
pub fn pearson_matrix(table: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, k) = table.dim();
    if n < 2 {
        return Err(Error::Shape("correlation needs at least two rows".into()));
    }
    let mut centered = table.clone();
    let mut norms = vec![0.0; k];
    for j in 0..k {
        let mut col = centered.column_mut(j);
        let mean = col.sum() / n as f64;
        col.mapv_inplace(|v| v - mean);
        norms[j] = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norms[j] == 0.0 {
            return Err(Error::Degenerate(format!("column {j} is constant")));
        }
    }
    let mut out = Array2::eye(k);
    for a in 0..k {
        for b in a + 1..k {
            let dot: f64 = centered
                .column(a)
                .iter()
                .zip(centered.column(b))
                .map(|(x, y)| x * y)
                .sum();
            let r = (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0);
            out[[a, b]] = r;
            out[[b, a]] = r;
        }
    }
    Ok(out)
}
