//! Effective rank and dormant-neuron statistics of representation matrices.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::networks::AgentNetworks;
use crate::tensor::Tensor;

pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_TAU: f64 = 0.025;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerTag {
    EncoderOut,
    ValueHidden,
    AdvantageHidden,
}

impl LayerTag {
    pub const ALL: [LayerTag; 3] = [LayerTag::EncoderOut, LayerTag::ValueHidden, LayerTag::AdvantageHidden];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub layer: LayerTag,
    pub step: usize,
    /// `None` when the layer output is identically zero.
    pub srank: Option<usize>,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DormancyReport {
    pub layer: LayerTag,
    pub step: usize,
    pub tau: f64,
    pub fraction: f64,
    pub scores: Vec<f64>,
}

fn check_matrix(f: &Tensor) -> Result<(usize, usize)> {
    if f.rank() != 2 {
        return Err(Error::Shape(format!("expected a matrix, got shape {:?}", f.shape())));
    }
    if !f.all_finite() {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    Ok((f.shape()[0], f.shape()[1]))
}

/// Eigenvalues of a symmetric matrix (row-major, `n×n`) by cyclic Jacobi.
fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    for _sweep in 0..100 {
        if off(&a) <= 1e-10 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Singular values of a `B×d` matrix, nonincreasing, `min(B, d)` of them.
pub fn singular_values(f: &Tensor) -> Result<Vec<f64>> {
    let (b, d) = check_matrix(f)?;
    let x = f.data();
    // Gram over the smaller side
    let (n, gram) = if d <= b {
        let mut g = vec![0.0; d * d];
        for r in 0..b {
            let row = &x[r * d..(r + 1) * d];
            for i in 0..d {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in 0..d {
                    g[i * d + j] += ri * row[j];
                }
            }
        }
        (d, g)
    } else {
        let mut g = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                g[i * b + j] = (0..d).map(|k| x[i * d + k] * x[j * d + k]).sum();
            }
        }
        (b, g)
    };
    let mut sv: Vec<f64> = jacobi_eigenvalues(gram, n).into_iter().map(|e| e.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Smallest `k` whose leading singular values hold at least `1 − δ` of the
/// total spectral mass.
pub fn srank(sigma: &[f64], delta: f64) -> Result<usize> {
    if sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(Error::Domain("singular values must be finite and nonnegative".into()));
    }
    if sigma.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Domain("singular values must be nonincreasing".into()));
    }
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    let mut cum = 0.0;
    for (k, &s) in sigma.iter().enumerate() {
        cum += s;
        if cum / total >= 1.0 - delta {
            return Ok(k + 1);
        }
    }
    Ok(sigma.len())
}

/// Fraction of neurons whose normalized mean absolute activation is `≤ τ`,
/// with the per-neuron scores.
pub fn dormant_fraction(activations: &Tensor, tau: f64) -> Result<(f64, Vec<f64>)> {
    let (b, h) = check_matrix(activations)?;
    if b == 0 || h == 0 {
        return Err(Error::Shape(format!("activations must be nonempty, got {b}×{h}")));
    }
    let x = activations.data();
    let means: Vec<f64> = (0..h)
        .map(|j| (0..b).map(|r| x[r * h + j].abs()).sum::<f64>() / b as f64)
        .collect();
    let layer_mean = means.iter().sum::<f64>() / h as f64;
    if layer_mean == 0.0 {
        return Ok((1.0, vec![0.0; h]));
    }
    let scores: Vec<f64> = means.iter().map(|m| m / layer_mean).collect();
    let dormant = scores.iter().filter(|&&s| s <= tau).count();
    Ok((dormant as f64 / h as f64, scores))
}

/// Rank and dormancy reports for the three tagged layers on a probe batch of
/// observations (`N×d_obs`), using the online networks.
pub fn probe_reports(
    nets: &AgentNetworks,
    probe: &Tensor,
    step: usize,
    delta: f64,
    tau: f64,
) -> Result<(Vec<RankReport>, Vec<DormancyReport>)> {
    let tape = Tape::new();
    let bound = nets.bind(&tape);
    let obs = tape.constant(probe.clone());
    let z = nets.encode(&tape, &bound, obs, false)?;
    let q = nets.q_forward(&tape, &bound, z, false)?;
    let mut ranks = Vec::with_capacity(3);
    let mut dormancy = Vec::with_capacity(3);
    for (layer, var) in LayerTag::ALL.into_iter().zip([z, q.value_hidden, q.advantage_hidden]) {
        let act = tape.value(var)?;
        let sv = singular_values(&act)?;
        let rank = match srank(&sv, delta) {
            Ok(r) => Some(r),
            Err(Error::DegenerateSpectrum) => None,
            Err(e) => return Err(e),
        };
        ranks.push(RankReport {
            layer,
            step,
            srank: rank,
            singular_values: sv,
        });
        let (fraction, scores) = dormant_fraction(&act, tau)?;
        dormancy.push(DormancyReport {
            layer,
            step,
            tau,
            fraction,
            scores,
        });
    }
    Ok((ranks, dormancy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn singular_value_examples() {
        close(&singular_values(&Tensor::identity(5)).unwrap(), &[1.0; 5]);
        close(
            &singular_values(&Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap(),
            &[3.0, 1.0],
        );
        // u = (1,2,2), v = (3,4): ‖u‖‖v‖ = 15
        let u = [1.0, 2.0, 2.0];
        let v = [3.0, 4.0];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        close(&singular_values(&Tensor::from_rows(&rows).unwrap()).unwrap(), &[15.0, 0.0]);
        let wide = Tensor::from_rows(&[vec![3.0, 4.0, 0.0]]).unwrap();
        close(&singular_values(&wide).unwrap(), &[5.0]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let t = Tensor::from_rows(&[vec![f64::NAN, 1.0]]).unwrap();
        assert!(matches!(singular_values(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn srank_examples() {
        assert_eq!(srank(&[10.0, 1e-6], 0.01).unwrap(), 1);
        assert_eq!(srank(&[3.0, 1.0], 0.01).unwrap(), 2);
        assert_eq!(srank(&[1.0; 5], 0.01).unwrap(), 5);
        assert!(matches!(srank(&[0.0, 0.0], 0.01), Err(Error::DegenerateSpectrum)));
        assert!(srank(&[1.0, 2.0], 0.01).is_err());
    }

    #[test]
    fn dormancy_examples() {
        let (f, _) = dormant_fraction(&Tensor::zeros(&[3, 4]), DEFAULT_TAU).unwrap();
        assert_eq!(f, 1.0);
        let t = Tensor::from_rows(&[vec![0.0, 5.0], vec![0.0, 3.0]]).unwrap();
        let (f, scores) = dormant_fraction(&t, 0.0).unwrap();
        assert_eq!(f, 0.5);
        assert_eq!(scores, vec![0.0, 2.0]);
        let pos = Tensor::from_rows(&[vec![0.1, 5.0], vec![0.2, 3.0]]).unwrap();
        assert_eq!(dormant_fraction(&pos, 0.0).unwrap().0, 0.0);
    }
}
