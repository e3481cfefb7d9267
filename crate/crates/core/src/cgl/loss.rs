use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

use super::encoder::l2_normalize_rows;

/// Cosine similarities among the `2N` view embeddings of a batch. Rows
/// `2i` and `2i + 1` are the two views of patient `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractionMatrix {
    pub values: Matrix,
    /// `(patient, view)` for every row.
    pub pairing: Vec<(usize, usize)>,
}

impl AttractionMatrix {
    pub fn patients(&self) -> usize {
        self.values.nrows() / 2
    }

    pub fn partner(row: usize) -> usize {
        row ^ 1
    }

    /// Mean similarity over homo and heter ordered pairs.
    pub fn mean_homo_heter(&self) -> (f64, f64) {
        let n = self.values.nrows();
        let (mut homo, mut heter) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let slot = if self.pairing[i].0 == self.pairing[j].0 { &mut homo } else { &mut heter };
                slot.0 += self.values[(i, j)];
                slot.1 += 1;
            }
        }
        let mean = |(s, c): (f64, usize)| if c == 0 { f64::NAN } else { s / c as f64 };
        (mean(homo), mean(heter))
    }
}

pub fn similarity_matrix(e: &Matrix) -> Result<AttractionMatrix> {
    let n = e.nrows();
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("expected an even, non-zero number of views, got {n}")));
    }
    let norms: Vec<f64> = e.row_iter().map(|r| r.norm()).collect();
    if let Some(bad) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroNorm(format!("embedding row {bad}")));
    }
    let mut values = Matrix::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let c = (e.row(i).dot(&e.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[(i, j)] = c;
            values[(j, i)] = c;
        }
    }
    Ok(AttractionMatrix {
        values,
        pairing: (0..n).map(|r| (r / 2, r % 2)).collect(),
    })
}

/// `-log(exp(M(m,n)/tau) / sum_{i != m} exp(M(m,i)/tau))`.
pub fn pair_loss(m: &Matrix, row: usize, col: usize, tau: f64) -> f64 {
    let logits: Vec<f64> = (0..m.ncols())
        .filter(|&i| i != row)
        .map(|i| m[(row, i)] / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - m[(row, col)] / tau
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature {tau} must be > 0")));
    }
    Ok(())
}

/// Mean over all `2N` rows of the loss pulling each view towards its
/// partner view.
pub fn contrastive_loss(m: &AttractionMatrix, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let n = m.values.nrows();
    let total: f64 = (0..n)
        .map(|r| pair_loss(&m.values, r, AttractionMatrix::partner(r), tau))
        .sum();
    Ok(total / n as f64)
}

/// Differentiable form of [`contrastive_loss`] taking raw (unnormalized)
/// `2N x d` embeddings.
pub fn contrastive_loss_on_tape(tape: &Tape, e: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.shape(e).0;
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("expected an even, non-zero number of views, got {n}")));
    }
    let en = l2_normalize_rows(tape, e)?;
    let logits = tape.scale(tape.matmul(en, tape.transpose(en))?, 1.0 / tau);
    let shift = tape.with_value(logits, |l| {
        let row_max: Vec<f64> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| l[(i, j)])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        Matrix::from_fn(n, n, |i, _| row_max[i])
    });
    let shifted = tape.sub(logits, tape.constant(shift))?;
    let off_diag = tape.constant(Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }));
    let partner = tape.constant(Matrix::from_fn(n, n, |i, j| {
        if j == AttractionMatrix::partner(i) { 1.0 } else { 0.0 }
    }));
    let denom = tape.log(tape.sum_cols(tape.mul(tape.exp(shifted), off_diag)?));
    let numer = tape.sum_cols(tape.mul(shifted, partner)?);
    Ok(tape.scale(tape.sum(tape.sub(denom, numer)?), 1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[&[f64]]) -> Matrix {
        Matrix::from_fn(data.len(), data[0].len(), |i, j| data[i][j])
    }

    #[test]
    fn cosine_examples() {
        let m = similarity_matrix(&rows(&[&[1.0, 0.0], &[1.0, 1.0]])).unwrap();
        assert!((m.values[(0, 1)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let m = similarity_matrix(&rows(&[&[1.0, 0.0], &[0.0, 3.0]])).unwrap();
        assert_eq!(m.values[(0, 1)], 0.0);
        let m = similarity_matrix(&rows(&[&[2.0, 1.0], &[2.0, 1.0]])).unwrap();
        assert!((m.values[(0, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(m.pairing, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn zero_row_rejected() {
        assert!(matches!(
            similarity_matrix(&rows(&[&[1.0, 0.0], &[0.0, 0.0]])),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn single_patient_loss_is_zero() {
        let m = similarity_matrix(&rows(&[&[1.0, 0.2], &[0.3, 1.0]])).unwrap();
        assert_eq!(contrastive_loss(&m, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn identical_views_give_log3() {
        let e = Matrix::from_fn(4, 2, |_, j| (j + 1) as f64);
        let m = similarity_matrix(&e).unwrap();
        assert!((contrastive_loss(&m, 0.1).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_pairs_vanish() {
        let mut v = Matrix::from_element(4, 4, -1.0);
        for i in 0..4 {
            v[(i, i)] = 1.0;
            v[(i, i ^ 1)] = 1.0;
        }
        let m = AttractionMatrix { values: v, pairing: vec![(0, 0), (0, 1), (1, 0), (1, 1)] };
        let loss = contrastive_loss(&m, 0.1).unwrap();
        assert!((loss - 2.0 * (-20f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn non_commutative() {
        let v = rows(&[
            &[1.0, 0.8, 0.5, -0.2],
            &[0.8, 1.0, 0.1, 0.3],
            &[0.5, 0.1, 1.0, 0.6],
            &[-0.2, 0.3, 0.6, 1.0],
        ]);
        assert!((pair_loss(&v, 0, 1, 0.1) - pair_loss(&v, 1, 0, 0.1)).abs() > 1e-3);
    }

    #[test]
    fn bad_tau() {
        let m = similarity_matrix(&rows(&[&[1.0, 0.0], &[1.0, 1.0]])).unwrap();
        assert!(contrastive_loss(&m, 0.0).is_err());
        assert!(contrastive_loss(&m, -1.0).is_err());
    }

    #[test]
    fn tape_matches_plain_and_ignores_scale() {
        let e = rows(&[
            &[0.3, -1.2, 0.5],
            &[0.1, -1.0, 0.9],
            &[2.0, 0.4, -0.3],
            &[1.5, 0.2, 0.1],
            &[-0.7, 0.8, 1.1],
            &[-0.2, 0.9, 1.4],
        ]);
        let plain = contrastive_loss(&similarity_matrix(&e).unwrap(), 0.1).unwrap();
        for c in [1.0, 0.01, 250.0] {
            let tape = Tape::new();
            let v = tape.constant(&e * c);
            let loss = contrastive_loss_on_tape(&tape, v, 0.1).unwrap();
            assert!((tape.scalar(loss).unwrap() - plain).abs() < 1e-10);
        }
    }
}
