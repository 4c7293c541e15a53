//! Basic instance classifier.
//!
//! Proposal features pass through a shared two-layer trunk, then two
//! parallel affine streams produce `C×|R|` logit tables. The classification
//! stream is normalized over classes (each column), the detection stream
//! over proposals (each row). Their elementwise product gives per-proposal
//! class scores `x_R`, and summing a row gives the image-level score `φ_c`,
//! trained with a per-class binary cross-entropy against the image labels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{
    clamped_ln, relu_backward, relu_forward, softmax_backward_over_classes, softmax_backward_over_proposals,
    softmax_over_classes, softmax_over_proposals, Linear, Matrix, ParamTensor,
};

/// Clamp applied to `φ_c` inside the classification loss.
pub const PHI_CLAMP: f64 = 1e-12;

pub const TRUNK_BIAS_INIT: f64 = 0.01;

/// Two `affine → relu` layers shared by every head.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub fc1: Linear,
    pub fc2: Linear,
    cache: Option<(Matrix, Matrix)>,
}

impl Trunk {
    pub fn new(fc1: Linear, fc2: Linear) -> Result<Self> {
        if fc1.out_features() != fc2.in_features() {
            return Err(Error::ShapeMismatch {
                op: "Trunk::new",
                left: fc1.weight.value.shape_str(),
                right: fc2.weight.value.shape_str(),
            });
        }
        Ok(Trunk { fc1, fc2, cache: None })
    }

    /// He-style Gaussian init (`std = sqrt(2 / fan_in)`). Biases start at
    /// [`TRUNK_BIAS_INIT`] so no unit sits exactly on the relu kink.
    pub fn init<R: Rng + ?Sized>(raw_dim: usize, width: usize, rng: &mut R) -> Self {
        let mut fc1 = Linear::gaussian("trunk.fc1", raw_dim, width, (2.0 / raw_dim as f64).sqrt(), rng);
        let mut fc2 = Linear::gaussian("trunk.fc2", width, width, (2.0 / width as f64).sqrt(), rng);
        fc1.bias.value.fill(TRUNK_BIAS_INIT);
        fc2.bias.value.fill(TRUNK_BIAS_INIT);
        Trunk { fc1, fc2, cache: None }
    }

    pub fn raw_dim(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn width(&self) -> usize {
        self.fc2.out_features()
    }

    pub fn apply(&self, raw: &Matrix) -> Result<Matrix> {
        let h1 = relu_forward(&self.fc1.apply(raw)?);
        Ok(relu_forward(&self.fc2.apply(&h1)?))
    }

    pub fn forward(&mut self, raw: &Matrix) -> Result<Matrix> {
        let h1 = relu_forward(&self.fc1.forward(raw)?);
        let h2 = relu_forward(&self.fc2.forward(&h1)?);
        self.cache = Some((h1, h2.clone()));
        Ok(h2)
    }

    /// Backpropagates `dL/dfeatures` into the trunk parameters.
    pub fn backward(&mut self, grad_features: &Matrix) -> Result<()> {
        let (h1, h2) = self.cache.take().ok_or(Error::BackwardBeforeForward("trunk"))?;
        let g2 = relu_backward(&h2, grad_features)?;
        let g1 = relu_backward(&h1, &self.fc2.backward(&g2)?)?;
        self.fc1.backward(&g1)?;
        Ok(())
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        self.fc1.params().into_iter().chain(self.fc2.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.fc1.params_mut().into_iter().chain(self.fc2.params_mut()).collect()
    }
}

/// Applies the trunk without recording activations.
pub fn trunk_forward(raw_features: &Matrix, trunk: &Trunk) -> Result<Matrix> {
    trunk.apply(raw_features)
}

/// Score tables produced by the instance classifier, all `C×|R|`.
#[derive(Debug, Clone, PartialEq)]
pub struct MidnOutput {
    /// Classification stream, columns sum to 1.
    pub x_c: Matrix,
    /// Detection stream, rows sum to 1.
    pub x_d: Matrix,
    /// `x_c ⊙ x_d`.
    pub x_r: Matrix,
    /// Image-level class scores, row sums of `x_r`.
    pub phi: Vec<f64>,
}

impl MidnOutput {
    pub fn from_logits(cls_logits: &Matrix, det_logits: &Matrix) -> Result<Self> {
        let x_c = softmax_over_classes(cls_logits);
        let x_d = softmax_over_proposals(det_logits);
        let x_r = x_c.hadamard(&x_d)?;
        let phi = x_r.row_sums();
        Ok(MidnOutput { x_c, x_d, x_r, phi })
    }
}

/// Classification and detection streams over shared proposal features.
#[derive(Debug, Clone, PartialEq)]
pub struct MidnHead {
    pub cls: Linear,
    pub det: Linear,
    cache: Option<(Matrix, Matrix)>,
}

impl MidnHead {
    pub fn new(cls: Linear, det: Linear) -> Result<Self> {
        if cls.weight.shape() != det.weight.shape() {
            return Err(Error::ShapeMismatch {
                op: "MidnHead::new",
                left: cls.weight.value.shape_str(),
                right: det.weight.value.shape_str(),
            });
        }
        Ok(MidnHead { cls, det, cache: None })
    }

    pub fn init<R: Rng + ?Sized>(width: usize, num_classes: usize, std: f64, rng: &mut R) -> Self {
        MidnHead {
            cls: Linear::gaussian("midn.cls", width, num_classes, std, rng),
            det: Linear::gaussian("midn.det", width, num_classes, std, rng),
            cache: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.out_features()
    }

    pub fn apply(&self, features: &Matrix) -> Result<MidnOutput> {
        MidnOutput::from_logits(&self.cls.apply(features)?.transpose(), &self.det.apply(features)?.transpose())
    }

    pub fn forward(&mut self, features: &Matrix) -> Result<MidnOutput> {
        let out = MidnOutput::from_logits(
            &self.cls.forward(features)?.transpose(),
            &self.det.forward(features)?.transpose(),
        )?;
        self.cache = Some((out.x_c.clone(), out.x_d.clone()));
        Ok(out)
    }

    /// Given `dL/dφ`, accumulates head gradients and returns `dL/dfeatures`.
    pub fn backward(&mut self, grad_phi: &[f64]) -> Result<Matrix> {
        let (x_c, x_d) = self.cache.take().ok_or(Error::BackwardBeforeForward("midn"))?;
        if grad_phi.len() != x_c.rows() {
            return Err(Error::ShapeMismatch {
                op: "midn_backward",
                left: format!("grad len {}", grad_phi.len()),
                right: x_c.shape_str(),
            });
        }
        // φ_c = Σ_r x_c⊙x_d, so dL/dx_R[c][r] = dL/dφ_c
        let mut g_r = Matrix::zeros(x_c.rows(), x_c.cols());
        for c in 0..x_c.rows() {
            for r in 0..x_c.cols() {
                g_r[(c, r)] = grad_phi[c];
            }
        }
        let g_c = softmax_backward_over_classes(&x_c, &g_r.hadamard(&x_d)?)?;
        let g_d = softmax_backward_over_proposals(&x_d, &g_r.hadamard(&x_c)?)?;
        let mut grad = self.cls.backward(&g_c.transpose())?;
        grad.add_assign(&self.det.backward(&g_d.transpose())?)?;
        Ok(grad)
    }

    /// Trainable tensors. The detection bias is left out: a per-class
    /// constant cancels in the softmax over proposals, so it stays at zero.
    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut p: Vec<&ParamTensor> = self.cls.params().into();
        p.push(&self.det.weight);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut p: Vec<&mut ParamTensor> = self.cls.params_mut().into();
        p.push(&mut self.det.weight);
        p
    }
}

pub fn midn_forward(features: &Matrix, head: &MidnHead) -> Result<MidnOutput> {
    head.apply(features)
}

fn clamp_phi(phi: f64) -> f64 {
    phi.clamp(PHI_CLAMP, 1.0 - PHI_CLAMP)
}

/// `−Σ_c [y_c ln φ_c + (1 − y_c) ln(1 − φ_c)]` with `φ` clamped to
/// `[1e−12, 1 − 1e−12]`.
pub fn classification_loss(phi: &[f64], labels: &[bool]) -> f64 {
    phi.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_phi(p);
            if y {
                -clamped_ln(p)
            } else {
                -clamped_ln(1.0 - p)
            }
        })
        .sum()
}

/// `dL/dφ` for [`classification_loss`]; zero where the clamp is active.
pub fn classification_loss_grad(phi: &[f64], labels: &[bool]) -> Vec<f64> {
    phi.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p != clamp_phi(p) {
                0.0
            } else if y {
                -1.0 / p
            } else {
                1.0 / (1.0 - p)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
        ParamTensor::gaussian("m", rows, cols, scale, rng).value
    }

    #[test]
    fn zero_trunk_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut trunk = Trunk::init(4, 6, &mut rng);
        for p in trunk.params_mut() {
            p.value.fill(0.0);
        }
        let f = trunk_forward(&random_matrix(3, 4, 1.0, &mut rng), &trunk).unwrap();
        assert_eq!(f, Matrix::zeros(3, 6));
    }

    #[test]
    fn identity_trunk_preserves_nonnegative_input() {
        let id = |n| Linear::new(ParamTensor::new("w", Matrix::identity(n)), ParamTensor::zeros("b", 1, n)).unwrap();
        let trunk = Trunk::new(id(3), id(3)).unwrap();
        let x = Matrix::from_rows(&[[0.0, 1.5, 2.0], [3.0, 0.25, 0.0]]).unwrap();
        assert_eq!(trunk_forward(&x, &trunk).unwrap(), x);
    }

    #[test]
    fn trunk_output_is_reproducible() {
        let digest = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let trunk = Trunk::init(32, 64, &mut rng);
            let x = random_matrix(10, 32, 1.0, &mut rng);
            let f = trunk_forward(&x, &trunk).unwrap();
            let mut h = Sha256::new();
            for v in f.as_slice() {
                h.update(v.to_le_bytes());
            }
            hex::encode(h.finalize())
        };
        assert_eq!(digest(), digest());
    }

    #[test]
    fn trunk_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trunk = Trunk::init(4, 6, &mut rng);
        assert!(matches!(trunk.apply(&Matrix::zeros(2, 5)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_class_degeneracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = MidnHead::init(5, 1, 1.0, &mut rng);
        let out = midn_forward(&random_matrix(4, 5, 1.0, &mut rng), &head).unwrap();
        assert!(out.x_c.as_slice().iter().all(|&v| v == 1.0));
        assert_eq!(out.x_r, out.x_d);
        assert!((out.phi[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = MidnHead::init(3, 2, 1.0, &mut rng);
        for p in head.params_mut() {
            p.value.fill(0.0);
        }
        let out = midn_forward(&random_matrix(2, 3, 1.0, &mut rng), &head).unwrap();
        assert!(out.x_r.as_slice().iter().all(|&v| v == 0.25));
        assert_eq!(out.phi, vec![0.5, 0.5]);
    }

    #[test]
    fn phi_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (c, r) = (4, 9);
            let xc = random_matrix(c, r, 3.0, &mut rng);
            let xd = random_matrix(c, r, 3.0, &mut rng);
            let out = MidnOutput::from_logits(&xc, &xd).unwrap();
            for ci in 0..c {
                let mut phi = 0.0;
                for ri in 0..r {
                    let col: f64 = (0..c).map(|k| xc[(k, ri)].exp()).sum();
                    let row: f64 = (0..r).map(|k| xd[(ci, k)].exp()).sum();
                    phi += xc[(ci, ri)].exp() / col * xd[(ci, ri)].exp() / row;
                }
                assert!((phi - out.phi[ci]).abs() < 1e-12);
                assert!(out.phi[ci] > 0.0 && out.phi[ci] < 1.0);
            }
        }
    }

    #[test]
    fn classification_loss_examples() {
        assert!((classification_loss(&[0.5], &[true]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(classification_loss(&[1.0 - 1e-12, 1e-12], &[true, false]) < 1e-11);
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln());
        let got = classification_loss(&[0.9, 0.2, 0.7], &[true, false, true]);
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.685_179).abs() < 1e-6);
    }

    #[test]
    fn classification_loss_clamps_extremes() {
        let l = classification_loss(&[0.0, 1.0], &[true, false]);
        assert!(l.is_finite() && l > 50.0);
        assert_eq!(classification_loss_grad(&[0.0, 1.0], &[true, false]), vec![0.0, 0.0]);
    }

    #[test]
    fn midn_backward_before_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = MidnHead::init(3, 2, 1.0, &mut rng);
        assert!(matches!(head.backward(&[1.0, 1.0]), Err(Error::BackwardBeforeForward(_))));
        let mut trunk = Trunk::init(3, 3, &mut rng);
        assert!(trunk.backward(&Matrix::zeros(1, 3)).is_err());
    }
}
