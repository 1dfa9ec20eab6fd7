//! Content-aware and consistency losses on graph values, with plain-tensor
//! wrappers for evaluation and tests.

use crate::adversary::loss_gan_g_var;
use crate::error::{invalid, Result};
use crate::wavelet::{hf_extract_var, DirectionMask};
use serde::{Deserialize, Serialize};
use tape::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// feature-consistency weight inside the content-aware loss
    pub lambda1: f64,
    /// adversarial weight inside the enhancement loss
    pub lambda2: f64,
    /// enhancement weight inside the cooperative loss
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid!("{} must be a non-negative number, got {}", name, v));
            }
        }
        Ok(())
    }
}

/// `v vᵀ / d` for a single vector.
pub fn gram(v: &[f64]) -> Tensor {
    let d = v.len();
    let mut g = Vec::with_capacity(d * d);
    for a in v {
        for b in v {
            g.push(a * b / d as f64);
        }
    }
    Tensor::from_vec(vec![d, d], g)
}

/// Batched Gram matrices, `(B, d) -> (B, d, d)`.
pub fn gram_var<'g>(v: Var<'g>) -> Var<'g> {
    let s = v.shape();
    let (b, d) = (s[0], s[1]);
    v.reshape(&[b, d, 1])
        .mul(v.reshape(&[b, 1, d]))
        .mul_scalar(1.0 / d as f64)
}

fn check_vectors(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || a != b {
        return Err(invalid!("vector batches must share shape (B, d), got {:?} and {:?}", a, b));
    }
    Ok(())
}

/// Batch mean of per-sample `‖Gr(a) − Gr(b)‖_F`.
pub fn gram_distance_var<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    check_vectors(&a.shape(), &b.shape())?;
    let diff = gram_var(a).sub(gram_var(b));
    Ok(diff.sqr().sum_axes(&[1, 2]).safe_sqrt().mean_all())
}

pub fn loss_fc_var<'g>(v_xhat: Var<'g>, v_c: Var<'g>) -> Result<Var<'g>> {
    gram_distance_var(v_xhat, v_c)
}

/// Consistency between cue vectors of two different guidance images.
pub fn loss_intervar_var<'g>(v1: Var<'g>, v2: Var<'g>) -> Result<Var<'g>> {
    gram_distance_var(v1, v2)
}

/// Consistency between cue vectors of two augmented views of one image.
pub fn loss_intravar_var<'g>(view1: Var<'g>, view2: Var<'g>) -> Result<Var<'g>> {
    gram_distance_var(view1, view2)
}

/// Mean absolute difference of the selected high-frequency Haar bands.
pub fn loss_haar_var<'g>(xhat: Var<'g>, y: Var<'g>, mask: DirectionMask) -> Result<Var<'g>> {
    if xhat.shape() != y.shape() {
        return Err(invalid!("shape mismatch {:?} vs {:?}", xhat.shape(), y.shape()));
    }
    Ok(hf_extract_var(xhat, mask)?.sub(hf_extract_var(y, mask)?).abs().mean_all())
}

/// Components of the enhancement objective, kept separate for reporting.
#[derive(Clone, Copy, Debug)]
pub struct EnhancementTerms<'g> {
    pub haar: Var<'g>,
    pub fc: Var<'g>,
    pub gan: Var<'g>,
}

impl<'g> EnhancementTerms<'g> {
    pub fn content_aware(&self, w: &LossWeights) -> Var<'g> {
        loss_ca_var(self.haar, self.fc, w)
    }

    pub fn total(&self, w: &LossWeights) -> Var<'g> {
        loss_enh_var(self.content_aware(w), self.gan, w)
    }
}

pub fn loss_ca_var<'g>(haar: Var<'g>, fc: Var<'g>, w: &LossWeights) -> Var<'g> {
    haar.add(fc.mul_scalar(w.lambda1))
}

pub fn loss_enh_var<'g>(ca: Var<'g>, gan_g: Var<'g>, w: &LossWeights) -> Var<'g> {
    ca.add(gan_g.mul_scalar(w.lambda2))
}

fn as_batch(v: &Tensor) -> Tensor {
    match v.rank() {
        1 => v.reshape(vec![1, v.numel()]),
        _ => v.clone(),
    }
}

pub fn loss_fc(v_xhat: &Tensor, v_c: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let l = loss_fc_var(g.constant(as_batch(v_xhat)), g.constant(as_batch(v_c)))?;
    Ok(l.value().item())
}

pub fn loss_intervar(v1: &Tensor, v2: &Tensor) -> Result<f64> {
    loss_fc(v1, v2)
}

pub fn loss_intravar(view1: &Tensor, view2: &Tensor) -> Result<f64> {
    loss_fc(view1, view2)
}

pub fn loss_haar(xhat: &Tensor, y: &Tensor, mask: DirectionMask) -> Result<f64> {
    let g = Graph::new();
    let l = loss_haar_var(g.constant(xhat.clone()), g.constant(y.clone()), mask)?;
    Ok(l.value().item())
}

pub fn loss_ca(xhat: &Tensor, y: &Tensor, v_xhat: &Tensor, v_c: &Tensor, mask: DirectionMask, w: &LossWeights) -> Result<f64> {
    Ok(loss_haar(xhat, y, mask)? + w.lambda1 * loss_fc(v_xhat, v_c)?)
}

pub fn loss_enh(
    xhat: &Tensor,
    y: &Tensor,
    v_xhat: &Tensor,
    v_c: &Tensor,
    fake_logits: &Tensor,
    mask: DirectionMask,
    w: &LossWeights,
) -> Result<f64> {
    let g = Graph::new();
    let gan = loss_gan_g_var(g.constant(fake_logits.clone())).value().item();
    Ok(loss_ca(xhat, y, v_xhat, v_c, mask, w)? + w.lambda2 * gan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::haar_dwt;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tape::numeric::{central_difference, relative_error};

    fn dense_gram_distance(a: &[f64], b: &[f64]) -> f64 {
        let d = a.len() as f64;
        let mut s = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                let e = a[i] * a[j] / d - b[i] * b[j] / d;
                s += e * e;
            }
        }
        s.sqrt()
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&[1.0, 2.0]).data(), &[0.5, 1.0, 1.0, 2.0]);
        assert!(gram(&[0.0; 5]).data().iter().all(|&v| v == 0.0));
        let g = Graph::new();
        let v = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, -3.0, 0.5]));
        let batched = gram_var(v).value();
        assert_eq!(&batched.data()[..4], gram(&[1.0, 2.0]).data());
        assert_eq!(&batched.data()[4..], gram(&[-3.0, 0.5]).data());
    }

    #[test]
    fn fc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Tensor::randn(vec![80], 1.0, &mut rng);
        let u = Tensor::randn(vec![80], 1.0, &mut rng);
        assert_eq!(loss_fc(&v, &v).unwrap(), 0.0);
        assert_eq!(loss_fc(&v, &v.scale(-1.0)).unwrap(), 0.0);
        let oracle = dense_gram_distance(v.data(), u.data());
        assert!((loss_fc(&v, &u).unwrap() - oracle).abs() < 1e-9);
        assert_eq!(loss_intervar(&v, &u).unwrap(), loss_fc(&v, &u).unwrap());
        assert_eq!(loss_intravar(&v, &u).unwrap(), loss_fc(&v, &u).unwrap());
        assert!(loss_fc(&v, &Tensor::zeros(vec![64])).is_err());
    }

    #[test]
    fn fc_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let b = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let want: f64 = (0..3)
            .map(|i| dense_gram_distance(&a.data()[i * 6..i * 6 + 6], &b.data()[i * 6..i * 6 + 6]))
            .sum::<f64>()
            / 3.0;
        assert!((loss_fc(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn haar_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Tensor::rand_uniform(vec![1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let x = Tensor::rand_uniform(vec![1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let all = DirectionMask::ALL;
        assert_eq!(loss_haar(&y, &y, all).unwrap(), 0.0);
        assert!(loss_haar(&y.map(|v| v + 0.3), &y, all).unwrap() < 1e-15);

        // explicit orthonormal Haar matrix H applied as H·X·Hᵀ
        let s = 0.5f64.sqrt();
        let h = [
            [s, s, 0.0, 0.0],
            [0.0, 0.0, s, s],
            [s, -s, 0.0, 0.0],
            [0.0, 0.0, s, -s],
        ];
        let transform = |t: &Tensor| {
            let mut out = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..4 {
                        for l in 0..4 {
                            out[i][j] += h[i][k] * t.data()[k * 4 + l] * h[j][l];
                        }
                    }
                }
            }
            out
        };
        let (tx, ty) = (transform(&x), transform(&y));
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i >= 2 || j >= 2 {
                    sum += (tx[i][j] - ty[i][j]).abs();
                    n += 1.0;
                }
            }
        }
        assert!((loss_haar(&x, &y, all).unwrap() - sum / n).abs() < 1e-9);
        assert!(loss_haar(&x, &Tensor::zeros(vec![1, 1, 4, 2]), all).is_err());
        assert!(haar_dwt(&x).is_ok());
    }

    #[test]
    fn ca_and_enh_arithmetic() {
        let w = LossWeights::default();
        let g = Graph::new();
        let ca = loss_ca_var(g.constant(Tensor::scalar(0.2)), g.constant(Tensor::scalar(0.03)), &w);
        assert!((ca.value().item() - 0.5).abs() < 1e-15);
        let zero = g.constant(Tensor::scalar(0.0));
        assert_eq!(loss_ca_var(zero, zero, &w).value().item(), 0.0);
        assert_eq!(loss_enh_var(zero, zero, &w).value().item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(vec![2, 1, 8, 8], 0.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(vec![2, 1, 8, 8], 0.0, 1.0, &mut rng);
        let vx = Tensor::randn(vec![2, 80], 1.0, &mut rng);
        let vc = Tensor::randn(vec![2, 80], 1.0, &mut rng);
        let logits = Tensor::randn(vec![2, 1, 3, 3], 1.0, &mut rng);
        let m = DirectionMask::ALL;
        let no_fc = LossWeights { lambda1: 0.0, ..w };
        assert_eq!(loss_ca(&x, &y, &vx, &vc, m, &no_fc).unwrap(), loss_haar(&x, &y, m).unwrap());
        let gan: f64 = logits.data().iter().map(|l| (1.0 + (-l).exp()).ln()).sum::<f64>() / 9.0 / 2.0;
        let want = loss_haar(&x, &y, m).unwrap() + 10.0 * loss_fc(&vx, &vc).unwrap() + gan;
        assert!((loss_enh(&x, &y, &vx, &vc, &logits, m, &w).unwrap() - want).abs() < 1e-9);
        let shifted = logits.map(|l| l + 0.7);
        let gan2: f64 = shifted.data().iter().map(|l| (1.0 + (-l).exp()).ln()).sum::<f64>() / 18.0;
        let w2 = LossWeights { lambda2: 2.5, ..w };
        let d = loss_enh(&x, &y, &vx, &vc, &shifted, m, &w2).unwrap() - loss_enh(&x, &y, &vx, &vc, &logits, m, &w2).unwrap();
        assert!((d - 2.5 * (gan2 - gan)).abs() < 1e-9);
    }

    #[test]
    fn weight_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(vec![1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(vec![1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let vx = Tensor::randn(vec![1, 16], 1.0, &mut rng);
        let vc = Tensor::randn(vec![1, 16], 1.0, &mut rng);
        let m = DirectionMask::ALL;
        let at = |l1: f64| {
            let w = LossWeights { lambda1: l1, ..LossWeights::default() };
            loss_ca(&x, &y, &vx, &vc, m, &w).unwrap()
        };
        let slope = (at(10.5) - at(9.5)) / 1.0;
        assert!((slope - loss_fc(&vx, &vc).unwrap()).abs() < 1e-9);
    }

    fn analytic(x: &Tensor, f: impl for<'g> Fn(Var<'g>) -> Var<'g>) -> Tensor {
        let g = Graph::new();
        let xv = g.variable(x.clone());
        let grads = g.backward(f(xv));
        grads.get(xv).unwrap().clone()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = Tensor::rand_uniform(vec![1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(vec![1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let v0 = Tensor::randn(vec![1, 16], 1.0, &mut rng);
        let vc = Tensor::randn(vec![1, 16], 1.0, &mut rng);
        let w = LossWeights::default();
        let m = DirectionMask::ALL;
        let indices: Vec<usize> = (0..16).collect();

        let a = analytic(&x0, |x| {
            let y = x.graph().constant(y.clone());
            loss_haar_var(x, y, m).unwrap()
        });
        let fd = central_difference(|t| loss_haar(t, &y, m).unwrap(), &x0, &indices, 1e-6);
        for (i, n) in indices.iter().zip(&fd) {
            assert!(relative_error(a.data()[*i], *n, 1e-6) < 1e-4, "haar {}", i);
        }
        let a = analytic(&v0, |v| loss_fc_var(v, v.graph().constant(vc.clone())).unwrap());
        let fd = central_difference(|t| loss_fc(t, &vc).unwrap(), &v0, &indices, 1e-6);
        for (i, n) in indices.iter().zip(&fd) {
            assert!(relative_error(a.data()[*i], *n, 1e-6) < 1e-4, "fc {}", i);
        }
        let vx = v0.clone();
        let a = analytic(&x0, |x| {
            let g = x.graph();
            let haar = loss_haar_var(x, g.constant(y.clone()), m).unwrap();
            let fc = loss_fc_var(g.constant(vx.clone()), g.constant(vc.clone())).unwrap();
            loss_ca_var(haar, fc, &w)
        });
        let fd = central_difference(|t| loss_ca(t, &y, &vx, &vc, m, &w).unwrap(), &x0, &indices, 1e-6);
        for (i, n) in indices.iter().zip(&fd) {
            assert!(relative_error(a.data()[*i], *n, 1e-6) < 1e-4, "ca {}", i);
        }
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(v in prop::collection::vec(-3.0f64..3.0, 1..12), probe in prop::collection::vec(-1.0f64..1.0, 12)) {
            let d = v.len();
            let g = gram(&v);
            for i in 0..d {
                for j in 0..d {
                    prop_assert!((g.data()[i * d + j] - g.data()[j * d + i]).abs() < 1e-12);
                }
            }
            let mut quad = 0.0;
            for i in 0..d {
                for j in 0..d {
                    quad += probe[i] * g.data()[i * d + j] * probe[j];
                }
            }
            prop_assert!(quad >= -1e-12);
        }

        #[test]
        fn haar_loss_is_nonnegative_and_dc_blind(
            a in prop::collection::vec(0.0f64..1.0, 16),
            b in prop::collection::vec(0.0f64..1.0, 16),
            c in -0.5f64..0.5,
        ) {
            let x = Tensor::from_vec(vec![1, 1, 4, 4], a);
            let y = Tensor::from_vec(vec![1, 1, 4, 4], b);
            let base = loss_haar(&x, &y, DirectionMask::ALL).unwrap();
            prop_assert!(base >= 0.0);
            let shifted = loss_haar(&x.map(|v| v + c), &y.map(|v| v + c), DirectionMask::ALL).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
        }
    }
}
