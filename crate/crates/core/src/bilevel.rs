//! Downstream segmentation head, its loss, and the cooperative objective that
//! couples it to the enhancer.

use crate::error::{invalid, Result};
use crate::model::Model;
use crate::nn::{Builder, Conv2d, Ctx, Group, ParamId, ParamStore, LRELU_SLOPE};
use crate::objectives::LossWeights;
use crate::train::{enhancement_pass, Batch};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tape::numeric::relative_error;
use tape::{Graph, Tensor, Var};

/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Two-level U-Net producing one logit per pixel.
#[derive(Clone, Debug)]
pub struct SegNet {
    enc1: [Conv2d; 2],
    down1: Conv2d,
    enc2: Conv2d,
    down2: Conv2d,
    bottom: Conv2d,
    up2: Conv2d,
    up1: Conv2d,
    out: Conv2d,
}

impl SegNet {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, width: usize) -> Self {
        let (w1, w2, w3) = (width, 2 * width, 4 * width);
        Self {
            enc1: [Conv2d::k3(b, "enc1a", 1, w1), Conv2d::k3(b, "enc1b", w1, w1)],
            down1: Conv2d::new(b, "down1", w1, w2, 3, 2, 1),
            enc2: Conv2d::k3(b, "enc2", w2, w2),
            down2: Conv2d::new(b, "down2", w2, w3, 3, 2, 1),
            bottom: Conv2d::k3(b, "bottom", w3, w3),
            up2: Conv2d::k3(b, "up2", w3 + w2, w2),
            up1: Conv2d::k3(b, "up1", w2 + w1, w1),
            out: Conv2d::k1(b, "out", w1, 1),
        }
    }

    /// `(B, 1, H, W) -> (B, 1, H, W)` logits; `H`, `W` must be multiples of 4.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(invalid!("segmentation input must be (B, 1, 4m, 4n), got {:?}", s));
        }
        let act = |v: Var<'g>| v.leaky_relu(LRELU_SLOPE);
        let e1 = act(self.enc1[1].forward(ctx, act(self.enc1[0].forward(ctx, x))));
        let e2 = act(self.enc2.forward(ctx, act(self.down1.forward(ctx, e1))));
        let b = act(self.bottom.forward(ctx, act(self.down2.forward(ctx, e2))));
        let d2 = act(self.up2.forward(ctx, Var::concat(&[b.upsample2x(), e2], 1)));
        let d1 = act(self.up1.forward(ctx, Var::concat(&[d2.upsample2x(), e1], 1)));
        Ok(self.out.forward(ctx, d1))
    }
}

fn check_mask(logits: &[usize], mask: &Tensor) -> Result<()> {
    if logits != mask.shape() {
        return Err(invalid!("logits {:?} and mask {:?} differ in shape", logits, mask.shape()));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid!("segmentation target must be {{0, 1}}-valued"));
    }
    Ok(())
}

/// Binary cross-entropy on logits, averaged over every pixel.
pub fn bce_with_logits_var<'g>(logits: Var<'g>, target: Var<'g>) -> Var<'g> {
    // softplus(l) − t·l = −[t log σ(l) + (1 − t) log(1 − σ(l))]
    logits.softplus().sub(target.mul(logits)).mean_all()
}

/// `1 − (2 Σ p·t + s) / (Σ p + Σ t + s)` per sample, averaged over the batch.
pub fn soft_dice_loss_var<'g>(logits: Var<'g>, target: Var<'g>) -> Var<'g> {
    let p = logits.sigmoid();
    let inter = p.mul(target).sum_axes(&[1, 2, 3]);
    let total = p.sum_axes(&[1, 2, 3]).add(target.sum_axes(&[1, 2, 3]));
    let dice = inter.mul_scalar(2.0).add_scalar(DICE_SMOOTH).div(total.add_scalar(DICE_SMOOTH));
    dice.rsub_scalar(1.0).mean_all()
}

/// `0.5 · BCE + 0.5 · (1 − soft Dice)`.
pub fn loss_downstream_var<'g>(logits: Var<'g>, mask: &Tensor) -> Result<Var<'g>> {
    check_mask(&logits.shape(), mask)?;
    let target = logits.graph().constant(mask.clone());
    let bce = bce_with_logits_var(logits, target);
    let dice = soft_dice_loss_var(logits, target);
    Ok(bce.add(dice).mul_scalar(0.5))
}

pub fn loss_downstream(logits: &Tensor, mask: &Tensor) -> Result<f64> {
    let g = Graph::new();
    Ok(loss_downstream_var(g.constant(logits.clone()), mask)?.value().item())
}

/// `L^d + λ₃ · L^e`.
pub fn cooperative_loss_var<'g>(downstream: Var<'g>, enhancement: Var<'g>, lambda3: f64) -> Var<'g> {
    downstream.add(enhancement.mul_scalar(lambda3))
}

/// Result of comparing the combined gradient with its two path components.
#[derive(Clone, Debug, Serialize)]
pub struct DecompositionReport {
    pub lambda3: f64,
    pub sampled: usize,
    /// largest `|a − (b + λ₃c)| / max(|a|, floor)` over sampled enhancer coordinates
    pub enhancer_residual: f64,
    /// largest `|∂L/∂ω_d − ∂L^d/∂ω_d|` relative error over all downstream coordinates
    pub downstream_residual: f64,
    /// largest relative error between the combined gradient and central differences
    pub finite_difference_error: f64,
    pub finite_difference_probes: usize,
    pub coordinates: Vec<CoordinateReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateReport {
    pub param: String,
    pub index: usize,
    pub combined: f64,
    pub downstream_path: f64,
    pub enhancement_path: f64,
    pub finite_difference: Option<f64>,
}

impl DecompositionReport {
    pub fn passes(&self, tol_decomposition: f64, tol_downstream: f64, tol_fd: f64) -> bool {
        self.enhancer_residual <= tol_decomposition
            && self.downstream_residual <= tol_downstream
            && self.finite_difference_error <= tol_fd
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "lambda3 = {}\nsampled = {}\nenhancer_residual = {:.3e}\ndownstream_residual = {:.3e}\nfinite_difference_error = {:.3e}\nfinite_difference_probes = {}\n",
            self.lambda3,
            self.sampled,
            self.enhancer_residual,
            self.downstream_residual,
            self.finite_difference_error,
            self.finite_difference_probes
        );
        out.push_str("param,index,combined,downstream_path,enhancement_path,finite_difference\n");
        for c in &self.coordinates {
            out.push_str(&format!(
                "{},{},{:.12e},{:.12e},{:.12e},{}\n",
                c.param,
                c.index,
                c.combined,
                c.downstream_path,
                c.enhancement_path,
                c.finite_difference.map(|v| format!("{:.12e}", v)).unwrap_or_default()
            ));
        }
        out
    }
}

/// Settings of [`gradient_path_check`].
#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    /// enhancer coordinates compared across the three gradients
    pub samples: usize,
    /// how many of those are also checked by central differences
    pub fd_probes: usize,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            samples: 64,
            fd_probes: 8,
            fd_step: 1e-5,
            seed: 0,
        }
    }
}

/// Relative comparisons are floored at this fraction of the largest sampled
/// gradient magnitude, so coordinates whose gradient is pure cancellation
/// noise do not dominate.
const RELATIVE_FLOOR: f64 = 1e-9;
const FD_FLOOR: f64 = 1e-8;

fn objective(
    ctx: &Ctx<'_>,
    model: &Model,
    batch: &Batch,
    mask: &Tensor,
    weights: &LossWeights,
) -> Result<f64> {
    let pass = enhancement_pass(ctx, model, batch, weights, (0.0, 0.0))?;
    let ld = loss_downstream_var(model.seg.forward(ctx, pass.xhat)?, mask)?;
    Ok(cooperative_loss_var(ld, pass.loss, weights.lambda3).value().item())
}

/// Compares the gradient of `L = L^d + λ₃ L^e` with respect to enhancer
/// parameters against its downstream and enhancement path components, checks
/// that the segmentation gradient ignores `L^e`, and probes a few enhancer
/// coordinates by central differences.
pub fn gradient_path_check(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    settings: &CheckSettings,
) -> Result<DecompositionReport> {
    let mask = batch
        .mask
        .as_ref()
        .ok_or_else(|| invalid!("gradient path check needs segmentation masks"))?;
    let store = &model.store;
    let lambda3 = weights.lambda3;
    let g = Graph::new();
    let ctx = Ctx::new(&g, store, &[Group::Gen, Group::Seg]);
    let pass = enhancement_pass(&ctx, model, batch, weights, (0.0, 0.0))?;
    let ld = loss_downstream_var(model.seg.forward(&ctx, pass.xhat)?, mask)?;
    let le = pass.loss;
    let l = cooperative_loss_var(ld, le, lambda3);
    let (ga, gb, gc) = (g.backward(l), g.backward(ld), g.backward(le));
    let grad_of = |grads: &tape::Gradients, id: ParamId| match ctx.bound(id) {
        Some(v) => grads.get_or_zeros(v),
        None => Tensor::zeros(store.get(id).shape().to_vec()),
    };

    // enhancer coordinates, drawn uniformly over all scalars
    let gen_ids = store.ids_in(&[Group::Gen]);
    let sizes: Vec<usize> = gen_ids.iter().map(|&id| store.get(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut flat: Vec<usize> = sample(&mut rng, total, settings.samples.min(total)).into_vec();
    flat.sort_unstable();
    let locate = |mut f: usize| {
        for (k, &n) in sizes.iter().enumerate() {
            if f < n {
                return (gen_ids[k], f);
            }
            f -= n;
        }
        unreachable!("flat index within total")
    };
    let mut coordinates = Vec::with_capacity(flat.len());
    let mut cache: Vec<Option<(Tensor, Tensor, Tensor)>> = vec![None; store.len()];
    for &f in &flat {
        let (id, index) = locate(f);
        let entry = cache[id.index()].get_or_insert_with(|| (grad_of(&ga, id), grad_of(&gb, id), grad_of(&gc, id)));
        coordinates.push(CoordinateReport {
            param: store.name(id).to_string(),
            index,
            combined: entry.0.data()[index],
            downstream_path: entry.1.data()[index],
            enhancement_path: entry.2.data()[index],
            finite_difference: None,
        });
    }
    let scale = coordinates.iter().map(|c| c.combined.abs()).fold(0.0, f64::max);
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    let enhancer_residual = coordinates
        .iter()
        .map(|c| relative_error(c.combined, c.downstream_path + lambda3 * c.enhancement_path, floor))
        .fold(0.0, f64::max);

    let mut downstream_residual: f64 = 0.0;
    for id in store.ids_in(&[Group::Seg]) {
        let (a, b) = (grad_of(&ga, id), grad_of(&gb, id));
        let s = a.max_abs().max(b.max_abs());
        for (&x, &y) in a.data().iter().zip(b.data()) {
            downstream_residual = downstream_residual.max(relative_error(x, y, (RELATIVE_FLOOR * s).max(f64::MIN_POSITIVE)));
        }
    }

    let probes = sample(&mut rng, coordinates.len(), settings.fd_probes.min(coordinates.len())).into_vec();
    let mut finite_difference_error: f64 = 0.0;
    let mut perturbed: ParamStore = store.clone();
    for &k in &probes {
        let (id, index) = locate(flat[k]);
        let orig = store.get(id).data()[index];
        let mut eval_at = |v: f64| -> Result<f64> {
            perturbed.get_mut(id).data_mut()[index] = v;
            let g = Graph::new();
            let ctx = Ctx::new(&g, &perturbed, &[]);
            Ok(objective(&ctx, model, batch, mask, weights)?)
        };
        let h = settings.fd_step;
        let fd = (eval_at(orig + h)? - eval_at(orig - h)?) / (2.0 * h);
        eval_at(orig)?;
        let c = &mut coordinates[k];
        c.finite_difference = Some(fd);
        finite_difference_error = finite_difference_error.max(relative_error(c.combined, fd, FD_FLOOR));
    }

    Ok(DecompositionReport {
        lambda3,
        sampled: coordinates.len(),
        enhancer_residual,
        downstream_residual,
        finite_difference_error,
        finite_difference_probes: probes.len(),
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Group, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle(logits: &Tensor, mask: &Tensor) -> f64 {
        let n = logits.numel() as f64;
        let bce: f64 = logits
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&l, &t)| {
                let p = 1.0 / (1.0 + (-l).exp());
                if t == 1.0 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / n;
        let b = logits.shape()[0];
        let per = logits.numel() / b;
        let mut dice = 0.0;
        for i in 0..b {
            let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
            for j in i * per..(i + 1) * per {
                let p = 1.0 / (1.0 + (-logits.data()[j]).exp());
                inter += p * mask.data()[j];
                sp += p;
                st += mask.data()[j];
            }
            dice += 1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH);
        }
        0.5 * bce + 0.5 * dice / b as f64
    }

    #[test]
    fn downstream_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = Tensor::rand_uniform(vec![2, 1, 8, 8], 0.0, 1.0, &mut rng).map(|v| (v > 0.6) as u8 as f64);
        let saturated = mask.map(|t| if t == 1.0 { 20.0 } else { -20.0 });
        assert!(loss_downstream(&saturated, &mask).unwrap() < 1e-6);

        let half = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let g = Graph::new();
        let bce = bce_with_logits_var(g.constant(Tensor::zeros(vec![1, 1, 2, 2])), g.constant(half.clone()));
        assert!((bce.value().item() - std::f64::consts::LN_2).abs() < 1e-12);

        let logits = Tensor::randn(vec![2, 1, 8, 8], 2.0, &mut rng);
        assert!((loss_downstream(&logits, &mask).unwrap() - oracle(&logits, &mask)).abs() < 1e-7);
        assert!(loss_downstream(&logits, &mask.map(|v| v * 0.5)).is_err());
        assert!(loss_downstream(&logits, &Tensor::zeros(vec![2, 1, 8, 4])).is_err());
    }

    #[test]
    fn segnet_shape_determinism_and_connectivity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = SegNet::new(&mut Builder::new(&mut store, &mut rng, Group::Seg, "seg"), 4);
        let x = Tensor::rand_uniform(vec![1, 1, 64, 64], 0.0, 1.0, &mut rng);
        let run = |x: &Tensor| {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, &[]);
            let xv = g.variable(x.clone());
            let out = net.forward(&ctx, xv).unwrap();
            let value = out.value().as_ref().clone();
            let grads = g.backward(out.mean_all());
            (value, grads.get(xv).unwrap().max_abs())
        };
        let (out, grad) = run(&x);
        assert_eq!(out.shape(), &[1, 1, 64, 64]);
        assert_eq!(run(&x).0, out);
        assert!(grad > 0.0);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, &[]);
        assert!(net.forward(&ctx, g.constant(Tensor::zeros(vec![1, 1, 30, 30]))).is_err());
    }

    fn check_batch(size: usize, seed: u64) -> (Model, Batch) {
        let cfg = crate::config::ModelConfig {
            cue_width: 2,
            gen_width: 2,
            dis_width: 2,
            seg_width: 2,
            ..Default::default()
        };
        let model = Model::new(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Tensor::rand_uniform(vec![1, 1, size, size], 0.0, 1.0, &mut rng);
        let z = Tensor::rand_uniform(vec![1, 1, size, size], 0.0, 1.0, &mut rng);
        let mask = Tensor::rand_uniform(vec![1, 1, size, size], 0.0, 1.0, &mut rng).map(|v| (v > 0.7) as u8 as f64);
        let batch = Batch {
            y,
            z_alt: z.clone(),
            z,
            mask: Some(mask),
        };
        (model, batch)
    }

    #[test]
    fn decomposition_holds_on_small_batch() {
        let (model, batch) = check_batch(16, 3);
        let report = gradient_path_check(&model, &batch, &LossWeights::default(), &CheckSettings::default()).unwrap();
        assert_eq!((report.sampled, report.finite_difference_probes), (64, 8));
        assert!(report.enhancer_residual < 1e-6, "{}", report.to_text());
        assert!(report.downstream_residual < 1e-9, "{}", report.to_text());
        assert!(report.finite_difference_error < 1e-3, "{}", report.to_text());
        assert!(report.coordinates.iter().any(|c| c.enhancement_path != 0.0 && c.downstream_path != 0.0));
    }

    #[test]
    fn path_weights_scale_exactly() {
        let (model, batch) = check_batch(16, 4);
        let settings = CheckSettings {
            fd_probes: 0,
            ..CheckSettings::default()
        };
        let at = |lambda3: f64| {
            let w = LossWeights {
                lambda3,
                ..LossWeights::default()
            };
            gradient_path_check(&model, &batch, &w, &settings).unwrap()
        };
        let zero = at(0.0);
        assert!(zero.coordinates.iter().all(|c| c.combined == c.downstream_path));
        let five = at(5.0);
        let one = at(1.0);
        for ((c5, c1), c0) in five.coordinates.iter().zip(&one.coordinates).zip(&zero.coordinates) {
            assert_eq!(c5.enhancement_path, c1.enhancement_path);
            let scale = c5.combined.abs().max(1e-12);
            assert!((c5.combined - c0.combined - 5.0 * c1.enhancement_path).abs() <= 1e-9 * scale);
        }
    }
}
