//! Patch discriminator and its adversarial loss pair.

use crate::error::{invalid, Result};
use crate::nn::{Builder, Conv2d, Ctx, LRELU_SLOPE};
use rand::Rng;
use tape::{Graph, Tensor, Var};

/// Four 4×4 convolutions: three stride-2 blocks then a stride-1 logit head.
/// A 64×64 input yields a 7×7 logit grid with a 46-pixel receptive field.
#[derive(Clone, Debug)]
pub struct Discriminator {
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, in_channels: usize, width: usize) -> Self {
        let widths = [width, 2 * width, 4 * width];
        let mut cin = in_channels;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv2d::new(b, &format!("block{}", i + 1), cin, w, 4, 2, 1);
                cin = w;
                conv
            })
            .collect();
        let head = Conv2d::new(b, "head", cin, 1, 4, 1, 1);
        Self { blocks, head }
    }

    /// `(B, C, H, W) -> (B, 1, H/8 − 1, W/8 − 1)` pre-sigmoid patch scores.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[2] < 16 || s[3] < 16 || s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(invalid!(
                "discriminator expects (B, C, H, W) with H, W multiples of 8 and >= 16, got {:?}",
                s
            ));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(ctx, h).leaky_relu(LRELU_SLOPE);
        }
        Ok(self.head.forward(ctx, h))
    }
}

/// `0.5 · (mean softplus(−real) + mean softplus(fake))`, i.e. the binary
/// cross-entropy with real patches labelled 1 and fake patches 0.
pub fn loss_gan_d_var<'g>(real: Var<'g>, fake: Var<'g>) -> Var<'g> {
    let real_term = real.neg().softplus().mean_all();
    let fake_term = fake.softplus().mean_all();
    real_term.add(fake_term).mul_scalar(0.5)
}

/// Non-saturating generator loss `mean softplus(−fake) = −mean log σ(fake)`.
pub fn loss_gan_g_var<'g>(fake: Var<'g>) -> Var<'g> {
    fake.neg().softplus().mean_all()
}

pub fn loss_gan_d(real: &Tensor, fake: &Tensor) -> f64 {
    let g = Graph::new();
    loss_gan_d_var(g.constant(real.clone()), g.constant(fake.clone())).value().item()
}

pub fn loss_gan_g(fake: &Tensor) -> f64 {
    let g = Graph::new();
    loss_gan_g_var(g.constant(fake.clone())).value().item()
}
