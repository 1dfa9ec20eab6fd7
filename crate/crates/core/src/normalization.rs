//! Adaptive normalization: AdaIN, AdaLN, their learnable blend AdaLIN, and the
//! VIN residual block that injects the joint guidance vector into decoder features.

use crate::error::{invalid, Result};
use crate::nn::{Builder, Conv2d, Ctx, Linear, ParamId, ParamStore, LRELU_SLOPE};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use tape::{Graph, Tensor, Var};

/// Floor added to every variance before the square root.
pub const EPS: f64 = 1e-5;

/// Initial AdaLIN blend weight.
pub const RHO_INIT: f64 = 0.5;

/// Value of `gamma` when the style head's pre-activation is zero.
pub const GAMMA_OFFSET: f64 = 1.0;

/// Per-(sample, channel) statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    /// `(B, C)`
    pub mu: Tensor,
    /// `(B, C)`, `sqrt(var + EPS)`
    pub sigma: Tensor,
}

/// Per-sample statistics over `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    /// `(B)`
    pub mu: Tensor,
    /// `(B)`
    pub sigma: Tensor,
}

/// Target per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleAffine {
    /// `(B, C)`
    pub gamma: Tensor,
    /// `(B, C)`
    pub beta: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IntegrationMode {
    #[default]
    #[serde(rename = "adalin")]
    AdaLin,
    #[serde(rename = "adain_only")]
    AdaInOnly,
    #[serde(rename = "adaln_only")]
    AdaLnOnly,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "multiply")]
    Multiply,
}

impl IntegrationMode {
    pub const ALL: [IntegrationMode; 6] = [
        IntegrationMode::AdaLin,
        IntegrationMode::AdaInOnly,
        IntegrationMode::AdaLnOnly,
        IntegrationMode::Concat,
        IntegrationMode::Add,
        IntegrationMode::Multiply,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IntegrationMode::AdaLin => "adalin",
            IntegrationMode::AdaInOnly => "adain_only",
            IntegrationMode::AdaLnOnly => "adaln_only",
            IntegrationMode::Concat => "concat",
            IntegrationMode::Add => "add",
            IntegrationMode::Multiply => "multiply",
        }
    }
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IntegrationMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        IntegrationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid!("unknown integration mode {:?}", s))
    }
}

fn check_rank4(x: &[usize]) -> Result<()> {
    if x.len() != 4 {
        return Err(invalid!("expected (B, C, H, W), got {:?}", x));
    }
    if x[2] * x[3] < 2 {
        return Err(invalid!("spatial extent {}x{} too small for statistics", x[2], x[3]));
    }
    Ok(())
}

/// `(mu, sigma)` over `axes`, kept as size-1 dims.
fn stats_var<'g>(x: Var<'g>, axes: &[usize]) -> (Var<'g>, Var<'g>) {
    let mu = x.mean_axes(axes);
    let var = x.sub(mu).sqr().mean_axes(axes);
    (mu, var.add_scalar(EPS).sqrt())
}

/// Instance statistics as `(B, C, 1, 1)` graph values.
pub fn instance_stats_var<'g>(x: Var<'g>) -> (Var<'g>, Var<'g>) {
    stats_var(x, &[2, 3])
}

/// Layer statistics as `(B, 1, 1, 1)` graph values.
pub fn layer_stats_var<'g>(x: Var<'g>) -> (Var<'g>, Var<'g>) {
    stats_var(x, &[1, 2, 3])
}

pub fn instance_stats(x: &Tensor) -> Result<ChannelStats> {
    check_rank4(x.shape())?;
    let (b, c, _, _) = x.dims4();
    let g = Graph::new();
    let (mu, sigma) = instance_stats_var(g.constant(x.clone()));
    Ok(ChannelStats {
        mu: mu.value().reshape(vec![b, c]),
        sigma: sigma.value().reshape(vec![b, c]),
    })
}

pub fn layer_stats(x: &Tensor) -> Result<LayerStats> {
    check_rank4(x.shape())?;
    let b = x.shape()[0];
    let g = Graph::new();
    let (mu, sigma) = layer_stats_var(g.constant(x.clone()));
    Ok(LayerStats {
        mu: mu.value().reshape(vec![b]),
        sigma: sigma.value().reshape(vec![b]),
    })
}

fn affine<'g>(normed: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
    let s = gamma.shape();
    let (b, c) = (s[0], s[1]);
    normed.mul(gamma.reshape(&[b, c, 1, 1])).add(beta.reshape(&[b, c, 1, 1]))
}

/// `gamma · (x − μ_inst) / σ_inst + beta`, with `gamma`, `beta` shaped `(B, C)`.
pub fn ada_in_var<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
    let (mu, sigma) = instance_stats_var(x);
    affine(x.sub(mu).div(sigma), gamma, beta)
}

/// As [`ada_in_var`] but normalized by per-sample layer statistics.
pub fn ada_ln_var<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
    let (mu, sigma) = layer_stats_var(x);
    affine(x.sub(mu).div(sigma), gamma, beta)
}

/// `rho · AdaIN + (1 − rho) · AdaLN`, `rho` a scalar graph value.
pub fn ada_lin_var<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>, rho: Var<'g>) -> Var<'g> {
    let rho = rho.reshape(&[1, 1, 1, 1]);
    let ain = ada_in_var(x, gamma, beta);
    let aln = ada_ln_var(x, gamma, beta);
    ain.mul(rho).add(aln.mul(rho.rsub_scalar(1.0)))
}

fn check_style(x: &Tensor, style: &StyleAffine) -> Result<()> {
    check_rank4(x.shape())?;
    let want = &x.shape()[..2];
    if style.gamma.shape() != want || style.beta.shape() != want {
        return Err(invalid!(
            "style shapes {:?}/{:?} do not match features {:?}",
            style.gamma.shape(),
            style.beta.shape(),
            x.shape()
        ));
    }
    Ok(())
}

fn eval_styled(
    x: &Tensor,
    style: &StyleAffine,
    f: impl for<'g> Fn(Var<'g>, Var<'g>, Var<'g>) -> Var<'g>,
) -> Result<Tensor> {
    check_style(x, style)?;
    let g = Graph::new();
    let out = f(
        g.constant(x.clone()),
        g.constant(style.gamma.clone()),
        g.constant(style.beta.clone()),
    );
    Ok(out.value().as_ref().clone())
}

pub fn ada_in(x: &Tensor, style: &StyleAffine) -> Result<Tensor> {
    eval_styled(x, style, ada_in_var)
}

pub fn ada_ln(x: &Tensor, style: &StyleAffine) -> Result<Tensor> {
    eval_styled(x, style, ada_ln_var)
}

pub fn ada_lin(x: &Tensor, style: &StyleAffine, rho: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid!("AdaLIN blend weight {} outside [0, 1]", rho));
    }
    eval_styled(x, style, |x, g, b| {
        let r = x.graph().constant(Tensor::scalar(rho));
        ada_lin_var(x, g, b, r)
    })
}

/// Two linear maps from the guidance vector to `(gamma, beta)` for one level.
#[derive(Clone, Debug)]
pub struct StyleHeads {
    pub gamma_head: Linear,
    pub beta_head: Linear,
    pub channels: usize,
}

impl StyleHeads {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, guide_dim: usize, channels: usize) -> Self {
        let mut s = b.sub(name);
        let gamma_head = Linear::new(&mut s, "gamma", guide_dim, channels);
        let beta_head = Linear::new(&mut s, "beta", guide_dim, channels);
        Self {
            gamma_head,
            beta_head,
            channels,
        }
    }

    /// `gamma = softplus(W_γ v + b_γ + softplus⁻¹(GAMMA_OFFSET))`, `beta = W_β v + b_β`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, guide: Var<'g>) -> (Var<'g>, Var<'g>) {
        let shift = GAMMA_OFFSET.exp_m1().ln();
        let gamma = self.gamma_head.forward(ctx, guide).add_scalar(shift).softplus();
        let beta = self.beta_head.forward(ctx, guide);
        (gamma, beta)
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        self.gamma_head.zero_init(store);
        self.beta_head.zero_init(store);
    }
}

/// Residual guidance-injection block:
/// `h = r + conv3(lrelu(N(r, v)))` where `N` is chosen by [`IntegrationMode`].
#[derive(Clone, Debug)]
pub struct VinBlock {
    pub heads: StyleHeads,
    pub rho: ParamId,
    pub conv: Conv2d,
    /// 1×1 fusion conv, present only in [`IntegrationMode::Concat`].
    pub fuse: Option<Conv2d>,
    pub mode: IntegrationMode,
}

impl VinBlock {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        guide_dim: usize,
        channels: usize,
        mode: IntegrationMode,
    ) -> Self {
        let mut s = b.sub(name);
        let heads = StyleHeads::new(&mut s, "style", guide_dim, channels);
        let rho = s.clamped("rho", Tensor::scalar(RHO_INIT), 0.0, 1.0);
        let conv = Conv2d::k3(&mut s, "conv", channels, channels);
        let fuse = (mode == IntegrationMode::Concat).then(|| Conv2d::k1(&mut s, "fuse", 2 * channels, channels));
        Self {
            heads,
            rho,
            conv,
            fuse,
            mode,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, r: Var<'g>, guide: Var<'g>) -> Result<Var<'g>> {
        let shape = r.shape();
        if shape.len() != 4 || shape[1] != self.heads.channels {
            return Err(invalid!(
                "VIN expects {} channels, got features {:?}",
                self.heads.channels,
                shape
            ));
        }
        let gs = guide.shape();
        if gs.len() != 2 || gs[0] != shape[0] {
            return Err(invalid!("guide {:?} does not match batch of {:?}", gs, shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let (gamma, beta) = self.heads.forward(ctx, guide);
        let normed = match self.mode {
            IntegrationMode::AdaLin => ada_lin_var(r, gamma, beta, ctx.p(self.rho)),
            IntegrationMode::AdaInOnly => ada_in_var(r, gamma, beta),
            IntegrationMode::AdaLnOnly => ada_ln_var(r, gamma, beta),
            IntegrationMode::Add => r.add(beta.reshape(&[b, c, 1, 1])),
            IntegrationMode::Multiply => r.mul(gamma.reshape(&[b, c, 1, 1])),
            IntegrationMode::Concat => {
                let fuse = self.fuse.as_ref().expect("concat mode owns a fusion conv");
                let plane = beta.reshape(&[b, c, 1, 1]).expand(&shape);
                fuse.forward(ctx, Var::concat(&[r, plane], 1))
            }
        };
        let delta = self.conv.forward(ctx, normed.leaky_relu(LRELU_SLOPE));
        Ok(r.add(delta))
    }
}
