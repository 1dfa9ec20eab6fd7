//! Single-level orthonormal 2-D Haar transform and high-frequency extraction.
//!
//! For each 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! ll = (a + b + c + d) / 2
//! lh = (a + b - c - d) / 2   vertical detail   (top minus bottom)
//! hl = (a - b + c - d) / 2   horizontal detail (left minus right)
//! hh = (a - b - c + d) / 2   diagonal detail
//! ```
//!
//! The 4×4 block matrix is orthogonal and symmetric, so the transform is its
//! own inverse up to band layout and preserves energy exactly.

use crate::error::{invalid, Result};
use tape::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HaarBands {
    pub ll: Tensor,
    pub lh_vertical: Tensor,
    pub hl_horizontal: Tensor,
    pub hh_diagonal: Tensor,
}

impl HaarBands {
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh_vertical, &self.hl_horizontal, &self.hh_diagonal]
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Which detail bands enter the structure loss. Serializes as its letter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DirectionMask {
    pub use_vertical: bool,
    pub use_horizontal: bool,
    pub use_diagonal: bool,
}

impl TryFrom<String> for DirectionMask {
    type Error = crate::error::Error;
    fn try_from(s: String) -> Result<Self> {
        DirectionMask::parse(&s)
    }
}

impl From<DirectionMask> for String {
    fn from(m: DirectionMask) -> String {
        m.letters()
    }
}

impl Default for DirectionMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl DirectionMask {
    pub const ALL: DirectionMask = DirectionMask {
        use_vertical: true,
        use_horizontal: true,
        use_diagonal: true,
    };

    pub fn new(use_vertical: bool, use_horizontal: bool, use_diagonal: bool) -> Self {
        Self {
            use_vertical,
            use_horizontal,
            use_diagonal,
        }
    }

    pub fn count(&self) -> usize {
        [self.use_vertical, self.use_horizontal, self.use_diagonal]
            .iter()
            .filter(|&&f| f)
            .count()
    }

    fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(invalid!("direction mask selects no high-frequency band"));
        }
        Ok(())
    }

    /// Parses a `v`/`h`/`d` letter set such as `"vhd"` or `"vh"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = DirectionMask::new(false, false, false);
        for ch in s.chars() {
            match ch {
                'v' => m.use_vertical = true,
                'h' => m.use_horizontal = true,
                'd' => m.use_diagonal = true,
                _ => return Err(invalid!("unknown band letter {:?} in {:?}", ch, s)),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn letters(&self) -> String {
        let mut s = String::new();
        if self.use_vertical {
            s.push('v');
        }
        if self.use_horizontal {
            s.push('h');
        }
        if self.use_diagonal {
            s.push('d');
        }
        s
    }
}

fn check_even(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(invalid!("expected (B, C, H, W) tensor, got shape {:?}", shape));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(invalid!("Haar transform needs even non-zero H and W, got {}x{}", h, w));
    }
    Ok((b, c, h, w))
}

const HALF: f64 = 0.5;

pub fn haar_dwt(x: &Tensor) -> Result<HaarBands> {
    let (b, c, h, w) = check_even(x.shape())?;
    let (h2, w2) = (h / 2, w / 2);
    let n = b * c * h2 * w2;
    let (mut ll, mut lh, mut hl, mut hh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let xd = x.data();
    for p in 0..b * c {
        for i in 0..h2 {
            let top = (p * h + 2 * i) * w;
            let bot = top + w;
            for j in 0..w2 {
                let (a, bb) = (xd[top + 2 * j], xd[top + 2 * j + 1]);
                let (cc, d) = (xd[bot + 2 * j], xd[bot + 2 * j + 1]);
                let o = (p * h2 + i) * w2 + j;
                ll[o] = HALF * (a + bb + cc + d);
                lh[o] = HALF * (a + bb - cc - d);
                hl[o] = HALF * (a - bb + cc - d);
                hh[o] = HALF * (a - bb - cc + d);
            }
        }
    }
    let shape = vec![b, c, h2, w2];
    Ok(HaarBands {
        ll: Tensor::from_vec(shape.clone(), ll),
        lh_vertical: Tensor::from_vec(shape.clone(), lh),
        hl_horizontal: Tensor::from_vec(shape.clone(), hl),
        hh_diagonal: Tensor::from_vec(shape, hh),
    })
}

pub fn haar_idwt(bands: &HaarBands) -> Result<Tensor> {
    let shape = bands.ll.shape();
    if shape.len() != 4 {
        return Err(invalid!("bands must be rank 4, got {:?}", shape));
    }
    for t in [&bands.lh_vertical, &bands.hl_horizontal, &bands.hh_diagonal] {
        if t.shape() != shape {
            return Err(invalid!("inconsistent band shapes {:?} vs {:?}", t.shape(), shape));
        }
    }
    let (b, c, h2, w2) = (shape[0], shape[1], shape[2], shape[3]);
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![0.0; b * c * h * w];
    let (ll, lh, hl, hh) = (
        bands.ll.data(),
        bands.lh_vertical.data(),
        bands.hl_horizontal.data(),
        bands.hh_diagonal.data(),
    );
    for p in 0..b * c {
        for i in 0..h2 {
            let top = (p * h + 2 * i) * w;
            let bot = top + w;
            for j in 0..w2 {
                let o = (p * h2 + i) * w2 + j;
                let (s, v, hz, dg) = (ll[o], lh[o], hl[o], hh[o]);
                out[top + 2 * j] = HALF * (s + v + hz + dg);
                out[top + 2 * j + 1] = HALF * (s + v - hz - dg);
                out[bot + 2 * j] = HALF * (s - v + hz - dg);
                out[bot + 2 * j + 1] = HALF * (s - v - hz + dg);
            }
        }
    }
    Ok(Tensor::from_vec(vec![b, c, h, w], out))
}

/// Selected detail bands stacked on the channel axis, band-major:
/// `[vertical(C), horizontal(C), diagonal(C)]` restricted to the mask.
pub fn hf_extract(x: &Tensor, mask: DirectionMask) -> Result<Tensor> {
    mask.validate()?;
    let bands = haar_dwt(x)?;
    Ok(stack_selected(&bands, mask))
}

fn stack_selected(bands: &HaarBands, mask: DirectionMask) -> Tensor {
    let mut parts = Vec::new();
    if mask.use_vertical {
        parts.push(&bands.lh_vertical);
    }
    if mask.use_horizontal {
        parts.push(&bands.hl_horizontal);
    }
    if mask.use_diagonal {
        parts.push(&bands.hh_diagonal);
    }
    Tensor::concat(&parts, 1)
}

/// Differentiable [`hf_extract`]. The backward pass is the transform's
/// adjoint, which for an orthonormal transform is the inverse with the
/// unselected bands zeroed.
pub fn hf_extract_var<'g>(x: Var<'g>, mask: DirectionMask) -> Result<Var<'g>> {
    let xv = x.value();
    let out = hf_extract(&xv, mask)?;
    let (b, c, h, w) = xv.dims4();
    let band_shape = vec![b, c, h / 2, w / 2];
    Ok(x.graph().custom(
        &[x],
        out,
        Box::new(move |g, _| {
            let zero = Tensor::zeros(band_shape.clone());
            let mut k = 0;
            let mut next = |used: bool| {
                if used {
                    let t = g.narrow(1, k * c, c);
                    k += 1;
                    t
                } else {
                    zero.clone()
                }
            };
            let bands = HaarBands {
                ll: zero.clone(),
                lh_vertical: next(mask.use_vertical),
                hl_horizontal: next(mask.use_horizontal),
                hh_diagonal: next(mask.use_diagonal),
            };
            vec![Some(haar_idwt(&bands).expect("band shapes are consistent by construction"))]
        }),
    ))
}
