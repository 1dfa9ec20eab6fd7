//! No-reference image measures and segmentation scores.

use crate::error::{invalid, Result};
use serde::Serialize;
use std::fmt::Write as _;
use tape::{sigmoid_f64, Tensor};

/// Returned when the residual energy vanishes.
pub const SNR_CAP_DB: f64 = 99.0;
const SNR_RESIDUAL_FLOOR: f64 = 1e-12;

/// Radii reported by the evaluation command.
pub const SNR_RADII: [usize; 4] = [3, 5, 7, 9];

/// Last two axes of an image tensor as `(H, W)`; leading axes must be 1.
fn plane(img: &Tensor) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(invalid!("expected a single image plane, got shape {:?}", s));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Mean over the `(2r+1)²` window around each pixel, clipped to the image.
pub fn box_mean(data: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut integral = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += data[y * w + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// `10·log₁₀(Σs² / Σn²)` with `s` the radius-`r` box mean and `n = img − s`.
pub fn snr_r(img: &Tensor, r: usize) -> Result<f64> {
    let (h, w) = plane(img)?;
    if h < 2 * r + 1 || w < 2 * r + 1 {
        return Err(invalid!("image {}x{} is smaller than the {}-radius window", h, w, r));
    }
    let s = box_mean(img.data(), h, w, r);
    let signal: f64 = s.iter().map(|v| v * v).sum();
    let noise: f64 = img.data().iter().zip(&s).map(|(x, m)| (x - m) * (x - m)).sum();
    if noise < SNR_RESIDUAL_FLOOR {
        return Ok(SNR_CAP_DB);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Mean of `sqrt((dx² + dy²) / 2)` over forward differences.
pub fn avg_gradient(img: &Tensor) -> Result<f64> {
    let (h, w) = plane(img)?;
    if h < 2 || w < 2 {
        return Err(invalid!("average gradient needs at least 2x2 pixels"));
    }
    let d = img.data();
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = d[y * w + x + 1] - d[y * w + x];
            let dy = d[(y + 1) * w + x] - d[y * w + x];
            total += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(total / ((h - 1) * (w - 1)) as f64)
}

/// 256-bin histogram index of an intensity in `[0, 1]`.
pub fn intensity_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * 255.999_999).floor() as usize).min(255)
}

/// Shannon entropy of the 256-bin intensity histogram, in bits.
pub fn entropy(img: &Tensor) -> f64 {
    let mut hist = [0usize; 256];
    for &v in img.data() {
        hist[intensity_bin(v)] += 1;
    }
    let n = img.numel() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegScores {
    pub dice: f64,
    pub acc: f64,
    pub sen: f64,
    pub auc: f64,
    pub g_mean: f64,
}

fn check_binary(gt: &Tensor) -> Result<()> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid!("ground-truth mask must be {{0, 1}}-valued"));
    }
    Ok(())
}

/// Mann–Whitney AUC with midranks for ties; 0.5 when a class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    (rank_sum - p * (p + 1.0) / 2.0) / (p * n)
}

/// Scores at `sigmoid(logit) >= threshold`.
///
/// Dice is 1 when prediction and truth are both empty. Sensitivity is 1 and
/// specificity is 1 when their respective classes are absent.
pub fn seg_scores(pred_logits: &Tensor, gt_mask: &Tensor, threshold: f64) -> Result<SegScores> {
    if pred_logits.numel() != gt_mask.numel() || plane(pred_logits)? != plane(gt_mask)? {
        return Err(invalid!(
            "prediction {:?} and mask {:?} differ in shape",
            pred_logits.shape(),
            gt_mask.shape()
        ));
    }
    check_binary(gt_mask)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0.0, 0.0, 0.0, 0.0);
    for (&l, &g) in pred_logits.data().iter().zip(gt_mask.data()) {
        match (sigmoid_f64(l) >= threshold, g == 1.0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fneg += 1.0,
        }
    }
    let dice = if tp + fp + fneg == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    let acc = (tp + tn) / (tp + tn + fp + fneg);
    let sen = if tp + fneg == 0.0 { 1.0 } else { tp / (tp + fneg) };
    let spe = if tn + fp == 0.0 { 1.0 } else { tn / (tn + fp) };
    let labels: Vec<bool> = gt_mask.data().iter().map(|&g| g == 1.0).collect();
    Ok(SegScores {
        dice,
        acc,
        sen,
        auc: auc(pred_logits.data(), &labels),
        g_mean: (sen * spe).sqrt(),
    })
}

/// Per-image measurements for one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub snr: Vec<(usize, f64)>,
    pub avg_gradient: f64,
    pub entropy: f64,
    pub seg: Option<SegScores>,
}

impl ImageMetrics {
    pub fn measure(id: &str, img: &Tensor, radii: &[usize]) -> Result<Self> {
        let snr = radii
            .iter()
            .map(|&r| Ok((r, snr_r(img, r)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: id.to_string(),
            snr,
            avg_gradient: avg_gradient(img)?,
            entropy: entropy(img),
            seg: None,
        })
    }

    fn columns(&self) -> Vec<(String, f64)> {
        let mut cols: Vec<(String, f64)> = self.snr.iter().map(|(r, v)| (format!("snr_r{}", r), *v)).collect();
        cols.push(("ag".into(), self.avg_gradient));
        cols.push(("en".into(), self.entropy));
        if let Some(s) = self.seg {
            cols.extend([
                ("dice".into(), s.dice),
                ("acc".into(), s.acc),
                ("sen".into(), s.sen),
                ("auc".into(), s.auc),
                ("g_mean".into(), s.g_mean),
            ]);
        }
        cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub checkpoint: String,
    pub dataset: String,
    pub seed: u64,
    pub images: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn column_names(&self) -> Vec<String> {
        self.images
            .first()
            .map(|m| m.columns().into_iter().map(|(k, _)| k).collect())
            .unwrap_or_default()
    }

    /// `(column, summary)` pairs in CSV column order.
    pub fn summary(&self) -> Vec<(String, Summary)> {
        let names = self.column_names();
        let rows: Vec<Vec<(String, f64)>> = self.images.iter().map(|m| m.columns()).collect();
        names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let values: Vec<f64> = rows.iter().map(|r| r[i].1).collect();
                (name.clone(), Summary::of(&values))
            })
            .collect()
    }

    pub fn mean_of(&self, column: &str) -> Option<f64> {
        self.summary().into_iter().find(|(k, _)| k == column).map(|(_, s)| s.mean)
    }

    /// One header line, then one row per image: `id,<metric columns>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for name in self.column_names() {
            out.push(',');
            out.push_str(&name);
        }
        out.push('\n');
        for m in &self.images {
            out.push_str(&m.id);
            for (_, v) in m.columns() {
                let _ = write!(out, ",{:.6}", v);
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let metrics: serde_json::Map<String, serde_json::Value> = self
            .summary()
            .into_iter()
            .map(|(k, s)| (k, serde_json::json!({ "mean": s.mean, "std": s.std })))
            .collect();
        serde_json::json!({
            "checkpoint": self.checkpoint,
            "dataset": self.dataset,
            "seed": self.seed,
            "count": self.images.len(),
            "metrics": metrics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_snr(img: &Tensor, r: usize) -> f64 {
        let (h, w) = (img.shape()[2], img.shape()[3]);
        let d = img.data();
        let (mut sig, mut noise) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in y as isize - r as isize..=(y + r) as isize {
                    for xx in x as isize - r as isize..=(x + r) as isize {
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            s += d[yy as usize * w + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                let m = s / n;
                sig += m * m;
                noise += (d[y * w + x] - m).powi(2);
            }
        }
        10.0 * (sig / noise).log10()
    }

    #[test]
    fn snr_cases() {
        assert_eq!(snr_r(&Tensor::full(vec![1, 1, 16, 16], 0.4), 3).unwrap(), SNR_CAP_DB);
        assert_eq!(snr_r(&Tensor::zeros(vec![1, 1, 16, 16]), 3).unwrap(), SNR_CAP_DB);
        assert!(snr_r(&Tensor::zeros(vec![1, 1, 6, 16]), 3).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::rand_uniform(vec![1, 1, 64, 64], 0.0, 1.0, &mut rng);
        assert!((snr_r(&img, 3).unwrap() - naive_snr(&img, 3)).abs() < 1e-9);
    }

    #[test]
    fn avg_gradient_cases() {
        assert_eq!(avg_gradient(&Tensor::full(vec![8, 8], 0.3)).unwrap(), 0.0);
        let w = 9;
        let ramp = Tensor::from_vec(vec![1, 1, 5, w], (0..5 * w).map(|i| (i % w) as f64 / (w - 1) as f64).collect());
        let want = ((1.0 / (w - 1) as f64).powi(2) / 2.0).sqrt();
        assert!((avg_gradient(&ramp).unwrap() - want).abs() < 1e-12);
        assert!(avg_gradient(&Tensor::zeros(vec![1, 4])).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&Tensor::full(vec![4, 4], 0.7)), 0.0);
        let two = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((entropy(&two) - 1.0).abs() < 1e-12);
        let all = Tensor::from_vec(vec![16, 16], (0..256).map(|i| i as f64 / 255.0).collect());
        assert!((entropy(&all) - 8.0).abs() < 1e-12);
        assert_eq!(intensity_bin(1.0), 255);
        assert_eq!(intensity_bin(0.0), 0);
    }

    #[test]
    fn seg_cases() {
        let gt = Tensor::from_vec(vec![1, 1, 2, 4], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let exact = gt.map(|g| if g > 0.5 { 20.0 } else { -20.0 });
        let s = seg_scores(&exact, &gt, 0.5).unwrap();
        assert_eq!((s.dice, s.acc, s.sen, s.g_mean, s.auc), (1.0, 1.0, 1.0, 1.0, 1.0));
        let disjoint = exact.map(|l| -l);
        assert_eq!(seg_scores(&disjoint, &gt, 0.5).unwrap().dice, 0.0);
        // |P| = |G| = 4, |P ∩ G| = 2
        let half = Tensor::from_vec(vec![1, 1, 2, 4], vec![5.0, 5.0, -5.0, -5.0, 5.0, 5.0, -5.0, -5.0]);
        assert!((seg_scores(&half, &gt, 0.5).unwrap().dice - 0.5).abs() < 1e-12);
        let empty = Tensor::zeros(vec![1, 1, 2, 4]);
        let s = seg_scores(&empty.map(|_| -3.0), &empty, 0.5).unwrap();
        assert_eq!((s.dice, s.auc), (1.0, 0.5));
        assert!(seg_scores(&half, &gt.map(|v| v * 0.5), 0.5).is_err());
        assert!(seg_scores(&Tensor::zeros(vec![1, 1, 4, 2]), &gt, 0.5).is_err());
    }

    #[test]
    fn auc_ties_and_monotone_invariance() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4];
        let labels = [false, true, false, true, false];
        let mut wins = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((auc(&scores, &labels) - wins / 6.0).abs() < 1e-12);
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert_eq!(auc(&warped, &labels), auc(&scores, &labels));
    }

    #[test]
    fn report_layout() {
        let img = Tensor::from_vec(vec![1, 1, 8, 8], (0..64).map(|i| (i % 7) as f64 / 7.0).collect());
        let mut m = ImageMetrics::measure("a", &img, &[3]).unwrap();
        m.seg = Some(SegScores { dice: 0.5, acc: 1.0, sen: 0.25, auc: 0.75, g_mean: 0.5 });
        let report = MetricReport {
            checkpoint: "c".into(),
            dataset: "d".into(),
            seed: 1,
            images: vec![m.clone(), ImageMetrics { id: "b".into(), ..m }],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,snr_r3,ag,en,dice,acc,sen,auc,g_mean");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("b,"));
        assert_eq!(report.mean_of("dice"), Some(0.5));
        assert_eq!(report.summary_json()["count"], 2);
    }
}
