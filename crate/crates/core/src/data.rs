//! Synthetic phantoms: curvilinear bright structures on a textured background,
//! their degraded low-quality counterparts, and on-disk unpaired splits.

use crate::error::{invalid, Error, Result};
use crate::imageio::{load_gray, load_mask, save_gray, save_mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use tape::Tensor;

pub const GENERATOR_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// `(1, H, W)` in `[0, 1]`
    pub image: Tensor,
    /// `(H, W)` in `{0, 1}`
    pub mask: Tensor,
    pub seed: u64,
}

impl Phantom {
    /// The image as a `(1, 1, H, W)` batch.
    pub fn batch(&self) -> Tensor {
        let s = self.image.shape();
        self.image.reshape(vec![1, 1, s[1], s[2]])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub illumination_gain_range: (f64, f64),
    pub blur_sigma_range: (f64, f64),
    pub noise_std_range: (f64, f64),
    pub vignette_strength: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            illumination_gain_range: (0.35, 0.7),
            blur_sigma_range: (0.6, 1.4),
            noise_std_range: (0.04, 0.08),
            vignette_strength: 0.35,
        }
    }
}

impl DegradationConfig {
    pub fn identity() -> Self {
        Self {
            illumination_gain_range: (1.0, 1.0),
            blur_sigma_range: (0.0, 0.0),
            noise_std_range: (0.0, 0.0),
            vignette_strength: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("illumination_gain_range", self.illumination_gain_range),
            ("blur_sigma_range", self.blur_sigma_range),
            ("noise_std_range", self.noise_std_range),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(invalid!("{} must satisfy low <= high, got ({}, {})", name, lo, hi));
            }
            if lo < 0.0 {
                return Err(invalid!("{} must be non-negative", name));
            }
        }
        if !(0.0..=1.0).contains(&self.vignette_strength) {
            return Err(invalid!("vignette_strength must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(invalid!("unknown split {:?}", s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub hq_ids: Vec<String>,
    pub lq_ids: Vec<String>,
    pub split: Split,
    pub root_path: PathBuf,
    pub size: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn image_path(&self, id: &str) -> PathBuf {
        let kind = if self.hq_ids.iter().any(|h| h == id) { "hq" } else { "lq" };
        self.root_path.join(self.split.as_str()).join(kind).join(format!("{}.png", id))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root_path
            .join(self.split.as_str())
            .join("masks")
            .join(format!("{}.png", id))
    }

    /// Reads `<root>/manifest.json` and returns the entry for `split`.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let file = read_manifest_file(root)?
            .ok_or_else(|| invalid!("no {} under {}", MANIFEST_FILE, root.display()))?;
        let entry = file
            .splits
            .get(&split)
            .ok_or_else(|| invalid!("manifest at {} has no {} split", root.display(), split))?;
        Ok(DatasetManifest {
            hq_ids: entry.hq_ids.clone(),
            lq_ids: entry.lq_ids.clone(),
            split,
            root_path: root.to_path_buf(),
            size: file.size,
            seed: entry.seed,
        })
    }
}

/// On-disk manifest layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub format: String,
    pub generator_version: u32,
    pub size: usize,
    pub splits: BTreeMap<Split, SplitEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub seed: u64,
    pub degradation: DegradationConfig,
    pub hq_ids: Vec<String>,
    pub lq_ids: Vec<String>,
}

fn read_manifest_file(root: &Path) -> Result<Option<ManifestFile>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| invalid!("malformed manifest {}: {}", path.display(), e))?;
    Ok(Some(file))
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)))
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 || !size.is_power_of_two() {
        return Err(invalid!("phantom size must be a power of two >= 16, got {}", size));
    }
    Ok(())
}

/// Separable Gaussian blur of a `(H, W)` row-major plane with mirrored borders.
pub(crate) fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // symmetric extension, repeated for kernels wider than the image
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn make_phantom(seed: u64, size: usize) -> Result<Phantom> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size;
    let scale = n as f64 / 64.0;

    // background: smooth gratings plus fine blurred speckle
    let base = uniform(&mut rng, 0.18, 0.3);
    let mut bg = vec![base; n * n];
    for _ in 0..3 {
        let (fx, fy) = (uniform(&mut rng, -3.0, 3.0), uniform(&mut rng, -3.0, 3.0));
        let (amp, phase) = (uniform(&mut rng, 0.02, 0.05), uniform(&mut rng, 0.0, 2.0 * PI));
        for y in 0..n {
            for x in 0..n {
                let t = 2.0 * PI * (fx * x as f64 + fy * y as f64) / n as f64 + phase;
                bg[y * n + x] += amp * t.sin();
            }
        }
    }
    let speckle: Vec<f64> = (0..n * n).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let speckle = gaussian_blur(&speckle, n, n, 0.8);
    let speckle_amp = uniform(&mut rng, 0.06, 0.1);
    for (b, s) in bg.iter_mut().zip(&speckle) {
        *b += speckle_amp * s;
    }

    // curvilinear structures as min-distance fields to random smooth paths
    let mut intensity = vec![0.0f64; n * n];
    let mut mask = vec![0.0; n * n];
    let curves = rng.random_range(3..=6);
    let drift = Normal::new(0.0, 0.06).expect("valid normal");
    for _ in 0..curves {
        let half_width = uniform(&mut rng, 0.7, 1.5) * scale.max(0.5);
        let peak = uniform(&mut rng, 0.45, 0.7);
        let curvature = uniform(&mut rng, -0.02, 0.02);
        let (mut px, mut py) = (uniform(&mut rng, 0.0, n as f64), uniform(&mut rng, 0.0, n as f64));
        let mut heading = uniform(&mut rng, 0.0, 2.0 * PI);
        let steps = (uniform(&mut rng, 1.2, 2.4) * n as f64) as usize;
        let reach = (half_width * 3.0).ceil() as isize + 1;
        let mut dist = vec![f64::INFINITY; n * n];
        for _ in 0..steps {
            let (cx, cy) = (px.floor() as isize, py.floor() as isize);
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= n as isize || y >= n as isize {
                        continue;
                    }
                    let (ux, uy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
                    let d = (ux * ux + uy * uy).sqrt();
                    let slot = &mut dist[y as usize * n + x as usize];
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
            heading += curvature + drift.sample(&mut rng);
            px += 0.5 * heading.cos();
            py += 0.5 * heading.sin();
            if px < -4.0 || py < -4.0 || px > n as f64 + 4.0 || py > n as f64 + 4.0 {
                break;
            }
        }
        for i in 0..n * n {
            let d = dist[i];
            if d.is_finite() {
                let v = peak * (-(d * d) / (2.0 * half_width * half_width)).exp();
                intensity[i] = intensity[i].max(v);
                if d <= half_width {
                    mask[i] = 1.0;
                }
            }
        }
    }
    let image: Vec<f64> = bg
        .iter()
        .zip(&intensity)
        .map(|(b, s)| (b + s).clamp(0.0, 1.0))
        .collect();
    Ok(Phantom {
        image: Tensor::from_vec(vec![1, n, n], image),
        mask: Tensor::from_vec(vec![n, n], mask),
        seed,
    })
}

/// Low-quality counterpart: `clamp(illumination · vignette · blur(x) + noise)`.
pub fn degrade(phantom: &Phantom, cfg: &DegradationConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let s = phantom.image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(invalid!("phantom image must be (1, H, W), got {:?}", s));
    }
    let (h, w) = (s[1], s[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = uniform(&mut rng, cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
    let (g0, g1) = cfg.illumination_gain_range;
    let gain_a = uniform(&mut rng, g0, g1);
    let gain_b = uniform(&mut rng, g0, g1);
    let angle = uniform(&mut rng, 0.0, 2.0 * PI);
    let noise_std = uniform(&mut rng, cfg.noise_std_range.0, cfg.noise_std_range.1);

    let blurred = gaussian_blur(phantom.image.data(), h, w, sigma);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let span = ((h * h + w * w) as f64).sqrt();
    let r_max = (cx * cx + cy * cy).sqrt().max(1.0);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let t = (0.5 + (dx * angle.cos() + dy * angle.sin()) / span).clamp(0.0, 1.0);
            let illum = gain_a + (gain_b - gain_a) * t;
            let r = (dx * dx + dy * dy).sqrt() / r_max;
            let vignette = 1.0 - cfg.vignette_strength * r * r;
            let mut v = illum * vignette * blurred[y * w + x];
            if noise_std > 0.0 {
                let z: f64 = noise.sample(&mut rng);
                v += noise_std * z;
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Tensor::from_vec(vec![1, 1, h, w], out))
}

/// Generates a split and records it in `<root>/manifest.json`, replacing any
/// previous entry for the same split.
pub fn build_unpaired_split(
    n_hq: usize,
    n_lq: usize,
    size: usize,
    seed: u64,
    root: &Path,
    split: Split,
    degradation: &DegradationConfig,
) -> Result<DatasetManifest> {
    if n_hq == 0 || n_lq == 0 {
        return Err(invalid!("need at least one HQ and one LQ image, got {} / {}", n_hq, n_lq));
    }
    check_size(size)?;
    degradation.validate()?;
    let mut manifest_file = match read_manifest_file(root)? {
        Some(f) if f.size != size => {
            return Err(invalid!(
                "dataset at {} already holds {}px images, not {}px",
                root.display(),
                f.size,
                size
            ))
        }
        Some(f) => f,
        None => ManifestFile {
            format: "cueguide-dataset".into(),
            generator_version: GENERATOR_VERSION,
            size,
            splits: BTreeMap::new(),
        },
    };

    let hq_seed = |i: usize| derive_seed(&[seed, split.tag(), 0, i as u64]);
    let lq_seed = |i: usize| derive_seed(&[seed, split.tag(), 1, i as u64]);
    let hq_sources: HashSet<u64> = (0..n_hq).map(hq_seed).collect();
    if (0..n_lq).any(|i| hq_sources.contains(&lq_seed(i))) {
        return Err(Error::State("seed derivation produced overlapping HQ/LQ sources".into()));
    }

    let dir = root.join(split.as_str());
    let mut hq_ids = Vec::with_capacity(n_hq);
    for i in 0..n_hq {
        let id = format!("{}-hq-{:05}", split, i);
        let p = make_phantom(hq_seed(i), size)?;
        save_gray(&dir.join("hq").join(format!("{}.png", id)), &p.image)?;
        save_mask(&dir.join("masks").join(format!("{}.png", id)), &p.mask)?;
        hq_ids.push(id);
    }
    let mut lq_ids = Vec::with_capacity(n_lq);
    for i in 0..n_lq {
        let id = format!("{}-lq-{:05}", split, i);
        let p = make_phantom(lq_seed(i), size)?;
        let lq = degrade(&p, degradation, derive_seed(&[seed, split.tag(), 2, i as u64]))?;
        save_gray(&dir.join("lq").join(format!("{}.png", id)), &lq)?;
        save_mask(&dir.join("masks").join(format!("{}.png", id)), &p.mask)?;
        lq_ids.push(id);
    }

    manifest_file.splits.insert(
        split,
        SplitEntry {
            seed,
            degradation: degradation.clone(),
            hq_ids: hq_ids.clone(),
            lq_ids: lq_ids.clone(),
        },
    );
    let text = serde_json::to_string_pretty(&manifest_file).expect("manifest serializes");
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    Ok(DatasetManifest {
        hq_ids,
        lq_ids,
        split,
        root_path: root.to_path_buf(),
        size,
        seed,
    })
}

/// A split decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub manifest: DatasetManifest,
    /// `(1, 1, S, S)` each
    pub hq: Vec<Tensor>,
    pub hq_masks: Vec<Tensor>,
    pub lq: Vec<Tensor>,
    pub lq_masks: Vec<Tensor>,
}

impl LoadedSplit {
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let manifest = DatasetManifest::load(root, split)?;
        let dir = root.join(split.as_str());
        let read = |kind: &str, ids: &[String]| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
            let mut imgs = Vec::with_capacity(ids.len());
            let mut masks = Vec::with_capacity(ids.len());
            for id in ids {
                let img = load_gray(&dir.join(kind).join(format!("{}.png", id)))?;
                let mask = load_mask(&dir.join("masks").join(format!("{}.png", id)))?;
                if img.shape() != [1, 1, manifest.size, manifest.size] || mask.shape() != img.shape() {
                    return Err(invalid!("{} does not match the manifest size {}", id, manifest.size));
                }
                imgs.push(img);
                masks.push(mask);
            }
            Ok((imgs, masks))
        };
        let (hq, hq_masks) = read("hq", &manifest.hq_ids)?;
        let (lq, lq_masks) = read("lq", &manifest.lq_ids)?;
        Ok(Self {
            manifest,
            hq,
            hq_masks,
            lq,
            lq_masks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::{dequantize, quantize};

    #[test]
    fn phantom_contract() {
        let p = make_phantom(0, 64).unwrap();
        assert_eq!(p.image.shape(), &[1, 64, 64]);
        assert_eq!(p.mask.shape(), &[64, 64]);
        assert!(p.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let fg = p.mask.sum();
        assert!(fg > 0.0 && fg < 0.5 * 64.0 * 64.0, "foreground {}", fg);
        assert_eq!(make_phantom(0, 64).unwrap(), p);
    }

    #[test]
    fn phantoms_differ_by_seed() {
        let a = make_phantom(0, 64).unwrap();
        let b = make_phantom(1, 64).unwrap();
        let differing = a.image.data().iter().zip(b.image.data()).filter(|(x, y)| x != y).count();
        assert!(differing as f64 > 0.01 * 64.0 * 64.0);
    }

    #[test]
    fn phantom_size_checks() {
        assert!(make_phantom(0, 8).is_err());
        assert!(make_phantom(0, 48).is_err());
        assert!(make_phantom(0, 16).is_ok());
    }

    #[test]
    fn structures_are_brighter_than_background() {
        let p = make_phantom(7, 64).unwrap();
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (v, m) in p.image.data().iter().zip(p.mask.data()) {
            if *m > 0.5 {
                fg += v;
                nf += 1.0;
            } else {
                bg += v;
                nb += 1.0;
            }
        }
        assert!(fg / nf > bg / nb + 0.2);
    }

    #[test]
    fn identity_degradation_is_exact() {
        let p = make_phantom(3, 32).unwrap();
        let out = degrade(&p, &DegradationConfig::identity(), 99).unwrap();
        assert_eq!(out.data(), p.image.data());
    }

    #[test]
    fn uniform_gain_scales() {
        let p = make_phantom(4, 32).unwrap();
        let cfg = DegradationConfig {
            illumination_gain_range: (0.5, 0.5),
            ..DegradationConfig::identity()
        };
        let out = degrade(&p, &cfg, 1).unwrap();
        for (o, i) in out.data().iter().zip(p.image.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let p = make_phantom(5, 64).unwrap();
        let cfg = DegradationConfig {
            blur_sigma_range: (2.0, 2.0),
            ..DegradationConfig::identity()
        };
        let out = degrade(&p, &cfg, 1).unwrap();
        assert!((out.mean() - p.image.mean()).abs() < 1e-3);
    }

    #[test]
    fn degradation_is_deterministic_and_bounded() {
        let p = make_phantom(6, 32).unwrap();
        let cfg = DegradationConfig::default();
        let a = degrade(&p, &cfg, 11).unwrap();
        assert_eq!(a, degrade(&p, &cfg, 11).unwrap());
        assert_ne!(a, degrade(&p, &cfg, 12).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.mean() < p.image.mean());
    }

    #[test]
    fn invalid_degradation_config() {
        let p = make_phantom(6, 16).unwrap();
        let cfg = DegradationConfig {
            noise_std_range: (0.2, 0.1),
            ..DegradationConfig::default()
        };
        assert!(degrade(&p, &cfg, 0).is_err());
    }

    #[test]
    fn split_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DegradationConfig::default();
        let m = build_unpaired_split(3, 2, 16, 5, dir.path(), Split::Train, &cfg).unwrap();
        assert_eq!(m.hq_ids.len(), 3);
        assert_eq!(m.lq_ids.len(), 2);
        let hq: HashSet<_> = m.hq_ids.iter().collect();
        assert!(m.lq_ids.iter().all(|id| !hq.contains(id)));
        for id in m.hq_ids.iter().chain(&m.lq_ids) {
            assert!(m.image_path(id).exists());
            assert!(m.mask_path(id).exists());
        }
        let first = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let img_a = std::fs::read(m.image_path(&m.lq_ids[1])).unwrap();
        build_unpaired_split(3, 2, 16, 5, dir.path(), Split::Train, &cfg).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
        assert_eq!(img_a, std::fs::read(m.image_path(&m.lq_ids[1])).unwrap());

        build_unpaired_split(1, 1, 16, 6, dir.path(), Split::Test, &cfg).unwrap();
        let train = DatasetManifest::load(dir.path(), Split::Train).unwrap();
        assert_eq!(train, m);
        let loaded = LoadedSplit::load(dir.path(), Split::Test).unwrap();
        assert_eq!(loaded.hq.len(), 1);
        assert_eq!(loaded.lq_masks[0].shape(), &[1, 1, 16, 16]);
        for v in loaded.lq[0].data() {
            assert!((0.0..=1.0).contains(v));
            assert_eq!(*v, dequantize(quantize(*v)));
        }
        assert!(build_unpaired_split(0, 1, 16, 5, dir.path(), Split::Train, &cfg).is_err());
        assert!(build_unpaired_split(1, 1, 32, 5, dir.path(), Split::Train, &cfg).is_err());
    }

    #[test]
    fn lq_sources_never_in_hq_set() {
        let hq: HashSet<u64> = (0..200).map(|i| derive_seed(&[1, 1, 0, i])).collect();
        assert!((0..200).all(|i| !hq.contains(&derive_seed(&[1, 1, 1, i]))));
    }
}
