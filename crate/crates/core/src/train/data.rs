//! Paired hazy / clean images and batch assembly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::{Result, TrainError};
use crate::tensor::{Graph, Tensor};

/// Reads an 8-bit PNG as a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| raw[(y * w + x) * 3 + c] as f32 / 255.0)?)
}

/// Quantizes to 8 bits, clamping to `[0, 1]`.
pub fn to_rgb8(t: &Tensor<f32>, n: usize) -> image::RgbImage {
    let s = t.shape();
    image::RgbImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        let px = |c: usize| (t.get(n, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes the first image of a batch as an 8-bit RGB PNG.
pub fn save_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.shape().c() != 3 {
        return Err(TrainError::Data(format!("expected 3 channels, got {}", t.shape().c())));
    }
    to_rgb8(t, 0).save(path).map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))
}

/// PNG files in `dir`, keyed by file stem.
pub fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| TrainError::Data(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for e in entries {
        let path = e?.path();
        if path.extension().and_then(|x| x.to_str()).is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum Source {
    Files(Vec<(PathBuf, PathBuf)>),
    Memory(Vec<(Tensor<f32>, Tensor<f32>)>),
}

/// Hazy / ground-truth pairs matched by file stem.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub stems: Vec<String>,
    source: Source,
    pub patch_size: usize,
    pub flip: bool,
}

impl PairedDataset {
    /// Pairs `<root>/hazy/<stem>.png` with `<root>/gt/<stem>.png`. Every
    /// stem must appear on both sides.
    pub fn open(root: &Path, patch_size: usize, flip: bool) -> Result<Self> {
        let hazy = png_stems(&root.join("hazy"))?;
        let gt = png_stems(&root.join("gt"))?;
        let mut problems = Vec::new();
        for s in hazy.keys().filter(|s| !gt.contains_key(*s)) {
            problems.push(format!("{s}: no ground truth"));
        }
        for s in gt.keys().filter(|s| !hazy.contains_key(*s)) {
            problems.push(format!("{s}: no hazy image"));
        }
        if !problems.is_empty() {
            return Err(TrainError::Data(format!("unpaired files under {}: {}", root.display(), problems.join("; "))));
        }
        if hazy.is_empty() {
            return Err(TrainError::Data(format!("no PNG pairs under {}", root.display())));
        }
        let stems: Vec<String> = hazy.keys().cloned().collect();
        let files = stems.iter().map(|s| (hazy[s].clone(), gt[s].clone())).collect();
        Ok(Self { stems, source: Source::Files(files), patch_size, flip })
    }

    /// Dataset over decoded tensors, each `(1, 3, H, W)`.
    pub fn from_memory(pairs: Vec<(Tensor<f32>, Tensor<f32>)>, patch_size: usize, flip: bool) -> Result<Self> {
        if pairs.is_empty() {
            return Err(TrainError::Data("empty dataset".into()));
        }
        for (i, (h, g)) in pairs.iter().enumerate() {
            if h.shape() != g.shape() || h.shape().n() != 1 || h.shape().c() != 3 {
                return Err(TrainError::Data(format!("pair {i}: shapes {} and {}", h.shape(), g.shape())));
            }
        }
        let stems = (0..pairs.len()).map(|i| format!("{i:04}")).collect();
        Ok(Self { stems, source: Source::Memory(pairs), patch_size, flip })
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    /// Decoded `(hazy, gt)` pair at full resolution.
    pub fn pair(&self, i: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (h, g) = match &self.source {
            Source::Memory(p) => p[i].clone(),
            Source::Files(f) => (load_image(&f[i].0)?, load_image(&f[i].1)?),
        };
        if h.shape() != g.shape() {
            return Err(TrainError::Data(format!("{}: hazy {} and gt {} differ in size", self.stems[i], h.shape(), g.shape())));
        }
        Ok((h, g))
    }

    /// Crops one window (and optionally mirrors it) identically from both
    /// members of each pair. Images smaller than the patch are reflect-padded.
    pub fn load_batch<R: Rng + ?Sized>(&self, indices: &[usize], rng: &mut R) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let p = self.patch_size;
        if p == 0 {
            return Err(TrainError::Data("patch_size must be positive".into()));
        }
        let mut hazy = Vec::with_capacity(indices.len() * 3 * p * p);
        let mut gt = Vec::with_capacity(hazy.capacity());
        for &i in indices {
            if i >= self.len() {
                return Err(TrainError::Data(format!("index {i} out of range for {} pairs", self.len())));
            }
            let (h, g) = self.pair(i)?;
            let (h, g) = (pad_to(&h, p), pad_to(&g, p));
            let s = h.shape();
            let top = rng.random_range(0..=s.h() - p);
            let left = rng.random_range(0..=s.w() - p);
            let flip = self.flip && rng.random::<bool>();
            for (src, dst) in [(&h, &mut hazy), (&g, &mut gt)] {
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            let xx = if flip { left + p - 1 - x } else { left + x };
                            dst.push(src.get(0, c, top + y, xx));
                        }
                    }
                }
            }
        }
        let dims = [indices.len(), 3, p, p];
        Ok((Tensor::from_vec(dims, hazy)?, Tensor::from_vec(dims, gt)?))
    }
}

fn pad_to(t: &Tensor<f32>, p: usize) -> Tensor<f32> {
    let s = t.shape();
    let (ph, pw) = (p.saturating_sub(s.h()), p.saturating_sub(s.w()));
    if ph == 0 && pw == 0 {
        return t.clone();
    }
    let mut g = Graph::new();
    g.pad_reflect(&Graph::constant(t.clone()), ph, pw).value().clone()
}
