//! Training patches: tiling, filtering, random splits, geometric
//! augmentation and per-channel normalization.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{ensure_same_grid, load_raster, save_raster, EOStack, ForestMask, RasterFile, RasterGrid, SparseLabelRaster};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_SHIFT_STEP: usize = 32;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Patch {
    pub channels: usize,
    pub size: usize,
    /// `[channel][row][col]`; NaN = nodata (non-forest before normalization).
    pub eo: Vec<f32>,
    /// NaN wherever `valid` is false.
    pub labels: Vec<f32>,
    pub valid: Vec<bool>,
    pub forest: Vec<bool>,
    /// `(row, col)` of the top-left pixel in the parent grid.
    pub origin: (usize, usize),
    pub augmentation_tag: String,
    pub normalized: bool,
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()))
}

/// Bitwise on float payloads, so nodata compares equal to nodata.
impl PartialEq for Patch {
    fn eq(&self, o: &Self) -> bool {
        self.channels == o.channels
            && self.size == o.size
            && bits_eq(&self.eo, &o.eo)
            && bits_eq(&self.labels, &o.labels)
            && self.valid == o.valid
            && self.forest == o.forest
            && self.origin == o.origin
            && self.augmentation_tag == o.augmentation_tag
            && self.normalized == o.normalized
    }
}

impl Patch {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn forest_fraction(&self) -> f64 {
        self.forest.iter().filter(|&&v| v).count() as f64 / self.pixels() as f64
    }

    pub fn eo_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(1, self.channels, self.size, self.size, self.eo.clone())
    }
}

/// Cut the scene into non-overlapping `patch_size` tiles anchored at (0, 0),
/// row-major. Edge remainders are dropped. Non-forest pixels become nodata in
/// the EO channels and invalid in the labels.
pub fn tile_scene(
    stack: &EOStack,
    labels: &SparseLabelRaster,
    mask: &ForestMask,
    patch_size: usize,
) -> Result<Vec<Patch>> {
    let g = stack.grid;
    ensure_same_grid(&g, &labels.grid, "stack vs labels")?;
    ensure_same_grid(&g, &mask.grid, "stack vs forest mask")?;
    if patch_size == 0 || g.width < patch_size || g.height < patch_size {
        return Err(Error::Shape(format!(
            "scene {}x{} is smaller than one {patch_size} px patch",
            g.width, g.height
        )));
    }
    let (rows, cols) = (g.height / patch_size, g.width / patch_size);
    let c = stack.bands();
    let np = patch_size * patch_size;
    let mut out = Vec::with_capacity(rows * cols);
    for tr in 0..rows {
        for tc in 0..cols {
            let (r0, c0) = (tr * patch_size, tc * patch_size);
            let mut p = Patch {
                channels: c,
                size: patch_size,
                eo: vec![f32::NAN; c * np],
                labels: vec![f32::NAN; np],
                valid: vec![false; np],
                forest: vec![false; np],
                origin: (r0, c0),
                augmentation_tag: "identity".into(),
                normalized: false,
            };
            for r in 0..patch_size {
                for cc in 0..patch_size {
                    let (gr, gc) = (r0 + r, c0 + cc);
                    let i = r * patch_size + cc;
                    if !mask.get(gr, gc) {
                        continue;
                    }
                    p.forest[i] = true;
                    for b in 0..c {
                        p.eo[b * np + i] = stack.get(b, gr, gc);
                    }
                    if let Some(v) = labels.value(gr, gc) {
                        p.labels[i] = v;
                        p.valid[i] = true;
                    }
                }
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Keep patches whose forest fraction is at least `min_forest_fraction`.
pub fn filter_patches_dense(patches: Vec<Patch>, min_forest_fraction: f64) -> Vec<Patch> {
    patches
        .into_iter()
        .filter(|p| p.forest_fraction() >= min_forest_fraction)
        .collect()
}

/// Keep patches with at least one labelled pixel.
pub fn filter_patches_sparse(patches: Vec<Patch>) -> Vec<Patch> {
    patches.into_iter().filter(|p| p.valid_count() > 0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// SHA-256 over the little-endian statistics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-channel mean and standard deviation over forest pixels of the
/// training patches. Standard deviations are floored at [`STD_FLOOR`].
pub fn fit_normalization(train: &[Patch]) -> Result<Normalization> {
    let c = train
        .first()
        .ok_or_else(|| Error::Empty("no training patches for normalization".into()))?
        .channels;
    let mut sum = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for p in train {
        if p.channels != c {
            return Err(Error::Shape("patches disagree on channel count".into()));
        }
        let np = p.pixels();
        for b in 0..c {
            for (i, &f) in p.forest.iter().enumerate() {
                let v = p.eo[b * np + i];
                if f && v.is_finite() {
                    sum[b] += v as f64;
                    count[b] += 1;
                }
            }
        }
    }
    if count.iter().any(|&n| n == 0) {
        return Err(Error::Empty("no forest pixels in training patches".into()));
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let mut ss = vec![0.0f64; c];
    for p in train {
        let np = p.pixels();
        for b in 0..c {
            for (i, &f) in p.forest.iter().enumerate() {
                let v = p.eo[b * np + i];
                if f && v.is_finite() {
                    let d = v as f64 - mean[b];
                    ss[b] += d * d;
                }
            }
        }
    }
    let std = ss
        .iter()
        .zip(&count)
        .map(|(s, &n)| (s / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(Normalization { mean, std })
}

/// Standardize every channel; nodata maps to 0 (the channel mean).
pub fn apply_normalization(patch: &Patch, stats: &Normalization) -> Result<Patch> {
    if patch.normalized {
        return Err(Error::Config("patch is already normalized".into()));
    }
    if stats.channels() != patch.channels {
        return Err(Error::Shape(format!(
            "normalization has {} channels, patch has {}",
            stats.channels(),
            patch.channels
        )));
    }
    let mut out = patch.clone();
    normalize_channels(&mut out.eo, patch.pixels(), stats);
    out.normalized = true;
    Ok(out)
}

pub(crate) fn normalize_channels(eo: &mut [f32], plane: usize, stats: &Normalization) {
    for (b, chunk) in eo.chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[b], stats.std[b]);
        for v in chunk {
            *v = if v.is_finite() {
                ((*v as f64 - m) / s) as f32
            } else {
                0.0
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
    pub test: Vec<Patch>,
    pub normalization: Option<Normalization>,
    pub seed: u64,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl PatchSet {
    pub fn fit_and_apply_normalization(&mut self) -> Result<Normalization> {
        let stats = fit_normalization(&self.train)?;
        self.apply(&stats)?;
        Ok(stats)
    }

    /// Normalize every subset with externally supplied statistics.
    pub fn apply(&mut self, stats: &Normalization) -> Result<()> {
        for set in [&mut self.train, &mut self.val, &mut self.test] {
            for p in set.iter_mut() {
                *p = apply_normalization(p, stats)?;
            }
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }
}

fn fraction_count(n: usize, f: f64) -> usize {
    ((n as f64) * f + 1e-9).floor() as usize
}

/// Seeded uniform permutation; the first `floor(n * test_fraction)` go to
/// test, the next `floor(n * val_fraction)` to validation, the rest to train.
pub fn split_patches(patches: Vec<Patch>, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<PatchSet> {
    if patches.len() < 3 {
        return Err(Error::Empty(format!(
            "need at least 3 patches to split, found {}",
            patches.len()
        )));
    }
    if !(0.0..=1.0).contains(&test_fraction) || !(0.0..=1.0).contains(&val_fraction) || test_fraction + val_fraction > 1.0 {
        return Err(Error::Config(format!(
            "invalid split fractions test={test_fraction} val={val_fraction}"
        )));
    }
    let n = patches.len();
    let n_test = fraction_count(n, test_fraction);
    let n_val = fraction_count(n, val_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Patch>> = patches.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<Patch> {
        order[range].iter().map(|&i| slots[i].take().expect("each index once")).collect()
    };
    let test = take(0..n_test);
    let val = take(n_test..n_test + n_val);
    let train = take(n_test + n_val..n);
    Ok(PatchSet {
        train,
        val,
        test,
        normalization: None,
        seed,
        test_fraction,
        val_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    /// Circular shift by `(rows, cols)` pixels.
    Shift(usize, usize),
}

impl Transform {
    pub fn tag(&self) -> String {
        match self {
            Transform::Identity => "identity".into(),
            Transform::Rot90 => "rot90".into(),
            Transform::Rot180 => "rot180".into(),
            Transform::Rot270 => "rot270".into(),
            Transform::FlipH => "flip_h".into(),
            Transform::FlipV => "flip_v".into(),
            Transform::Shift(r, c) => format!("shift_{r}_{c}"),
        }
    }

    /// Source pixel that lands on destination `(r, c)` in an `s x s` plane.
    fn source(&self, r: usize, c: usize, s: usize) -> (usize, usize) {
        match *self {
            Transform::Identity => (r, c),
            // counter-clockwise quarter turn
            Transform::Rot90 => (c, s - 1 - r),
            Transform::Rot180 => (s - 1 - r, s - 1 - c),
            Transform::Rot270 => (s - 1 - c, r),
            Transform::FlipH => (r, s - 1 - c),
            Transform::FlipV => (s - 1 - r, c),
            Transform::Shift(dr, dc) => ((r + s - dr % s) % s, (c + s - dc % s) % s),
        }
    }

    pub fn apply_plane<T: Copy>(&self, src: &[T], s: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(s * s);
        for r in 0..s {
            for c in 0..s {
                let (sr, sc) = self.source(r, c, s);
                out.push(src[sr * s + sc]);
            }
        }
        out
    }

    pub fn apply(&self, p: &Patch) -> Patch {
        let s = p.size;
        let np = p.pixels();
        let mut eo = Vec::with_capacity(p.eo.len());
        for b in 0..p.channels {
            eo.extend(self.apply_plane(&p.eo[b * np..(b + 1) * np], s));
        }
        Patch {
            channels: p.channels,
            size: s,
            eo,
            labels: self.apply_plane(&p.labels, s),
            valid: self.apply_plane(&p.valid, s),
            forest: self.apply_plane(&p.forest, s),
            origin: p.origin,
            augmentation_tag: self.tag(),
            normalized: p.normalized,
        }
    }
}

/// Every non-identity transform available for an `s x s` patch.
pub fn transform_budget(size: usize, shift_step: usize) -> Vec<Transform> {
    let mut t = vec![
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::FlipH,
        Transform::FlipV,
    ];
    if shift_step > 0 && shift_step < size {
        for dr in (0..size).step_by(shift_step) {
            for dc in (0..size).step_by(shift_step) {
                if (dr, dc) != (0, 0) {
                    t.push(Transform::Shift(dr, dc));
                }
            }
        }
    }
    t
}

/// Originals plus transformed copies, `round(multiplier * n)` in total
/// (capped by the distinct-transform budget). Output is ordered by
/// `(origin, augmentation_tag)`.
pub fn augment(train: &[Patch], multiplier: f64, shift_step: usize, seed: u64) -> Result<Vec<Patch>> {
    if train.is_empty() {
        return Err(Error::Empty("no patches to augment".into()));
    }
    if !(multiplier >= 1.0 && multiplier.is_finite()) {
        return Err(Error::Config(format!("augmentation multiplier {multiplier} < 1")));
    }
    let n = train.len();
    let size = train[0].size;
    let budget = transform_budget(size, shift_step);
    let target = ((multiplier * n as f64).round() as usize).min(n * (1 + budget.len()));
    let extras = target.saturating_sub(n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let per_patch: Vec<Vec<Transform>> = (0..n)
        .map(|_| {
            let mut t = budget.clone();
            t.shuffle(&mut rng);
            t
        })
        .collect();

    let mut out: Vec<Patch> = train.to_vec();
    for j in 0..extras {
        let i = order[j % n];
        out.push(per_patch[i][j / n].apply(&train[i]));
    }
    out.sort_by(|a, b| {
        a.origin
            .cmp(&b.origin)
            .then_with(|| a.augmentation_tag.cmp(&b.augmentation_tag))
    });
    Ok(out)
}

/// Stack patches into a batch tensor plus flattened labels and validity.
pub fn batch(patches: &[&Patch]) -> Result<(Tensor<f32>, Vec<f32>, Vec<bool>)> {
    let first = patches.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (c, s) = (first.channels, first.size);
    let mut x = Vec::with_capacity(patches.len() * c * s * s);
    let mut y = Vec::with_capacity(patches.len() * s * s);
    let mut v = Vec::with_capacity(patches.len() * s * s);
    for p in patches {
        if p.channels != c || p.size != s {
            return Err(Error::Shape("patches in a batch differ in shape".into()));
        }
        if !p.normalized {
            return Err(Error::Config("batch built from unnormalized patches".into()));
        }
        x.extend_from_slice(&p.eo);
        y.extend_from_slice(&p.labels);
        v.extend_from_slice(&p.valid);
    }
    Ok((Tensor::from_vec(patches.len(), c, s, s, x), y, v))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    subset: String,
    stem: String,
    origin: (usize, usize),
    augmentation_tag: String,
    normalized: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    fractions: Fractions,
    counts: Counts,
    normalization: Option<Normalization>,
    transforms: Vec<String>,
    patches: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Fractions {
    test: f64,
    val: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Counts {
    train: usize,
    val: usize,
    test: usize,
}

fn patch_grid(p: &Patch) -> RasterGrid {
    RasterGrid {
        width: p.size,
        height: p.size,
        pixel_size: 10.0,
        origin_x: p.origin.1 as f64 * 10.0,
        origin_y: -(p.origin.0 as f64) * 10.0,
    }
}

/// Write a patch set as raster files plus `manifest.json`.
pub fn save_patchset(set: &PatchSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut transforms: Vec<String> = Vec::new();
    for (name, subset) in [("train", &set.train), ("val", &set.val), ("test", &set.test)] {
        for (i, p) in subset.iter().enumerate() {
            let stem = format!("{name}_{i:05}");
            let grid = patch_grid(p);
            save_raster(
                &dir.join(format!("{stem}_eo")),
                &RasterFile {
                    grid,
                    band_names: (0..p.channels).map(|b| format!("ch{b}")).collect(),
                    data: p.eo.clone(),
                },
            )?;
            save_raster(
                &dir.join(format!("{stem}_labels")),
                &RasterFile {
                    grid,
                    band_names: vec!["height_m".into()],
                    data: p.labels.clone(),
                },
            )?;
            save_raster(
                &dir.join(format!("{stem}_forest")),
                &RasterFile {
                    grid,
                    band_names: vec!["forest".into()],
                    data: p.forest.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(),
                },
            )?;
            if !transforms.contains(&p.augmentation_tag) {
                transforms.push(p.augmentation_tag.clone());
            }
            entries.push(ManifestEntry {
                subset: name.into(),
                stem,
                origin: p.origin,
                augmentation_tag: p.augmentation_tag.clone(),
                normalized: p.normalized,
            });
        }
    }
    transforms.sort();
    let manifest = Manifest {
        seed: set.seed,
        fractions: Fractions {
            test: set.test_fraction,
            val: set.val_fraction,
        },
        counts: Counts {
            train: set.train.len(),
            val: set.val.len(),
            test: set.test.len(),
        },
        normalization: set.normalization.clone(),
        transforms,
        patches: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_patchset(dir: impl AsRef<Path>) -> Result<PatchSet> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let mut set = PatchSet {
        train: vec![],
        val: vec![],
        test: vec![],
        normalization: m.normalization,
        seed: m.seed,
        test_fraction: m.fractions.test,
        val_fraction: m.fractions.val,
    };
    for e in m.patches {
        let eo = load_raster(&dir.join(format!("{}_eo", e.stem)))?;
        let labels = load_raster(&dir.join(format!("{}_labels", e.stem)))?;
        let forest = load_raster(&dir.join(format!("{}_forest", e.stem)))?;
        let size = eo.grid.width;
        let p = Patch {
            channels: eo.band_names.len(),
            size,
            eo: eo.data,
            valid: labels.data.iter().map(|v| v.is_finite()).collect(),
            labels: labels.data,
            forest: forest.data.iter().map(|&v| v != 0.0).collect(),
            origin: e.origin,
            augmentation_tag: e.augmentation_tag,
            normalized: e.normalized,
        };
        match e.subset.as_str() {
            "train" => set.train.push(p),
            "val" => set.val.push(p),
            "test" => set.test.push(p),
            other => return Err(Error::Config(format!("unknown subset {other} in manifest"))),
        }
    }
    if (set.train.len(), set.val.len(), set.test.len()) != (m.counts.train, m.counts.val, m.counts.test) {
        return Err(Error::Config("manifest counts disagree with patch entries".into()));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scene(w: usize, h: usize, forest: impl Fn(usize, usize) -> bool) -> (EOStack, SparseLabelRaster, ForestMask) {
        let grid = RasterGrid::with_size(w, h).unwrap();
        let data: Vec<f32> = (0..2 * w * h).map(|i| i as f32).collect();
        let stack = EOStack::new(grid, vec!["a".into(), "b".into()], data).unwrap();
        let labels = SparseLabelRaster::from_values(grid, (0..w * h).map(|i| (i % 37) as f32).collect()).unwrap();
        let mask = ForestMask::new(grid, (0..w * h).map(|i| forest(i / w, i % w)).collect()).unwrap();
        (stack, labels, mask)
    }

    fn blank_patch(size: usize, tag: &str, origin: (usize, usize)) -> Patch {
        Patch {
            channels: 1,
            size,
            eo: vec![0.0; size * size],
            labels: vec![f32::NAN; size * size],
            valid: vec![false; size * size],
            forest: vec![true; size * size],
            origin,
            augmentation_tag: tag.into(),
            normalized: false,
        }
    }

    #[test]
    fn tiling_grid_arithmetic() {
        let (s, l, m) = scene(512, 512, |_, _| true);
        let p = tile_scene(&s, &l, &m, 256).unwrap();
        let origins: Vec<_> = p.iter().map(|p| p.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);

        let (s, l, m) = scene(600, 600, |_, _| true);
        assert_eq!(tile_scene(&s, &l, &m, 256).unwrap().len(), 4);

        let (s, l, m) = scene(512, 255, |_, _| true);
        assert!(tile_scene(&s, &l, &m, 256).is_err());
    }

    #[test]
    fn tiling_masks_non_forest() {
        let (s, l, m) = scene(8, 8, |r, _| r < 4);
        let p = tile_scene(&s, &l, &m, 8).unwrap();
        let p = &p[0];
        assert!(p.eo[4 * 8].is_nan());
        assert!(!p.valid[4 * 8]);
        assert!(p.valid[0]);
        assert_eq!(p.eo[64 + 3], s.get(1, 0, 3));
        assert_eq!(p.forest_fraction(), 0.5);
    }

    #[test]
    fn dense_filter_threshold() {
        let mut low = blank_patch(10, "identity", (0, 0));
        for f in low.forest.iter_mut().skip(19) {
            *f = false;
        }
        let mut edge = blank_patch(10, "identity", (0, 10));
        for f in edge.forest.iter_mut().skip(20) {
            *f = false;
        }
        let full = blank_patch(10, "identity", (0, 20));
        let kept = filter_patches_dense(vec![low, edge, full], 0.2);
        assert_eq!(kept.iter().map(|p| p.origin.1).collect::<Vec<_>>(), vec![10, 20]);
    }

    #[test]
    fn dense_filter_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid_forest: Vec<bool> = (0..64 * 64).map(|_| rng.gen_bool(0.25)).collect();
        let (s, l, m) = scene(64, 64, |r, c| grid_forest[r * 64 + c] && (r / 16 + c / 16) % 3 != 0);
        let all = tile_scene(&s, &l, &m, 16).unwrap();
        let expected: Vec<(usize, usize)> = all
            .iter()
            .filter(|p| {
                let mut n = 0;
                for r in p.origin.0..p.origin.0 + 16 {
                    for c in p.origin.1..p.origin.1 + 16 {
                        n += m.get(r, c) as usize;
                    }
                }
                n as f64 / 256.0 >= 0.2
            })
            .map(|p| p.origin)
            .collect();
        let kept: Vec<_> = filter_patches_dense(all, 0.2).iter().map(|p| p.origin).collect();
        assert_eq!(kept, expected);
        assert!(!kept.is_empty() && kept.len() < 16);
    }

    #[test]
    fn sparse_filter() {
        let mut one = blank_patch(4, "identity", (0, 0));
        one.valid[5] = true;
        one.labels[5] = 3.0;
        let none = blank_patch(4, "identity", (0, 4));
        let kept = filter_patches_sparse(vec![one, none]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].origin, (0, 0));
    }

    #[test]
    fn split_counts_and_determinism() {
        let mk = |n: usize| (0..n).map(|i| blank_patch(2, "identity", (i, 0))).collect::<Vec<_>>();
        let s = split_patches(mk(614), 0.5, 0.1, 3).unwrap();
        assert_eq!((s.test.len(), s.val.len(), s.train.len()), (307, 61, 246));
        let a = split_patches(mk(10), 0.5, 0.1, 42).unwrap();
        let b = split_patches(mk(10), 0.5, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let all = split_patches(mk(10), 0.0, 0.0, 1).unwrap();
        assert_eq!(all.train.len(), 10);
        assert!(split_patches(mk(2), 0.5, 0.1, 1).is_err());
    }

    #[test]
    fn augmentation_reaches_target() {
        let train: Vec<Patch> = (0..246).map(|i| blank_patch(256, "identity", (i, 0))).collect();
        let out = augment(&train, 1433.0 / 246.0, 32, 9).unwrap();
        assert_eq!(out.len(), 1433);
        let originals = out.iter().filter(|p| p.augmentation_tag == "identity").count();
        assert_eq!(originals, 246);
        // no patch receives the same transform twice
        let mut keys: Vec<_> = out.iter().map(|p| (p.origin, p.augmentation_tag.clone())).collect();
        keys.dedup();
        assert_eq!(keys.len(), 1433);
        assert!(augment(&[], 2.0, 32, 0).is_err());
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = blank_patch(6, "identity", (0, 0));
        p.eo = (0..36).map(|_| rng.gen()).collect();
        let mut q = p.clone();
        for _ in 0..4 {
            q = Transform::Rot90.apply(&q);
        }
        q.augmentation_tag = "identity".into();
        assert_eq!(p, q);
        let r = Transform::Rot270.apply(&Transform::Rot90.apply(&p));
        assert_eq!(r.eo, p.eo);
    }

    #[test]
    fn transforms_keep_marker_aligned_and_mass() {
        let s = 8;
        let mut p = Patch {
            channels: 2,
            size: s,
            eo: vec![0.0; 2 * s * s],
            labels: vec![f32::NAN; s * s],
            valid: vec![false; s * s],
            forest: vec![true; s * s],
            origin: (0, 0),
            augmentation_tag: "identity".into(),
            normalized: false,
        };
        for (i, &(r, c)) in [(1usize, 2usize), (5, 6), (7, 0)].iter().enumerate() {
            let k = r * s + c;
            p.valid[k] = true;
            p.labels[k] = 10.0 + i as f32;
            p.eo[k] = 10.0 + i as f32;
            p.eo[s * s + k] = -(10.0 + i as f32);
        }
        for t in transform_budget(s, 2) {
            let q = t.apply(&p);
            assert_eq!(q.valid_count(), 3, "{}", t.tag());
            for k in 0..s * s {
                if q.valid[k] {
                    assert_eq!(q.eo[k], q.labels[k]);
                    assert_eq!(q.eo[s * s + k], -q.labels[k]);
                } else {
                    assert_eq!(q.eo[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn normalization_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = blank_patch(100, "identity", (0, 0));
        p.channels = 2;
        p.eo = (0..10_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .chain(std::iter::repeat(5.0).take(10_000))
            .collect();
        let st = fit_normalization(std::slice::from_ref(&p)).unwrap();
        assert!(st.mean[0].abs() < 0.05);
        assert!((st.std[0] - 1.0).abs() < 0.05);
        assert_eq!(st.mean[1], 5.0);
        assert_eq!(st.std[1], STD_FLOOR);
        let n = apply_normalization(&p, &st).unwrap();
        assert!(n.eo[10_000..].iter().all(|v| v.abs() < 1e-6));
        assert!(apply_normalization(&n, &st).is_err());

        let mut bare = blank_patch(4, "identity", (0, 0));
        bare.forest = vec![false; 16];
        assert!(fit_normalization(&[bare]).is_err());
    }

    #[test]
    fn nodata_normalizes_to_zero() {
        let mut p = blank_patch(2, "identity", (0, 0));
        p.eo = vec![1.0, 3.0, f32::NAN, 5.0];
        p.forest = vec![true, true, false, true];
        let st = fit_normalization(std::slice::from_ref(&p)).unwrap();
        assert_eq!(st.mean[0], 3.0);
        let n = apply_normalization(&p, &st).unwrap();
        assert_eq!(n.eo[2], 0.0);
    }

    #[test]
    fn patchset_roundtrip() {
        let (s, l, m) = scene(16, 16, |r, c| (r + c) % 5 != 0);
        let patches = tile_scene(&s, &l, &m, 4).unwrap();
        let mut set = split_patches(patches, 0.25, 0.25, 4).unwrap();
        set.train = augment(&set.train, 2.0, 2, 1).unwrap();
        set.fit_and_apply_normalization().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_patchset(&set, dir.path()).unwrap();
        let back = load_patchset(dir.path()).unwrap();
        assert_eq!(back, set);
    }
}
