//! Synthetic source/target scenes: correlated height fields, sensor-like EO
//! channels with saturation and noise, forest masks, and field plots.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plots::{PlotRecord, PlotTable, PLOT_RADII};
use crate::raster::{EOStack, ForestMask, RasterGrid, SparseLabelRaster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteParams {
    pub name: String,
    /// Metres.
    pub mean_height: f64,
    /// Standard deviation of the height field before clamping, metres.
    pub height_spread: f64,
    /// Pixels.
    pub correlation_length: f64,
    pub forest_fraction: f64,
    /// Per-channel multiplicative shift of the noise-free signal; empty = 1.
    #[serde(default)]
    pub channel_gains: Vec<f64>,
    /// Per-channel additive shift; empty = 0.
    #[serde(default)]
    pub channel_offsets: Vec<f64>,
    /// Per-channel site noise, added in quadrature to the sensor noise; empty = 0.
    #[serde(default)]
    pub noise_sd: Vec<f64>,
    pub seed: u64,
}

impl SiteParams {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.mean_height > 0.0) {
            return Err(Error::Config(format!("site {}: mean_height must be positive", self.name)));
        }
        if !(self.height_spread >= 0.0) {
            return Err(Error::Config(format!("site {}: height_spread must be >= 0", self.name)));
        }
        if !(self.correlation_length >= 1.0) {
            return Err(Error::Config(format!("site {}: correlation_length must be >= 1", self.name)));
        }
        if !(self.forest_fraction > 0.0 && self.forest_fraction <= 1.0) {
            return Err(Error::Config(format!("site {}: forest_fraction must be in (0, 1]", self.name)));
        }
        for (what, v) in [("channel_gains", &self.channel_gains), ("channel_offsets", &self.channel_offsets), ("noise_sd", &self.noise_sd)] {
            if !v.is_empty() && v.len() != channels {
                return Err(Error::Config(format!(
                    "site {}: {what} has {} entries for {channels} channels",
                    self.name,
                    v.len()
                )));
            }
        }
        Ok(())
    }

    fn gain(&self, c: usize) -> f64 {
        self.channel_gains.get(c).copied().unwrap_or(1.0)
    }

    fn offset(&self, c: usize) -> f64 {
        self.channel_offsets.get(c).copied().unwrap_or(0.0)
    }

    fn noise(&self, c: usize) -> f64 {
        self.noise_sd.get(c).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// `a * (1 - exp(-h / h_sat)) + b`
    Saturating,
    /// `a * h + b`, interferometric-height analogue.
    LinearHeight,
    /// `a * h + b` with small `a`.
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub name: String,
    pub kind: ChannelKind,
    #[serde(default)]
    pub h_sat: f64,
    pub a: f64,
    pub b: f64,
    pub noise_sd: f64,
}

impl ChannelModel {
    /// Noise-free response to height `h`.
    pub fn response(&self, h: f64) -> f64 {
        match self.kind {
            ChannelKind::Saturating => self.a * (1.0 - (-h / self.h_sat).exp()) + self.b,
            ChannelKind::LinearHeight | ChannelKind::Weak => self.a * h + self.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    pub channels: Vec<ChannelModel>,
}

impl SensorModel {
    /// Fourteen channels: 7 optical (saturating), 2 C-band (weak), 2 L-band
    /// (saturating, larger `h_sat`), 1 canopy-height (linear), 1 coherence
    /// (weak), 1 spare (pure noise).
    pub fn default_14() -> Self {
        let mut channels = Vec::with_capacity(14);
        for i in 0..7 {
            channels.push(ChannelModel {
                name: format!("s2_b{}", i + 1),
                kind: ChannelKind::Saturating,
                h_sat: 6.0 + i as f64,
                a: 1.0 + 0.2 * i as f64,
                b: 0.1 * i as f64,
                noise_sd: 0.08,
            });
        }
        for (i, pol) in ["vv", "vh"].iter().enumerate() {
            channels.push(ChannelModel {
                name: format!("s1_{pol}"),
                kind: ChannelKind::Weak,
                h_sat: 0.0,
                a: 0.05,
                b: -1.0 - i as f64,
                noise_sd: 0.3,
            });
        }
        for (i, pol) in ["hh", "hv"].iter().enumerate() {
            channels.push(ChannelModel {
                name: format!("alos_{pol}"),
                kind: ChannelKind::Saturating,
                h_sat: 20.0 + 5.0 * i as f64,
                a: 2.0,
                b: -1.0,
                noise_sd: 0.15,
            });
        }
        channels.push(ChannelModel {
            name: "tdx_ichm".into(),
            kind: ChannelKind::LinearHeight,
            h_sat: 0.0,
            a: 1.0,
            b: 0.0,
            noise_sd: 1.5,
        });
        channels.push(ChannelModel {
            name: "tdx_coherence".into(),
            kind: ChannelKind::Weak,
            h_sat: 0.0,
            a: -0.003,
            b: 0.8,
            noise_sd: 0.05,
        });
        channels.push(ChannelModel {
            name: "spare".into(),
            kind: ChannelKind::Weak,
            h_sat: 0.0,
            a: 0.02,
            b: 0.0,
            noise_sd: 0.2,
        });
        SensorModel { channels }
    }

    pub fn band_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("sensor model has no channels".into()));
        }
        for c in &self.channels {
            if c.kind == ChannelKind::Saturating && !(c.h_sat > 0.0) {
                return Err(Error::Config(format!("channel {}: h_sat must be positive", c.name)));
            }
            if !(c.noise_sd >= 0.0) {
                return Err(Error::Config(format!("channel {}: noise_sd must be >= 0", c.name)));
            }
        }
        if self.channels.len() == 14 && !self.channels.iter().any(|c| c.kind == ChannelKind::LinearHeight) {
            return Err(Error::Config("a 14-channel sensor model needs a linear_height channel".into()));
        }
        Ok(())
    }
}

/// Channel indices of the three EO combinations in the default layout.
pub fn channel_subset(name: &str, total: usize) -> Result<Vec<usize>> {
    match name {
        "s2" => Ok((0..7.min(total)).collect()),
        "s1s2" => Ok((0..9.min(total)).collect()),
        "ms" => Ok((0..total).collect()),
        other => Err(Error::Config(format!("unknown channel set {other:?} (expected s2, s1s2 or ms)"))),
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fft_rows(data: &mut [Complex<f64>], width: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let fft = if inverse { planner.plan_fft_inverse(width) } else { planner.plan_fft_forward(width) };
    fft.process(data);
}

fn transpose(data: &[Complex<f64>], w: usize, h: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); w * h];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = data[r * w + c];
        }
    }
    out
}

fn frequency(i: usize, n: usize) -> f64 {
    i.min(n - i) as f64 / n as f64
}

/// Zero-mean, unit-variance periodic Gaussian random field: white noise
/// filtered by a Gaussian kernel of standard deviation `ell` pixels.
pub fn gaussian_random_field(w: usize, h: usize, ell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..w * h).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft_rows(&mut buf, w, &mut planner, false);
    let mut t = transpose(&buf, w, h);
    fft_rows(&mut t, h, &mut planner, false);
    let k = 2.0 * std::f64::consts::PI.powi(2) * ell * ell;
    for c in 0..w {
        let fx = frequency(c, w);
        for r in 0..h {
            let fy = frequency(r, h);
            t[c * h + r] *= (-k * (fx * fx + fy * fy)).exp();
        }
    }
    fft_rows(&mut t, h, &mut planner, true);
    let mut buf = transpose(&t, h, w);
    fft_rows(&mut buf, w, &mut planner, true);
    let field: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    field.into_iter().map(|v| (v - mean) / sd).collect()
}

/// Height field with the site's mean and spread, clamped at 0.
pub fn gen_height_field(grid: &RasterGrid, site: &SiteParams) -> Result<Vec<f32>> {
    grid.validate()?;
    if !(site.correlation_length >= 1.0) {
        return Err(Error::Config(format!("correlation_length {} < 1", site.correlation_length)));
    }
    let mut rng = rng_for(site.seed, 0);
    let z = gaussian_random_field(grid.width, grid.height, site.correlation_length, &mut rng);
    Ok(z.iter().map(|v| (site.mean_height + site.height_spread * v).max(0.0) as f32).collect())
}

/// Exactly `round(forest_fraction * n)` forest pixels, chosen as the top of
/// a smooth random field so forest comes in patches.
pub fn gen_forest_mask(grid: &RasterGrid, site: &SiteParams) -> Result<ForestMask> {
    let mut rng = rng_for(site.seed, 1);
    let z = gaussian_random_field(grid.width, grid.height, 2.0 * site.correlation_length, &mut rng);
    let n = z.len();
    let keep = ((site.forest_fraction * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    ForestMask::new(*grid, mask)
}

/// Sensor response to the height field, with the site's gain/offset shift and
/// Gaussian noise.
pub fn gen_eo_channels(grid: &RasterGrid, heights: &[f32], sensor: &SensorModel, site: &SiteParams) -> Result<EOStack> {
    sensor.validate()?;
    site.validate(sensor.channels.len())?;
    if heights.len() != grid.len() {
        return Err(Error::Shape(format!("{} heights for a {}-pixel grid", heights.len(), grid.len())));
    }
    let mut data = Vec::with_capacity(sensor.channels.len() * heights.len());
    for (c, ch) in sensor.channels.iter().enumerate() {
        let mut rng = rng_for(site.seed, 100 + c as u64);
        let sd = (ch.noise_sd.powi(2) + site.noise(c).powi(2)).sqrt();
        let (gain, offset) = (site.gain(c), site.offset(c));
        for &h in heights {
            let noise: f64 = if sd > 0.0 { sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            data.push((gain * ch.response(h as f64) + offset + noise) as f32);
        }
    }
    EOStack::new(*grid, sensor.band_names(), data)
}

/// `n` distinct forest pixels, uniformly; plot height is the truth at the
/// centre pixel and the radius follows the height tercile.
pub fn sample_plots(grid: &RasterGrid, heights: &[f32], mask: &ForestMask, n: usize, prefix: &str, seed: u64) -> Result<PlotTable> {
    let forest: Vec<usize> = (0..grid.len()).filter(|&i| mask.mask[i]).collect();
    if n > forest.len() {
        return Err(Error::Empty(format!("{n} plots requested but only {} forest pixels", forest.len())));
    }
    let mut rng = rng_for(seed, 2);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, forest.len(), n).into_iter().map(|i| forest[i]).collect();
    picks.sort_unstable();
    let mut sorted: Vec<f32> = picks.iter().map(|&i| heights[i]).collect();
    sorted.sort_by(f32::total_cmp);
    let cut = |q: usize| sorted.get(q * n / 3).copied().unwrap_or(f32::INFINITY);
    let (t1, t2) = (cut(1), cut(2));
    let plots = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (r, c) = (i / grid.width, i % grid.width);
            let (x, y) = grid.pixel_center(r, c);
            let h = heights[i];
            let radius = if h < t1 {
                PLOT_RADII[0]
            } else if h < t2 {
                PLOT_RADII[1]
            } else {
                PLOT_RADII[2]
            };
            PlotRecord {
                plot_id: format!("{prefix}_{k:05}"),
                x,
                y,
                radius,
                height: h as f64,
                volume: None,
            }
        })
        .collect();
    PlotTable::new(plots)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub stack: EOStack,
    pub mask: ForestMask,
    /// Truth heights on forest pixels.
    pub truth: SparseLabelRaster,
    pub plots: PlotTable,
}

/// Generates one scene. Non-forest pixels have height 0 before the sensor
/// model is applied.
pub fn gen_scene(grid: &RasterGrid, site: &SiteParams, sensor: &SensorModel, n_plots: usize) -> Result<Scene> {
    site.validate(sensor.channels.len())?;
    let mut heights = gen_height_field(grid, site)?;
    let mask = gen_forest_mask(grid, site)?;
    for (h, &f) in heights.iter_mut().zip(&mask.mask) {
        if !f {
            *h = 0.0;
        }
    }
    let stack = gen_eo_channels(grid, &heights, sensor, site)?;
    let mut truth = SparseLabelRaster::from_values(*grid, heights.clone())?;
    truth.apply_mask(&mask)?;
    let plots = sample_plots(grid, &heights, &mask, n_plots, &site.name, site.seed)?;
    Ok(Scene {
        name: site.name.clone(),
        stack,
        mask,
        truth,
        plots,
    })
}

/// Contents of `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub sensor: SensorModel,
    pub source: SiteParams,
    pub target: SiteParams,
    pub source_plots: usize,
    pub target_plots: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let sensor = SensorModel::default_14();
        let n = sensor.channels.len();
        // the target site reads as a taller forest: every channel shifts half
        // a noise sd along its height trend, the interferometric height three
        let gains = vec![1.0; n];
        let offsets = sensor
            .channels
            .iter()
            .map(|c| match c.kind {
                ChannelKind::LinearHeight => 3.0 * c.noise_sd,
                _ if c.a == 0.0 => 0.0,
                _ => 0.5 * c.noise_sd * c.a.signum(),
            })
            .collect();
        SceneConfig {
            width: 1024,
            height: 1024,
            source: SiteParams {
                name: "source".into(),
                mean_height: 10.8,
                height_spread: 9.0,
                correlation_length: 6.0,
                forest_fraction: 0.8,
                channel_gains: vec![1.0; n],
                channel_offsets: vec![0.0; n],
                noise_sd: vec![0.0; n],
                seed: 1,
            },
            target: SiteParams {
                name: "target".into(),
                mean_height: 15.0,
                height_spread: 9.0,
                correlation_length: 6.0,
                forest_fraction: 0.75,
                channel_gains: gains,
                channel_offsets: offsets,
                noise_sd: vec![0.0; n],
                seed: 2,
            },
            sensor,
            source_plots: 0,
            target_plots: 1064,
        }
    }
}

impl SceneConfig {
    pub fn grid(&self) -> Result<RasterGrid> {
        RasterGrid::with_size(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.sensor.validate()?;
        self.source.validate(self.sensor.channels.len())?;
        self.target.validate(self.sensor.channels.len())
    }
}

pub struct SitePair {
    pub source: Scene,
    pub target: Scene,
}

pub fn gen_site_pair(cfg: &SceneConfig) -> Result<SitePair> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    Ok(SitePair {
        source: gen_scene(&grid, &cfg.source, &cfg.sensor, cfg.source_plots)?,
        target: gen_scene(&grid, &cfg.target, &cfg.sensor, cfg.target_plots)?,
    })
}

/// Writes `eo`, `mask`, `truth` rasters and `plots.csv` into `dir`.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene.stack.save(dir.join("eo"))?;
    scene.mask.save(dir.join("mask"))?;
    scene.truth.save(dir.join("truth"))?;
    scene.plots.save(dir.join("plots.csv"))
}

pub fn read_scene(dir: &Path, name: &str) -> Result<Scene> {
    Ok(Scene {
        name: name.into(),
        stack: EOStack::load(dir.join("eo"))?,
        mask: ForestMask::load(dir.join("mask"))?,
        truth: SparseLabelRaster::load(dir.join("truth"))?,
        plots: crate::plots::load_plots(dir.join("plots.csv"))?,
    })
}
