//! Raster data model and the on-disk raster format.
//!
//! A raster on disk is a pair of files sharing a stem: `<name>.bin` holds
//! little-endian float32 samples in `[band][row][col]` order and `<name>.json`
//! is the header. NaN is the only nodata sentinel. Boolean rasters are stored
//! as 0.0/1.0.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned, north-up pixel grid. `origin_x`/`origin_y` is the top-left
/// corner of pixel (0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl RasterGrid {
    pub fn new(width: usize, height: usize, pixel_size: f64, origin_x: f64, origin_y: f64) -> Result<Self> {
        let g = RasterGrid {
            width,
            height,
            pixel_size,
            origin_x,
            origin_y,
        };
        g.validate()?;
        Ok(g)
    }

    /// A 10 m grid anchored at the origin.
    pub fn with_size(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, 10.0, 0.0, height as f64 * 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid(format!(
                "zero-sized grid {}x{}",
                self.width, self.height
            )));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::InvalidGrid(format!("pixel size {}", self.pixel_size)));
        }
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(Error::InvalidGrid("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Map coordinates of the center of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Pixel (row, col) containing the map point, or `None` outside the extent.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_x) / self.pixel_size).floor();
        let r = ((self.origin_y - y) / self.pixel_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

/// Multi-band stack of co-registered sensor channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EOStack {
    pub grid: RasterGrid,
    pub band_names: Vec<String>,
    /// `[band][row][col]`, NaN = nodata.
    pub data: Vec<f32>,
}

impl EOStack {
    pub fn new(grid: RasterGrid, band_names: Vec<String>, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if band_names.is_empty() {
            return Err(Error::InvalidGrid("stack has no bands".into()));
        }
        if data.len() != band_names.len() * grid.len() {
            return Err(Error::Shape(format!(
                "stack data length {} != {} bands x {} pixels",
                data.len(),
                band_names.len(),
                grid.len()
            )));
        }
        Ok(EOStack {
            grid,
            band_names,
            data,
        })
    }

    pub fn bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.grid.height + row) * self.grid.width + col]
    }

    /// New stack holding only the listed bands, in the given order.
    pub fn select_bands(&self, bands: &[usize]) -> Result<EOStack> {
        let mut data = Vec::with_capacity(bands.len() * self.grid.len());
        let mut names = Vec::with_capacity(bands.len());
        for &b in bands {
            if b >= self.bands() {
                return Err(Error::Shape(format!(
                    "band {b} requested from a {}-band stack",
                    self.bands()
                )));
            }
            data.extend_from_slice(self.band(b));
            names.push(self.band_names[b].clone());
        }
        EOStack::new(self.grid, names, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_raster(
            path.as_ref(),
            &RasterFile {
                grid: self.grid,
                band_names: self.band_names.clone(),
                data: self.data.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_raster(path.as_ref())?.into_stack()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestMask {
    pub grid: RasterGrid,
    pub mask: Vec<bool>,
}

impl ForestMask {
    pub fn new(grid: RasterGrid, mask: Vec<bool>) -> Result<Self> {
        grid.validate()?;
        if mask.len() != grid.len() {
            return Err(Error::Shape(format!(
                "mask length {} != {} pixels",
                mask.len(),
                grid.len()
            )));
        }
        Ok(ForestMask { grid, mask })
    }

    pub fn all_forest(grid: RasterGrid) -> Result<Self> {
        Self::new(grid, vec![true; grid.len()])
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.grid.width + col]
    }

    pub fn forest_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_raster(
            path.as_ref(),
            &RasterFile {
                grid: self.grid,
                band_names: vec!["forest".into()],
                data: self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_raster(path.as_ref())?.into_mask()
    }
}

/// Per-pixel labels with a validity mask. Invalid pixels always hold NaN so
/// that equality and serialization are canonical.
#[derive(Debug, Clone)]
pub struct SparseLabelRaster {
    pub grid: RasterGrid,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl PartialEq for SparseLabelRaster {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.valid == other.valid
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl SparseLabelRaster {
    pub fn empty(grid: RasterGrid) -> Result<Self> {
        grid.validate()?;
        Ok(SparseLabelRaster {
            grid,
            values: vec![f32::NAN; grid.len()],
            valid: vec![false; grid.len()],
        })
    }

    /// Labels from a value array; non-finite entries become invalid.
    pub fn from_values(grid: RasterGrid, values: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "label length {} != {} pixels",
                values.len(),
                grid.len()
            )));
        }
        let mut out = Self::empty(grid)?;
        for (i, v) in values.into_iter().enumerate() {
            if v.is_finite() {
                if v < 0.0 {
                    return Err(Error::Shape(format!("negative label {v} at pixel {i}")));
                }
                out.values[i] = v;
                out.valid[i] = true;
            }
        }
        Ok(out)
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::NonFinite(format!("label value {value}")));
        }
        let i = row * self.grid.width + col;
        self.values[i] = value;
        self.valid[i] = true;
        Ok(())
    }

    pub fn invalidate(&mut self, i: usize) {
        self.values[i] = f32::NAN;
        self.valid[i] = false;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.grid.width + col]
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f32> {
        let i = row * self.grid.width + col;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Drop labels outside the forest mask.
    pub fn apply_mask(&mut self, mask: &ForestMask) -> Result<()> {
        ensure_same_grid(&self.grid, &mask.grid, "labels vs forest mask")?;
        for i in 0..self.valid.len() {
            if !mask.mask[i] {
                self.invalidate(i);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_raster(
            path.as_ref(),
            &RasterFile {
                grid: self.grid,
                band_names: vec!["height_m".into()],
                data: self.values.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_raster(path.as_ref())?.into_labels()
    }
}

pub fn ensure_same_grid(a: &RasterGrid, b: &RasterGrid, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Untyped raster as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterFile {
    pub grid: RasterGrid,
    pub band_names: Vec<String>,
    pub data: Vec<f32>,
}

impl RasterFile {
    pub fn into_stack(self) -> Result<EOStack> {
        EOStack::new(self.grid, self.band_names, self.data)
    }

    pub fn into_mask(self) -> Result<ForestMask> {
        if self.band_names.len() != 1 {
            return Err(Error::Shape(format!(
                "forest mask must have 1 band, found {}",
                self.band_names.len()
            )));
        }
        let mask = self.data.iter().map(|&v| v.is_finite() && v != 0.0).collect();
        ForestMask::new(self.grid, mask)
    }

    pub fn into_labels(self) -> Result<SparseLabelRaster> {
        if self.band_names.len() != 1 {
            return Err(Error::Shape(format!(
                "label raster must have 1 band, found {}",
                self.band_names.len()
            )));
        }
        SparseLabelRaster::from_values(self.grid, self.data)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    width: usize,
    height: usize,
    bands: usize,
    pixel_size: f64,
    origin_x: f64,
    origin_y: f64,
    band_names: Vec<String>,
    nodata: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
}

/// `(payload, header)` paths for a raster. Accepts the stem or either file.
pub fn raster_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut bin = stem.clone().into_os_string();
    bin.push(".bin");
    let mut json = stem.into_os_string();
    json.push(".json");
    (PathBuf::from(bin), PathBuf::from(json))
}

pub fn save_raster(path: &Path, raster: &RasterFile) -> Result<()> {
    raster.grid.validate()?;
    let bands = raster.band_names.len();
    if bands == 0 {
        return Err(Error::InvalidGrid("raster has no bands".into()));
    }
    if raster.data.len() != bands * raster.grid.len() {
        return Err(Error::Shape(format!(
            "raster data length {} != {} bands x {} pixels",
            raster.data.len(),
            bands,
            raster.grid.len()
        )));
    }
    let (bin, json) = raster_paths(path);
    let header = Header {
        width: raster.grid.width,
        height: raster.grid.height,
        bands,
        pixel_size: raster.grid.pixel_size,
        origin_x: raster.grid.origin_x,
        origin_y: raster.grid.origin_y,
        band_names: raster.band_names.clone(),
        nodata: "nan".into(),
        dtype: None,
    };
    let mut payload = Vec::with_capacity(raster.data.len() * 4);
    for v in &raster.data {
        // All NaNs share one bit pattern on disk.
        let v = if v.is_nan() { f32::NAN } else { *v };
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn load_raster(path: &Path) -> Result<RasterFile> {
    let (bin, json) = raster_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    if let Some(dtype) = &header.dtype {
        if dtype != "float32" {
            return Err(Error::UnsupportedDtype(dtype.clone()));
        }
    }
    if !header.nodata.eq_ignore_ascii_case("nan") {
        return Err(Error::Header {
            path: json,
            reason: format!("nodata must be \"nan\", found {:?}", header.nodata),
        });
    }
    if header.bands == 0 || header.band_names.len() != header.bands {
        return Err(Error::Header {
            path: json,
            reason: format!(
                "bands = {} but {} band names",
                header.bands,
                header.band_names.len()
            ),
        });
    }
    let grid = RasterGrid::new(
        header.width,
        header.height,
        header.pixel_size,
        header.origin_x,
        header.origin_y,
    )?;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = header.bands * grid.len() * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(RasterFile {
        grid,
        band_names: header.band_names,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn stack_and_labels_roundtrip(
            w in 1usize..6,
            h in 1usize..6,
            bands in 1usize..4,
            seed in any::<u64>(),
            origin in -1e5f64..1e5,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let grid = RasterGrid::new(w, h, 10.0, origin, -origin).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..bands * w * h).map(|_| rng.gen_range(-1e4f32..1e4)).collect();
            let names = (0..bands).map(|b| format!("b{b}")).collect();
            let s = EOStack::new(grid, names, data).unwrap();
            s.save(dir.path().join("eo")).unwrap();
            prop_assert_eq!(&EOStack::load(dir.path().join("eo")).unwrap(), &s);

            let mut labels = SparseLabelRaster::empty(grid).unwrap();
            for i in 0..w * h {
                if rng.gen_bool(0.5) {
                    labels.set(i / w, i % w, rng.gen_range(0.0f32..60.0)).unwrap();
                }
            }
            labels.save(dir.path().join("truth")).unwrap();
            prop_assert_eq!(&SparseLabelRaster::load(dir.path().join("truth")).unwrap(), &labels);
        }
    }

    #[test]
    fn single_pixel_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = RasterGrid::with_size(1, 1).unwrap();
        let s = EOStack::new(grid, vec!["b".into()], vec![3.5]).unwrap();
        let p = dir.path().join("one");
        s.save(&p).unwrap();
        let back = EOStack::load(&p).unwrap();
        assert_eq!(back.data, vec![3.5]);
        assert_eq!(back.grid, grid);
    }

    #[test]
    fn payload_too_short_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = RasterGrid::with_size(2, 2).unwrap();
        let s = EOStack::new(grid, vec!["a".into(), "b".into()], vec![0.0; 8]).unwrap();
        let p = dir.path().join("two");
        s.save(&p).unwrap();
        let (bin, _) = raster_paths(&p);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..16]).unwrap();
        let err = load_raster(&p).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn zero_sized_grid_rejected() {
        let g = RasterGrid {
            width: 0,
            height: 4,
            pixel_size: 10.0,
            origin_x: 0.0,
            origin_y: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let r = RasterFile {
            grid: g,
            band_names: vec!["x".into()],
            data: vec![],
        };
        assert!(save_raster(&dir.path().join("z"), &r).is_err());
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let grid = RasterGrid::with_size(3, 2).unwrap();
        let s = EOStack::new(grid, vec!["a".into()], vec![1.0, f32::NAN, -2.5, 0.0, 7.0, 1e-9]).unwrap();
        s.save(dir.path().join("a")).unwrap();
        s.save(dir.path().join("b")).unwrap();
        for ext in ["bin", "json"] {
            let a = fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let b = fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unsupported_dtype_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d");
        fs::write(dir.path().join("d.bin"), [0u8; 8]).unwrap();
        fs::write(
            dir.path().join("d.json"),
            r#"{"width":1,"height":1,"bands":1,"pixel_size":10.0,"origin_x":0,"origin_y":0,"band_names":["a"],"nodata":"nan","dtype":"float64"}"#,
        )
        .unwrap();
        assert!(matches!(load_raster(&p), Err(Error::UnsupportedDtype(_))));
        fs::write(dir.path().join("d.json"), "{not json").unwrap();
        assert!(matches!(load_raster(&p), Err(Error::Header { .. })));
        assert!(matches!(
            load_raster(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn nodata_becomes_invalid_label() {
        let grid = RasterGrid::with_size(2, 1).unwrap();
        let l = SparseLabelRaster::from_values(grid, vec![f32::NAN, 4.0]).unwrap();
        assert_eq!(l.valid(), &[false, true]);
        assert_eq!(l.value(0, 1), Some(4.0));
    }

    #[test]
    fn pixel_geometry() {
        let g = RasterGrid::new(4, 3, 10.0, 100.0, 500.0).unwrap();
        assert_eq!(g.pixel_center(0, 0), (105.0, 495.0));
        assert_eq!(g.pixel_of(105.0, 495.0), Some((0, 0)));
        assert_eq!(g.pixel_of(139.9, 470.1), Some((2, 3)));
        assert_eq!(g.pixel_of(140.0, 470.1), None);
        assert_eq!(g.pixel_of(99.0, 495.0), None);
    }
}
