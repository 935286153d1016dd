//! Field-plot table: CSV I/O, rasterization onto the label grid and the
//! stride-3 train/test split.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{RasterGrid, SparseLabelRaster};

/// Plot radii used in the inventory design (m).
pub const PLOT_RADII: [f64; 3] = [5.64, 9.0, 12.62];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub plot_id: String,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "radius_m")]
    pub radius: f64,
    #[serde(rename = "height_m")]
    pub height: f64,
    #[serde(rename = "volume_m3ha")]
    pub volume: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotTable {
    plots: Vec<PlotRecord>,
}

impl PlotTable {
    pub fn new(plots: Vec<PlotRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(plots.len());
        for p in &plots {
            if !seen.insert(p.plot_id.as_str()) {
                return Err(Error::DuplicatePlot(p.plot_id.clone()));
            }
            if !(p.radius > 0.0 && p.radius.is_finite()) {
                return Err(Error::Csv(format!("plot {}: radius {}", p.plot_id, p.radius)));
            }
            if !(p.height >= 0.0 && p.height.is_finite()) {
                return Err(Error::Csv(format!("plot {}: height {}", p.plot_id, p.height)));
            }
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::Csv(format!("plot {}: non-finite center", p.plot_id)));
            }
        }
        Ok(PlotTable { plots })
    }

    pub fn plots(&self) -> &[PlotRecord] {
        &self.plots
    }

    pub fn len(&self) -> usize {
        self.plots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plots.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PlotRecord> {
        self.plots.iter()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.plots.iter().map(|p| p.plot_id.as_str()).collect()
    }

    /// Subset keeping plots for which `keep` holds, order preserved.
    pub fn filter(&self, mut keep: impl FnMut(&PlotRecord) -> bool) -> PlotTable {
        PlotTable {
            plots: self.plots.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for p in &self.plots {
            w.serialize(p)?;
        }
        if self.plots.is_empty() {
            w.write_record(["plot_id", "x", "y", "radius_m", "height_m", "volume_m3ha"])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

impl<'a> IntoIterator for &'a PlotTable {
    type Item = &'a PlotRecord;
    type IntoIter = std::slice::Iter<'a, PlotRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.plots.iter()
    }
}

pub fn load_plots(path: impl AsRef<Path>) -> Result<PlotTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let expected = ["plot_id", "x", "y", "radius_m", "height_m", "volume_m3ha"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Csv(format!(
            "{}: expected header {:?}, found {:?}",
            path.display(),
            expected,
            headers
        )));
    }
    let mut plots = Vec::new();
    for (i, row) in rdr.deserialize::<PlotRecord>().enumerate() {
        let rec = row.map_err(|e| Error::Csv(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if !PLOT_RADII.iter().any(|r| (r - rec.radius).abs() < 1e-9) {
            log::warn!(
                "plot {} has non-standard radius {} m",
                rec.plot_id,
                rec.radius
            );
        }
        plots.push(rec);
    }
    PlotTable::new(plots)
}

/// Label raster with one valid pixel per plot: the pixel containing the plot
/// center carries the plot height.
pub fn rasterize_plots(plots: &PlotTable, grid: &RasterGrid) -> Result<SparseLabelRaster> {
    let mut labels = SparseLabelRaster::empty(*grid)?;
    let mut owner: HashMap<(usize, usize), &str> = HashMap::with_capacity(plots.len());
    for p in plots {
        let px = grid
            .pixel_of(p.x, p.y)
            .ok_or_else(|| Error::PlotOutsideExtent(p.plot_id.clone()))?;
        if let Some(prev) = owner.insert(px, &p.plot_id) {
            return Err(Error::PlotCollision(prev.to_string(), p.plot_id.clone()));
        }
        labels.set(px.0, px.1, p.height as f32)?;
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitAttribute {
    Height,
    Volume,
}

impl SplitAttribute {
    /// Volume when every plot carries it, otherwise height.
    pub fn default_for(plots: &PlotTable) -> Self {
        if !plots.is_empty() && plots.iter().all(|p| p.volume.is_some()) {
            SplitAttribute::Volume
        } else {
            SplitAttribute::Height
        }
    }

    fn value(self, p: &PlotRecord) -> Option<f64> {
        match self {
            SplitAttribute::Height => Some(p.height),
            SplitAttribute::Volume => p.volume,
        }
    }
}

/// Sort by `attribute` (ties by id) and send every third plot, starting with
/// the first, to the test set. Returns `(train, test)`.
pub fn split_plots_by_attribute(
    plots: &PlotTable,
    attribute: SplitAttribute,
) -> Result<(PlotTable, PlotTable)> {
    if plots.is_empty() {
        return Err(Error::Empty("plot table".into()));
    }
    let mut keyed = Vec::with_capacity(plots.len());
    for p in plots {
        let v = attribute
            .value(p)
            .ok_or_else(|| Error::Csv(format!("plot {} has no {attribute:?}", p.plot_id)))?;
        keyed.push((v, p));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.plot_id.cmp(&b.1.plot_id)));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, (_, p)) in keyed.into_iter().enumerate() {
        if i % 3 == 0 {
            test.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    Ok((PlotTable { plots: train }, PlotTable { plots: test }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot(id: &str, x: f64, y: f64, h: f64) -> PlotRecord {
        PlotRecord {
            plot_id: id.into(),
            x,
            y,
            radius: 9.0,
            height: h,
            volume: None,
        }
    }

    fn table(n: usize) -> PlotTable {
        PlotTable::new(
            (0..n)
                .map(|i| plot(&format!("p{i:04}"), 0.0, 0.0, ((i * 37) % n) as f64))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn csv_roundtrip_and_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plots.csv");
        std::fs::write(
            &path,
            "plot_id,x,y,radius_m,height_m,volume_m3ha\na,5,5,12.62,21.4,180.5\nb,15,5,9,10,\nc,25,5,5.64,3,\n",
        )
        .unwrap();
        let t = load_plots(&path).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.plots()[0].radius, 12.62);
        assert_eq!(t.plots()[0].height, 21.4);
        assert_eq!(t.plots()[0].volume, Some(180.5));
        assert_eq!(t.plots()[1].volume, None);
        t.save(dir.path().join("again.csv")).unwrap();
        assert_eq!(load_plots(dir.path().join("again.csv")).unwrap(), t);
    }

    #[test]
    fn duplicate_and_non_numeric_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.csv");
        std::fs::write(
            &path,
            "plot_id,x,y,radius_m,height_m,volume_m3ha\na,5,5,9,1,\na,6,5,9,1,\n",
        )
        .unwrap();
        assert!(matches!(load_plots(&path), Err(Error::DuplicatePlot(_))));
        std::fs::write(
            &path,
            "plot_id,x,y,radius_m,height_m,volume_m3ha\na,5,5,9,tall,\n",
        )
        .unwrap();
        assert!(matches!(load_plots(&path), Err(Error::Csv(_))));
    }

    #[test]
    fn odd_radius_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(
            &path,
            "plot_id,x,y,radius_m,height_m,volume_m3ha\na,5,5,7.5,1,\n",
        )
        .unwrap();
        assert_eq!(load_plots(&path).unwrap().plots()[0].radius, 7.5);
    }

    #[test]
    fn rasterize_single_and_collision() {
        let grid = RasterGrid::with_size(4, 4).unwrap();
        let (x, y) = grid.pixel_center(1, 2);
        let t = PlotTable::new(vec![plot("a", x, y, 17.0)]).unwrap();
        let l = rasterize_plots(&t, &grid).unwrap();
        assert_eq!(l.valid_count(), 1);
        assert_eq!(l.value(1, 2), Some(17.0));

        let t = PlotTable::new(vec![plot("a", x, y, 17.0), plot("b", x + 1.0, y, 12.0)]).unwrap();
        assert!(matches!(rasterize_plots(&t, &grid), Err(Error::PlotCollision(_, _))));

        let t = PlotTable::new(vec![plot("far", -5.0, y, 1.0)]).unwrap();
        assert!(matches!(rasterize_plots(&t, &grid), Err(Error::PlotOutsideExtent(_))));
    }

    #[test]
    fn rasterize_709_plots() {
        let grid = RasterGrid::with_size(40, 40).unwrap();
        let plots = (0..709)
            .map(|i| {
                let (x, y) = grid.pixel_center(i / 40, i % 40);
                plot(&format!("{i}"), x, y, 10.0)
            })
            .collect();
        let l = rasterize_plots(&PlotTable::new(plots).unwrap(), &grid).unwrap();
        assert_eq!(l.valid_count(), 709);
    }

    #[test]
    fn split_counts() {
        let (train, test) = split_plots_by_attribute(&table(1064), SplitAttribute::Height).unwrap();
        assert_eq!((train.len(), test.len()), (709, 355));
        let (train, test) = split_plots_by_attribute(&table(1), SplitAttribute::Height).unwrap();
        assert_eq!((train.len(), test.len()), (0, 1));
        assert!(split_plots_by_attribute(&PlotTable::default(), SplitAttribute::Height).is_err());
    }

    #[test]
    fn split_nine_by_hand() {
        // heights 9..1 so sorted order is reversed ids
        let t = PlotTable::new(
            (0..9).map(|i| plot(&format!("p{i}"), 0.0, 0.0, (9 - i) as f64)).collect(),
        )
        .unwrap();
        let (train, test) = split_plots_by_attribute(&t, SplitAttribute::Height).unwrap();
        // sorted ranks 1, 4, 7 are heights 1, 4, 7
        let th: Vec<f64> = test.iter().map(|p| p.height).collect();
        assert_eq!(th, vec![1.0, 4.0, 7.0]);
        assert_eq!(train.len(), 6);
    }

    #[test]
    fn split_uses_volume_when_present() {
        let mut plots: Vec<PlotRecord> = (0..6)
            .map(|i| plot(&format!("p{i}"), 0.0, 0.0, i as f64))
            .collect();
        for (i, p) in plots.iter_mut().enumerate() {
            p.volume = Some(100.0 - i as f64);
        }
        let t = PlotTable::new(plots).unwrap();
        assert_eq!(SplitAttribute::default_for(&t), SplitAttribute::Volume);
        let (_, test) = split_plots_by_attribute(&t, SplitAttribute::Volume).unwrap();
        let ids: Vec<&str> = test.ids();
        assert_eq!(ids, vec!["p5", "p2"]);
        assert!(split_plots_by_attribute(&table(3), SplitAttribute::Volume).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_partitions(heights in proptest::collection::vec(0.0f64..40.0, 1..200)) {
                let t = PlotTable::new(
                    heights.iter().enumerate().map(|(i, &h)| plot(&format!("q{i}"), 0.0, 0.0, h)).collect(),
                ).unwrap();
                let n = t.len();
                let (train, test) = split_plots_by_attribute(&t, SplitAttribute::Height).unwrap();
                prop_assert_eq!(test.len(), n.div_ceil(3));
                prop_assert_eq!(train.len(), n - n.div_ceil(3));
                let mut all: Vec<&str> = train.ids().into_iter().chain(test.ids()).collect();
                all.sort();
                all.dedup();
                prop_assert_eq!(all.len(), n);
                let min = heights.iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert!(test.iter().any(|p| p.height == min));
            }
        }
    }
}
