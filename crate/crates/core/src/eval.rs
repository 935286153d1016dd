//! Accuracy metrics, full-scene prediction, plot-level evaluation, report
//! files and the scarcity/censoring scenarios.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{extract_plot_features, BaselineModel};
use crate::error::{Error, Result};
use crate::model::{Mode, SeUNet};
use crate::patch::normalize_channels;
use crate::plots::{PlotRecord, PlotTable};
use crate::raster::{ensure_same_grid, EOStack, ForestMask, SparseLabelRaster};
use crate::tensor::Tensor;
use crate::train::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Percent of the reference mean; `None` when that mean is zero.
    pub rrmse: Option<f64>,
    /// Reference minus prediction, averaged.
    pub bias: f64,
    /// `None` when the references have zero variance.
    pub r2: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPrediction {
    pub plot_id: String,
    pub reference: f64,
    pub predicted: f64,
}

/// RMSE, rRMSE, bias and R² over `(reference, prediction)` pairs.
pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<Metrics> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Undefined(format!("metrics need at least 2 records, got {n}")));
    }
    if pairs.iter().any(|(y, p)| !y.is_finite() || !p.is_finite()) {
        return Err(Error::NonFinite("metric inputs".into()));
    }
    let nf = n as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let ss_res: f64 = pairs.iter().map(|(y, p)| (y - p).powi(2)).sum();
    let ss_tot: f64 = pairs.iter().map(|(y, _)| (y - mean).powi(2)).sum();
    let rmse = (ss_res / nf).sqrt();
    Ok(Metrics {
        rmse,
        rrmse: (mean != 0.0).then(|| rmse / mean * 100.0),
        bias: pairs.iter().map(|(y, p)| y - p).sum::<f64>() / nf,
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub scenario: String,
    pub metrics: Metrics,
    pub records: Vec<PlotPrediction>,
}

impl EvalReport {
    pub fn from_records(method: &str, scenario: &str, records: Vec<PlotPrediction>) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.reference, r.predicted)).collect();
        Ok(EvalReport {
            method: method.into(),
            scenario: scenario.into(),
            metrics: compute_metrics(&pairs)?,
            records,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapLookup {
    #[default]
    CenterPixel,
    /// Mean over the plot footprint, as for baseline features.
    Footprint,
}

pub enum PlotPredictor<'a> {
    Map(&'a SparseLabelRaster, MapLookup),
    Baseline(&'a BaselineModel, &'a EOStack),
}

impl PlotPredictor<'_> {
    pub fn predict(&self, plot: &PlotRecord) -> Result<f64> {
        match self {
            PlotPredictor::Map(map, MapLookup::CenterPixel) => {
                let (r, c) = map.grid.pixel_of(plot.x, plot.y).ok_or_else(|| Error::PlotOutsideExtent(plot.plot_id.clone()))?;
                map.value(r, c).map(f64::from).ok_or_else(|| {
                    Error::PlotOutsideExtent(format!("{} (no prediction at its pixel)", plot.plot_id))
                })
            }
            PlotPredictor::Map(map, MapLookup::Footprint) => {
                let stack = EOStack::new(map.grid, vec!["height_m".into()], map.values().to_vec())?;
                Ok(extract_plot_features(&stack, plot)?.features[0])
            }
            PlotPredictor::Baseline(model, stack) => model.predict(&extract_plot_features(stack, plot)?.features),
        }
    }
}

pub fn evaluate_plots(method: &str, scenario: &str, predictor: &PlotPredictor<'_>, test: &PlotTable) -> Result<EvalReport> {
    let records = test
        .iter()
        .map(|p| {
            Ok(PlotPrediction {
                plot_id: p.plot_id.clone(),
                reference: p.height,
                predicted: predictor.predict(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(method, scenario, records)
}

/// Window starts along one axis: stride `window / 2`, last window flush with
/// the far edge.
pub fn tile_starts(len: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || len < window {
        return Err(Error::Shape(format!("scene side {len} smaller than window {window}")));
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + window < len).collect();
    starts.push(len - window);
    starts.dedup();
    Ok(starts)
}

/// Half-open pixel range each window writes: consecutive windows split their
/// overlap at its midpoint, so interior windows keep their central half and
/// edge windows keep their outer margin.
fn kept_ranges(starts: &[usize], window: usize, len: usize) -> Vec<(usize, usize)> {
    let cuts: Vec<usize> = starts.windows(2).map(|w| (w[1] + w[0] + window) / 2).collect();
    (0..starts.len())
        .map(|i| {
            let lo = if i == 0 { 0 } else { cuts[i - 1] };
            let hi = if i + 1 == starts.len() { len } else { cuts[i] };
            (lo, hi)
        })
        .collect()
}

/// Wall-to-wall height map from overlapping eval-mode windows. Non-forest
/// pixels are nodata.
pub fn predict_map(checkpoint: &Checkpoint, stack: &EOStack, mask: &ForestMask, window: usize) -> Result<SparseLabelRaster> {
    let cfg = checkpoint.meta.config;
    if stack.bands() != cfg.in_channels {
        return Err(Error::Shape(format!(
            "stack has {} channels, checkpoint expects {}",
            stack.bands(),
            cfg.in_channels
        )));
    }
    ensure_same_grid(&stack.grid, &mask.grid, "forest mask")?;
    if window % cfg.size_multiple() != 0 {
        return Err(Error::Shape(format!("window {window} not divisible by {}", cfg.size_multiple())));
    }
    let net = SeUNet::new(cfg)?;
    let (w, h) = (stack.grid.width, stack.grid.height);
    let rows = tile_starts(h, window)?;
    let cols = tile_starts(w, window)?;
    let row_keep = kept_ranges(&rows, window, h);
    let col_keep = kept_ranges(&cols, window, w);
    let stats = &checkpoint.meta.normalization;
    let plane = window * window;
    let mut out = vec![f32::NAN; w * h];
    for (&r0, &(rlo, rhi)) in rows.iter().zip(&row_keep) {
        for (&c0, &(clo, chi)) in cols.iter().zip(&col_keep) {
            let mut eo = vec![0f32; cfg.in_channels * plane];
            for b in 0..cfg.in_channels {
                let band = stack.band(b);
                for r in 0..window {
                    for c in 0..window {
                        let (gr, gc) = (r0 + r, c0 + c);
                        eo[b * plane + r * window + c] = if mask.get(gr, gc) { band[gr * w + gc] } else { f32::NAN };
                    }
                }
            }
            normalize_channels(&mut eo, plane, stats);
            let x = Tensor::from_vec(1, cfg.in_channels, window, window, eo);
            let pred = net.forward(&checkpoint.params, &x, Mode::Eval)?.output;
            for gr in rlo..rhi {
                for gc in clo..chi {
                    if mask.get(gr, gc) {
                        out[gr * w + gc] = pred.data[(gr - r0) * window + (gc - c0)];
                    }
                }
            }
        }
    }
    SparseLabelRaster::from_values(stack.grid, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioKind {
    Full,
    /// Uniform subsample of `round(fraction * n)` plots, at least one.
    Scarce { fraction: f64 },
    /// Drop training plots shorter than the threshold.
    CensorBelow { threshold: f64 },
    /// Drop training plots taller than the threshold.
    CensorAbove { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn standard(seed: u64) -> Vec<ScenarioSpec> {
        let mk = |name: &str, kind| ScenarioSpec {
            name: name.into(),
            kind,
            seed,
        };
        vec![
            mk("full", ScenarioKind::Full),
            mk("scarce_5pct", ScenarioKind::Scarce { fraction: 0.05 }),
            mk("censor_below_10m", ScenarioKind::CensorBelow { threshold: 10.0 }),
            mk("censor_above_25m", ScenarioKind::CensorAbove { threshold: 25.0 }),
        ]
    }
}

/// Reduced training table for a scenario; test plots are never touched.
pub fn build_scenario(train: &PlotTable, spec: &ScenarioSpec) -> Result<PlotTable> {
    let out = match spec.kind {
        ScenarioKind::Full => train.clone(),
        ScenarioKind::Scarce { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("scarce fraction {fraction} not in (0, 1]")));
            }
            let n = train.len();
            let m = ((n as f64 * fraction).round() as usize).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut keep = rand::seq::index::sample(&mut rng, n, m.min(n)).into_vec();
            keep.sort_unstable();
            PlotTable::new(keep.into_iter().map(|i| train.plots()[i].clone()).collect())?
        }
        ScenarioKind::CensorBelow { threshold } => train.filter(|p| p.height >= threshold),
        ScenarioKind::CensorAbove { threshold } => train.filter(|p| p.height <= threshold),
    };
    if out.is_empty() {
        return Err(Error::Empty(format!("scenario {} leaves no training plots", spec.name)));
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into())
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Scatter file name: `scatter_<method>.csv`, with `_<scenario>` appended
/// for anything other than the full scenario.
pub fn scatter_file_name(report: &EvalReport) -> String {
    if report.scenario.is_empty() || report.scenario == "full" {
        format!("scatter_{}.csv", file_safe(&report.method))
    } else {
        format!("scatter_{}_{}.csv", file_safe(&report.method), file_safe(&report.scenario))
    }
}

/// Writes `metrics.csv` and one scatter CSV per report.
pub fn emit_report(reports: &[EvalReport], out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut metrics = String::from("method,scenario,rmse,rrmse_pct,bias,r2,n\n");
    for r in reports {
        let m = &r.metrics;
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            r.scenario,
            m.rmse,
            fmt_opt(m.rrmse),
            m.bias,
            fmt_opt(m.r2),
            m.n
        ));
        let mut scatter = String::from("plot_id,reference_m,predicted_m\n");
        for rec in &r.records {
            scatter.push_str(&format!("{},{},{}\n", rec.plot_id, rec.reference, rec.predicted));
        }
        let path = dir.join(scatter_file_name(r));
        fs::write(&path, scatter).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, metrics).map_err(|e| Error::io(&path, e))
}
