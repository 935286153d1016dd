//! Plot-level features and the two reference regressors: multiple linear
//! regression and k-nearest-neighbours.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::STD_FLOOR;
use crate::plots::{PlotRecord, PlotTable};
use crate::raster::EOStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub plot_id: String,
    pub features: Vec<f64>,
    /// Reference height in metres.
    pub label: f64,
}

/// Per-channel mean over pixels whose centres fall within the plot radius,
/// falling back to the centre pixel when none do. Nodata pixels are skipped.
pub fn extract_plot_features(stack: &EOStack, plot: &PlotRecord) -> Result<FeatureVector> {
    let grid = &stack.grid;
    let (cr, cc) = grid.pixel_of(plot.x, plot.y).ok_or_else(|| Error::PlotOutsideExtent(plot.plot_id.clone()))?;
    let reach = (plot.radius / grid.pixel_size).ceil() as usize + 1;
    let r2 = plot.radius * plot.radius;
    let mut footprint = Vec::new();
    for r in cr.saturating_sub(reach)..(cr + reach + 1).min(grid.height) {
        for c in cc.saturating_sub(reach)..(cc + reach + 1).min(grid.width) {
            let (px, py) = grid.pixel_center(r, c);
            if (px - plot.x).powi(2) + (py - plot.y).powi(2) <= r2 {
                footprint.push((r, c));
            }
        }
    }
    if footprint.is_empty() {
        footprint.push((cr, cc));
    }
    let mut features = Vec::with_capacity(stack.bands());
    for b in 0..stack.bands() {
        let (sum, n) = footprint
            .iter()
            .map(|&(r, c)| stack.get(b, r, c))
            .filter(|v| v.is_finite())
            .fold((0.0, 0usize), |(s, n), v| (s + v as f64, n + 1));
        if n == 0 {
            return Err(Error::Empty(format!("plot {}: footprint is all nodata", plot.plot_id)));
        }
        features.push(sum / n as f64);
    }
    Ok(FeatureVector {
        plot_id: plot.plot_id.clone(),
        features,
        label: plot.height,
    })
}

pub fn extract_all(stack: &EOStack, plots: &PlotTable) -> Result<Vec<FeatureVector>> {
    plots.iter().map(|p| extract_plot_features(stack, p)).collect()
}

fn feature_dim(train: &[FeatureVector]) -> Result<usize> {
    let d = train.first().ok_or_else(|| Error::Empty("no training plots".into()))?.features.len();
    if train.iter().any(|f| f.features.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    if train.iter().any(|f| !f.label.is_finite() || f.features.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("training features".into()));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

/// Ordinary least squares with intercept. Solved on centred features via
/// SVD, so a rank-deficient design yields the minimum-norm solution.
pub fn mlr_fit(train: &[FeatureVector]) -> Result<MlrModel> {
    let d = feature_dim(train)?;
    let n = train.len();
    if n <= d + 1 {
        return Err(Error::Empty(format!("MLR needs more than {} plots, got {n}", d + 1)));
    }
    let mean_x: Vec<f64> = (0..d).map(|j| train.iter().map(|f| f.features[j]).sum::<f64>() / n as f64).collect();
    let mean_y = train.iter().map(|f| f.label).sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, d, |i, j| train[i].features[j] - mean_x[j]);
    let y = DVector::from_iterator(n, train.iter().map(|f| f.label - mean_y));
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(d) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < d {
        log::warn!("MLR design matrix has rank {rank} < {d}; using the minimum-norm solution");
    }
    let beta = if smax > 0.0 {
        svd.solve(&y, tol).map_err(|e| Error::Undefined(e.to_string()))?
    } else {
        DVector::zeros(d)
    };
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = mean_y - coefficients.iter().zip(&mean_x).map(|(b, m)| b * m).sum::<f64>();
    Ok(MlrModel { intercept, coefficients })
}

impl MlrModel {
    /// Linear prediction before clamping.
    pub fn predict_raw(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.coefficients.len() {
            return Err(Error::Shape(format!(
                "MLR expects {} features, got {}",
                self.coefficients.len(),
                features.len()
            )));
        }
        Ok(self.intercept + self.coefficients.iter().zip(features).map(|(b, x)| b * x).sum::<f64>())
    }
}

pub fn mlr_predict(model: &MlrModel, features: &[f64]) -> Result<f64> {
    Ok(model.predict_raw(features)?.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnnWeighting {
    #[default]
    InverseDistance,
    Uniform,
}

pub const KNN_EPSILON: f64 = 1e-6;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub weighting: KnnWeighting,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Standardized reference features with their labels.
    pub reference: Vec<FeatureVector>,
}

pub fn knn_fit(train: &[FeatureVector], k: usize, weighting: KnnWeighting) -> Result<KnnModel> {
    let d = feature_dim(train)?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > train.len() {
        return Err(Error::Config(format!("k = {k} exceeds {} reference plots", train.len())));
    }
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|f| f.features[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = train.iter().map(|f| (f.features[j] - mean[j]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(STD_FLOOR)
        })
        .collect();
    let reference = train
        .iter()
        .map(|f| FeatureVector {
            plot_id: f.plot_id.clone(),
            features: standardize(&f.features, &mean, &std),
            label: f.label,
        })
        .collect();
    Ok(KnnModel {
        k,
        weighting,
        mean,
        std,
        reference,
    })
}

fn standardize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

/// Weighted mean label of the `k` nearest references (ties broken by
/// plot id). A zero-distance neighbour returns its label directly.
pub fn knn_predict(model: &KnnModel, features: &[f64]) -> Result<f64> {
    if features.len() != model.mean.len() {
        return Err(Error::Shape(format!(
            "kNN expects {} features, got {}",
            model.mean.len(),
            features.len()
        )));
    }
    let q = standardize(features, &model.mean, &model.std);
    let mut dist: Vec<(f64, &FeatureVector)> = model
        .reference
        .iter()
        .map(|r| {
            let d2: f64 = r.features.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
            (d2.sqrt(), r)
        })
        .collect();
    dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then_with(|| a.1.plot_id.cmp(&b.1.plot_id)));
    let nearest = &dist[..model.k];
    if nearest[0].0 == 0.0 {
        return Ok(nearest[0].1.label);
    }
    let weights: Vec<f64> = nearest
        .iter()
        .map(|(d, _)| match model.weighting {
            KnnWeighting::InverseDistance => 1.0 / (d + KNN_EPSILON),
            KnnWeighting::Uniform => 1.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(nearest.iter().zip(&weights).map(|((_, r), w)| w * r.label).sum::<f64>() / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BaselineModel {
    Mlr(MlrModel),
    Knn(KnnModel),
}

impl BaselineModel {
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        match self {
            BaselineModel::Mlr(m) => mlr_predict(m, features),
            BaselineModel::Knn(m) => knn_predict(m, features),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RasterGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(id: &str, f: Vec<f64>, y: f64) -> FeatureVector {
        FeatureVector {
            plot_id: id.into(),
            features: f,
            label: y,
        }
    }

    fn plot(x: f64, y: f64, radius: f64) -> PlotRecord {
        PlotRecord {
            plot_id: "p".into(),
            x,
            y,
            radius,
            height: 12.0,
            volume: None,
        }
    }

    fn ramp_stack(w: usize, h: usize) -> EOStack {
        let grid = RasterGrid::with_size(w, h).unwrap();
        let data = (0..2 * w * h).map(|i| (i % 97) as f32 * 0.5).collect();
        EOStack::new(grid, vec!["a".into(), "b".into()], data).unwrap()
    }

    #[test]
    fn smallest_radius_is_center_pixel() {
        let stack = ramp_stack(9, 9);
        let (x, y) = stack.grid.pixel_center(4, 5);
        // off-centre within the pixel: still only one centre within 5.64 m
        let f = extract_plot_features(&stack, &plot(x + 2.0, y - 3.0, 5.64)).unwrap();
        assert_eq!(f.features, vec![stack.get(0, 4, 5) as f64, stack.get(1, 4, 5) as f64]);
    }

    #[test]
    fn constant_channel_feature() {
        let grid = RasterGrid::with_size(6, 6).unwrap();
        let stack = EOStack::new(grid, vec!["c".into()], vec![7.0; 36]).unwrap();
        for r in [5.64, 9.0, 12.62] {
            let f = extract_plot_features(&stack, &plot(31.0, 29.0, r)).unwrap();
            assert_eq!(f.features, vec![7.0]);
        }
    }

    #[test]
    fn footprint_matches_brute_force_scan() {
        let stack = ramp_stack(12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = plot(rng.gen_range(0.0..120.0), rng.gen_range(0.0..100.0), 12.62);
            let f = extract_plot_features(&stack, &p).unwrap();
            for b in 0..2 {
                let mut vals = Vec::new();
                for r in 0..10 {
                    for c in 0..12 {
                        let (px, py) = stack.grid.pixel_center(r, c);
                        if ((px - p.x).powi(2) + (py - p.y).powi(2)).sqrt() <= p.radius {
                            vals.push(stack.get(b, r, c) as f64);
                        }
                    }
                }
                assert!(!vals.is_empty());
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((f.features[b] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn feature_errors() {
        let stack = ramp_stack(4, 4);
        assert!(extract_plot_features(&stack, &plot(-5.0, 5.0, 9.0)).is_err());
        let grid = RasterGrid::with_size(4, 4).unwrap();
        let blank = EOStack::new(grid, vec!["n".into()], vec![f32::NAN; 16]).unwrap();
        assert!(extract_plot_features(&blank, &plot(15.0, 15.0, 9.0)).is_err());
    }

    #[test]
    fn mlr_exact_recovery_and_constant_labels() {
        let train: Vec<_> = (0..10).map(|i| fv(&i.to_string(), vec![i as f64 * 0.7], 2.0 * i as f64 * 0.7 + 3.0)).collect();
        let m = mlr_fit(&train).unwrap();
        assert!((m.coefficients[0] - 2.0).abs() < 1e-9);
        assert!((m.intercept - 3.0).abs() < 1e-9);
        for f in &train {
            assert!((mlr_predict(&m, &f.features).unwrap() - f.label).abs() < 1e-9);
        }

        let flat: Vec<_> = (0..6).map(|i| fv(&i.to_string(), vec![i as f64, (i * i) as f64], 11.0)).collect();
        let m = mlr_fit(&flat).unwrap();
        assert!((m.intercept - 11.0).abs() < 1e-9);
        assert!(m.coefficients.iter().all(|c| c.abs() < 1e-9));

        assert!(mlr_fit(&train[..2]).is_err());
    }

    #[test]
    fn mlr_rank_deficient_minimum_norm() {
        // second feature duplicates the first: minimum norm splits the slope
        let train: Vec<_> = (0..8).map(|i| fv(&i.to_string(), vec![i as f64, i as f64], 4.0 * i as f64 + 1.0)).collect();
        let m = mlr_fit(&train).unwrap();
        assert!((m.coefficients[0] - 2.0).abs() < 1e-9);
        assert!((m.coefficients[1] - 2.0).abs() < 1e-9);
        assert!((m.intercept - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mlr_clamps_at_zero() {
        let train: Vec<_> = (0..6).map(|i| fv(&i.to_string(), vec![i as f64], i as f64)).collect();
        let m = mlr_fit(&train).unwrap();
        assert!(m.predict_raw(&[-5.0]).unwrap() < 0.0);
        assert_eq!(mlr_predict(&m, &[-5.0]).unwrap(), 0.0);
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<FeatureVector> {
        (0..n)
            .map(|i| {
                let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                fv(&format!("p{i:03}"), f, rng.gen_range(0.0..30.0))
            })
            .collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let train = random_set(&mut rng, 50, 3);
        let m = knn_fit(&train, 5, KnnWeighting::InverseDistance).unwrap();
        let n = train.len() as f64;
        for _ in 0..40 {
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            // independent oracle: recompute standardization and scan all points
            let mut d: Vec<(f64, String, f64)> = train
                .iter()
                .map(|t| {
                    let mut s = 0.0;
                    for j in 0..3 {
                        let mu = train.iter().map(|u| u.features[j]).sum::<f64>() / n;
                        let sd = (train.iter().map(|u| (u.features[j] - mu).powi(2)).sum::<f64>() / n).sqrt();
                        s += ((t.features[j] - q[j]) / sd).powi(2);
                    }
                    (s.sqrt(), t.plot_id.clone(), t.label)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let (mut num, mut den) = (0.0, 0.0);
            for (dist, _, y) in &d[..5] {
                num += y / (dist + 1e-6);
                den += 1.0 / (dist + 1e-6);
            }
            assert!((knn_predict(&m, &q).unwrap() - num / den).abs() < 1e-9);
        }
    }

    #[test]
    fn knn_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train = random_set(&mut rng, 20, 2);
        let k1 = knn_fit(&train, 1, KnnWeighting::InverseDistance).unwrap();
        let q = vec![0.1, -0.2];
        let nearest = train
            .iter()
            .min_by(|a, b| {
                let da: f64 = a.features.iter().zip(&q).zip(&k1.std).map(|((x, y), s)| ((x - y) / s).powi(2)).sum();
                let db: f64 = b.features.iter().zip(&q).zip(&k1.std).map(|((x, y), s)| ((x - y) / s).powi(2)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert_eq!(knn_predict(&k1, &q).unwrap(), nearest.label);

        let k5 = knn_fit(&train, 5, KnnWeighting::InverseDistance).unwrap();
        assert_eq!(knn_predict(&k5, &train[7].features).unwrap(), train[7].label);

        let uni = knn_fit(&train, 20, KnnWeighting::Uniform).unwrap();
        let mean = train.iter().map(|f| f.label).sum::<f64>() / 20.0;
        assert!((knn_predict(&uni, &q).unwrap() - mean).abs() < 1e-9);

        assert!(knn_fit(&train, 21, KnnWeighting::InverseDistance).is_err());
        assert!(knn_fit(&train, 0, KnnWeighting::InverseDistance).is_err());
    }

    #[test]
    fn knn_ties_broken_by_plot_id() {
        // mean 0, std 1: standardization is exact, so the midpoint is a true tie
        let train = vec![fv("b", vec![1.0], 10.0), fv("a", vec![-1.0], 20.0)];
        let m = knn_fit(&train, 1, KnnWeighting::InverseDistance).unwrap();
        assert_eq!(knn_predict(&m, &[0.0]).unwrap(), 20.0);
    }

    #[test]
    fn models_roundtrip_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = random_set(&mut rng, 12, 2);
        for m in [
            BaselineModel::Mlr(mlr_fit(&train).unwrap()),
            BaselineModel::Knn(knn_fit(&train, 5, KnnWeighting::InverseDistance).unwrap()),
        ] {
            let back = BaselineModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.predict(&[0.3, 0.2]).unwrap(), m.predict(&[0.3, 0.2]).unwrap());
        }
    }

    proptest! {
        #[test]
        fn knn_prediction_bounded(seed in 0u64..500, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = random_set(&mut rng, 15, 3);
            let m = knn_fit(&train, k, KnnWeighting::InverseDistance).unwrap();
            let lo = train.iter().map(|f| f.label).fold(f64::INFINITY, f64::min);
            let hi = train.iter().map(|f| f.label).fold(f64::NEG_INFINITY, f64::max);
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let p = knn_predict(&m, &q).unwrap();
            prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
        }

        #[test]
        fn knn_affine_invariant(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = random_set(&mut rng, 20, 3);
            let scale: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..50.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 }).collect();
            let shift: Vec<f64> = (0..3).map(|_| rng.gen_range(-100.0..100.0)).collect();
            let map = |f: &[f64]| -> Vec<f64> { f.iter().zip(&scale).zip(&shift).map(|((v, a), b)| a * v + b).collect() };
            let moved: Vec<_> = train.iter().map(|f| fv(&f.plot_id, map(&f.features), f.label)).collect();
            let m1 = knn_fit(&train, 5, KnnWeighting::InverseDistance).unwrap();
            let m2 = knn_fit(&moved, 5, KnnWeighting::InverseDistance).unwrap();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (a, b) = (knn_predict(&m1, &q).unwrap(), knn_predict(&m2, &map(&q)).unwrap());
            prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{} vs {}", a, b);
        }

        #[test]
        fn mlr_residuals_sum_to_zero_and_affine(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = random_set(&mut rng, 25, 4);
            let m = mlr_fit(&train).unwrap();
            let resid: f64 = train.iter().map(|f| f.label - m.predict_raw(&f.features).unwrap()).sum();
            prop_assert!(resid.abs() < 1e-8);
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t = rng.gen_range(-1.0..2.0);
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            let lhs = m.predict_raw(&mix).unwrap();
            let rhs = t * m.predict_raw(&a).unwrap() + (1.0 - t) * m.predict_raw(&b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
