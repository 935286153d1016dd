//! SeUNet: a UNet regressor whose encoder and decoder blocks are followed by
//! squeeze-excitation channel gates.
//!
//! Level `i` has width `base_width * 2^i`; the bottleneck has width
//! `base_width * 2^depth`. Decoder levels upsample by nearest neighbour,
//! apply a 3x3 conv, concatenate the skip tensor (`[skip, up]`) and run a
//! double conv plus SE. A 1x1 conv produces the single-channel height map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, BnBatchStats, BnCache, SeCache, SeGrads, SeParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub se_reduction: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 14,
            base_width: 32,
            depth: 4,
            se_reduction: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_width == 0 || self.se_reduction == 0 || self.base_width % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "base_width {} must be a positive multiple of se_reduction {}",
                self.base_width, self.se_reduction
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
    FcWeight,
    FcBias,
    /// Fixed `[scale, shift]` mapping the head output to label units.
    OutputAffine,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(
            self,
            ParamKind::BnRunningMean | ParamKind::BnRunningVar | ParamKind::OutputAffine
        )
    }

    /// Kernels and FC matrices receive weight decay; biases and batch-norm
    /// parameters do not.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::FcWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

/// Every tensor of a model, in a fixed order determined by its config.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    kind: p.kind,
                    data: p.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.data.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConvIdx {
    conv1: ConvIdx,
    bn1: BnIdx,
    conv2: ConvIdx,
    bn2: BnIdx,
}

#[derive(Debug, Clone, Copy)]
struct SeIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    hidden: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLevel {
    dc: DoubleConvIdx,
    se: SeIdx,
}

#[derive(Debug, Clone, Copy)]
struct DecLevel {
    up: ConvIdx,
    dc: DoubleConvIdx,
    se: SeIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<EncLevel>,
    bottleneck: DoubleConvIdx,
    /// Ordered from the deepest level up to level 0.
    dec: Vec<DecLevel>,
    head: ConvIdx,
    affine: usize,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, ParamKind)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.specs.push((name, shape, kind));
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> ConvIdx {
        let w = self.push(format!("{prefix}.weight"), vec![cout, cin, k, k], ParamKind::ConvWeight);
        let b = self.push(format!("{prefix}.bias"), vec![cout], ParamKind::ConvBias);
        ConvIdx { w, b, cout, k }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        BnIdx {
            gamma: self.push(format!("{prefix}.gamma"), vec![c], ParamKind::BnScale),
            beta: self.push(format!("{prefix}.beta"), vec![c], ParamKind::BnShift),
            mean: self.push(format!("{prefix}.running_mean"), vec![c], ParamKind::BnRunningMean),
            var: self.push(format!("{prefix}.running_var"), vec![c], ParamKind::BnRunningVar),
        }
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize) -> DoubleConvIdx {
        DoubleConvIdx {
            conv1: self.conv(&format!("{prefix}.conv1"), cin, cout, 3),
            bn1: self.bn(&format!("{prefix}.bn1"), cout),
            conv2: self.conv(&format!("{prefix}.conv2"), cout, cout, 3),
            bn2: self.bn(&format!("{prefix}.bn2"), cout),
        }
    }

    fn se(&mut self, prefix: &str, c: usize, r: usize) -> SeIdx {
        let hidden = c / r;
        SeIdx {
            w1: self.push(format!("{prefix}.fc1.weight"), vec![hidden, c], ParamKind::FcWeight),
            b1: self.push(format!("{prefix}.fc1.bias"), vec![hidden], ParamKind::FcBias),
            w2: self.push(format!("{prefix}.fc2.weight"), vec![c, hidden], ParamKind::FcWeight),
            b2: self.push(format!("{prefix}.fc2.bias"), vec![c], ParamKind::FcBias),
            hidden,
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, ParamKind)>) {
    let mut b = Builder { specs: Vec::new() };
    let mut enc = Vec::with_capacity(cfg.depth);
    let mut cin = cfg.in_channels;
    for i in 0..cfg.depth {
        let w = cfg.width(i);
        let dc = b.double_conv(&format!("enc{i}"), cin, w);
        let se = b.se(&format!("enc{i}.se"), w, cfg.se_reduction);
        enc.push(EncLevel { dc, se });
        cin = w;
    }
    let bottleneck = b.double_conv("bottleneck", cin, cfg.width(cfg.depth));
    let mut dec = Vec::with_capacity(cfg.depth);
    for i in (0..cfg.depth).rev() {
        let w = cfg.width(i);
        let up = b.conv(&format!("dec{i}.up"), cfg.width(i + 1), w, 3);
        let dc = b.double_conv(&format!("dec{i}"), 2 * w, w);
        let se = b.se(&format!("dec{i}.se"), w, cfg.se_reduction);
        dec.push(DecLevel { up, dc, se });
    }
    let head = b.conv("head", cfg.width(0), 1, 1);
    let affine = b.push("head.output_affine".into(), vec![2], ParamKind::OutputAffine);
    (
        Layout {
            enc,
            bottleneck,
            dec,
            head,
            affine,
        },
        b.specs,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; output is linear.
    Train,
    /// Running statistics in batch norm; output clamped at 0.
    Eval,
}

struct DoubleConvCache<T> {
    input: Tensor<T>,
    bn1: Option<BnCache<T>>,
    act1: Tensor<T>,
    bn2: Option<BnCache<T>>,
    act2: Tensor<T>,
}

struct EncCache<T> {
    dc: DoubleConvCache<T>,
    se: SeCache<T>,
    skip_shape: [usize; 4],
    pool_arg: Vec<u32>,
}

struct DecCache<T> {
    upsampled: Tensor<T>,
    dc: DoubleConvCache<T>,
    se: SeCache<T>,
}

/// Activations retained by a training-mode forward pass.
pub struct ForwardCache<T> {
    enc: Vec<EncCache<T>>,
    bottleneck: DoubleConvCache<T>,
    dec: Vec<DecCache<T>>,
    head_input: Tensor<T>,
}

pub struct ForwardPass<T> {
    /// `[n][1][h][w]`
    pub output: Tensor<T>,
    pub cache: Option<ForwardCache<T>>,
    /// `(running_mean index, running_var index, stats)` per batch-norm layer.
    pub bn_stats: Vec<(usize, usize, BnBatchStats<T>)>,
}

#[derive(Debug, Clone)]
pub struct SeUNet {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<(String, Vec<usize>, ParamKind)>,
}

impl SeUNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        Ok(SeUNet {
            config,
            layout,
            specs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// He-normal conv/FC weights, zero biases, unit batch-norm scale.
    pub fn init_parameters<T: Scalar>(&self, seed: u64) -> ParameterSet<T> {
        ParameterSet {
            config: ModelConfig { seed, ..self.config },
            params: init_from_specs(&self.specs, seed),
        }
    }

    /// Checks that `params` has exactly the tensors this architecture needs.
    pub fn check_params<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<()> {
        if params.params.len() != self.specs.len() {
            return Err(Error::Shape(format!(
                "parameter set has {} tensors, model needs {}",
                params.params.len(),
                self.specs.len()
            )));
        }
        for (p, (name, shape, kind)) in params.params.iter().zip(&self.specs) {
            if &p.name != name || &p.shape != shape || p.kind != *kind {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
            if p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("parameter {} has wrong length", p.name)));
            }
        }
        Ok(())
    }

    /// Index of the fixed `[scale, shift]` applied after the head, set from
    /// the label distribution before pretraining.
    pub fn output_affine_index(&self) -> usize {
        self.layout.affine
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                x.c, self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not a multiple of {m}",
                x.h, x.w
            )));
        }
        let p = &params.params;
        let train = mode == Mode::Train;
        let mut bn_stats = Vec::new();
        let mut enc_caches = Vec::new();
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for (i, lvl) in self.layout.enc.iter().enumerate() {
            let (y, dc) = double_conv(p, &lvl.dc, cur, mode, &mut bn_stats);
            check_finite(&y, &format!("enc{i}.double_conv"))?;
            let (y, se) = layers::se_forward(&y, &se_params(p, &lvl.se));
            let (pooled, arg) = layers::max_pool2(&y);
            skips.push(y.clone());
            if train {
                enc_caches.push(EncCache {
                    dc,
                    se,
                    skip_shape: y.shape(),
                    pool_arg: arg,
                });
            }
            cur = pooled;
        }
        let (mut cur, bott) = double_conv(p, &self.layout.bottleneck, cur, mode, &mut bn_stats);
        check_finite(&cur, "bottleneck")?;
        let mut dec_caches = Vec::new();
        for (j, (lvl, skip)) in self.layout.dec.iter().zip(skips.into_iter().rev()).enumerate() {
            let upsampled = layers::upsample2(&cur);
            let up = layers::conv2d_forward(&upsampled, &p[lvl.up.w].data, &p[lvl.up.b].data, lvl.up.cout, lvl.up.k);
            let cat = layers::concat(&skip, &up);
            let (y, dc) = double_conv(p, &lvl.dc, cat, mode, &mut bn_stats);
            let (y, se) = layers::se_forward(&y, &se_params(p, &lvl.se));
            check_finite(&y, &format!("dec{}", self.config.depth - 1 - j))?;
            if train {
                dec_caches.push(DecCache { upsampled, dc, se });
            }
            cur = y;
        }
        let h = self.layout.head;
        let mut output = layers::conv2d_forward(&cur, &p[h.w].data, &p[h.b].data, h.cout, h.k);
        let (scale, shift) = (p[self.layout.affine].data[0], p[self.layout.affine].data[1]);
        for v in &mut output.data {
            *v = *v * scale + shift;
        }
        check_finite(&output, "head")?;
        if mode == Mode::Eval {
            for v in &mut output.data {
                *v = v.max(T::zero());
            }
        }
        let cache = train.then(|| ForwardCache {
            enc: enc_caches,
            bottleneck: bott,
            dec: dec_caches,
            head_input: cur,
        });
        Ok(ForwardPass {
            output,
            cache,
            bn_stats,
        })
    }

    /// Gradients of a scalar loss w.r.t. every tensor, given `d loss / d output`.
    /// Running-statistics entries stay zero.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        cache: &ForwardCache<T>,
        d_output: &Tensor<T>,
    ) -> Vec<Vec<T>> {
        let p = &params.params;
        let mut g = params.zeros_like();
        let h = self.layout.head;
        let scale = p[self.layout.affine].data[0];
        let mut d_head = d_output.clone();
        for v in &mut d_head.data {
            *v = *v * scale;
        }
        let mut d = {
            let (dw, db) = two_mut(&mut g, h.w, h.b);
            layers::conv2d_backward(&cache.head_input, &p[h.w].data, h.cout, h.k, &d_head, dw, db, true)
                .expect("dx requested")
        };
        let mut d_skips = Vec::with_capacity(self.layout.dec.len());
        for (lvl, dc) in self.layout.dec.iter().zip(&cache.dec).rev() {
            let d_se = se_backward(p, &mut g, &lvl.se, &dc.se, &d);
            let d_cat = double_conv_backward(p, &mut g, &lvl.dc, &dc.dc, d_se);
            let skip_c = d_cat.c / 2;
            let (d_skip, d_up) = layers::split_channels(&d_cat, skip_c);
            d_skips.push(d_skip);
            let d_upsampled = {
                let (dw, db) = two_mut(&mut g, lvl.up.w, lvl.up.b);
                layers::conv2d_backward(&dc.upsampled, &p[lvl.up.w].data, lvl.up.cout, lvl.up.k, &d_up, dw, db, true)
                    .expect("dx requested")
            };
            d = layers::upsample2_backward(&d_upsampled);
        }
        d = double_conv_backward(p, &mut g, &self.layout.bottleneck, &cache.bottleneck, d);
        for ((lvl, ec), d_skip) in self
            .layout
            .enc
            .iter()
            .zip(&cache.enc)
            .rev()
            .zip(d_skips.into_iter().rev())
        {
            let mut d_y = layers::max_pool2_backward(&d, &ec.pool_arg, ec.skip_shape);
            for (a, b) in d_y.data.iter_mut().zip(&d_skip.data) {
                *a = *a + *b;
            }
            let d_se = se_backward(p, &mut g, &lvl.se, &ec.se, &d_y);
            d = double_conv_backward(p, &mut g, &lvl.dc, &ec.dc, d_se);
        }
        g
    }

    /// Trainable scalar count from the closed form for this config.
    pub fn closed_form_param_count(cfg: &ModelConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let bn = |c: usize| 2 * c;
        let dconv = |cin: usize, cout: usize| conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
        let se = |c: usize| {
            let h = c / cfg.se_reduction;
            c * h + h + h * c + c
        };
        let mut total = 0;
        let mut cin = cfg.in_channels;
        for i in 0..cfg.depth {
            total += dconv(cin, cfg.width(i)) + se(cfg.width(i));
            cin = cfg.width(i);
        }
        total += dconv(cin, cfg.width(cfg.depth));
        for i in 0..cfg.depth {
            let w = cfg.width(i);
            total += conv(cfg.width(i + 1), w, 3) + dconv(2 * w, w) + se(w);
        }
        total + conv(cfg.width(0), 1, 1)
    }
}

fn init_from_specs<T: Scalar>(specs: &[(String, Vec<usize>, ParamKind)], seed: u64) -> Vec<Param<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|(name, shape, kind)| {
            let len: usize = shape.iter().product();
            let data = match kind {
                ParamKind::ConvWeight | ParamKind::FcWeight => {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid sd");
                    (0..len).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                }
                ParamKind::BnScale | ParamKind::BnRunningVar => vec![T::one(); len],
                ParamKind::OutputAffine => vec![T::one(), T::zero()],
                _ => vec![T::zero(); len],
            };
            Param {
                name: name.clone(),
                shape: shape.clone(),
                kind: *kind,
                data,
            }
        })
        .collect()
}

fn check_finite<T: Scalar>(t: &Tensor<T>, block: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations of block {block}")))
    }
}

fn se_params<'a, T>(p: &'a [Param<T>], idx: &SeIdx) -> SeParams<'a, T> {
    SeParams {
        w1: &p[idx.w1].data,
        b1: &p[idx.b1].data,
        w2: &p[idx.w2].data,
        b2: &p[idx.b2].data,
        hidden: idx.hidden,
    }
}

fn two_mut<T>(g: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn conv_bn_relu<T: Scalar>(
    p: &[Param<T>],
    conv: &ConvIdx,
    bn: &BnIdx,
    x: &Tensor<T>,
    mode: Mode,
    bn_stats: &mut Vec<(usize, usize, BnBatchStats<T>)>,
) -> (Tensor<T>, Option<BnCache<T>>) {
    let z = layers::conv2d_forward(x, &p[conv.w].data, &p[conv.b].data, conv.cout, conv.k);
    let (mut y, cache) = match mode {
        Mode::Train => {
            let (y, cache, stats) = layers::batch_norm_train(&z, &p[bn.gamma].data, &p[bn.beta].data);
            bn_stats.push((bn.mean, bn.var, stats));
            (y, Some(cache))
        }
        Mode::Eval => (
            layers::batch_norm_eval(
                &z,
                &p[bn.gamma].data,
                &p[bn.beta].data,
                &p[bn.mean].data,
                &p[bn.var].data,
            ),
            None,
        ),
    };
    layers::relu_inplace(&mut y);
    (y, cache)
}

fn double_conv<T: Scalar>(
    p: &[Param<T>],
    idx: &DoubleConvIdx,
    x: Tensor<T>,
    mode: Mode,
    bn_stats: &mut Vec<(usize, usize, BnBatchStats<T>)>,
) -> (Tensor<T>, DoubleConvCache<T>) {
    let (act1, bn1) = conv_bn_relu(p, &idx.conv1, &idx.bn1, &x, mode, bn_stats);
    let (act2, bn2) = conv_bn_relu(p, &idx.conv2, &idx.bn2, &act1, mode, bn_stats);
    let out = act2.clone();
    (
        out,
        DoubleConvCache {
            input: x,
            bn1,
            act1,
            bn2,
            act2,
        },
    )
}

fn conv_bn_relu_backward<T: Scalar>(
    p: &[Param<T>],
    g: &mut [Vec<T>],
    conv: &ConvIdx,
    bn: &BnIdx,
    input: &Tensor<T>,
    bn_cache: &BnCache<T>,
    act: &Tensor<T>,
    mut d: Tensor<T>,
) -> Tensor<T> {
    layers::relu_backward(act, &mut d);
    let dz = {
        let (dg, db) = two_mut(g, bn.gamma, bn.beta);
        layers::batch_norm_backward(&d, &p[bn.gamma].data, bn_cache, dg, db)
    };
    let (dw, db) = two_mut(g, conv.w, conv.b);
    layers::conv2d_backward(input, &p[conv.w].data, conv.cout, conv.k, &dz, dw, db, true).expect("dx requested")
}

fn double_conv_backward<T: Scalar>(
    p: &[Param<T>],
    g: &mut [Vec<T>],
    idx: &DoubleConvIdx,
    cache: &DoubleConvCache<T>,
    d: Tensor<T>,
) -> Tensor<T> {
    let bn2 = cache.bn2.as_ref().expect("training-mode cache");
    let bn1 = cache.bn1.as_ref().expect("training-mode cache");
    let d = conv_bn_relu_backward(p, g, &idx.conv2, &idx.bn2, &cache.act1, bn2, &cache.act2, d);
    conv_bn_relu_backward(p, g, &idx.conv1, &idx.bn1, &cache.input, bn1, &cache.act1, d)
}

fn se_backward<T: Scalar>(
    p: &[Param<T>],
    g: &mut [Vec<T>],
    idx: &SeIdx,
    cache: &SeCache<T>,
    d: &Tensor<T>,
) -> Tensor<T> {
    // w1 < b1 < w2 < b2 by construction
    let (lo, hi) = g.split_at_mut(idx.w2);
    let (gw1, gb1) = two_mut(lo, idx.w1, idx.b1);
    let (gw2, gb2) = two_mut(hi, 0, idx.b2 - idx.w2);
    layers::se_backward(
        d,
        &se_params(p, idx),
        cache,
        SeGrads {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
    )
}

/// Standalone double-conv block (conv-BN-ReLU twice) on its own parameters,
/// used to exercise the building block in isolation.
pub struct DoubleConvBlock<T> {
    pub params: Vec<Param<T>>,
    idx: DoubleConvIdx,
}

impl<T: Scalar> DoubleConvBlock<T> {
    pub fn new(cin: usize, cout: usize, seed: u64) -> Self {
        let mut b = Builder { specs: Vec::new() };
        let idx = b.double_conv("block", cin, cout);
        DoubleConvBlock {
            params: init_from_specs(&b.specs, seed),
            idx,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let cin = self.params[self.idx.conv1.w].shape[1];
        if x.c != cin {
            return Err(Error::Shape(format!("double_conv expects {cin} channels, got {}", x.c)));
        }
        let mut stats = Vec::new();
        Ok(double_conv(&self.params, &self.idx, x.clone(), mode, &mut stats).0)
    }

    /// Training-mode forward and the gradient of `sum(output * weights)`.
    pub fn forward_backward(&self, x: &Tensor<T>, weights: &Tensor<T>) -> (Tensor<T>, Vec<Vec<T>>) {
        let mut stats = Vec::new();
        let (y, cache) = double_conv(&self.params, &self.idx, x.clone(), Mode::Train, &mut stats);
        let mut g: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        double_conv_backward(&self.params, &mut g, &self.idx, &cache, weights.clone());
        (y, g)
    }
}

/// Squeeze-excitation block applied to `x` with explicit FC parameters.
pub fn se_block<T: Scalar>(x: &Tensor<T>, p: &SeParams<'_, T>) -> Result<Tensor<T>> {
    if p.w1.len() != p.hidden * x.c || p.w2.len() != x.c * p.hidden || p.b2.len() != x.c || p.b1.len() != p.hidden {
        return Err(Error::Shape(format!(
            "SE parameters do not match {} channels / {} hidden",
            x.c, p.hidden
        )));
    }
    Ok(layers::se_forward(x, p).0)
}
