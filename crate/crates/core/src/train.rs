//! Losses, optimizer, learning-rate schedule, checkpoints, and the
//! pretraining and fine-tuning loops.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::BN_MOMENTUM;
use crate::model::{Mode, ModelConfig, Param, ParamKind, ParameterSet, SeUNet};
use crate::patch::{self, hex, Normalization, Patch, PatchSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub seed: u64,
    /// Keep batch-norm running statistics fixed while fine-tuning.
    pub freeze_bn_stats: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_lr: 1e-2,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs_pretrain: 100,
            epochs_finetune: 5,
            warmup_fraction: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            seed: 0,
            freeze_bn_stats: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!("warmup_fraction {} not in (0, 1)", self.warmup_fraction)));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr {}", self.max_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.div_factor > 0.0 && self.final_div_factor > 0.0) {
            return Err(Error::Config("schedule divisors must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of `(pred - target)^2` over valid pixels.
pub fn masked_mse(pred: &[f32], target: &[f32], valid: &[bool]) -> Result<f64> {
    let (sse, n) = masked_sse(pred, target, valid)?;
    if n == 0 {
        return Err(Error::Empty("no valid pixels in loss".into()));
    }
    Ok(sse / n as f64)
}

fn masked_sse(pred: &[f32], target: &[f32], valid: &[bool]) -> Result<(f64, usize)> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::Shape(format!(
            "loss inputs differ in length: {} / {} / {}",
            pred.len(),
            target.len(),
            valid.len()
        )));
    }
    let mut sse = 0.0;
    let mut n = 0;
    for ((p, t), &v) in pred.iter().zip(target).zip(valid) {
        if v {
            let d = *p as f64 - *t as f64;
            sse += d * d;
            n += 1;
        }
    }
    Ok((sse, n))
}

/// Masked MSE and its gradient w.r.t. `pred`.
pub fn masked_mse_grad<T: Scalar>(pred: &[T], target: &[f32], valid: &[bool]) -> Result<(f64, Vec<T>)> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Empty("no valid pixels in loss".into()));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(valid)
        .map(|((p, t), &v)| {
            if v {
                let d = p.as_f64() - *t as f64;
                loss += d * d * inv;
                T::from_f64(2.0 * d * inv)
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((loss, grad))
}

/// One-cycle schedule: cosine ramp from `max_lr / div_factor` up to
/// `max_lr` at step `floor(warmup_fraction * total_steps)`, then cosine
/// anneal to `max_lr / (div_factor * final_div_factor)` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &OptimizerConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let initial = cfg.max_lr / cfg.div_factor;
    let min_lr = initial / cfg.final_div_factor;
    let peak = ((cfg.warmup_fraction * total_steps as f64).floor() as usize).min(total_steps - 1);
    let anneal = |start: f64, end: f64, pct: f64| end + (start - end) / 2.0 * ((std::f64::consts::PI * pct).cos() + 1.0);
    if step <= peak {
        let pct = if peak == 0 { 1.0 } else { step as f64 / peak as f64 };
        Ok(anneal(initial, cfg.max_lr, pct))
    } else {
        let pct = (step - peak) as f64 / (total_steps - 1 - peak) as f64;
        Ok(anneal(cfg.max_lr, min_lr, pct))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ParameterSet<T>,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
    pub best_val_loss: f64,
    pub best_params: Option<ParameterSet<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ParameterSet<T>) -> Self {
        let zeros = params.zeros_like();
        TrainState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            params,
            step: 0,
            best_val_loss: f64::INFINITY,
            best_params: None,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay
/// (`w *= 1 - lr * weight_decay`, kernels and FC weights only).
pub fn adam_step<T: Scalar>(state: &mut TrainState<T>, grads: &[Vec<T>], lr: f64, cfg: &OptimizerConfig) -> Result<()> {
    if grads.len() != state.params.params.len() {
        return Err(Error::Shape("gradient list does not match parameters".into()));
    }
    for (p, g) in state.params.params.iter().zip(grads) {
        if p.kind.trainable() && g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in state.params.params.iter_mut().enumerate() {
        if !p.kind.trainable() {
            continue;
        }
        let decay = if p.kind.decays() { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.first_moment[i], &mut state.second_moment[i]);
        for j in 0..p.data.len() {
            let g = grads[i][j].as_f64();
            let mj = cfg.beta1 * m[j].as_f64() + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j].as_f64() + (1.0 - cfg.beta2) * g * g;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            let w = p.data[j].as_f64() * decay - lr * mhat / (vhat.sqrt() + cfg.epsilon);
            p.data[j] = T::from_f64(w);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub stage: String,
    /// Epoch whose parameters were kept (0 = untouched initial parameters).
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub normalization: Normalization,
    pub normalization_fingerprint: String,
    pub data_fingerprint: String,
    pub params_fingerprint: String,
    #[serde(default)]
    pub band_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet<f32>,
    pub meta: CheckpointMeta,
}

const CKPT_MAGIC: &[u8; 8] = b"SEUNETCK";
const CKPT_VERSION: u32 = 1;

fn kind_code(k: ParamKind) -> u32 {
    match k {
        ParamKind::ConvWeight => 0,
        ParamKind::ConvBias => 1,
        ParamKind::BnScale => 2,
        ParamKind::BnShift => 3,
        ParamKind::BnRunningMean => 4,
        ParamKind::BnRunningVar => 5,
        ParamKind::FcWeight => 6,
        ParamKind::FcBias => 7,
        ParamKind::OutputAffine => 8,
    }
}

fn kind_from_code(c: u32) -> Result<ParamKind> {
    Ok(match c {
        0 => ParamKind::ConvWeight,
        1 => ParamKind::ConvBias,
        2 => ParamKind::BnScale,
        3 => ParamKind::BnShift,
        4 => ParamKind::BnRunningMean,
        5 => ParamKind::BnRunningVar,
        6 => ParamKind::FcWeight,
        7 => ParamKind::FcBias,
        8 => ParamKind::OutputAffine,
        _ => return Err(Error::Checkpoint(format!("unknown tensor kind {c}"))),
    })
}

/// Named-tensor table: magic, version, count, then per tensor the name,
/// kind, dims and little-endian float32 data.
pub fn encode_params(params: &ParameterSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.params.len() as u32).to_le_bytes());
    for p in &params.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&kind_code(p.kind).to_le_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated parameter blob".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_params(bytes: &[u8], config: ModelConfig) -> Result<ParameterSet<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let kind = kind_from_code(r.u32()?)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Param { name, shape, kind, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in parameter blob".into()));
    }
    Ok(ParameterSet { config, params })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn ckpt_paths(path: &Path) -> (PathBuf, PathBuf) {
    crate::raster::raster_paths(path)
}

impl Checkpoint {
    pub fn params_fingerprint(&self) -> String {
        sha256_hex(&encode_params(&self.params))
    }

    /// Writes `<stem>.bin` (parameters) and `<stem>.json` (metadata).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (bin, json) = ckpt_paths(path.as_ref());
        let blob = encode_params(&self.params);
        let mut meta = self.meta.clone();
        meta.params_fingerprint = sha256_hex(&blob);
        fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        fs::write(&json, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (bin, json) = ckpt_paths(path.as_ref());
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if sha256_hex(&blob) != meta.params_fingerprint {
            return Err(Error::Checkpoint(format!("{}: parameter fingerprint mismatch", bin.display())));
        }
        if meta.normalization.fingerprint() != meta.normalization_fingerprint {
            return Err(Error::Checkpoint("normalization fingerprint mismatch".into()));
        }
        let params = decode_params(&blob, meta.config)?;
        SeUNet::new(meta.config)?.check_params(&params)?;
        Ok(Checkpoint { params, meta })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// `epoch,train_loss,val_loss,lr`; `val_loss` is empty when there is no
/// validation subset.
pub fn write_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,train_loss,val_loss,lr\n");
    for e in log {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, val, e.lr));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn data_fingerprint(set: &PatchSet) -> String {
    let mut h = Sha256::new();
    for subset in [&set.train, &set.val] {
        for p in subset {
            for v in p.eo.iter().chain(&p.labels) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

/// Pooled masked MSE of eval-mode predictions over a patch list.
pub fn evaluate_loss(net: &SeUNet, params: &ParameterSet<f32>, patches: &[Patch], batch_size: usize) -> Result<Option<f64>> {
    let mut sse = 0.0;
    let mut n = 0;
    for chunk in patches.chunks(batch_size.max(1)) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let (x, y, v) = patch::batch(&refs)?;
        let out = net.forward(params, &x, Mode::Eval)?.output;
        let (s, k) = masked_sse(&out.data, &y, &v)?;
        sse += s;
        n += k;
    }
    Ok((n > 0).then(|| sse / n as f64))
}

fn normalized_set(set: &PatchSet, stats: Option<&Normalization>) -> Result<(PatchSet, Normalization)> {
    match (&set.normalization, stats) {
        (Some(have), Some(want)) => {
            if have.fingerprint() != want.fingerprint() {
                return Err(Error::Config("patch set was normalized with different statistics than the checkpoint".into()));
            }
            Ok((set.clone(), have.clone()))
        }
        (Some(have), None) => Ok((set.clone(), have.clone())),
        (None, Some(want)) => {
            let mut s = set.clone();
            s.apply(want)?;
            Ok((s, want.clone()))
        }
        (None, None) => {
            let mut s = set.clone();
            let st = s.fit_and_apply_normalization()?;
            Ok((s, st))
        }
    }
}

/// Mean and population sd of the valid labels.
fn label_stats(patches: &[Patch]) -> Option<(f64, f64)> {
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for p in patches {
        for (l, &v) in p.labels.iter().zip(&p.valid) {
            if v {
                s += *l as f64;
                s2 += (*l as f64).powi(2);
                n += 1;
            }
        }
    }
    (n > 0).then(|| {
        let mean = s / n as f64;
        (mean, (s2 / n as f64 - mean * mean).max(0.0).sqrt())
    })
}

struct LoopResult {
    params: ParameterSet<f32>,
    best_epoch: usize,
    best_val: Option<f64>,
    log: Vec<EpochLog>,
}

fn train_loop(
    net: &SeUNet,
    init: ParameterSet<f32>,
    set: &PatchSet,
    epochs: usize,
    opt: &OptimizerConfig,
    update_bn_stats: bool,
) -> Result<LoopResult> {
    if set.train.is_empty() {
        return Err(Error::Empty("training subset is empty".into()));
    }
    let batches_per_epoch = set.train.len().div_ceil(opt.batch_size);
    let total_steps = epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut state = TrainState::new(init);
    let mut log = Vec::with_capacity(epochs);
    let mut best_epoch = 0;
    if set.val.is_empty() && epochs > 0 {
        log::warn!("no validation patches; selecting the checkpoint by training loss");
    }
    let mut order: Vec<usize> = (0..set.train.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut sse, mut count) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(opt.batch_size) {
            let refs: Vec<&Patch> = chunk.iter().map(|&i| &set.train[i]).collect();
            let (x, y, v) = patch::batch(&refs)?;
            let pass = net.forward(&state.params, &x, Mode::Train)?;
            let (loss, grad) = masked_mse_grad(&pass.output.data, &y, &v)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let nv = v.iter().filter(|&&b| b).count();
            sse += loss * nv as f64;
            count += nv;
            let d_out = Tensor::from_vec(x.n, 1, x.h, x.w, grad);
            let cache = pass.cache.as_ref().expect("training pass keeps a cache");
            let grads = net.backward(&state.params, cache, &d_out);
            lr = one_cycle_lr(state.step as usize, total_steps, opt)?;
            adam_step(&mut state, &grads, lr, opt)?;
            if update_bn_stats {
                apply_bn_stats(&mut state.params, &pass.bn_stats);
            }
        }
        let train_loss = sse / count.max(1) as f64;
        let val_loss = evaluate_loss(net, &state.params, &set.val, opt.batch_size)?;
        let score = val_loss.unwrap_or(train_loss);
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at epoch {epoch}")));
        }
        log::info!("epoch {epoch}: train {train_loss:.4} val {val_loss:?} lr {lr:.2e}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if score < state.best_val_loss {
            state.best_val_loss = score;
            state.best_params = Some(state.params.clone());
            best_epoch = epoch;
        }
    }
    let best_val = if epochs == 0 {
        evaluate_loss(net, &state.params, &set.val, opt.batch_size)?
    } else {
        log[best_epoch - 1].val_loss
    };
    let params = state.best_params.take().unwrap_or(state.params);
    Ok(LoopResult {
        params,
        best_epoch,
        best_val,
        log,
    })
}

fn apply_bn_stats(params: &mut ParameterSet<f32>, stats: &[(usize, usize, crate::layers::BnBatchStats<f32>)]) {
    let m = BN_MOMENTUM as f32;
    for (mi, vi, s) in stats {
        for (r, b) in params.params[*mi].data.iter_mut().zip(&s.mean) {
            *r = (1.0 - m) * *r + m * *b;
        }
        for (r, b) in params.params[*vi].data.iter_mut().zip(&s.var) {
            *r = (1.0 - m) * *r + m * *b;
        }
    }
}

/// Train from scratch on dense labels and keep the epoch with the lowest
/// validation loss. The patch set is normalized with its own training
/// statistics unless it already carries some. The output bias starts at the
/// mean training label.
pub fn pretrain(config: ModelConfig, set: &PatchSet, opt: &OptimizerConfig) -> Result<TrainOutcome> {
    opt.validate()?;
    let net = SeUNet::new(config)?;
    let (set, stats) = normalized_set(set, None)?;
    check_channels(&config, &set)?;
    let mut init = net.init_parameters::<f32>(config.seed);
    // the network regresses standardized heights
    if let Some((mean, sd)) = label_stats(&set.train) {
        init.params[net.output_affine_index()].data = vec![sd.max(1e-3) as f32, mean as f32];
    }
    let res = train_loop(&net, init, &set, opt.epochs_pretrain, opt, true)?;
    Ok(finish(res, "pretrain", config, stats, &set))
}

/// Continue training a pretrained model on (sparse) target labels, reusing
/// its normalization statistics.
pub fn finetune(pretrained: &Checkpoint, target: &PatchSet, opt: &OptimizerConfig) -> Result<TrainOutcome> {
    opt.validate()?;
    let config = pretrained.meta.config;
    let net = SeUNet::new(config)?;
    net.check_params(&pretrained.params)?;
    let (set, stats) = normalized_set(target, Some(&pretrained.meta.normalization))?;
    check_channels(&config, &set)?;
    let res = train_loop(&net, pretrained.params.clone(), &set, opt.epochs_finetune, opt, !opt.freeze_bn_stats)?;
    let mut out = finish(res, "finetune", config, stats, &set);
    out.checkpoint.meta.band_names = pretrained.meta.band_names.clone();
    Ok(out)
}

fn check_channels(config: &ModelConfig, set: &PatchSet) -> Result<()> {
    for p in set.train.iter().chain(&set.val).chain(&set.test) {
        if p.channels != config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, patches have {}",
                config.in_channels, p.channels
            )));
        }
        if p.size % config.size_multiple() != 0 {
            return Err(Error::Shape(format!(
                "patch size {} not divisible by {}",
                p.size,
                config.size_multiple()
            )));
        }
    }
    Ok(())
}

fn finish(res: LoopResult, stage: &str, config: ModelConfig, stats: Normalization, set: &PatchSet) -> TrainOutcome {
    let mut checkpoint = Checkpoint {
        params: res.params,
        meta: CheckpointMeta {
            config,
            seed: config.seed,
            stage: stage.into(),
            epoch: res.best_epoch,
            val_loss: res.best_val,
            normalization_fingerprint: stats.fingerprint(),
            normalization: stats,
            data_fingerprint: data_fingerprint(set),
            params_fingerprint: String::new(),
            band_names: Vec::new(),
        },
    };
    checkpoint.meta.params_fingerprint = checkpoint.params_fingerprint();
    TrainOutcome {
        checkpoint,
        log: res.log,
    }
}
