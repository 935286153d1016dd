use forest_transfer::model::{Mode, ModelConfig, ParameterSet, SeUNet};
use forest_transfer::patch::{split_patches, Patch, PatchSet};
use forest_transfer::tensor::Tensor;
use forest_transfer::train::{finetune, masked_mse_grad, pretrain, write_log, Checkpoint, OptimizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config(in_channels: usize) -> ModelConfig {
    ModelConfig {
        in_channels,
        base_width: 4,
        depth: 2,
        se_reduction: 2,
        seed: 3,
    }
}

fn loss_f64(net: &SeUNet, p: &ParameterSet<f64>, x: &Tensor<f64>, y: &[f32], v: &[bool]) -> f64 {
    let out = net.forward(p, x, Mode::Train).unwrap().output;
    masked_mse_grad(&out.data, y, v).unwrap().0
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let net = SeUNet::new(tiny_config(4)).unwrap();
    let mut params: ParameterSet<f64> = net.init_parameters(11);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // non-trivial biases and BN shifts so every path carries signal
    for p in params.params.iter_mut().filter(|p| p.kind.trainable()) {
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let (n, c, h, w) = (2, 4, 16, 16);
    let x = Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let y: Vec<f32> = (0..n * h * w).map(|_| rng.gen_range(0.0..3.0)).collect();
    let v: Vec<bool> = (0..n * h * w).map(|i| i % 3 != 0).collect();

    let pass = net.forward(&params, &x, Mode::Train).unwrap();
    let (_, g) = masked_mse_grad(&pass.output.data, &y, &v).unwrap();
    let grads = net.backward(&params, pass.cache.as_ref().unwrap(), &Tensor::from_vec(n, 1, h, w, g));

    // small enough that no perturbation straddles a ReLU or max-pool kink
    let eps = 1e-6;
    let mut checked = 0;
    for i in 0..params.params.len() {
        if !params.params[i].kind.trainable() {
            continue;
        }
        let len = params.params[i].data.len();
        let picks: Vec<usize> = (0..len.min(6)).map(|k| (k * 7919 + 13) % len).collect();
        let (mut diff2, mut norm2) = (0.0f64, 0.0f64);
        for &j in &picks {
            let orig = params.params[i].data[j];
            params.params[i].data[j] = orig + eps;
            let lp = loss_f64(&net, &params, &x, &y, &v);
            params.params[i].data[j] = orig - eps;
            let lm = loss_f64(&net, &params, &x, &y, &v);
            params.params[i].data[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads[i][j];
            diff2 += (numeric - analytic).powi(2);
            norm2 += numeric.powi(2) + analytic.powi(2);
        }
        // conv biases feeding batch norm have an exactly zero gradient, so
        // relative error is only meaningful above the float noise floor
        let rel = diff2.sqrt() / norm2.sqrt().max(1e-12);
        assert!(rel < 1e-3 || diff2.sqrt() < 1e-8, "{}: relative error {rel:e}", params.params[i].name);
        checked += 1;
    }
    assert!(checked > 20);
}

/// Two-channel patches whose label is a smooth function of channel 0.
fn toy_patches(count: usize, size: usize, seed: u64) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let px = size * size;
            let mut eo = vec![0f32; 2 * px];
            let mut labels = vec![0f32; px];
            for k in 0..px {
                let a: f32 = rng.gen_range(0.0..1.0);
                eo[k] = a;
                eo[px + k] = rng.gen_range(0.0..1.0);
                labels[k] = 5.0 + 20.0 * a;
            }
            Patch {
                channels: 2,
                size,
                eo,
                labels,
                valid: vec![true; px],
                forest: vec![true; px],
                origin: (i * size, 0),
                augmentation_tag: "identity".into(),
                normalized: false,
            }
        })
        .collect()
}

fn fast_opt(epochs: usize) -> OptimizerConfig {
    OptimizerConfig {
        epochs_pretrain: epochs,
        epochs_finetune: epochs,
        batch_size: 4,
        max_lr: 1e-2,
        ..OptimizerConfig::default()
    }
}

fn toy_set() -> PatchSet {
    split_patches(toy_patches(16, 16, 1), 0.0, 0.25, 2).unwrap()
}

#[test]
fn pretraining_reduces_loss_and_is_deterministic() {
    let set = toy_set();
    let a = pretrain(tiny_config(2), &set, &fast_opt(40)).unwrap();
    let first = a.log.first().unwrap().train_loss;
    let last = a.log.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "train loss {first} -> {last}");
    assert_eq!(a.log.len(), 40);
    let best = a.log.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.checkpoint.meta.val_loss, Some(best));
    assert!(a.checkpoint.params.all_finite());

    let b = pretrain(tiny_config(2), &set, &fast_opt(40)).unwrap();
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    assert_eq!(a.checkpoint.meta, b.checkpoint.meta);
}

#[test]
fn checkpoint_and_log_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(tiny_config(2), &toy_set(), &fast_opt(2)).unwrap();
    let stem = dir.path().join("model");
    out.checkpoint.save(&stem).unwrap();
    let back = Checkpoint::load(&stem).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.params_fingerprint(), back.meta.params_fingerprint);

    // corrupted payload is rejected
    let bin = dir.path().join("model.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    std::fs::write(&bin, bytes).unwrap();
    assert!(Checkpoint::load(&stem).is_err());

    let log = dir.path().join("log.csv");
    write_log(&out.log, &log).unwrap();
    let text = std::fs::read_to_string(log).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn finetune_edge_cases() {
    let src = pretrain(tiny_config(2), &toy_set(), &fast_opt(2)).unwrap().checkpoint;

    // zero epochs returns the pretrained parameters untouched
    let target = split_patches(toy_patches(8, 16, 7), 0.0, 0.25, 3).unwrap();
    let zero = finetune(&src, &target, &fast_opt(0)).unwrap();
    assert_eq!(zero.checkpoint.params, src.params);
    assert_eq!(zero.checkpoint.meta.epoch, 0);
    assert!(zero.checkpoint.meta.val_loss.is_some());
    assert_eq!(zero.checkpoint.meta.normalization, src.meta.normalization);

    // zero learning rate leaves every trainable tensor unchanged
    let still = finetune(&src, &target, &OptimizerConfig { max_lr: 0.0, ..fast_opt(2) }).unwrap();
    for (a, b) in still.checkpoint.params.params.iter().zip(&src.params.params) {
        if a.kind.trainable() {
            assert_eq!(a.data, b.data, "{}", a.name);
        }
    }

    // frozen statistics leave running mean/var alone too
    let frozen = finetune(
        &src,
        &target,
        &OptimizerConfig {
            max_lr: 0.0,
            freeze_bn_stats: true,
            ..fast_opt(2)
        },
    )
    .unwrap();
    assert_eq!(frozen.checkpoint.params, src.params);

    // channel mismatch
    let mut wrong = toy_patches(6, 16, 9);
    for p in wrong.iter_mut() {
        p.channels = 1;
        p.eo.truncate(p.pixels());
    }
    let wrong = split_patches(wrong, 0.0, 0.0, 1).unwrap();
    assert!(finetune(&src, &wrong, &fast_opt(1)).is_err());
}
