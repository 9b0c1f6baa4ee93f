use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::noisequant::{BinningConfig, EmbedStats};
use crate::seeding::rng;
use crate::volgrid::Volume;

fn tiny() -> ModelConfig {
    ModelConfig {
        channels: 4,
        n_orb: 1,
        n_cab: 1,
        reduction: 4,
        nle_hidden: 8,
        kernel: 3,
    }
}

fn randomized(config: ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = init_params::<f64>(config, seed).unwrap();
    let mut r = rng(seed ^ 0xabcdef);
    let normal = Normal::new(0.0, 0.3).unwrap();
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x += normal.sample(&mut r);
        }
    }
    // keep attention bottleneck units and embedding hidden units active
    for orb in &mut p.orbs {
        for cab in &mut orb.cabs {
            cab.reduce.bias.iter_mut().for_each(|b| *b = b.abs() + 3.0);
            cab.reduce.weight.iter_mut().for_each(|w| *w *= 0.2);
        }
    }
    p.nle
        .affine1
        .bias
        .iter_mut()
        .for_each(|b| *b = b.abs() + 0.5);
    p
}

fn rand_patch(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0.0..2.0)).collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

#[test]
fn init_gives_identity_modulation() {
    let p = init_params::<f32>(ModelConfig::default(), 3).unwrap();
    for s in [-3.0f32, 0.0, 0.7, 12.0] {
        let v = nle_forward(s, &p).unwrap();
        assert!(v.scale.iter().all(|&x| x == 1.0));
        assert!(v.shift.iter().all(|&x| x == 0.0));
    }
    assert!(matches!(
        nle_forward(f32::NAN, &p),
        Err(NetError::Domain(_))
    ));
}

#[test]
fn init_is_seeded() {
    let a = init_params::<f32>(ModelConfig::default(), 5).unwrap();
    let b = init_params::<f32>(ModelConfig::default(), 5).unwrap();
    let c = init_params::<f32>(ModelConfig::default(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn init_variance_is_he_scaled() {
    let cfg = ModelConfig::default();
    let p = init_params::<f64>(cfg, 8).unwrap();
    let mut draws = Vec::new();
    for orb in &p.orbs {
        for cab in &orb.cabs {
            draws.extend_from_slice(&cab.conv1.weight);
        }
    }
    assert!(draws.len() >= 10_000);
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want = 2.0 / (cfg.channels * 27) as f64;
    assert!((var - want).abs() / want < 0.1, "{var} vs {want}");
}

#[test]
fn hand_sized_embedding() {
    let cfg = ModelConfig {
        channels: 1,
        reduction: 1,
        nle_hidden: 1,
        n_orb: 1,
        n_cab: 1,
        kernel: 3,
    };
    let mut p = ModelParams::<f32>::zeros(cfg).unwrap();
    p.nle.affine1.weight[0] = 2.0;
    p.nle.affine2.weight = vec![1.0, 1.0];
    p.nle.affine2.bias = vec![1.0, 0.0];
    let v = nle_forward(3.0, &p).unwrap();
    assert_eq!(v.scale, vec![7.0]);
    assert_eq!(v.shift, vec![6.0]);
}

#[test]
fn zero_weights_pass_input_through() {
    let p = ModelParams::<f32>::zeros(ModelConfig::default()).unwrap();
    let x: Vec<f32> = rand_patch(512, 1).into_iter().map(|v| v as f32).collect();
    let y = orsnet_forward(&x, [8, 8, 8], &NleInput::Scalar(0.3), &p).unwrap();
    assert_eq!(x, y);
}

#[test]
fn cab_residual_and_identity_modulation() {
    let p = randomized(tiny(), 2);
    let cab = &p.orbs[0].cabs[0];
    let x = rand_patch(4 * 64, 3);
    let id = NleVector::identity(4);
    let a = cab_forward(&x, [4, 4, 4], Some(&id), cab).unwrap();
    let b = cab_forward(&x, [4, 4, 4], None, cab).unwrap();
    assert_eq!(a, b);
    let zero = ModelParams::<f64>::zeros(tiny()).unwrap();
    let out = cab_forward(&x, [4, 4, 4], Some(&id), &zero.orbs[0].cabs[0]).unwrap();
    assert_eq!(out, x);
}

#[test]
fn ablation_parity_at_init() {
    let p = init_params::<f32>(tiny(), 4).unwrap();
    for seed in 0..5 {
        let x: Vec<f32> = rand_patch(512, seed)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let on = orsnet_forward(&x, [8, 8, 8], &NleInput::Scalar(seed as f32 - 2.0), &p).unwrap();
        let off = orsnet_forward(&x, [8, 8, 8], &NleInput::Disabled, &p).unwrap();
        assert_eq!(on, off);
    }
}

#[test]
fn output_shape_matches_input() {
    let p = init_params::<f32>(tiny(), 4).unwrap();
    let x = vec![0.5f32; 5 * 6 * 7];
    let y = orsnet_forward(&x, [5, 6, 7], &NleInput::Disabled, &p).unwrap();
    assert_eq!(y.len(), x.len());
    assert!(orsnet_forward(&x[..10], [5, 6, 7], &NleInput::Disabled, &p).is_err());
    assert!(orsnet_forward(&[0.0f32; 8], [2, 2, 2], &NleInput::Disabled, &p).is_err());
}

#[test]
fn backward_requires_forward() {
    let p = init_params::<f32>(tiny(), 1).unwrap();
    let s = GradSession::<f32>::new();
    assert!(matches!(
        s.backward(&p, &[0.0; 27]),
        Err(NetError::State(_))
    ));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let p = randomized(tiny(), 7);
    let x = rand_patch(512, 7);
    let mut s = GradSession::new();
    s.forward(&x, [8, 8, 8], &NleInput::Scalar(0.4), &p)
        .unwrap();
    let g = s.backward(&p, &vec![0.0; 512]).unwrap();
    assert!(g.params.flatten().iter().all(|&v| v == 0.0));
    assert_eq!(g.d_scalar, 0.0);
    let g2 = s.backward(&p, &vec![1.0; 512]).unwrap();
    let g3 = s.backward(&p, &vec![1.0; 512]).unwrap();
    assert_eq!(g2, g3);
}

/// Every parameter, the embedding scalar and the input against central differences.
#[test]
fn full_gradient_check_tiny() {
    let cfg = tiny();
    let p = randomized(cfg, 11);
    let dims = [8, 8, 8];
    let x = rand_patch(512, 12);
    let target = rand_patch(512, 13);
    let s0 = 0.37;
    let loss = |p: &ModelParams<f64>, x: &[f64], s: f64| {
        mse(
            &orsnet_forward(x, dims, &NleInput::Scalar(s), p).unwrap(),
            &target,
        )
    };
    let mut sess = GradSession::new();
    let out = sess.forward(&x, dims, &NleInput::Scalar(s0), &p).unwrap();
    let gout: Vec<f64> = out
        .iter()
        .zip(&target)
        .map(|(o, t)| 2.0 * (o - t) / 512.0)
        .collect();
    let g = sess.backward(&p, &gout).unwrap();

    let h = 1e-5;
    let flat = p.flatten();
    let analytic = g.params.flatten();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut plus = p.clone();
        let mut fp = flat.clone();
        fp[i] += h;
        plus.load_flat(&fp).unwrap();
        let mut minus = p.clone();
        fp[i] -= 2.0 * h;
        minus.load_flat(&fp).unwrap();
        let fd = (loss(&plus, &x, s0) - loss(&minus, &x, s0)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    assert!(worst < 1e-4, "worst parameter relative error {worst}");
    let fd_s = (loss(&p, &x, s0 + h) - loss(&p, &x, s0 - h)) / (2.0 * h);
    assert!(rel_err(g.d_scalar, fd_s) < 1e-4, "{} vs {fd_s}", g.d_scalar);
    assert!(g.d_scalar.abs() > 1e-8);
    for i in [0, 100, 300, 511] {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let fd = (loss(&p, &xp, s0) - loss(&p, &xm, s0)) / (2.0 * h);
        assert!(rel_err(g.d_input[i], fd) < 1e-4);
    }
}

#[test]
fn embedding_gradient_check() {
    let p = randomized(tiny(), 21);
    let w: Vec<f64> = rand_patch(8, 22).into_iter().map(|v| v - 1.0).collect();
    // loss = <w, [scale | shift]> through a full forward, via the Fixed path's gradient
    let f = |p: &ModelParams<f64>, s: f64| {
        let v = nle_forward(s, p).unwrap();
        v.scale
            .iter()
            .chain(&v.shift)
            .zip(&w)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let s0 = -0.6;
    let h = 1e-6;
    let fd = (f(&p, s0 + h) - f(&p, s0 - h)) / (2.0 * h);
    let mut hidden_grad = 0.0;
    let pre = p.nle.affine1.forward(&[s0]);
    for (j, &z) in pre.iter().enumerate() {
        if z > 0.0 {
            let dh: f64 = (0..8).map(|o| w[o] * p.nle.affine2.weight[o * 8 + j]).sum();
            hidden_grad += dh * p.nle.affine1.weight[j];
        }
    }
    assert!(rel_err(hidden_grad, fd) < 1e-4);
}

#[test]
fn gradients_are_deterministic() {
    let p = init_params::<f32>(tiny(), 9).unwrap();
    let x: Vec<f32> = rand_patch(512, 9).into_iter().map(|v| v as f32).collect();
    let run = || {
        let mut s = GradSession::new();
        let out = s
            .forward(&x, [8, 8, 8], &NleInput::Scalar(0.1), &p)
            .unwrap();
        s.backward(&p, &out).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn layout_matches_tensors() {
    let p = init_params::<f32>(ModelConfig::default(), 0).unwrap();
    let layout = p.layout();
    let tensors = p.tensors();
    assert_eq!(layout.len(), tensors.len());
    for (info, t) in layout.iter().zip(&tensors) {
        assert_eq!(info.numel(), t.len(), "{}", info.name);
    }
    let q: ModelParams<f32> = p.cast::<f64>().cast();
    assert_eq!(p, q);
}

fn pipeline() -> NoisePipeline {
    NoisePipeline {
        binning: BinningConfig::default(),
        stats: EmbedStats::default(),
        fallback_embed: 0.0,
        use_nle: true,
    }
}

#[test]
fn inference_with_zero_weights_is_identity() {
    let p = ModelParams::<f32>::zeros(tiny()).unwrap();
    let mut r = rng(3);
    let vals: Vec<f32> = (0..20 * 18 * 16)
        .map(|_| r.random_range(0..40) as f32)
        .collect();
    let v = Volume::counts([20, 18, 16], [2.5; 3], vals).unwrap();
    let out = infer_volume(&v, &p, 8, 4, &pipeline()).unwrap();
    assert_eq!(out.dims(), v.dims());
    for (a, b) in out.values().iter().zip(v.values()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn single_window_inference_equals_forward() {
    let p = init_params::<f32>(tiny(), 2).unwrap();
    let mut r = rng(4);
    let vals: Vec<f32> = (0..512).map(|_| r.random_range(0..40) as f32).collect();
    let v = Volume::counts([8, 8, 8], [2.5; 3], vals.clone()).unwrap();
    let pipe = pipeline();
    let out = infer_volume(&v, &p, 8, 8, &pipe).unwrap();
    let patch = crate::volgrid::crop(&v, [0; 3], 8).unwrap();
    let s = patch_embed(&patch, 1.0, v.domain(), &pipe) as f32;
    let direct = orsnet_forward(&vals, [8, 8, 8], &NleInput::Scalar(s), &p).unwrap();
    assert_eq!(out.values(), &direct[..]);
}

#[test]
fn constant_patch_falls_back() {
    let patch = crate::volgrid::Patch::new([0; 3], 4, vec![3.0; 64]).unwrap();
    let mut pipe = pipeline();
    pipe.fallback_embed = -0.25;
    assert_eq!(
        patch_embed(&patch, 1.0, crate::volgrid::Domain::Counts, &pipe),
        -0.25
    );
}
