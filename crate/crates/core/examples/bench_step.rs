use nle_core::nlenet::*;
use std::time::Instant;
fn main() {
    for (c, orb, cab, p) in [
        (8usize, 1usize, 2usize, 16usize),
        (16, 2, 2, 16),
        (16, 2, 2, 32),
        (8, 2, 2, 16),
    ] {
        let cfg = ModelConfig {
            channels: c,
            n_orb: orb,
            n_cab: cab,
            reduction: 4,
            nle_hidden: 16,
            kernel: 3,
        };
        let params = init_params::<f32>(cfg, 1).unwrap();
        let x = vec![0.5f32; p * p * p];
        let t = Instant::now();
        let reps = 4;
        for _ in 0..reps {
            let mut s = GradSession::new();
            let out = s
                .forward(&x, [p, p, p], &NleInput::Scalar(0.1), &params)
                .unwrap();
            let _g = s.backward(&params, &out).unwrap();
        }
        println!(
            "C={c} orb={orb} cab={cab} p={p}: {:.1} ms per fwd+bwd",
            t.elapsed().as_secs_f64() * 1000.0 / reps as f64
        );
    }
}
