//! Loss, optimizer, schedule, batch sampling, the training loop and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nlenet::{
    init_params, GradSession, ModelConfig, ModelParams, NetError, NleInput, Scalar,
};
use crate::noisequant::{EmbedStats, NoiseBin};
use crate::seeding::{derive_seed, stream_rng};
use crate::volgrid::{apply_flips, Flips};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("no patches in bin {0:?}")]
    EmptyBin(NoiseBin),
    #[error("non-finite {what} at step {step}; batch {batch:?}")]
    NonFinite {
        what: String,
        step: usize,
        batch: Vec<String>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LossKind {
    #[default]
    Mse,
    Charbonnier,
}

pub const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patch: usize,
    pub batch: usize,
    pub total_steps: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
    pub stratified: bool,
    pub augment: bool,
    pub seed: u64,
    pub use_nle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch: 32,
            batch: 16,
            total_steps: 2000,
            lr0: 1e-5,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossKind::Mse,
            stratified: false,
            augment: true,
            seed: 0,
            use_nle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.total_steps == 0 || self.patch < 3 {
            return Err(TrainError::Parameter(
                "batch, total_steps >= 1 and patch >= 3 required".into(),
            ));
        }
        if !(self.lr_min > 0.0 && self.lr0 >= self.lr_min) {
            return Err(TrainError::Parameter(format!(
                "need lr0 >= lr_min > 0, got lr0={} lr_min={}",
                self.lr0, self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(TrainError::Parameter("invalid Adam constants".into()));
        }
        Ok(())
    }
}

/// Mean loss over voxels and its gradient with respect to `pred`.
pub fn loss<T: Scalar>(pred: &[T], target: &[T], kind: LossKind) -> Result<(f64, Vec<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TrainError::Shape(format!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut total = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p - t).f64();
            match kind {
                LossKind::Mse => {
                    total += d * d;
                    T::of(2.0 * d / n)
                }
                LossKind::Charbonnier => {
                    let r = (d * d + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt();
                    total += r;
                    T::of(d / (r * n))
                }
            }
        })
        .collect();
    Ok((total / n, grad))
}

/// Cosine annealing from `lr0` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(TrainError::Parameter(format!(
            "step {t} outside [0, {total}]"
        )));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.config != grads.config || params.config != state.m.config {
        return Err(TrainError::Shape(
            "parameter, gradient and state layouts differ".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(TrainError::NonFinite {
            what: "gradient".into(),
            step: state.t as usize,
            batch: Vec::new(),
        });
    }
    state.t += 1;
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let one = T::one();
    let c1 = T::of(1.0 - hyper.beta1.powi(state.t as i32));
    let c2 = T::of(1.0 - hyper.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(lr), T::of(hyper.eps));
    let p_t = params.tensors_mut();
    let g_t = grads.tensors();
    let m_t = state.m.tensors_mut();
    let v_t = state.v.tensors_mut();
    for (((p, g), m), v) in p_t.into_iter().zip(g_t).zip(m_t).zip(v_t) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A paired low-count/full-count training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub id: String,
    pub size: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub embed: f32,
    pub bin: NoiseBin,
}

/// Batch indices into `store`. Stratified batches take `B / 4` patches from each
/// bin, the remainder going to the bins in fixed order.
pub fn sample_batch<R: Rng>(
    store: &[PatchPair],
    batch: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if store.is_empty() {
        return Err(TrainError::Parameter("patch store is empty".into()));
    }
    if !stratified {
        return Ok((0..batch)
            .map(|_| rng.random_range(0..store.len()))
            .collect());
    }
    let mut by_bin: [Vec<usize>; 4] = Default::default();
    for (i, p) in store.iter().enumerate() {
        by_bin[p.bin.index()].push(i);
    }
    if let Some(bin) = NoiseBin::ALL.iter().find(|b| by_bin[b.index()].is_empty()) {
        return Err(TrainError::EmptyBin(*bin));
    }
    let mut out = Vec::with_capacity(batch);
    for (k, bin) in NoiseBin::ALL.iter().enumerate() {
        let take = batch / 4 + usize::from(k < batch % 4);
        let members = &by_bin[bin.index()];
        for _ in 0..take {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    /// Number of completed steps.
    pub step: usize,
}

impl TrainState {
    pub fn fresh(model: ModelConfig, train: &TrainConfig) -> Result<Self> {
        let params = init_params::<f32>(model, derive_seed(train.seed, 1))?;
        let adam = AdamState::new(&params);
        Ok(Self {
            params,
            adam,
            step: 0,
        })
    }
}

const BATCH_STREAM: u64 = 2;
const FLIP_STREAM: u64 = 3;

struct ItemResult {
    loss: f64,
    grads: ModelParams<f32>,
}

fn run_item(
    pair: &PatchPair,
    flips: Option<Flips>,
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
) -> Result<ItemResult> {
    let mut input = pair.input.clone();
    let mut target = pair.target.clone();
    if let Some(f) = flips {
        apply_flips(&mut input, pair.size, f);
        apply_flips(&mut target, pair.size, f);
    }
    let dims = [pair.size; 3];
    let nle = NleInput::from_flag(cfg.use_nle, pair.embed);
    let mut sess = GradSession::new();
    let out = sess.forward(&input, dims, &nle, params)?;
    let (l, gout) = loss(&out, &target, cfg.loss)?;
    let g = sess.backward(params, &gout)?;
    Ok(ItemResult {
        loss: l,
        grads: g.params,
    })
}

/// Runs one optimization step `state.step` and advances the state.
pub fn train_step(
    store: &[PatchPair],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<LossRow> {
    let t = state.step;
    let mut batch_rng = stream_rng(derive_seed(cfg.seed, BATCH_STREAM), t as u64);
    let indices = sample_batch(store, cfg.batch, cfg.stratified, &mut batch_rng)?;
    let mut flip_rng = stream_rng(derive_seed(cfg.seed, FLIP_STREAM), t as u64);
    let flips: Vec<Option<Flips>> = indices
        .iter()
        .map(|_| {
            let seed: u64 = flip_rng.random();
            cfg.augment.then(|| Flips::draw(seed))
        })
        .collect();
    let manifest = || {
        indices
            .iter()
            .map(|&i| store[i].id.clone())
            .collect::<Vec<_>>()
    };
    if let Some(&i) = indices.iter().find(|&&i| store[i].size != cfg.patch) {
        return Err(TrainError::Shape(format!(
            "patch {} has edge {}, expected {}",
            store[i].id, store[i].size, cfg.patch
        )));
    }
    let results: Vec<Result<ItemResult>> = indices
        .par_iter()
        .zip(flips.par_iter())
        .map(|(&i, &f)| run_item(&store[i], f, &state.params, cfg))
        .collect();
    // fixed-order reduction keeps the step independent of thread scheduling
    let mut total = state.params.zeros_like();
    let mut loss_sum = 0.0;
    for r in results {
        let r = r?;
        loss_sum += r.loss;
        total.add_assign(&r.grads);
    }
    let batch_loss = loss_sum / indices.len() as f64;
    if !batch_loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: "loss".into(),
            step: t,
            batch: manifest(),
        });
    }
    total.scale(1.0 / indices.len() as f32);
    let lr = cosine_lr(t, cfg.total_steps, cfg.lr0, cfg.lr_min)?;
    adam_step(&mut state.params, &total, &mut state.adam, lr, cfg.into()).map_err(|e| match e {
        TrainError::NonFinite { what, .. } => TrainError::NonFinite {
            what,
            step: t,
            batch: manifest(),
        },
        other => other,
    })?;
    state.step += 1;
    Ok(LossRow {
        step: t,
        lr,
        loss: batch_loss,
    })
}

/// Trains from `state` until `cfg.total_steps` (or `stop_at`, if earlier),
/// returning the loss trace of the steps run.
pub fn train_until(
    store: &[PatchPair],
    cfg: &TrainConfig,
    state: &mut TrainState,
    stop_at: Option<usize>,
    mut on_step: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    let end = stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut trace = Vec::with_capacity(end.saturating_sub(state.step));
    while state.step < end {
        let row = train_step(store, cfg, state)?;
        on_step(&row);
        trace.push(row);
    }
    Ok(trace)
}

/// Fresh training run over the whole schedule.
pub fn train_loop(
    store: &[PatchPair],
    model: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<LossRow>)> {
    cfg.validate()?;
    let mut state = TrainState::fresh(model, cfg)?;
    let trace = train_until(store, cfg, &mut state, None, |_| {})?;
    Ok((state, trace))
}

pub fn write_loss_trace(path: impl AsRef<Path>, rows: &[LossRow]) -> Result<()> {
    let mut s = String::from("step,lr,loss\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{:e}\n", r.step, r.lr, r.loss));
    }
    write_atomic(path.as_ref(), s.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Tensor entry of the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub embed_stats: EmbedStats,
    pub seed: u64,
    pub iteration: usize,
    pub use_nle: bool,
    /// Median training embedding, used when an inference patch cannot be described.
    #[serde(default)]
    pub fallback_embed: f64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Adam step counter when `adam.bin` (first then second moments) is present.
    #[serde(default)]
    pub adam_t: Option<u64>,
}

pub const CHECKPOINT_FORMAT: &str = "nle-checkpoint-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
    pub embed_stats: EmbedStats,
    pub fallback_embed: f64,
    pub seed: u64,
    pub iteration: usize,
    pub use_nle: bool,
    pub train: Option<TrainConfig>,
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * expected {
        return Err(TrainError::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            4 * expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut offset = 0;
    let tensors = ck
        .params
        .layout()
        .into_iter()
        .map(|info| {
            let e = TensorEntry {
                offset,
                shape: info.shape.clone(),
                name: info.name,
            };
            offset += info.shape.iter().product::<usize>();
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: ck.params.config,
        tensors,
        embed_stats: ck.embed_stats,
        seed: ck.seed,
        iteration: ck.iteration,
        use_nle: ck.use_nle,
        fallback_embed: ck.fallback_embed,
        train: ck.train.clone(),
        adam_t: ck.adam.as_ref().map(|a| a.t),
    };
    write_atomic(&dir.join("params.bin"), &f32_bytes(&ck.params.flatten()))?;
    if let Some(adam) = &ck.adam {
        let mut flat = adam.m.flatten();
        flat.extend(adam.v.flatten());
        write_atomic(&dir.join("adam.bin"), &f32_bytes(&flat))?;
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Checkpoint(format!(
            "unknown format {}",
            manifest.format
        )));
    }
    let mut params = ModelParams::<f32>::zeros(manifest.config)?;
    let layout = params.layout();
    let mut offset = 0;
    if layout.len() != manifest.tensors.len() {
        return Err(TrainError::Checkpoint(
            "tensor count does not match config".into(),
        ));
    }
    for (info, entry) in layout.iter().zip(&manifest.tensors) {
        if info.name != entry.name || info.shape != entry.shape || entry.offset != offset {
            return Err(TrainError::Checkpoint(format!(
                "tensor {} {:?}@{} does not match expected {} {:?}@{offset}",
                entry.name, entry.shape, entry.offset, info.name, info.shape
            )));
        }
        offset += info.numel();
    }
    let flat = read_f32s(&dir.join("params.bin"), offset)?;
    params.load_flat(&flat)?;
    let adam = match manifest.adam_t {
        Some(t) => {
            let flat = read_f32s(&dir.join("adam.bin"), 2 * offset)?;
            let mut m = params.zeros_like();
            m.load_flat(&flat[..offset])?;
            let mut v = params.zeros_like();
            v.load_flat(&flat[offset..])?;
            Some(AdamState { m, v, t })
        }
        None => None,
    };
    Ok(Checkpoint {
        params,
        adam,
        embed_stats: manifest.embed_stats,
        fallback_embed: manifest.fallback_embed,
        seed: manifest.seed,
        iteration: manifest.iteration,
        use_nle: manifest.use_nle,
        train: manifest.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng;

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

    fn pair(id: usize, bin: NoiseBin, size: usize, seed: u64) -> PatchPair {
        let mut r = rng(seed);
        let target: Vec<f32> = (0..size * size * size)
            .map(|i| ((i % 7) as f32) * 0.3 + 1.0)
            .collect();
        let input = target
            .iter()
            .map(|t| t + r.random_range(-0.5..0.5f32))
            .collect();
        PatchPair {
            id: format!("p{id}"),
            size,
            input,
            target,
            embed: seed as f32 * 0.1 - 0.2,
            bin,
        }
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            patch: 6,
            batch: 3,
            total_steps: steps,
            lr0: 1e-3,
            lr_min: 1e-4,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn loss_examples() {
        let t = vec![1.0f64, 2.0, 3.0];
        let (l, g) = loss(&t, &t, LossKind::Mse).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let p: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        let (l, _) = loss(&p, &t, LossKind::Mse).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
        assert!(loss(&p[..2], &t, LossKind::Mse).is_err());
    }

    #[test]
    fn charbonnier_gradient_matches_fd() {
        let p = vec![0.3f64, -0.2, 1.5, 0.0004];
        let t = vec![0.1f64, 0.1, 1.0, 0.0];
        let (_, g) = loss(&p, &t, LossKind::Charbonnier).unwrap();
        for i in 0..p.len() {
            let h = 1e-7;
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let fd = (loss(&a, &t, LossKind::Charbonnier).unwrap().0
                - loss(&b, &t, LossKind::Charbonnier).unwrap().0)
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 2000, 1e-5, 1e-6).unwrap(), 1e-5);
        assert_eq!(cosine_lr(2000, 2000, 1e-5, 1e-6).unwrap(), 1e-6);
        assert!((cosine_lr(1000, 2000, 1e-5, 1e-6).unwrap() - 5.5e-6).abs() < 1e-18);
        assert!(cosine_lr(2001, 2000, 1e-5, 1e-6).is_err());
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(t, 100, 3e-4, 1e-6).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = ModelParams::<f64>::zeros(tiny()).unwrap();
        p.head
            .weight
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = i as f64 * 0.01);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let z = p.zeros_like();
        adam_step(&mut p, &z, &mut st, 1e-3, AdamHyper::default()).unwrap();
        assert_eq!(p, before);

        let mut g = p.zeros_like();
        g.head.weight[0] = 1.0;
        g.head.weight[1] = -1.0;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-5, AdamHyper::default()).unwrap();
        let d0 = p.head.weight[0] - before.head.weight[0];
        let d1 = p.head.weight[1] - before.head.weight[1];
        let want = -1e-5 / (1.0 + 1e-8);
        assert!(((d0 - want) / want).abs() < 1e-9);
        assert!((d0 + d1).abs() < 1e-15);

        g.head.bias[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 1e-5, AdamHyper::default()),
            Err(TrainError::NonFinite { .. })
        ));
    }

    #[test]
    fn stratified_sampling_counts() {
        let store: Vec<PatchPair> = (0..12)
            .map(|i| pair(i, NoiseBin::ALL[i % 4], 3, i as u64))
            .collect();
        let count = |idx: &[usize]| {
            let mut c = [0usize; 4];
            for &i in idx {
                c[store[i].bin.index()] += 1;
            }
            c
        };
        let b = sample_batch(&store, 16, true, &mut rng(1)).unwrap();
        assert_eq!(count(&b), [4, 4, 4, 4]);
        let b = sample_batch(&store, 6, true, &mut rng(1)).unwrap();
        assert_eq!(count(&b), [2, 2, 1, 1]);
        assert_eq!(
            sample_batch(&store, 9, false, &mut rng(3)).unwrap(),
            sample_batch(&store, 9, false, &mut rng(3)).unwrap()
        );
        let partial: Vec<PatchPair> = store
            .iter()
            .filter(|p| p.bin != NoiseBin::LowNoiseLumpy)
            .cloned()
            .collect();
        assert!(matches!(
            sample_batch(&partial, 4, true, &mut rng(1)),
            Err(TrainError::EmptyBin(NoiseBin::LowNoiseLumpy))
        ));
    }

    #[test]
    fn training_is_deterministic_and_parity_at_start() {
        let store: Vec<PatchPair> = (0..6)
            .map(|i| pair(i, NoiseBin::ALL[i % 4], 6, i as u64))
            .collect();
        let cfg = small_cfg(4);
        let (a, ta) = train_loop(&store, tiny(), &cfg).unwrap();
        let (b, tb) = train_loop(&store, tiny(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 4);
        let off = TrainConfig {
            use_nle: false,
            ..cfg.clone()
        };
        let (_, toff) = train_loop(&store, tiny(), &off).unwrap();
        assert_eq!(ta[0].loss, toff[0].loss);
    }

    #[test]
    fn overfits_single_pair() {
        let store = vec![pair(0, NoiseBin::HighNoiseClean, 6, 1)];
        let cfg = TrainConfig {
            batch: 1,
            total_steps: 500,
            lr0: 3e-3,
            lr_min: 1e-4,
            augment: false,
            ..small_cfg(500)
        };
        let (_, trace) = train_loop(&store, tiny(), &cfg).unwrap();
        let first = trace[0].loss;
        let last = trace.last().unwrap().loss;
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let store: Vec<PatchPair> = (0..5)
            .map(|i| pair(i, NoiseBin::ALL[i % 4], 6, 10 + i as u64))
            .collect();
        let cfg = small_cfg(6);
        let (full, _) = train_loop(&store, tiny(), &cfg).unwrap();

        let mut st = TrainState::fresh(tiny(), &cfg).unwrap();
        train_until(&store, &cfg, &mut st, Some(3), |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            params: st.params.clone(),
            adam: Some(st.adam.clone()),
            embed_stats: EmbedStats::new(-1.0, 0.5).unwrap(),
            fallback_embed: 0.25,
            seed: cfg.seed,
            iteration: st.step,
            use_nle: true,
            train: Some(cfg.clone()),
        };
        save_checkpoint(dir.path(), &ck).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ck);
        let mut resumed = TrainState {
            params: back.params,
            adam: back.adam.unwrap(),
            step: back.iteration,
        };
        train_until(&store, &cfg, &mut resumed, None, |_| {}).unwrap();
        assert_eq!(resumed, full);

        let bin = dir.path().join("params.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(TrainError::Checkpoint(_))
        ));
    }

    #[test]
    fn loss_trace_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<LossRow> = (0..5)
            .map(|s| LossRow {
                step: s,
                lr: 1e-5,
                loss: 0.5,
            })
            .collect();
        let path = dir.path().join("loss.csv");
        write_loss_trace(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(text.lines().next().unwrap(), "step,lr,loss");
    }
}
