use std::path::Path;

use nle_core::train::{
    load_checkpoint, save_checkpoint, train_until, write_loss_trace, Checkpoint, LossRow,
    TrainState,
};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::store::load_store;

pub const LOSS_TRACE: &str = "loss.csv";

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::bad_file(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::bad_file(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let parse_err = |e: &dyn std::fmt::Display| {
            CliError::bad_file(path, format!("row {}: {e}", rows.len() + 1))
        };
        rows.push(LossRow {
            step: field(0).parse().map_err(|e| parse_err(&e))?,
            lr: field(1).parse().map_err(|e| parse_err(&e))?,
            loss: field(2).parse().map_err(|e| parse_err(&e))?,
        });
    }
    Ok(rows)
}

pub struct TrainRequest<'a> {
    pub store: &'a Path,
    pub out: &'a Path,
    pub use_nle: bool,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<&'a Path>,
    /// Stop after this many completed steps (the schedule still spans `train.total_steps`).
    pub stop_at: Option<usize>,
}

/// `train`: fits the network on a patch store and writes a checkpoint with its loss trace.
pub fn cmd_train(cfg: &ExperimentConfig, req: &TrainRequest) -> Result<Checkpoint> {
    cfg.validate()?;
    let store = load_store(req.store)?;
    if store.manifest.patch != cfg.train.patch {
        return Err(CliError::Config(format!(
            "train.patch {} does not match the store's patch size {}",
            cfg.train.patch, store.manifest.patch
        )));
    }
    let tc = cfg.train_for(req.use_nle);
    let (mut state, mut trace) = match req.resume {
        None => (TrainState::fresh(cfg.model, &tc)?, Vec::new()),
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.train.as_ref() != Some(&tc) || ck.params.config != cfg.model {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with different settings",
                    dir.display()
                )));
            }
            let adam = ck.adam.ok_or_else(|| {
                CliError::Config(format!(
                    "checkpoint {} has no optimizer state",
                    dir.display()
                ))
            })?;
            let mut trace = read_loss_trace(&dir.join(LOSS_TRACE))?;
            trace.truncate(ck.iteration);
            (
                TrainState {
                    params: ck.params,
                    adam,
                    step: ck.iteration,
                },
                trace,
            )
        }
    };
    let every = (tc.total_steps / 20).max(1);
    let rows = train_until(&store.pairs, &tc, &mut state, req.stop_at, |r| {
        if r.step % every == 0 {
            log::info!("step {} lr {:.3e} loss {:.5}", r.step, r.lr, r.loss);
        }
    })?;
    trace.extend(rows);
    let ck = Checkpoint {
        params: state.params,
        adam: Some(state.adam),
        embed_stats: store.manifest.embed_stats,
        fallback_embed: store.manifest.fallback_embed,
        seed: tc.seed,
        iteration: state.step,
        use_nle: req.use_nle,
        train: Some(tc),
    };
    save_checkpoint(req.out, &ck)?;
    write_loss_trace(req.out.join(LOSS_TRACE), &trace)?;
    Ok(ck)
}
