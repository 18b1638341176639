use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{evaluate_cases, Checkpoint, InputView, TrainConfig, Trainer, VARIABLES};
use crate::dataio::{write_atomic, Dataset, Split};
use crate::error::Result;
use crate::model::{Model, ModelConfig};

pub const LOSS_LOG: &str = "loss.csv";
pub const VAL_LOG: &str = "val.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.abck";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub step: u64,
    pub checkpoint: PathBuf,
    pub final_loss: Option<f64>,
}

fn loss_header() -> String {
    let mut h = "step,lr,loss,case_id".to_string();
    VARIABLES.iter().for_each(|v| write!(h, ",mae_{v}").unwrap());
    h
}

fn val_header() -> String {
    let mut h = "epoch,step".to_string();
    VARIABLES.iter().for_each(|v| write!(h, ",mae_{v}").unwrap());
    h
}

/// Keeps the header and rows whose step column (index `col`) is ≤ `step`.
fn truncated_log(path: &Path, header: &str, col: usize, step: u64) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: Option<u64> = line.split(',').nth(col).and_then(|v| v.parse().ok());
            if s.is_some_and(|s| s <= step) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn save_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| Ok(std::io::Write::write_all(w, text.as_bytes())?))
}

/// Trains into `run_dir`, resuming from its checkpoint when `resume` is set
/// and one exists. Stops after `stop_at` updates if given, otherwise at
/// `total_updates`. Logs are rewritten so a resumed run's files equal those
/// of an uninterrupted one.
pub fn run_training(
    run_dir: &Path,
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: bool,
    stop_at: Option<u64>,
) -> Result<RunOutcome> {
    fs::create_dir_all(run_dir)?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let train_cases = dataset.read_split(Split::Train)?;
    let val_cases = dataset.read_split(Split::Val)?;
    let stats = dataset.manifest().stats.clone();
    let mut trainer = if resume && ckpt_path.exists() {
        Checkpoint::read(&ckpt_path)?.into_trainer(train_cases)?
    } else {
        Trainer::new(Model::new(model_cfg.clone())?, cfg.clone(), train_cases, stats.clone())?
    };
    let loss_path = run_dir.join(LOSS_LOG);
    let val_path = run_dir.join(VAL_LOG);
    let mut loss_log = truncated_log(&loss_path, &loss_header(), 0, trainer.step)?;
    let mut val_log = truncated_log(&val_path, &val_header(), 1, trainer.step)?;
    let end = stop_at.unwrap_or(trainer.cfg.total_updates).min(trainer.cfg.total_updates);
    let epoch_len = trainer.epoch_len();
    let mut final_loss = None;
    while trainer.step < end {
        let r = trainer.step()?;
        final_loss = Some(r.loss);
        write!(loss_log, "{},{},{},{}", r.step, r.lr, r.loss, r.case_id).unwrap();
        r.per_variable.iter().for_each(|v| write!(loss_log, ",{v}").unwrap());
        loss_log.push('\n');
        let e = trainer.cfg.val_every_epochs;
        if e > 0 && !val_cases.is_empty() && r.step % (e * epoch_len) == 0 {
            let res = evaluate_cases(&trainer.ema_model(), &trainer.stats, &val_cases, InputView::Solution, trainer.cfg.seed)?;
            write!(val_log, "{},{}", r.step / epoch_len, r.step).unwrap();
            for v in VARIABLES {
                write!(val_log, ",{}", res.report.fields[v].mae).unwrap();
            }
            val_log.push('\n');
        }
        let k = trainer.cfg.checkpoint_every;
        if k > 0 && r.step % k == 0 && r.step < end {
            Checkpoint::from_trainer(&trainer).write(&ckpt_path)?;
            save_text(&loss_path, &loss_log)?;
            save_text(&val_path, &val_log)?;
        }
    }
    Checkpoint::from_trainer(&trainer).write(&ckpt_path)?;
    save_text(&loss_path, &loss_log)?;
    save_text(&val_path, &val_log)?;
    Ok(RunOutcome { step: trainer.step, checkpoint: ckpt_path, final_loss })
}
