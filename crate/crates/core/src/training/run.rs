use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{IterationRecord, OptimizerState, TrainObserver};
use crate::data::SampleTile;
use crate::error::{Error, Result};
use crate::eval::{evaluate_confusion, TilerConfig};
use crate::models::{save_checkpoint, Model};

pub const METRICS_HEADER: &str = "iter,loss_total,loss_cls,loss_seg,lr";
pub const EVAL_HEADER: &str = "iter,split,miou,pixel_acc";

/// Writes `metrics.csv`, `eval.csv` and `checkpoints/` under a run directory.
pub struct RunDirObserver {
    dir: PathBuf,
    metrics: BufWriter<File>,
    eval_csv: BufWriter<File>,
    splits: Vec<(String, Vec<SampleTile>)>,
    tiler: TilerConfig,
    /// (iter, split name, mIoU) for every evaluation so far.
    pub history: Vec<(usize, String, f64)>,
}

fn create(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

impl RunDirObserver {
    /// `splits` are evaluated (e.g. "train", "test") on every eval tick.
    pub fn new(
        dir: &Path,
        splits: Vec<(String, Vec<SampleTile>)>,
        tiler: TilerConfig,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: create(&dir.join("metrics.csv"), METRICS_HEADER)?,
            eval_csv: create(&dir.join("eval.csv"), EVAL_HEADER)?,
            splits,
            tiler,
            history: Vec::new(),
        })
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoints").join("final.emsg")
    }

    /// Best mIoU on `split` among evaluations at or before `iter`.
    pub fn best_miou(&self, split: &str, iter: usize) -> Option<f64> {
        self.history
            .iter()
            .filter(|(i, s, _)| *i <= iter && s == split)
            .map(|(_, _, m)| *m)
            .reduce(f64::max)
    }
}

impl TrainObserver for RunDirObserver {
    fn on_iteration(&mut self, r: &IterationRecord) -> Result<()> {
        writeln!(
            self.metrics,
            "{},{},{},{},{}",
            r.iter, r.loss_total, r.loss_cls, r.loss_seg, r.lr
        )
        .map_err(|e| Error::io(&self.dir, e))
    }

    fn on_eval(&mut self, iter: usize, model: &mut Model) -> Result<()> {
        let mut lines = String::new();
        for (name, samples) in &self.splits {
            if samples.is_empty() {
                continue;
            }
            let cm = evaluate_confusion(model, samples, self.tiler)?;
            let miou = cm.miou()?;
            writeln!(lines, "{iter},{name},{miou:.6},{:.6}", cm.pixel_acc()?)
                .expect("string write");
            log::info!("iter {iter}: {name} mIoU {miou:.4}");
            self.history.push((iter, name.clone(), miou));
        }
        self.eval_csv
            .write_all(lines.as_bytes())
            .and_then(|_| self.eval_csv.flush())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&self.dir, e))
    }

    fn on_checkpoint(&mut self, iter: usize, model: &Model, state: &OptimizerState) -> Result<()> {
        let ckpt = self.dir.join("checkpoints");
        save_checkpoint(
            model,
            Some(state),
            &ckpt.join(format!("iter_{iter:06}.emsg")),
        )?;
        save_checkpoint(model, Some(state), &ckpt.join("final.emsg"))?;
        self.metrics.flush().map_err(|e| Error::io(&self.dir, e))
    }
}
