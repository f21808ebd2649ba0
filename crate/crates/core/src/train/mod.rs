//! Training loop, evaluation, optimizers and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointError, Dtype, MAGIC, VERSION};
pub use optim::{clip_grad_norm, Optimizer};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, SynthSpec};
use crate::data::{batch_iter, read_manifest, synth_generate, Manifest};
use crate::loss::{metrics_report, weighted_log_loss, AccuracyMode, LabelWeights, MetricsReport};
use crate::model::{Graph, Mode, Scopeformer};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Outcome of one optimisation step, measured on its training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub report: MetricsReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Seed of the dropout stream for `step`; a pure function so resumed runs
/// replay the same masks.
pub fn dropout_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loads a manifest, or generates the synthetic corpus it describes.
pub fn open_source(manifest: Option<&Path>, synth: Option<&SynthSpec>) -> Result<Option<Manifest>> {
    match (manifest, synth) {
        (Some(path), _) => Ok(Some(read_manifest(path)?)),
        (None, Some(s)) => Ok(Some(synth_generate(s.count, s.size, s.seed, &s.out_dir)?)),
        (None, None) => Ok(None),
    }
}

/// Eval-mode metrics over every sample of `manifest`, in manifest order.
pub fn evaluate(
    model: &Scopeformer,
    manifest: &Manifest,
    batch_size: usize,
    weights: &LabelWeights,
    eps: f64,
    mode: AccuracyMode,
) -> Result<MetricsReport> {
    let size = model.config.image_size;
    let indices: Vec<usize> = (0..manifest.len()).collect();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = manifest.load_batch(chunk, Some(size))?;
        probs.extend_from_slice(model.predict(&batch.images)?.data());
        labels.extend_from_slice(batch.labels.data());
    }
    let l = model.num_labels();
    let n = manifest.len();
    let probs = Tensor::new(vec![n, l], probs)?;
    let labels = Tensor::new(vec![n, l], labels)?;
    Ok(metrics_report(&probs, &labels, weights, eps, mode)?)
}

/// Columns of `history.csv`; validation columns are empty on steps without evaluation.
pub const HISTORY_HEADER: &str = "step,train_loss,train_accuracy,val_loss,val_accuracy";

pub struct Trainer {
    pub config: RunConfig,
    pub model: Scopeformer,
    pub optimizer: Optimizer,
    /// Steps completed so far.
    pub step: u64,
    weights: LabelWeights,
    train: Manifest,
    val: Option<Manifest>,
}

impl Trainer {
    /// Canonicalises the config, opens (or generates) data and initialises the model.
    pub fn new(config: RunConfig) -> Result<Self> {
        let config = config.canonical()?;
        let train = open_source(config.data.manifest.as_deref(), config.data.synth.as_ref())?
            .ok_or_else(|| crate::config::ConfigError::Invalid {
                field: "data".into(),
                msg: "needs a `manifest` or `synth` training source".into(),
            })?;
        let val = open_source(config.data.val_manifest.as_deref(), config.data.val_synth.as_ref())?;
        Self::with_data(config, train, val)
    }

    pub fn with_data(config: RunConfig, train: Manifest, val: Option<Manifest>) -> Result<Self> {
        let config = config.canonical()?;
        if train.is_empty() {
            return Err(crate::data::DataError::Invalid("training manifest is empty".into()).into());
        }
        let weights = config.loss.label_weights(config.model.vit.num_labels)?;
        let model = Scopeformer::new(config.model.clone())?;
        let optimizer = Optimizer::new(config.train.optimizer.clone());
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            weights,
            train,
            val,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.train.out_dir
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.train.batch_size)
    }

    /// One forward/backward/update on the batch scheduled for the current step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let t = &self.config.train;
        let nb = self.batches_per_epoch() as u64;
        let (epoch, k) = (self.step / nb, (self.step % nb) as usize);
        let batch = batch_iter(&self.train, t.batch_size, t.seed, epoch)
            .with_image_size(self.model.config.image_size)
            .batch(k)
            .expect("k < batches per epoch")?;

        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.model.params, Mode::Train)
            .with_dropout_seed(dropout_seed(t.seed, self.step));
        let x = g.tape.constant(batch.images);
        let logits = self.model.forward(&mut g, x)?;
        let probs = g.tape.sigmoid(logits);
        if g.tape.value(probs).data().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                lr: t.optimizer.lr,
                grad_norm: self.model.params.grad_norm(),
            });
        }
        let loss = weighted_log_loss(g.tape, probs, &batch.labels, &self.weights, self.config.loss.eps)?;
        let bindings = g.into_bindings();
        let report = metrics_report(
            tape.value(probs),
            &batch.labels,
            &self.weights,
            self.config.loss.eps,
            self.config.loss.accuracy,
        )?;
        tape.backward(loss)?;

        let params = &mut self.model.params;
        params.zero_grads();
        params.accumulate_grads(&tape, &bindings);
        let grad_norm = match t.grad_clip {
            Some(c) => clip_grad_norm(params, c),
            None => params.grad_norm(),
        };
        if !report.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                lr: t.optimizer.lr,
                grad_norm,
            });
        }
        self.optimizer.step(params);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            report,
            grad_norm,
        })
    }

    /// Validation metrics, if a validation source is configured.
    pub fn evaluate(&self) -> Result<Option<MetricsReport>> {
        let Some(val) = &self.val else {
            return Ok(None);
        };
        evaluate(
            &self.model,
            val,
            self.config.train.batch_size,
            &self.weights,
            self.config.loss.eps,
            self.config.loss.accuracy,
        )
        .map(Some)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.model.config.digest());
        for (name, p) in self.model.params.iter() {
            c.insert(format!("param/{name}"), p.value.clone());
        }
        self.optimizer.save_into(&mut c);
        c.insert("meta/step", Tensor::scalar(self.step as f64));
        c
    }

    /// Restores parameters, optimizer state and step count.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, p) in self.model.params.iter_mut() {
            p.value = ckpt.get_shaped(&format!("param/{name}"), p.value.shape())?.clone();
        }
        self.optimizer.load_from(ckpt, &self.model.params)?;
        self.step = ckpt.get_shaped("meta/step", &[1])?.data()[0] as u64;
        Ok(())
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.out_dir().join(format!("ckpt-{step:06}.scpf"))
    }

    pub fn latest_path(&self) -> PathBuf {
        self.out_dir().join("latest.scpf")
    }

    /// Writes the step-numbered checkpoint and refreshes `latest.scpf`.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let c = self.checkpoint();
        let path = self.checkpoint_path(self.step);
        c.save(&path)?;
        c.save(&self.latest_path())?;
        Ok(path)
    }

    /// Loads `path` (digest-checked unless `force`) into a fresh trainer.
    pub fn resume(config: RunConfig, path: &Path, force: bool) -> Result<Self> {
        let mut t = Self::new(config)?;
        let ckpt = Checkpoint::load(path, Some(t.model.config.digest()), force)?;
        t.restore(&ckpt)?;
        Ok(t)
    }

    /// Trains until `config.train.steps`, appending to `history.csv` (and
    /// `val.csv`) and checkpointing on schedule and at the end.
    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        let total = self.config.train.steps;
        let dir = self.out_dir().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let l = self.model.num_labels();
        let fresh = self.step == 0;
        let mut history = CsvLog::open(&dir.join("history.csv"), HISTORY_HEADER, fresh)?;
        let mut val_log = match self.val {
            Some(_) => Some(CsvLog::open(&dir.join("val.csv"), &MetricsReport::csv_header(l), fresh)?),
            None => None,
        };
        let mut records = Vec::new();
        while self.step < total {
            let rec = self.train_step()?;
            log::info!(
                "step {} loss {:.6} acc {:.4} |g| {:.3e}",
                rec.step,
                rec.report.loss,
                rec.report.accuracy,
                rec.grad_norm
            );
            let (ev, ck) = (self.config.train.eval_every, self.config.train.ckpt_every);
            let last = self.step == total;
            if ck > 0 && self.step.is_multiple_of(ck) && !last {
                self.save_checkpoint()?;
            }
            let mut val_cols = String::from(",");
            if (ev > 0 && self.step.is_multiple_of(ev)) || last {
                if let (Some(report), Some(log)) = (self.evaluate()?, val_log.as_mut()) {
                    log::info!("eval step {} loss {:.6} acc {:.4}", self.step, report.loss, report.accuracy);
                    log.line(&report.csv_row(self.step))?;
                    val_cols = format!("{:.8},{:.6}", report.loss, report.accuracy);
                }
            }
            history.line(&format!(
                "{},{:.8},{:.6},{val_cols}",
                rec.step, rec.report.loss, rec.report.accuracy
            ))?;
            records.push(rec);
        }
        self.save_checkpoint()?;
        Ok(records)
    }
}

struct CsvLog {
    file: std::fs::File,
    path: PathBuf,
}

impl CsvLog {
    fn open(path: &Path, header: &str, fresh: bool) -> Result<Self> {
        let mut opts = OpenOptions::new();
        opts.create(true);
        if fresh {
            opts.write(true).truncate(true);
        } else {
            opts.append(true);
        }
        let file = opts.open(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            file,
            path: path.to_path_buf(),
        };
        if fresh {
            log.line(header)?;
        }
        Ok(log)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.file, "{text}").map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_seeds_differ_per_step() {
        assert_ne!(dropout_seed(1, 0), dropout_seed(1, 1));
        assert_eq!(dropout_seed(5, 9), dropout_seed(5, 9));
    }
}
