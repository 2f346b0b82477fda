//! Progressive-resolution flow-matching training loop.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use crate::checkpoint::save_checkpoint;
use crate::conditioning::EncoderStub;
use crate::dit::{Mode, SparseDiT};
use crate::error::{Error, Result};
use crate::graph::{mse, Graph};
use crate::optim::{zero_grads, AdamW, AdamWConfig};
use crate::rng::Rng64;
use crate::scalar::Scalar;

use super::sample::{make_flow_sample, TSampler};
use super::toy::ToyDataset;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StageConfig {
    pub resolution: usize,
    pub steps: u64,
    pub batch_size: usize,
}

/// Stages run back to back on the same weights; later stages continue from
/// where the previous one stopped, only the data resolution changes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainSchedule {
    pub stages: Vec<StageConfig>,
    pub lr: f64,
    pub warmup_steps: u64,
}

impl TrainSchedule {
    pub fn single(resolution: usize, steps: u64, batch_size: usize, lr: f64) -> Self {
        TrainSchedule {
            stages: vec![StageConfig {
                resolution,
                steps,
                batch_size,
            }],
            lr,
            warmup_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("training schedule has no stages"));
        }
        for pair in self.stages.windows(2) {
            if pair[1].resolution < pair[0].resolution {
                return Err(Error::config(format!(
                    "stage resolutions must be nondecreasing: {} after {}",
                    pair[1].resolution, pair[0].resolution
                )));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.resolution == 0 || s.batch_size == 0 {
                return Err(Error::config(format!("stage {i} has a zero dimension")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// probability of replacing the conditioning bundle with the null
    /// bundle, which is what makes classifier-free guidance possible
    pub p_drop: f64,
    pub t_sampler: TSampler,
    pub weight_decay: f64,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
    /// where checkpoints and failure dumps land
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            p_drop: 0.1,
            t_sampler: TSampler::Uniform,
            weight_decay: 0.0,
            metrics_path: None,
            checkpoint_every: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub aux_loss: f64,
}

pub const METRICS_HEADER: &str = "step,loss,lr,aux_loss";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.lr, self.aux_loss)
    }
}

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub steps_run: u64,
}

impl TrainOutcome {
    /// Mean training loss over the first and last `window` steps — the
    /// quantity convergence tests compare.
    pub fn loss_drop(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.rows.len());
        let head: f64 = self.rows[..w].iter().map(|r| r.loss).sum::<f64>() / w as f64;
        let tail: f64 =
            self.rows[self.rows.len() - w..].iter().map(|r| r.loss).sum::<f64>() / w as f64;
        (head, tail)
    }
}

/// Run the schedule on the model in place. One optimizer spans all stages,
/// so warmup and moment state carry across resolution switches.
pub fn train_loop<T: Scalar>(
    model: &SparseDiT<T>,
    encoder: &EncoderStub<T>,
    dataset: &ToyDataset,
    schedule: &TrainSchedule,
    opts: &TrainOptions,
    rng: &mut Rng64,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let params = model.named_params();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: schedule.lr,
            warmup_steps: schedule.warmup_steps,
            weight_decay: opts.weight_decay,
            ..Default::default()
        },
        &params,
    );
    let mut csv = match &opts.metrics_path {
        Some(p) => {
            let mut f = fs::File::create(p)?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut global_step = 0u64;
    let c = model.cfg.in_channels;
    for stage in &schedule.stages {
        let res = stage.resolution;
        if res % model.cfg.patch != 0 {
            return Err(Error::config(format!(
                "stage resolution {res} not divisible by patch {}",
                model.cfg.patch
            )));
        }
        for _ in 0..stage.steps {
            zero_grads(&params);
            let mut fm_sum = 0.0;
            let mut aux_sum = 0.0;
            for _ in 0..stage.batch_size {
                let item = dataset.sample::<T>(c, res, res, rng);
                let fs = make_flow_sample(item.latent, rng, opts.t_sampler);
                let bundle = if rng.coin(opts.p_drop) {
                    encoder.null()
                } else {
                    encoder.encode(item.prompt_id)
                };
                let g = Graph::new();
                let xt = g.constant(fs.xt)?;
                let out = model.forward(&g, xt, &bundle, fs.t, Mode::Train)?;
                let target = g.constant(fs.v_target)?;
                let fm = mse(out.velocity, target)?;
                let total = fm.add(out.aux_loss)?;
                g.backward_scaled(total, T::from_f64(1.0 / stage.batch_size as f64))?;
                fm_sum += fm.item().to_f64();
                aux_sum += out.aux_loss.item().to_f64();
            }
            let loss = fm_sum / stage.batch_size as f64;
            let aux_loss = aux_sum / stage.batch_size as f64;
            if !loss.is_finite() || !aux_loss.is_finite() {
                let dump = write_abort_dump(opts, global_step + 1, res, loss, &rows)?;
                return Err(Error::TrainAbort {
                    step: global_step + 1,
                    reason: format!("non-finite training loss {loss}"),
                    dump_path: dump,
                });
            }
            let lr = opt.step(&params);
            global_step += 1;
            let row = MetricsRow {
                step: global_step,
                loss,
                lr,
                aux_loss,
            };
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.csv_line())?;
            }
            rows.push(row);
            if let (Some(every), Some(dir)) = (opts.checkpoint_every, opts.out_dir.as_ref()) {
                if every > 0 && global_step % every == 0 {
                    fs::create_dir_all(dir)?;
                    let path = dir.join(format!("step_{global_step}.ckpt"));
                    save_checkpoint(&path, model, &encoder.cfg, "train")?;
                }
            }
        }
    }
    Ok(TrainOutcome {
        rows,
        steps_run: global_step,
    })
}

fn write_abort_dump(
    opts: &TrainOptions,
    step: u64,
    resolution: usize,
    loss: f64,
    rows: &[MetricsRow],
) -> Result<String> {
    let dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(std::env::temp_dir);
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("abort_step_{step}.json"));
    let recent: Vec<_> = rows
        .iter()
        .rev()
        .take(5)
        .map(|r| {
            serde_json::json!({
                "step": r.step, "loss": r.loss, "lr": r.lr, "aux_loss": r.aux_loss
            })
        })
        .collect();
    let doc = serde_json::json!({
        "step": step,
        "resolution": resolution,
        "loss": if loss.is_nan() { "NaN".to_string() } else { loss.to_string() },
        "recent_rows": recent,
    });
    fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
    Ok(path.display().to_string())
}
