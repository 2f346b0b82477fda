//! Run configuration: one JSON document covering every subcommand, with
//! namespaced sections, `--set key=value` dotted overrides, strict unknown
//! key rejection, and a resolved echo written next to the artifacts so any
//! run can be replayed from its output directory alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use flowmoe::datapipe::FilterStage;
use flowmoe::dit::DiTConfig;
use flowmoe::error::{Error, Result};
use flowmoe::flow::{StageConfig, TSampler, ToyDataset, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionOpt {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub precision: PrecisionOpt,
    pub model: ModelSection,
    pub flow: FlowSection,
    pub distill: DistillSection,
    pub edit: EditSection,
    pub datapipe: DatapipeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: "out".to_string(),
            precision: PrecisionOpt::F32,
            model: ModelSection::default(),
            flow: FlowSection::default(),
            distill: DistillSection::default(),
            edit: EditSection::default(),
            datapipe: DatapipeSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub n_heads: usize,
    pub l_dual: usize,
    pub l_single: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub shared_expert: bool,
    pub expert_hidden: usize,
    pub load_balance: f64,
    pub norm_eps: f64,
    pub encoder: EncoderSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 32,
            n_heads: 4,
            l_dual: 1,
            l_single: 1,
            patch: 2,
            in_channels: 1,
            height: 8,
            width: 8,
            n_experts: 4,
            top_k: 2,
            shared_expert: true,
            expert_hidden: 64,
            load_balance: 0.01,
            norm_eps: 1e-6,
            encoder: EncoderSection::default(),
        }
    }
}

/// Hybrid text-encoder stub widths. Zero raw widths mean "same as model.d";
/// a null seed derives one from the run seed so the whole run replays from
/// the echoed config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub d_seq: usize,
    pub d_llm: usize,
    pub m_seq: usize,
    pub m_llm: usize,
    pub layers: usize,
    pub seed: Option<u64>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            d_seq: 0,
            d_llm: 0,
            m_seq: 2,
            m_llm: 2,
            layers: 1,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub dataset: DatasetSection,
    pub stages: Vec<StageSection>,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub p_drop: f64,
    /// "uniform" or "logit-normal" (with t_mean / t_std)
    pub t_sampler: String,
    pub t_mean: f64,
    pub t_std: f64,
    pub checkpoint_every: Option<u64>,
    /// starting weights for `finetune`
    pub init_checkpoint: Option<String>,
    pub sample: SampleSection,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            dataset: DatasetSection::default(),
            stages: vec![StageSection {
                resolution: 8,
                steps: 200,
                batch_size: 4,
            }],
            lr: 1e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            p_drop: 0.1,
            t_sampler: "uniform".to_string(),
            t_mean: 0.0,
            t_std: 1.0,
            checkpoint_every: None,
            init_checkpoint: None,
            sample: SampleSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub resolution: usize,
    pub steps: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "gaussian" | "two-gaussians" | "shapes" | "checker"
    pub kind: String,
    pub mean: f64,
    pub std: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub period: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: "gaussian".to_string(),
            mean: 0.8,
            std: 0.3,
            mean_a: -0.5,
            mean_b: 0.5,
            period: 2,
        }
    }
}

impl DatasetSection {
    pub fn to_dataset(&self) -> Result<ToyDataset> {
        match self.kind.as_str() {
            "gaussian" => Ok(ToyDataset::Gaussian {
                mean: self.mean,
                std: self.std,
            }),
            "two-gaussians" => Ok(ToyDataset::TwoGaussians {
                mean_a: self.mean_a,
                mean_b: self.mean_b,
                std: self.std,
            }),
            "shapes" => Ok(ToyDataset::Shapes),
            "checker" => Ok(ToyDataset::Checker {
                period: self.period,
            }),
            other => Err(Error::config(format!(
                "flow.dataset.kind must be one of gaussian | two-gaussians | shapes | checker, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub count: usize,
    pub steps: usize,
    pub g_scale: f64,
    pub prompt_id: u64,
    /// defaults to <output_dir>/final.ckpt
    pub checkpoint: Option<String>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            count: 16,
            steps: 50,
            g_scale: 1.0,
            prompt_id: 1,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub teacher_checkpoint: Option<String>,
    pub student_steps: usize,
    pub lambda_adv: f64,
    pub student_lr: f64,
    pub fake_lr: f64,
    pub disc_lr: f64,
    pub feature_taps: Vec<usize>,
    pub g_teacher: f64,
    pub t_feat: f64,
    pub disc_hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            teacher_checkpoint: None,
            student_steps: 28,
            lambda_adv: 0.1,
            student_lr: 1e-3,
            fake_lr: 1e-3,
            disc_lr: 1e-3,
            feature_taps: Vec::new(),
            g_teacher: 2.0,
            t_feat: 0.25,
            disc_hidden: 64,
            steps: 100,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub tau: f64,
    pub alpha: f64,
    pub p_drop: f64,
    /// instruction names trained on
    pub tasks: Vec<String>,
    /// instruction applied by `edit-apply`
    pub task: String,
    pub checkpoint: Option<String>,
    /// source image (PGM); when null a synthetic source is generated
    pub input: Option<String>,
    pub apply_steps: usize,
    pub g_scale: f64,
}

impl Default for EditSection {
    fn default() -> Self {
        EditSection {
            steps: 400,
            batch_size: 4,
            lr: 2e-3,
            warmup_steps: 50,
            tau: 0.1,
            alpha: 4.0,
            p_drop: 0.1,
            tasks: vec![
                "recolor".to_string(),
                "remove".to_string(),
                "translate".to_string(),
                "noop".to_string(),
            ],
            task: "recolor".to_string(),
            checkpoint: None,
            input: None,
            apply_steps: 16,
            g_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatapipeSection {
    /// JSONL manifest of the input corpus (id, path, metadata)
    pub input_manifest: Option<String>,
    pub k: usize,
    pub theta: f64,
    pub subset_fraction: f64,
    pub iters: usize,
    /// optional sidecar of per-record scores to attach before filtering
    pub scores_sidecar: Option<String>,
    pub score_name: String,
    /// compute the synthetic compressed-size score before filtering
    pub score_bytes_per_pixel: bool,
    pub jpeg_quality: u32,
    pub filter_stages: Vec<FilterStage>,
}

impl Default for DatapipeSection {
    fn default() -> Self {
        DatapipeSection {
            input_manifest: None,
            k: 32,
            theta: 0.95,
            subset_fraction: 1.0,
            iters: 10,
            scores_sidecar: None,
            score_name: "score".to_string(),
            score_bytes_per_pixel: true,
            jpeg_quality: 50,
            filter_stages: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn dit_config(&self) -> DiTConfig {
        let m = &self.model;
        DiTConfig {
            d: m.d,
            n_heads: m.n_heads,
            l_dual: m.l_dual,
            l_single: m.l_single,
            patch: m.patch,
            in_channels: m.in_channels,
            height: m.height,
            width: m.width,
            n_experts: m.n_experts,
            top_k: m.top_k,
            shared_expert: m.shared_expert,
            expert_hidden: m.expert_hidden,
            load_balance: m.load_balance,
            norm_eps: m.norm_eps,
        }
    }

    pub fn encoder_config(&self) -> flowmoe::conditioning::EncoderStubConfig {
        let e = &self.model.encoder;
        let pick = |v: usize| if v == 0 { self.model.d } else { v };
        flowmoe::conditioning::EncoderStubConfig {
            d_seq: pick(e.d_seq),
            d_llm: pick(e.d_llm),
            d: self.model.d,
            m_seq: e.m_seq,
            m_llm: e.m_llm,
            layers: e.layers,
            seed: e.seed.unwrap_or(self.seed ^ 0xEC0D),
        }
    }

    pub fn t_sampler(&self) -> Result<TSampler> {
        match self.flow.t_sampler.as_str() {
            "uniform" => Ok(TSampler::Uniform),
            "logit-normal" => Ok(TSampler::LogitNormal {
                mean: self.flow.t_mean,
                std: self.flow.t_std,
            }),
            other => Err(Error::config(format!(
                "flow.t_sampler must be uniform | logit-normal, got {other:?}"
            ))),
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            stages: self
                .flow
                .stages
                .iter()
                .map(|s| StageConfig {
                    resolution: s.resolution,
                    steps: s.steps,
                    batch_size: s.batch_size,
                })
                .collect(),
            lr: self.flow.lr,
            warmup_steps: self.flow.warmup_steps,
        }
    }

    pub fn out_dir(&self) -> &Path {
        Path::new(&self.output_dir)
    }
}

/// Line-anchored rephrase of a serde_json error against the text it was
/// parsed from.
fn anchored(err: &serde_json::Error, text: &str, origin: &str) -> Error {
    let (line, col) = (err.line(), err.column());
    let snippet = text
        .lines()
        .nth(line.saturating_sub(1))
        .map(|l| format!(" near `{}`", l.trim()))
        .unwrap_or_default();
    Error::config(format!("{origin}:{line}:{col}: {err}{snippet}"))
}

fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed: Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::usage(format!("bad --set key {key:?}")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if let Ok(idx) = part.parse::<usize>() {
            let arr = node.as_array_mut().ok_or_else(|| {
                Error::usage(format!("--set {key}: segment {part:?} indexes a non-array"))
            })?;
            if idx >= arr.len() {
                return Err(Error::usage(format!(
                    "--set {key}: index {idx} out of bounds ({} elements)",
                    arr.len()
                )));
            }
            if last {
                arr[idx] = parsed;
                return Ok(());
            }
            node = &mut arr[idx];
        } else {
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::usage(format!("--set {key}: segment {part:?} is not an object"))
            })?;
            if last {
                obj.insert(part.to_string(), parsed);
                return Ok(());
            }
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    unreachable!("loop always returns on the last segment");
}

pub struct ConfigCli<'a> {
    pub config_path: Option<&'a Path>,
    pub sets: &'a [String],
    pub seed: Option<u64>,
    pub out: Option<&'a str>,
    pub precision: Option<PrecisionOpt>,
}

/// Build the fully resolved RunConfig from a file plus command-line
/// overrides. All parse and schema failures carry line anchors.
pub fn resolve(cli: &ConfigCli) -> Result<RunConfig> {
    let mut value = match cli.config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| anchored(&e, &text, &path.display().to_string()))?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
    };
    for set in cli.sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("--set needs key=value, got {set:?}")))?;
        apply_override(&mut value, key, raw)?;
    }
    if let Some(seed) = cli.seed {
        value["seed"] = Value::from(seed);
    }
    if let Some(out) = cli.out {
        value["output_dir"] = Value::from(out);
    }
    if let Some(p) = cli.precision {
        value["precision"] = serde_json::to_value(p).expect("precision serializes");
    }
    // a typed re-parse of the merged document rejects unknown keys and type
    // errors with positions into the resolved text
    let resolved_text =
        serde_json::to_string_pretty(&value).map_err(|e| Error::config(e.to_string()))?;
    serde_json::from_str::<RunConfig>(&resolved_text)
        .map_err(|e| anchored(&e, &resolved_text, "resolved config"))
}

/// Echo the resolved config into the output directory; every run is
/// replayable from this file alone.
pub fn echo(cfg: &RunConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(dir)?;
    let path = dir.join("resolved_config.json");
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}
