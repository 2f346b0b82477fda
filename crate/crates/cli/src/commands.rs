//! Subcommand implementations. Each handler reads only the files named in
//! the config, writes only under output_dir, and returns the artifact list
//! for the run manifest.

use std::path::{Path, PathBuf};

use flowmoe::checkpoint::{load_checkpoint, params_checksum, save_checkpoint};
use flowmoe::conditioning::EncoderStub;
use flowmoe::datapipe::{
    attach_scores, dedup_run, filter_chain, load_corpus, read_manifest, read_scores_sidecar,
    score_bytes_per_pixel, write_manifest, DedupOptions,
};
use flowmoe::dit::SparseDiT;
use flowmoe::edit::{
    change_stats, edit_apply, edit_train, synth_edit_triplet, EditTask, EditTrainOptions,
};
use flowmoe::error::{Error, Result};
use flowmoe::flow::{euler_sample, train_loop, ModelField, TrainOptions};
use flowmoe::rng::Rng64;
use flowmoe::scalar::Scalar;
use flowmoe::tensor::Tensor;

use crate::artifacts::{write_grid, write_image, Artifact};
use crate::config::RunConfig;

fn require_file(opt: &Option<String>, key: &str) -> Result<PathBuf> {
    let p = opt
        .as_ref()
        .ok_or_else(|| Error::config(format!("{key} must be set for this subcommand")))?;
    let path = PathBuf::from(p);
    if !path.is_file() {
        return Err(Error::config(format!(
            "{key} points at {p:?}, which does not exist"
        )));
    }
    Ok(path)
}

/// Output manifests land in output_dir, not next to the source images, so
/// relative image paths copied verbatim would dangle. Rebase them onto the
/// input manifest's directory before writing.
fn rebase_entries(
    entries: &[flowmoe::datapipe::ManifestEntry],
    manifest_path: &Path,
) -> Vec<flowmoe::datapipe::ManifestEntry> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    // The manifest path itself may be cwd-relative; absolutize so the output
    // manifest stays valid no matter where the next command runs from.
    let base = base
        .canonicalize()
        .unwrap_or_else(|_| base.to_path_buf());
    entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if !Path::new(&e.path).is_absolute() {
                e.path = base.join(&e.path).to_string_lossy().into_owned();
            }
            e
        })
        .collect()
}

fn list_step_checkpoints(dir: &Path) -> Vec<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("step_") && n.ends_with(".ckpt"))
                .unwrap_or(false)
        })
        .collect();
    found.sort();
    found
}

pub fn pretrain<T: Scalar>(cfg: &RunConfig, finetune: bool) -> Result<Vec<Artifact>> {
    let out = cfg.out_dir().to_path_buf();
    let dataset = cfg.flow.dataset.to_dataset()?;
    let schedule = cfg.train_schedule();
    schedule.validate()?;

    let (model, enc_cfg): (SparseDiT<T>, _) = if finetune {
        let path = require_file(&cfg.flow.init_checkpoint, "flow.init_checkpoint")?;
        let (model, meta) = load_checkpoint::<T>(&path)?;
        println!(
            "event=load_checkpoint path={} role={}",
            path.display(),
            meta.role
        );
        (model, meta.encoder)
    } else {
        let dit = cfg.dit_config();
        dit.validate()?;
        (SparseDiT::new(dit, cfg.seed)?, cfg.encoder_config())
    };
    let encoder = EncoderStub::<T>::new(enc_cfg.clone())?;

    let metrics_path = out.join("metrics.csv");
    let opts = TrainOptions {
        p_drop: cfg.flow.p_drop,
        t_sampler: cfg.t_sampler()?,
        weight_decay: cfg.flow.weight_decay,
        metrics_path: Some(metrics_path.clone()),
        checkpoint_every: cfg.flow.checkpoint_every,
        out_dir: Some(out.clone()),
    };
    let mut rng = Rng64::new(cfg.seed);
    let outcome = train_loop(&model, &encoder, &dataset, &schedule, &opts, &mut rng)?;
    let (head, tail) = outcome.loss_drop(20);
    println!(
        "event={} steps={} loss_head={head:.6} loss_tail={tail:.6}",
        if finetune { "finetune" } else { "pretrain" },
        outcome.steps_run
    );

    let final_path = out.join("final.ckpt");
    save_checkpoint(&final_path, &model, &enc_cfg, "train")?;
    let mut artifacts = vec![
        Artifact::new("metrics", &metrics_path, "csv"),
        Artifact::new("final-checkpoint", &final_path, "checkpoint"),
    ];
    for p in list_step_checkpoints(&out) {
        artifacts.push(Artifact::new("step-checkpoint", &p, "checkpoint"));
    }
    Ok(artifacts)
}

pub fn sample<T: Scalar>(cfg: &RunConfig) -> Result<Vec<Artifact>> {
    let out = cfg.out_dir().to_path_buf();
    let default_ckpt = out.join("final.ckpt").display().to_string();
    let ckpt = cfg
        .flow
        .sample
        .checkpoint
        .clone()
        .unwrap_or(default_ckpt);
    let path = require_file(&Some(ckpt), "flow.sample.checkpoint")?;
    let (model, meta) = load_checkpoint::<T>(&path)?;
    let encoder = EncoderStub::<T>::new(meta.encoder.clone())?;

    let s = &cfg.flow.sample;
    if s.count == 0 || s.steps == 0 {
        return Err(Error::config(
            "flow.sample.count and flow.sample.steps must be positive",
        ));
    }
    let shape = vec![meta.dit.in_channels, meta.dit.height, meta.dit.width];
    let mut rng = Rng64::new(cfg.seed);
    let mut field = ModelField::new(
        &model,
        encoder.encode(s.prompt_id),
        encoder.null(),
        s.g_scale,
    );
    let mut samples: Vec<Tensor<T>> = Vec::with_capacity(s.count);
    for _ in 0..s.count {
        samples.push(euler_sample(&mut field, &shape, s.steps, &mut rng)?);
    }
    let grid_path = out.join("grid.pgm");
    write_grid(&grid_path, &samples)?;
    println!(
        "event=sample count={} steps={} g_scale={} prompt_id={} grid={}",
        s.count,
        s.steps,
        s.g_scale,
        s.prompt_id,
        grid_path.display()
    );
    Ok(vec![Artifact::new("sample-grid", &grid_path, "pgm")])
}

pub fn distill<T: Scalar>(cfg: &RunConfig, steps_flag: Option<usize>) -> Result<Vec<Artifact>> {
    let out = cfg.out_dir().to_path_buf();
    let path = require_file(&cfg.distill.teacher_checkpoint, "distill.teacher_checkpoint")?;
    let (teacher, meta) = load_checkpoint::<T>(&path)?;
    let encoder = EncoderStub::<T>::new(meta.encoder.clone())?;
    let dataset = cfg.flow.dataset.to_dataset()?;

    let d = &cfg.distill;
    let student_steps = steps_flag.unwrap_or(d.student_steps);
    let dcfg = flowmoe::distill::DistillConfig {
        student_steps,
        lambda_adv: d.lambda_adv,
        student_lr: d.student_lr,
        fake_lr: d.fake_lr,
        disc_lr: d.disc_lr,
        feature_taps: d.feature_taps.clone(),
        g_teacher: d.g_teacher,
        t_feat: d.t_feat,
        disc_hidden: d.disc_hidden,
    };
    let metrics_path = out.join("distill_metrics.csv");
    let dopts = flowmoe::distill::DistillOptions {
        steps: d.steps,
        batch_size: d.batch_size,
        metrics_path: Some(metrics_path.clone()),
        out_dir: Some(out.clone()),
    };
    let before = params_checksum(&teacher);
    let mut rng = Rng64::new(cfg.seed);
    let outcome = flowmoe::distill::distill_loop(&teacher, &encoder, &dataset, &dcfg, &dopts, &mut rng)?;
    let after = params_checksum(&teacher);
    if before != after {
        return Err(Error::usage(
            "teacher parameters changed during distillation; refusing to continue",
        ));
    }
    let last = outcome.rows.last();
    println!(
        "event=distill steps={} student_steps={student_steps} l_total={} teacher_checksum={}",
        d.steps,
        last.map(|r| format!("{:.6}", r.l_total)).unwrap_or_default(),
        &before[..12]
    );

    let student_path = out.join("student.ckpt");
    save_checkpoint(&student_path, &outcome.student, &meta.encoder, "student")?;
    Ok(vec![
        Artifact::new("distill-metrics", &metrics_path, "csv"),
        Artifact::new("student-checkpoint", &student_path, "checkpoint"),
    ])
}

fn parse_tasks(names: &[String]) -> Result<Vec<EditTask>> {
    if names.is_empty() {
        return Err(Error::config("edit.tasks must not be empty"));
    }
    names.iter().map(|n| n.parse::<EditTask>()).collect()
}

pub fn edit_train_cmd<T: Scalar>(cfg: &RunConfig) -> Result<Vec<Artifact>> {
    let out = cfg.out_dir().to_path_buf();
    let dit = cfg.dit_config();
    dit.validate()?;
    if dit.width % 2 != 0 {
        return Err(Error::config(
            "model.width must be even: edit canvases hold [source | target] side by side",
        ));
    }
    let model = SparseDiT::<T>::new(dit, cfg.seed)?;
    let enc_cfg = cfg.encoder_config();
    let encoder = EncoderStub::<T>::new(enc_cfg.clone())?;

    let e = &cfg.edit;
    let metrics_path = out.join("edit_metrics.csv");
    let opts = EditTrainOptions {
        steps: e.steps,
        batch_size: e.batch_size,
        lr: e.lr,
        warmup_steps: e.warmup_steps,
        tau: e.tau,
        alpha: e.alpha,
        p_drop: e.p_drop,
        t_sampler: cfg.t_sampler()?,
        tasks: parse_tasks(&e.tasks)?,
        metrics_path: Some(metrics_path.clone()),
    };
    let mut rng = Rng64::new(cfg.seed);
    let rows = edit_train(&model, &encoder, &opts, &mut rng)?;
    let last = rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("event=edit_train steps={} last_loss={last:.6}", e.steps);

    let ckpt_path = out.join("edit.ckpt");
    save_checkpoint(&ckpt_path, &model, &enc_cfg, "edit")?;
    Ok(vec![
        Artifact::new("edit-metrics", &metrics_path, "csv"),
        Artifact::new("edit-checkpoint", &ckpt_path, "checkpoint"),
    ])
}

#[derive(serde::Serialize)]
struct EditApplyReport {
    task: String,
    instruction_id: u64,
    steps: usize,
    g_scale: f64,
    mean_abs_change: f64,
    /// only for synthetic sources, where the true mask is known
    change_inside: Option<f64>,
    change_outside: Option<f64>,
}

pub fn edit_apply_cmd<T: Scalar>(cfg: &RunConfig) -> Result<Vec<Artifact>> {
    let out = cfg.out_dir().to_path_buf();
    let default_ckpt = out.join("edit.ckpt").display().to_string();
    let ckpt = cfg.edit.checkpoint.clone().unwrap_or(default_ckpt);
    let path = require_file(&Some(ckpt), "edit.checkpoint")?;
    let (model, meta) = load_checkpoint::<T>(&path)?;
    let encoder = EncoderStub::<T>::new(meta.encoder.clone())?;
    if meta.dit.width % 2 != 0 {
        return Err(Error::config("edit checkpoint has odd canvas width"));
    }
    let (c, h, w) = (meta.dit.in_channels, meta.dit.height, meta.dit.width / 2);

    let task: EditTask = cfg.edit.task.parse()?;
    let mut rng = Rng64::new(cfg.seed);
    let (source, mask): (Tensor<T>, Option<Vec<bool>>) = match &cfg.edit.input {
        Some(p) => {
            if c != 1 {
                return Err(Error::config(
                    "edit.input is single-channel PGM but the model has multiple channels",
                ));
            }
            let img = crate::artifacts::read_image(Path::new(p))?;
            let s = img.shape();
            if s[1] != h || s[2] != w {
                return Err(Error::config(format!(
                    "edit.input is {}x{}, model expects {h}x{w}",
                    s[1], s[2]
                )));
            }
            (img.cast::<T>(), None)
        }
        None => {
            let triplet = synth_edit_triplet::<T>(task, c, h, w, &mut rng);
            (triplet.source, Some(triplet.mask))
        }
    };

    let e = &cfg.edit;
    let (edited, canvas) = edit_apply(
        &model,
        &encoder,
        &source,
        task.instruction_id(),
        e.apply_steps,
        e.g_scale,
        &mut rng,
    )?;

    let mean_abs_change = source
        .data()
        .iter()
        .zip(edited.data())
        .map(|(a, b)| (b.to_f64() - a.to_f64()).abs())
        .sum::<f64>()
        / source.numel() as f64;
    let (change_inside, change_outside) = match &mask {
        Some(m) => {
            let (i, o) = change_stats(&source, &edited, m)?;
            (Some(i), Some(o))
        }
        None => (None, None),
    };
    let report = EditApplyReport {
        task: cfg.edit.task.clone(),
        instruction_id: task.instruction_id(),
        steps: e.apply_steps,
        g_scale: e.g_scale,
        mean_abs_change,
        change_inside,
        change_outside,
    };

    let source_path = out.join("edit_source.pgm");
    let edited_path = out.join("edit_edited.pgm");
    let canvas_path = out.join("edit_canvas.pgm");
    let report_path = out.join("edit_report.json");
    write_image(&source_path, &source)?;
    write_image(&edited_path, &edited)?;
    write_image(&canvas_path, &canvas)?;
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::config(e.to_string()))? + "\n",
    )?;
    println!(
        "event=edit_apply task={} steps={} mean_abs_change={mean_abs_change:.4}",
        cfg.edit.task, e.apply_steps
    );
    Ok(vec![
        Artifact::new("edit-source", &source_path, "pgm"),
        Artifact::new("edit-edited", &edited_path, "pgm"),
        Artifact::new("edit-canvas", &canvas_path, "pgm"),
        Artifact::new("edit-report", &report_path, "json"),
    ])
}

pub fn dedup(cfg: &RunConfig) -> Result<Vec<Artifact>> {
    let out = cfg.out_dir().to_path_buf();
    let manifest_path = require_file(&cfg.datapipe.input_manifest, "datapipe.input_manifest")?;
    let entries = read_manifest(&manifest_path)?;
    let records = load_corpus(&manifest_path)?;

    let dp = &cfg.datapipe;
    let opts = DedupOptions {
        k: dp.k,
        theta: dp.theta,
        subset_fraction: dp.subset_fraction,
        iters: dp.iters,
        seed: cfg.seed,
    };
    let extractor = flowmoe::datapipe::FeatureExtractor::BuiltinDownsample;
    let (index, report) = dedup_run(&records, &extractor, &opts)?;

    let kept: Vec<_> = rebase_entries(&entries, &manifest_path)
        .into_iter()
        .filter(|e| !index.removed.contains(&e.id))
        .collect();
    let kept_path = out.join("kept.jsonl");
    write_manifest(&kept_path, &kept)?;
    let report_path = out.join("dedup_report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::config(e.to_string()))? + "\n",
    )?;
    let removed_path = out.join("removed.json");
    let removed: Vec<u64> = index.removed.iter().copied().collect();
    std::fs::write(
        &removed_path,
        serde_json::to_string(&removed).map_err(|e| Error::config(e.to_string()))? + "\n",
    )?;
    println!(
        "event=dedup total={} removed={} groups={} k={} theta={}",
        report.total,
        report.removed,
        index.groups.len(),
        dp.k,
        dp.theta
    );
    Ok(vec![
        Artifact::new("kept-manifest", &kept_path, "jsonl"),
        Artifact::new("dedup-report", &report_path, "json"),
        Artifact::new("removed-ids", &removed_path, "json"),
    ])
}

pub fn filter(cfg: &RunConfig) -> Result<Vec<Artifact>> {
    let out = cfg.out_dir().to_path_buf();
    let manifest_path = require_file(&cfg.datapipe.input_manifest, "datapipe.input_manifest")?;
    let entries = read_manifest(&manifest_path)?;
    let mut records = load_corpus(&manifest_path)?;

    let dp = &cfg.datapipe;
    if dp.filter_stages.is_empty() {
        return Err(Error::config("datapipe.filter_stages must not be empty"));
    }
    if let Some(sidecar) = &dp.scores_sidecar {
        let scores = read_scores_sidecar(Path::new(sidecar))?;
        attach_scores(&mut records, &dp.score_name, &scores);
    }
    if dp.score_bytes_per_pixel {
        score_bytes_per_pixel(&mut records, dp.jpeg_quality)?;
    }
    let report = filter_chain(&records, &dp.filter_stages)?;

    let kept_set: std::collections::BTreeSet<u64> = report.kept.iter().copied().collect();
    let kept: Vec<_> = rebase_entries(&entries, &manifest_path)
        .into_iter()
        .filter(|e| kept_set.contains(&e.id))
        .collect();
    let kept_path = out.join("kept.jsonl");
    write_manifest(&kept_path, &kept)?;
    let report_path = out.join("filter_report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::config(e.to_string()))? + "\n",
    )?;
    println!(
        "event=filter total={} kept={} stages={}",
        records.len(),
        report.kept.len(),
        dp.filter_stages.len()
    );
    Ok(vec![
        Artifact::new("kept-manifest", &kept_path, "jsonl"),
        Artifact::new("filter-report", &report_path, "json"),
    ])
}
