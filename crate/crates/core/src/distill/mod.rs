//! Few-step distillation: a student copied from the teacher learns to
//! reproduce guided teacher behavior in `student_steps` sampler steps,
//! driven by a distribution-matching term plus a small adversarial term,
//! L_total = L_DMD + λ_adv·L_adv.

pub mod disc;
pub mod dmd;

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use crate::conditioning::EncoderStub;
use crate::dit::{DiTConfig, Mode, SparseDiT};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, make_flow_sample, ModelField, TSampler, ToyDataset, VelocityField};
use crate::graph::{mse, Graph};
use crate::optim::{zero_grads, AdamW, AdamWConfig};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use disc::{disc_loss, gen_loss, teacher_tap_features, Discriminator};
pub use dmd::{dmd_term, guided_velocity, student_chain};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// how many sampler steps the distilled student targets
    pub student_steps: usize,
    pub lambda_adv: f64,
    pub student_lr: f64,
    pub fake_lr: f64,
    pub disc_lr: f64,
    /// block indices whose image-token features feed the discriminator;
    /// empty = last dual block and last single block
    pub feature_taps: Vec<usize>,
    /// guidance scale baked into the distillation targets
    pub g_teacher: f64,
    /// timestep at which tap features are extracted
    pub t_feat: f64,
    pub disc_hidden: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            student_steps: 4,
            lambda_adv: 0.1,
            student_lr: 1e-3,
            fake_lr: 1e-3,
            disc_lr: 1e-3,
            feature_taps: Vec::new(),
            g_teacher: 2.0,
            t_feat: 0.25,
            disc_hidden: 64,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.student_steps == 0 {
            return Err(Error::config("student_steps must be at least 1"));
        }
        if self.lambda_adv < 0.0 {
            return Err(Error::config("lambda_adv must be nonnegative"));
        }
        for (name, lr) in [
            ("student_lr", self.student_lr),
            ("fake_lr", self.fake_lr),
            ("disc_lr", self.disc_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.t_feat) {
            return Err(Error::config(format!(
                "t_feat must lie in [0,1], got {}",
                self.t_feat
            )));
        }
        if self.disc_hidden == 0 {
            return Err(Error::config("disc_hidden must be positive"));
        }
        Ok(())
    }

    /// Tap indices resolved against a concrete model depth.
    pub fn resolved_taps(&self, cfg: &DiTConfig) -> Result<Vec<usize>> {
        let n_blocks = cfg.l_dual + cfg.l_single;
        let taps = if self.feature_taps.is_empty() {
            if cfg.l_single > 0 && cfg.l_dual > 0 {
                vec![cfg.l_dual - 1, n_blocks - 1]
            } else {
                vec![n_blocks - 1]
            }
        } else {
            self.feature_taps.clone()
        };
        for &t in &taps {
            if t >= n_blocks {
                return Err(Error::config(format!(
                    "feature tap {t} out of range for {n_blocks} blocks"
                )));
            }
        }
        Ok(taps)
    }
}

/// Parameter-exact copy of a teacher, ready for distillation.
pub fn init_student<T: Scalar>(teacher: &SparseDiT<T>) -> Result<SparseDiT<T>> {
    teacher.clone_model()
}

/// Sample from a distilled student: plain conditional Euler with exactly
/// `steps` model evaluations. Returns the sample and the evaluation count.
pub fn student_sample<T: Scalar>(
    student: &SparseDiT<T>,
    encoder: &EncoderStub<T>,
    prompt_id: u64,
    shape: &[usize],
    steps: usize,
    rng: &mut Rng64,
) -> Result<(Tensor<T>, u64)> {
    let mut field = ModelField::new(student, encoder.encode(prompt_id), encoder.null(), 1.0);
    let x = euler_sample(&mut field, shape, steps, rng)?;
    Ok((x, field.evals()))
}

#[derive(Debug, Clone, Copy)]
pub struct DistillRow {
    pub step: u64,
    pub l_dmd: f64,
    pub l_adv_gen: f64,
    pub l_total: f64,
    pub l_disc: f64,
    pub l_fake: f64,
}

pub const DISTILL_HEADER: &str = "step,l_dmd,l_adv_gen,l_total,l_disc,l_fake";

impl DistillRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_dmd, self.l_adv_gen, self.l_total, self.l_disc, self.l_fake
        )
    }
}

#[derive(Debug, Clone)]
pub struct DistillOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub metrics_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for DistillOptions {
    fn default() -> Self {
        DistillOptions {
            steps: 100,
            batch_size: 4,
            metrics_path: None,
            out_dir: None,
        }
    }
}

pub struct DistillOutcome<T: Scalar> {
    pub student: SparseDiT<T>,
    pub fake: SparseDiT<T>,
    pub disc: Discriminator<T>,
    pub rows: Vec<DistillRow>,
}

/// Run the full alternating distillation loop. The teacher is read-only
/// throughout; student, fake model, and discriminator each keep their own
/// optimizer and update sequentially within a step.
pub fn distill_loop<T: Scalar>(
    teacher: &SparseDiT<T>,
    encoder: &EncoderStub<T>,
    dataset: &ToyDataset,
    cfg: &DistillConfig,
    opts: &DistillOptions,
    rng: &mut Rng64,
) -> Result<DistillOutcome<T>> {
    cfg.validate()?;
    let taps = cfg.resolved_taps(&teacher.cfg)?;
    let student = init_student(teacher)?;
    let fake = init_student(teacher)?;
    let disc = Discriminator::new(taps.len(), teacher.cfg.d, cfg.disc_hidden, rng)?;

    let student_params = student.named_params();
    let fake_params = fake.named_params();
    let disc_params = disc.named_params();
    let mk_opt = |lr: f64, params: &[(String, crate::tensor::SharedTensor<T>)]| {
        AdamW::new(
            AdamWConfig {
                lr,
                ..Default::default()
            },
            params,
        )
    };
    let mut student_opt = mk_opt(cfg.student_lr, &student_params);
    let mut fake_opt = mk_opt(cfg.fake_lr, &fake_params);
    let mut disc_opt = mk_opt(cfg.disc_lr, &disc_params);

    let mut csv = match &opts.metrics_path {
        Some(p) => {
            let mut f = fs::File::create(p)?;
            writeln!(f, "{DISTILL_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let null = encoder.null();
    let (c, h, w) = (teacher.cfg.in_channels, teacher.cfg.height, teacher.cfg.width);
    let mut rows: Vec<DistillRow> = Vec::new();
    for step in 1..=opts.steps {
        // ---- phase 1: student (DMD + adversarial generator term) ----
        zero_grads(&student_params);
        let mut l_dmd_sum = 0.0;
        let mut l_gen_sum = 0.0;
        let mut l_total_sum = 0.0;
        let mut batch_outputs: Vec<(Tensor<T>, u64)> = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let item = dataset.sample::<T>(c, h, w, rng);
            let bundle = encoder.encode(item.prompt_id);
            let noise = Tensor::randn(vec![c, h, w], 1.0, rng);
            let g = Graph::new();
            let x1 = student_chain(&g, &student, noise, &bundle, cfg.student_steps, Mode::Train)?;
            let term = dmd_term(
                &g,
                x1,
                teacher,
                &fake,
                &bundle,
                &null,
                cfg.g_teacher,
                rng,
            )?;
            let feats = teacher_tap_features(&g, teacher, x1, &null, &taps, cfg.t_feat)?;
            let logit = disc.logit(&g, &feats, Mode::Frozen)?;
            let l_gen = gen_loss(logit)?;
            let total = term
                .loss
                .add(l_gen.scale(T::from_f64(cfg.lambda_adv))?)?;
            g.backward_scaled(total, T::from_f64(1.0 / opts.batch_size as f64))?;
            l_dmd_sum += term.loss.item().to_f64();
            l_gen_sum += l_gen.item().to_f64();
            l_total_sum += total.item().to_f64();
            batch_outputs.push((x1.value(), item.prompt_id));
        }
        student_opt.step(&student_params);

        // ---- phase 2: fake model regresses the student's output law ----
        zero_grads(&fake_params);
        let mut l_fake_sum = 0.0;
        for (x1_det, prompt_id) in &batch_outputs {
            let fs = make_flow_sample(x1_det.clone(), rng, TSampler::Uniform);
            let bundle = if rng.coin(0.1) {
                encoder.null()
            } else {
                encoder.encode(*prompt_id)
            };
            let g = Graph::new();
            let xt = g.constant(fs.xt)?;
            let out = fake.forward(&g, xt, &bundle, fs.t, Mode::Train)?;
            let l = mse(out.velocity, g.constant(fs.v_target)?)?;
            g.backward_scaled(l, T::from_f64(1.0 / opts.batch_size as f64))?;
            l_fake_sum += l.item().to_f64();
        }
        fake_opt.step(&fake_params);

        // ---- phase 3: discriminator on real vs student outputs ----
        zero_grads(&disc_params);
        let mut l_disc_sum = 0.0;
        for (x1_det, _) in &batch_outputs {
            let real = dataset.sample::<T>(c, h, w, rng).latent;
            let g = Graph::new();
            let real_feats =
                teacher_tap_features(&g, teacher, g.constant(real)?, &null, &taps, cfg.t_feat)?;
            let fake_feats = teacher_tap_features(
                &g,
                teacher,
                g.constant(x1_det.clone())?,
                &null,
                &taps,
                cfg.t_feat,
            )?;
            let lr_logit = disc.logit(&g, &real_feats, Mode::Train)?;
            let lf_logit = disc.logit(&g, &fake_feats, Mode::Train)?;
            let l = disc_loss(lr_logit, lf_logit)?;
            g.backward_scaled(l, T::from_f64(1.0 / opts.batch_size as f64))?;
            l_disc_sum += l.item().to_f64();
        }
        disc_opt.step(&disc_params);

        let b = opts.batch_size as f64;
        let row = DistillRow {
            step,
            l_dmd: l_dmd_sum / b,
            l_adv_gen: l_gen_sum / b,
            l_total: l_total_sum / b,
            l_disc: l_disc_sum / b,
            l_fake: l_fake_sum / b,
        };
        if !(row.l_total.is_finite() && row.l_disc.is_finite() && row.l_fake.is_finite()) {
            let dump = write_abort_dump(opts, step, &row, &rows)?;
            return Err(Error::TrainAbort {
                step,
                reason: "non-finite distillation loss".to_string(),
                dump_path: dump,
            });
        }
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.csv_line())?;
        }
        rows.push(row);
    }
    Ok(DistillOutcome {
        student,
        fake,
        disc,
        rows,
    })
}

fn write_abort_dump(
    opts: &DistillOptions,
    step: u64,
    row: &DistillRow,
    rows: &[DistillRow],
) -> Result<String> {
    let dir = opts.out_dir.clone().unwrap_or_else(std::env::temp_dir);
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("distill_abort_step_{step}.json"));
    let recent: Vec<String> = rows.iter().rev().take(5).map(|r| r.csv_line()).collect();
    let doc = serde_json::json!({
        "step": step,
        "row": row.csv_line(),
        "recent_rows": recent,
    });
    fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
    Ok(path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::params_checksum;
    use crate::conditioning::EncoderStubConfig;

    fn tiny_teacher() -> (SparseDiT<f64>, EncoderStub<f64>) {
        let cfg = DiTConfig {
            d: 8,
            n_heads: 2,
            l_dual: 1,
            l_single: 1,
            n_experts: 2,
            top_k: 1,
            expert_hidden: 16,
            height: 4,
            width: 4,
            ..Default::default()
        };
        let enc = EncoderStub::new(EncoderStubConfig {
            d: 8,
            m_seq: 2,
            m_llm: 2,
            ..Default::default()
        })
        .unwrap();
        let teacher = SparseDiT::new(cfg, 100).unwrap();
        // give the zero-init head some signal so distillation has a target
        let mut rng = Rng64::new(101);
        for p in [&teacher.head_w, &teacher.final_ada_w] {
            for v in p.borrow_mut().data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
        (teacher, enc)
    }

    #[test]
    fn student_init_is_exact_copy_and_isolated() {
        let (teacher, enc) = tiny_teacher();
        let student = init_student(&teacher).unwrap();
        assert_eq!(params_checksum(&teacher), params_checksum(&student));
        let x = Tensor::randn(vec![1, 4, 4], 1.0, &mut Rng64::new(102));
        let b = enc.encode(1);
        assert_eq!(
            teacher.eval_velocity(&x, &b, 0.5).unwrap().data(),
            student.eval_velocity(&x, &b, 0.5).unwrap().data()
        );
        let before = params_checksum(&teacher);
        student.head_b.borrow_mut().data_mut()[0] = 7.0;
        assert_eq!(before, params_checksum(&teacher));
    }

    #[test]
    fn loop_runs_and_teacher_stays_frozen() {
        let (teacher, enc) = tiny_teacher();
        let before = params_checksum(&teacher);
        let out = distill_loop(
            &teacher,
            &enc,
            &ToyDataset::Gaussian {
                mean: 0.8,
                std: 0.3,
            },
            &DistillConfig {
                student_steps: 2,
                ..Default::default()
            },
            &DistillOptions {
                steps: 5,
                batch_size: 2,
                ..Default::default()
            },
            &mut Rng64::new(103),
        )
        .unwrap();
        assert_eq!(params_checksum(&teacher), before);
        assert_eq!(out.rows.len(), 5);
        // student must have moved away from the teacher
        assert_ne!(params_checksum(&out.student), before);
    }

    #[test]
    fn lambda_zero_reduces_total_to_dmd() {
        let (teacher, enc) = tiny_teacher();
        let out = distill_loop(
            &teacher,
            &enc,
            &ToyDataset::Gaussian {
                mean: 0.8,
                std: 0.3,
            },
            &DistillConfig {
                student_steps: 2,
                lambda_adv: 0.0,
                ..Default::default()
            },
            &DistillOptions {
                steps: 3,
                batch_size: 2,
                ..Default::default()
            },
            &mut Rng64::new(104),
        )
        .unwrap();
        for r in &out.rows {
            assert_eq!(r.l_total, r.l_dmd, "step {}", r.step);
        }
    }

    #[test]
    fn total_is_linear_in_lambda_each_step() {
        let (teacher, enc) = tiny_teacher();
        let cfg = DistillConfig {
            student_steps: 2,
            lambda_adv: 0.37,
            ..Default::default()
        };
        let out = distill_loop(
            &teacher,
            &enc,
            &ToyDataset::Gaussian {
                mean: 0.8,
                std: 0.3,
            },
            &cfg,
            &DistillOptions {
                steps: 4,
                batch_size: 2,
                ..Default::default()
            },
            &mut Rng64::new(105),
        )
        .unwrap();
        for r in &out.rows {
            let want = r.l_dmd + cfg.lambda_adv * r.l_adv_gen;
            assert!(
                (r.l_total - want).abs() < 1e-6,
                "step {}: {} vs {}",
                r.step,
                r.l_total,
                want
            );
        }
    }

    #[test]
    fn student_sampler_uses_exactly_student_steps_evals() {
        let (teacher, enc) = tiny_teacher();
        let student = init_student(&teacher).unwrap();
        for steps in [1usize, 4, 16, 28] {
            let (x, evals) = student_sample(
                &student,
                &enc,
                1,
                &[1, 4, 4],
                steps,
                &mut Rng64::new(106),
            )
            .unwrap();
            assert_eq!(evals, steps as u64);
            assert_eq!(x.shape(), &[1, 4, 4]);
        }
    }

    #[test]
    fn paper_step_targets_run_end_to_end() {
        let (teacher, enc) = tiny_teacher();
        for steps in [28usize, 16] {
            let out = distill_loop(
                &teacher,
                &enc,
                &ToyDataset::Gaussian {
                    mean: 0.8,
                    std: 0.3,
                },
                &DistillConfig {
                    student_steps: steps,
                    ..Default::default()
                },
                &DistillOptions {
                    steps: 2,
                    batch_size: 1,
                    ..Default::default()
                },
                &mut Rng64::new(107),
            )
            .unwrap();
            assert_eq!(out.rows.len(), 2);
        }
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let (teacher, enc) = tiny_teacher();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("distill.csv");
        distill_loop(
            &teacher,
            &enc,
            &ToyDataset::Gaussian {
                mean: 0.8,
                std: 0.3,
            },
            &DistillConfig {
                student_steps: 2,
                ..Default::default()
            },
            &DistillOptions {
                steps: 3,
                batch_size: 1,
                metrics_path: Some(path.clone()),
                ..Default::default()
            },
            &mut Rng64::new(108),
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], DISTILL_HEADER);
        assert_eq!(lines.len(), 4);
    }
}
