//! Instruction-driven image editing via in-context conditioning: source and
//! target latents sit side by side on one canvas, the model is fine-tuned
//! to denoise only the target half while the source half stays clean, and
//! a spatial weight map concentrates the loss on regions the edit changes.

use crate::conditioning::EncoderStub;
use crate::dit::{Mode, SparseDiT};
use crate::error::{Error, Result};
use crate::flow::{euler_integrate, ModelField, TSampler};
use crate::graph::{Graph, Var};
use crate::optim::{zero_grads, AdamW, AdamWConfig};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use crate::flow::train::{MetricsRow, METRICS_HEADER};
use crate::flow::toy::{ToyDataset, DISC_FILL, RECT_FILL};

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

/// Default threshold on channel-max |Z_T − Z_S| for "this position changed".
pub const EDIT_TAU: f64 = 0.1;
/// Default additive weight boost at changed positions.
pub const EDIT_ALPHA: f64 = 4.0;
/// Fixed shift applied by the translate task.
pub const TRANSLATE_OFFSET: (usize, usize) = (2, 2);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditTask {
    Recolor,
    Remove,
    Translate,
    Noop,
}

impl EditTask {
    /// Instruction ids live in their own range, far above the prompt ids
    /// the generative datasets use.
    pub fn instruction_id(self) -> u64 {
        match self {
            EditTask::Recolor => 100,
            EditTask::Remove => 101,
            EditTask::Translate => 102,
            EditTask::Noop => 103,
        }
    }

    pub fn from_instruction_id(id: u64) -> Result<Self> {
        match id {
            100 => Ok(EditTask::Recolor),
            101 => Ok(EditTask::Remove),
            102 => Ok(EditTask::Translate),
            103 => Ok(EditTask::Noop),
            other => Err(Error::config(format!("unknown instruction id {other}"))),
        }
    }

    pub const ALL: [EditTask; 4] = [
        EditTask::Recolor,
        EditTask::Remove,
        EditTask::Translate,
        EditTask::Noop,
    ];
}

impl std::str::FromStr for EditTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recolor" => Ok(EditTask::Recolor),
            "remove" => Ok(EditTask::Remove),
            "translate" => Ok(EditTask::Translate),
            "no-op" | "noop" => Ok(EditTask::Noop),
            other => Err(Error::config(format!(
                "unknown edit task `{other}` (expected recolor, remove, translate, or no-op)"
            ))),
        }
    }
}

pub struct EditTriplet<T: Scalar> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub instruction_id: u64,
    /// source-shape interior, for evaluation metrics
    pub mask: Vec<bool>,
}

/// Concatenate two equal-shape latents along width: left = source slot,
/// right = target slot.
pub fn build_edit_canvas<T: Scalar>(left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
    if left.shape() != right.shape() {
        return Err(Error::shape(format!(
            "canvas halves differ: {:?} vs {:?}",
            left.shape(),
            right.shape()
        )));
    }
    let s = left.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W] halves, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(c * h * 2 * w);
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w + y * w;
            data.extend_from_slice(&left.data()[row..row + w]);
            data.extend_from_slice(&right.data()[row..row + w]);
        }
    }
    Tensor::new(vec![c, h, 2 * w], data)
}

/// Exact inverse of [`build_edit_canvas`].
pub fn split_canvas<T: Scalar>(canvas: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = canvas.shape();
    if s.len() != 3 || s[2] % 2 != 0 {
        return Err(Error::shape(format!(
            "canvas must be [C,H,2W] with even width, got {s:?}"
        )));
    }
    let (c, h, w2) = (s[0], s[1], s[2]);
    let w = w2 / 2;
    let mut left = Vec::with_capacity(c * h * w);
    let mut right = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w2 + y * w2;
            left.extend_from_slice(&canvas.data()[row..row + w]);
            right.extend_from_slice(&canvas.data()[row + w..row + w2]);
        }
    }
    Ok((
        Tensor::new(vec![c, h, w], left)?,
        Tensor::new(vec![c, h, w], right)?,
    ))
}

/// Spatial weight map over the target half: 1 everywhere, 1+α where the
/// channel-max absolute difference exceeds τ. Shape [H, W].
pub fn edit_weight_map<T: Scalar>(
    z_s: &Tensor<T>,
    z_t: &Tensor<T>,
    tau: f64,
    alpha: f64,
) -> Result<Tensor<T>> {
    if z_s.shape() != z_t.shape() {
        return Err(Error::shape("weight map needs equal shapes".to_string()));
    }
    if tau < 0.0 || alpha < 0.0 {
        return Err(Error::usage(format!(
            "weight map needs tau >= 0 and alpha >= 0, got tau={tau} alpha={alpha}"
        )));
    }
    let s = z_s.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut max_diff = 0.0f64;
            for ch in 0..c {
                let i = ch * h * w + y * w + x;
                max_diff = max_diff.max((z_t.data()[i] - z_s.data()[i]).to_f64().abs());
            }
            let wv = if max_diff > tau { 1.0 + alpha } else { 1.0 };
            out.push(T::from_f64(wv));
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Weighted squared-error loss over a full canvas prediction, with the
/// source half carrying weight zero: Σ w·(pred − target)² / (C·Σ w),
/// spatial weights broadcast over channels.
pub fn weighted_fm_loss<'g, T: Scalar>(
    g: &'g Graph<T>,
    pred: Var<'g, T>,
    target: &Tensor<T>,
    w_target_half: &Tensor<T>,
) -> Result<Var<'g, T>> {
    let s = pred.shape();
    if s.len() != 3 || s[2] % 2 != 0 {
        return Err(Error::shape(format!("expected canvas prediction, got {s:?}")));
    }
    if target.shape() != s.as_slice() {
        return Err(Error::shape("prediction and target shapes differ".to_string()));
    }
    let (c, h, w2) = (s[0], s[1], s[2]);
    let w = w2 / 2;
    if w_target_half.shape() != [h, w] {
        return Err(Error::shape(format!(
            "weight map must be [{h}, {w}], got {:?}",
            w_target_half.shape()
        )));
    }
    let w_sum: f64 = w_target_half.data().iter().map(|v| v.to_f64()).sum();
    if w_sum <= 0.0 {
        return Err(Error::usage("weight map sums to zero".to_string()));
    }
    // broadcast the spatial map over channels; zero on the source half
    let mut full = vec![T::zero(); c * h * w2];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                full[ch * h * w2 + y * w2 + w + x] = w_target_half.data()[y * w + x];
            }
        }
    }
    let w_full = g.constant(Tensor::new(vec![c, h, w2], full)?)?;
    let diff = pred.sub(g.constant(target.clone())?)?;
    let weighted = diff.mul(diff)?.mul(w_full)?.sum()?;
    weighted.scale(T::from_f64(1.0 / (c as f64 * w_sum)))
}

/// The training-time canvas at flow time `t`: source half clean regardless
/// of `t`, target half on the linear noise path. Returns (canvas_t,
/// velocity-target canvas).
pub fn edit_training_canvas<T: Scalar>(
    triplet: &EditTriplet<T>,
    eps: &Tensor<T>,
    t: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tt = T::from_f64(t);
    let omt = T::from_f64(1.0 - t);
    let xt_half = eps.zip(&triplet.target, |e, z| omt * e + tt * z)?;
    let v_half = triplet.target.zip(eps, |z, e| z - e)?;
    let canvas_t = build_edit_canvas(&triplet.source, &xt_half)?;
    let v_canvas = build_edit_canvas(&Tensor::zeros(triplet.source.shape().to_vec()), &v_half)?;
    Ok((canvas_t, v_canvas))
}

/// Deterministic synthetic triplet for one task, built on the shapes
/// dataset's single-shape images.
pub fn synth_edit_triplet<T: Scalar>(
    task: EditTask,
    c: usize,
    h: usize,
    w: usize,
    rng: &mut Rng64,
) -> EditTriplet<T> {
    let (dy, dx) = TRANSLATE_OFFSET;
    let sample = loop {
        let s = ToyDataset::Shapes.sample::<T>(c, h, w, rng);
        if task != EditTask::Translate {
            break s;
        }
        // translate needs the shifted mask to stay in bounds
        let mask = s.mask.as_ref().unwrap();
        let fits = mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .all(|(i, _)| i / w + dy < h && i % w + dx < w);
        if fits {
            break s;
        }
    };
    let mask = sample.mask.clone().unwrap();
    let source = sample.latent;
    let fill = if sample.prompt_id == 1 { DISC_FILL } else { RECT_FILL };
    let target = match task {
        EditTask::Noop => source.clone(),
        EditTask::Recolor => {
            // invert the shape intensity, background untouched
            let mut t = source.clone();
            for ch in 0..c {
                for (i, &inside) in mask.iter().enumerate() {
                    if inside {
                        t.data_mut()[ch * h * w + i] = T::from_f64(-fill);
                    }
                }
            }
            t
        }
        EditTask::Remove => {
            let mut t = source.clone();
            for ch in 0..c {
                for (i, &inside) in mask.iter().enumerate() {
                    if inside {
                        t.data_mut()[ch * h * w + i] = T::zero();
                    }
                }
            }
            t
        }
        EditTask::Translate => {
            let mut t = source.clone();
            let shifted: Vec<bool> = (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    y >= dy && x >= dx && mask[(y - dy) * w + (x - dx)]
                })
                .collect();
            for ch in 0..c {
                for i in 0..h * w {
                    let idx = ch * h * w + i;
                    if shifted[i] {
                        t.data_mut()[idx] = T::from_f64(fill);
                    } else if mask[i] {
                        // vacated region becomes fresh background
                        t.data_mut()[idx] = T::from_f64(0.05 * rng.normal());
                    }
                }
            }
            t
        }
    };
    EditTriplet {
        source,
        target,
        instruction_id: task.instruction_id(),
        mask,
    }
}

#[derive(Debug, Clone)]
pub struct EditTrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub tau: f64,
    pub alpha: f64,
    pub p_drop: f64,
    pub t_sampler: TSampler,
    pub tasks: Vec<EditTask>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for EditTrainOptions {
    fn default() -> Self {
        EditTrainOptions {
            steps: 100,
            batch_size: 4,
            lr: 1e-3,
            warmup_steps: 0,
            tau: EDIT_TAU,
            alpha: EDIT_ALPHA,
            p_drop: 0.1,
            t_sampler: TSampler::Uniform,
            tasks: EditTask::ALL.to_vec(),
            metrics_path: None,
        }
    }
}

/// Fine-tune a pre-trained model on synthetic edit triplets. The model's
/// configured height/width set the per-half resolution; the canvas the
/// model actually sees is twice as wide.
pub fn edit_train<T: Scalar>(
    model: &SparseDiT<T>,
    encoder: &EncoderStub<T>,
    opts: &EditTrainOptions,
    rng: &mut Rng64,
) -> Result<Vec<MetricsRow>> {
    if opts.tasks.is_empty() {
        return Err(Error::config("edit training needs at least one task"));
    }
    let params = model.named_params();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: opts.lr,
            warmup_steps: opts.warmup_steps,
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
    let (c, h, w) = (model.cfg.in_channels, model.cfg.height, model.cfg.width);
    let mut rows = Vec::new();
    for step in 1..=opts.steps {
        zero_grads(&params);
        let mut loss_sum = 0.0;
        let mut aux_sum = 0.0;
        for _ in 0..opts.batch_size {
            let task = opts.tasks[rng.below(opts.tasks.len())];
            let triplet = synth_edit_triplet::<T>(task, c, h, w, rng);
            let t = opts.t_sampler.draw(rng);
            let eps = Tensor::randn(vec![c, h, w], 1.0, rng);
            let (canvas_t, v_canvas) = edit_training_canvas(&triplet, &eps, t)?;
            let w_map = edit_weight_map(&triplet.source, &triplet.target, opts.tau, opts.alpha)?;
            let bundle = if rng.coin(opts.p_drop) {
                encoder.null()
            } else {
                encoder.encode(triplet.instruction_id)
            };
            let g = Graph::new();
            let x = g.constant(canvas_t)?;
            let out = model.forward(&g, x, &bundle, t, Mode::Train)?;
            let loss = weighted_fm_loss(&g, out.velocity, &v_canvas, &w_map)?;
            let total = loss.add(out.aux_loss)?;
            g.backward_scaled(total, T::from_f64(1.0 / opts.batch_size as f64))?;
            loss_sum += loss.item().to_f64();
            aux_sum += out.aux_loss.item().to_f64();
        }
        let loss = loss_sum / opts.batch_size as f64;
        let aux_loss = aux_sum / opts.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::TrainAbort {
                step,
                reason: format!("non-finite edit loss {loss}"),
                dump_path: "(none)".to_string(),
            });
        }
        let lr = opt.step(&params);
        let row = MetricsRow {
            step,
            loss,
            lr,
            aux_loss,
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.csv_line())?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Per-edit evaluation record; change statistics are mean absolute pixel
/// deltas between the edited output and the source, split by the mask.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EditRecord {
    pub instruction_id: u64,
    pub change_inside: f64,
    pub change_outside: f64,
}

pub fn change_stats<T: Scalar>(
    z_s: &Tensor<T>,
    edited: &Tensor<T>,
    mask: &[bool],
) -> Result<(f64, f64)> {
    if z_s.shape() != edited.shape() {
        return Err(Error::shape("change stats need equal shapes".to_string()));
    }
    let s = z_s.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    if mask.len() != hw {
        return Err(Error::shape("mask length mismatch".to_string()));
    }
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for ch in 0..c {
        for (i, &inside) in mask.iter().enumerate() {
            let d = (edited.data()[ch * hw + i] - z_s.data()[ch * hw + i])
                .to_f64()
                .abs();
            if inside {
                in_sum += d;
                in_n += 1;
            } else {
                out_sum += d;
                out_n += 1;
            }
        }
    }
    Ok((
        if in_n > 0 { in_sum / in_n as f64 } else { 0.0 },
        if out_n > 0 { out_sum / out_n as f64 } else { 0.0 },
    ))
}

/// Run the trained edit model: Euler sampling on the canvas with the
/// source half clamped back to `z_s` after every step. Returns the edited
/// target half and the final canvas.
pub fn edit_apply<T: Scalar>(
    model: &SparseDiT<T>,
    encoder: &EncoderStub<T>,
    z_s: &Tensor<T>,
    instruction_id: u64,
    steps: usize,
    g_scale: f64,
    rng: &mut Rng64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let noise = Tensor::randn(z_s.shape().to_vec(), 1.0, rng);
    let start = build_edit_canvas(z_s, &noise)?;
    let mut field = ModelField::new(
        model,
        encoder.encode(instruction_id),
        encoder.null(),
        g_scale,
    );
    let s = z_s.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let clamp = |canvas: &mut Tensor<T>, z_s: &Tensor<T>| {
        for ch in 0..c {
            for y in 0..h {
                let dst = ch * h * 2 * w + y * 2 * w;
                let src = ch * h * w + y * w;
                canvas.data_mut()[dst..dst + w].copy_from_slice(&z_s.data()[src..src + w]);
            }
        }
    };
    let final_canvas = euler_integrate(&mut field, start, steps, &mut |_, canvas| {
        clamp(canvas, z_s);
        Ok(())
    })?;
    let (_, edited) = split_canvas(&final_canvas)?;
    Ok((edited, final_canvas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::EncoderStubConfig;
    use crate::dit::DiTConfig;
    use crate::tensor::shared;

    #[test]
    fn canvas_split_inverts_concat() {
        let mut rng = Rng64::new(60);
        let a = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut rng);
        let canvas = build_edit_canvas(&a, &b).unwrap();
        assert_eq!(canvas.shape(), &[2, 3, 8]);
        let (a2, b2) = split_canvas(&canvas).unwrap();
        assert_eq!(a.data(), a2.data());
        assert_eq!(b.data(), b2.data());
    }

    #[test]
    fn weight_map_cases() {
        let z: Tensor<f64> = Tensor::zeros(vec![1, 2, 2]);
        // identical → all ones
        let w = edit_weight_map(&z, &z, 0.1, 4.0).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        // alpha = 0 → ones regardless
        let mut zt = z.clone();
        zt.data_mut()[3] = 5.0;
        let w = edit_weight_map(&z, &zt, 0.1, 0.0).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        // single changed pixel with alpha=4 → 5 there, 1 elsewhere
        let w = edit_weight_map(&z, &zt, 0.1, 4.0).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0, 1.0, 5.0]);
    }

    #[test]
    fn weight_map_support_equals_thresholded_mask() {
        let mut rng = Rng64::new(61);
        let zs = Tensor::<f64>::randn(vec![2, 4, 4], 1.0, &mut rng);
        let zt = Tensor::<f64>::randn(vec![2, 4, 4], 1.0, &mut rng);
        let tau = 0.7;
        let w = edit_weight_map(&zs, &zt, tau, 4.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mut md = 0.0f64;
                for c in 0..2 {
                    md = md.max((zt.data()[c * 16 + y * 4 + x] - zs.data()[c * 16 + y * 4 + x]).abs());
                }
                let boosted = w.data()[y * 4 + x] > 1.0;
                assert_eq!(boosted, md > tau, "({y},{x})");
            }
        }
    }

    #[test]
    fn loss_ignores_source_half_and_normalizes() {
        let mut rng = Rng64::new(62);
        let target = Tensor::<f64>::randn(vec![1, 4, 8], 1.0, &mut rng);
        let w = Tensor::<f64>::ones(vec![4, 4]);
        let pred_t = Tensor::<f64>::randn(vec![1, 4, 8], 1.0, &mut rng);
        let g = Graph::new();
        let pred = g.constant(pred_t.clone()).unwrap();
        let base = weighted_fm_loss(&g, pred, &target, &w).unwrap().item();
        // perturb the source half only → loss unchanged
        let mut perturbed = pred_t.clone();
        for y in 0..4 {
            for x in 0..4 {
                perturbed.data_mut()[y * 8 + x] += 17.0;
            }
        }
        let p2 = g.constant(perturbed).unwrap();
        let same = weighted_fm_loss(&g, p2, &target, &w).unwrap().item();
        assert_eq!(base, same);
        // uniform weights reduce to the plain target-half mean square
        let (_, pr) = split_canvas(&pred_t).unwrap();
        let (_, tr) = split_canvas(&target).unwrap();
        let reference = crate::flow::fm_loss(&pr, &tr).unwrap();
        assert!((base - reference).abs() < 1e-12);
        // doubling all weights leaves the loss unchanged
        let w2 = w.scale(2.0);
        let p3 = g.constant(pred_t.clone()).unwrap();
        let doubled = weighted_fm_loss(&g, p3, &target, &w2).unwrap().item();
        assert!((base - doubled).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_ratio_is_one_plus_alpha() {
        // equal pointwise error at a boosted and an unboosted position →
        // gradient ratio (1+α):1
        let c = 1;
        let (h, w) = (2usize, 2usize);
        let mut zs: Tensor<f64> = Tensor::zeros(vec![c, h, w]);
        let mut zt: Tensor<f64> = Tensor::zeros(vec![c, h, w]);
        zt.data_mut()[0] = 1.0; // changed position (0,0)
        let _ = &mut zs;
        let w_map = edit_weight_map(&zs, &zt, 0.1, 4.0).unwrap();
        assert_eq!(w_map.data(), &[5.0, 1.0, 1.0, 1.0]);
        let target = build_edit_canvas(&zs, &zt).unwrap();
        // prediction off by +1 everywhere on the target half
        let pred_right = zt.map(|v| v + 1.0);
        let pred_canvas = build_edit_canvas(&zs, &pred_right).unwrap();
        let leaf = shared(pred_canvas);
        let g = Graph::new();
        let pred = g.param(&leaf).unwrap();
        let loss = weighted_fm_loss(&g, pred, &target, &w_map).unwrap();
        g.backward(loss).unwrap();
        let grad = leaf.borrow().grad.clone().unwrap();
        // target-half positions in the canvas: x in 2..4
        let g_changed = grad[0 * 4 + 2]; // (0,0) of target half
        let g_plain = grad[0 * 4 + 3]; // (0,1) of target half
        assert!(g_plain != 0.0);
        let ratio = g_changed / g_plain;
        assert!((ratio - 5.0).abs() < 1e-9, "ratio {ratio}");
        // and source-half gradient is exactly zero
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let g = Graph::new();
        let t: Tensor<f64> = Tensor::zeros(vec![1, 2, 4]);
        let pred = g.constant(t.clone()).unwrap();
        let w = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(weighted_fm_loss(&g, pred, &t, &w).is_err());
    }

    #[test]
    fn triplet_constructive_properties() {
        let mut rng = Rng64::new(63);
        for _ in 0..30 {
            // recolor: changed set equals the mask exactly
            let tr = synth_edit_triplet::<f64>(EditTask::Recolor, 1, 8, 8, &mut rng);
            for (i, &inside) in tr.mask.iter().enumerate() {
                let changed = tr.source.data()[i] != tr.target.data()[i];
                assert_eq!(changed, inside, "recolor pixel {i}");
            }
            // no-op: identical
            let no = synth_edit_triplet::<f64>(EditTask::Noop, 1, 8, 8, &mut rng);
            assert_eq!(no.source.data(), no.target.data());
            // remove: zero mass inside the old mask
            let rm = synth_edit_triplet::<f64>(EditTask::Remove, 1, 8, 8, &mut rng);
            for (i, &inside) in rm.mask.iter().enumerate() {
                if inside {
                    assert_eq!(rm.target.data()[i], 0.0);
                }
            }
            // translate: shape mass moved by the fixed offset
            let tl = synth_edit_triplet::<f64>(EditTask::Translate, 1, 8, 8, &mut rng);
            let (dy, dx) = TRANSLATE_OFFSET;
            let fill = tl.source.data()[tl.mask.iter().position(|&b| b).unwrap()];
            for (i, &inside) in tl.mask.iter().enumerate() {
                if inside {
                    let (y, x) = (i / 8, i % 8);
                    assert_eq!(tl.target.data()[(y + dy) * 8 + (x + dx)], fill);
                }
            }
        }
    }

    #[test]
    fn training_canvas_source_half_is_t_invariant() {
        let mut rng = Rng64::new(64);
        let triplet = synth_edit_triplet::<f64>(EditTask::Recolor, 1, 8, 8, &mut rng);
        let eps = Tensor::randn(vec![1, 8, 8], 1.0, &mut rng);
        let mut sources = Vec::new();
        for &t in &[0.0, 0.25, 0.5, 0.99] {
            let (canvas, _) = edit_training_canvas(&triplet, &eps, t).unwrap();
            let (src, _) = split_canvas(&canvas).unwrap();
            sources.push(src);
        }
        for s in &sources[1..] {
            assert_eq!(s.data(), sources[0].data());
        }
        // endpoints of the target half
        let (c0, v) = edit_training_canvas(&triplet, &eps, 0.0).unwrap();
        let (_, right0) = split_canvas(&c0).unwrap();
        assert_eq!(right0.data(), eps.data());
        let (_, vright) = split_canvas(&v).unwrap();
        for i in 0..vright.numel() {
            assert_eq!(vright.data()[i], triplet.target.data()[i] - eps.data()[i]);
        }
    }

    #[test]
    fn edit_apply_clamps_source_and_matches_shape() {
        let cfg = DiTConfig {
            d: 8,
            n_heads: 2,
            l_dual: 1,
            l_single: 1,
            n_experts: 2,
            top_k: 1,
            expert_hidden: 16,
            height: 8,
            width: 8,
            ..Default::default()
        };
        let model = SparseDiT::<f64>::new(cfg, 65).unwrap();
        let enc = EncoderStub::new(EncoderStubConfig {
            d: 8,
            m_seq: 2,
            m_llm: 2,
            ..Default::default()
        })
        .unwrap();
        let mut rng = Rng64::new(66);
        let triplet = synth_edit_triplet::<f64>(EditTask::Recolor, 1, 8, 8, &mut rng);
        let (edited, canvas) = edit_apply(
            &model,
            &enc,
            &triplet.source,
            EditTask::Recolor.instruction_id(),
            4,
            1.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(edited.shape(), triplet.source.shape());
        let (src, _) = split_canvas(&canvas).unwrap();
        assert_eq!(src.data(), triplet.source.data());
    }

    #[test]
    fn edit_train_smoke_runs() {
        let cfg = DiTConfig {
            d: 8,
            n_heads: 2,
            l_dual: 1,
            l_single: 1,
            n_experts: 2,
            top_k: 1,
            expert_hidden: 16,
            height: 8,
            width: 8,
            ..Default::default()
        };
        let model = SparseDiT::<f64>::new(cfg, 67).unwrap();
        let enc = EncoderStub::new(EncoderStubConfig {
            d: 8,
            m_seq: 2,
            m_llm: 2,
            ..Default::default()
        })
        .unwrap();
        let rows = edit_train(
            &model,
            &enc,
            &EditTrainOptions {
                steps: 2,
                batch_size: 2,
                ..Default::default()
            },
            &mut Rng64::new(68),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.loss.is_finite()));
    }
}
