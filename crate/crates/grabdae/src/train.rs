//! The optimization loop: supervised source classification, self-training
//! against EMA-teacher pseudo-labels on masked targets, feature
//! reconstruction, and conditional domain-adversarial alignment — one SGD
//! step over the weighted sum per batch pair.
//!
//! Every stochastic choice draws from a purpose-named stream
//! (`dropout-src`, `corrupt-tgt`, `shuffle-src`, …), so disabling one loss
//! cannot shift the randomness seen by another: zeroing a λ is bit-exactly
//! equivalent to removing its branch.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use crate::dae::CorruptionSpec;
use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::codec::{decode_ppm, encode_ppm};
use crate::data::dataset::DomainDataset;
use crate::error::{Error, Result};
use crate::grabmask::{apply_mask_blur, grabcut_segment, GrabMaskParams, Rect};
use crate::image::Image;
use crate::model::{
    batch_to_tensor, bind_frozen_classifier, bind_student_discriminator, condition_features,
    discriminate, ema_update, extract_features, student_forward, teacher_pseudo_labels,
    teacher_pseudo_labels_thresholded, ModelConfig, StudentForward, StudentModel, TeacherModel,
};
use crate::nn::{ops, SgdOptimizer, Tape, Tensor, Var};
use crate::rng::stream;

/// Full training configuration; parsed from flat JSON by
/// [`crate::data::config::parse_train_config`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_s: f32,
    pub lambda_re: f32,
    pub lambda_d: f32,
    pub grl_lambda: f32,
    pub ema_alpha: f32,
    pub seed: u64,
    pub dropout: f32,
    pub corrupt_v_min: f32,
    pub corrupt_v_max: f32,
    pub corrupt_sigma: f32,
    /// Confidence gate for pseudo-labels; ships disabled.
    pub pseudo_label_threshold: Option<f32>,
    pub feature_dim: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub disc_hidden: usize,
    pub mask: GrabMaskParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 30,
            lambda_s: 1.0,
            lambda_re: 1.0,
            lambda_d: 1.0,
            grl_lambda: 1.0,
            ema_alpha: 0.99,
            seed: 0,
            dropout: 0.5,
            corrupt_v_min: 0.1,
            corrupt_v_max: 0.5,
            corrupt_sigma: 1.0,
            pseudo_label_threshold: None,
            feature_dim: 128,
            conv1_filters: 16,
            conv2_filters: 32,
            disc_hidden: 64,
            mask: GrabMaskParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn corruption(&self) -> CorruptionSpec {
        CorruptionSpec {
            v_min: self.corrupt_v_min,
            v_max: self.corrupt_v_max,
            noise_sigma: self.corrupt_sigma,
        }
    }

    pub fn model_config(&self, image_side: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            image_side,
            num_classes,
            conv1_filters: self.conv1_filters,
            conv2_filters: self.conv2_filters,
            kernel: 3,
            feature_dim: self.feature_dim,
            disc_hidden: self.disc_hidden,
            dropout: self.dropout,
        }
    }

    fn uses_dae(&self) -> bool {
        self.lambda_re > 0.0
    }

    fn uses_target(&self) -> bool {
        self.lambda_s > 0.0 || self.lambda_re > 0.0 || self.lambda_d > 0.0
    }
}

/// Per-step loss components; `total = L_cls + λ_s·L_s + λ_re·L_re + λ_D·L_D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_s: f64,
    pub l_re: f64,
    pub l_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn check_finite(&self) -> Result<()> {
        for (component, v) in [
            ("L_cls", self.l_cls),
            ("L_s", self.l_s),
            ("L_re", self.l_re),
            ("L_D", self.l_d),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component });
            }
        }
        Ok(())
    }
}

/// A labeled source batch, already decoded and packed.
pub struct SourceBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// A target batch: raw images for the teacher, masked images for the student.
pub struct TargetBatch {
    pub raw: Tensor,
    pub masked: Tensor,
}

/// Mean of the cross-entropies of the original and (when present) the
/// reconstructed classification paths.
pub fn classification_loss(
    tape: &mut Tape,
    fwd: &StudentForward,
    labels: &[usize],
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Usage("classification needs a labeled batch".into()));
    }
    let ce_orig = ops::softmax_cross_entropy(tape, fwd.logits_orig, labels)?;
    match fwd.logits_recon {
        Some(logits_recon) => {
            let ce_recon = ops::softmax_cross_entropy(tape, logits_recon, labels)?;
            ops::weighted_sum(tape, &[(ce_orig, 0.5), (ce_recon, 0.5)])
        }
        None => Ok(ce_orig),
    }
}

/// Cross-entropy of the student's masked-image predictions against teacher
/// pseudo-labels. Returns `None` when a confidence threshold removed every
/// row. No gradient reaches the teacher: its logits never touch the tape.
pub fn self_supervised_loss(
    tape: &mut Tape,
    masked_fwd: &StudentForward,
    teacher: &TeacherModel,
    raw_images: &Tensor,
    threshold: Option<f32>,
) -> Result<Option<Var>> {
    if raw_images.shape()[0] != tape.shape(masked_fwd.logits_orig)[0] {
        return Err(Error::Usage(format!(
            "raw and masked target batches are misaligned: {} vs {} rows",
            raw_images.shape()[0],
            tape.shape(masked_fwd.logits_orig)[0]
        )));
    }
    match threshold {
        None => {
            let pseudo = teacher_pseudo_labels(teacher, raw_images)?;
            Ok(Some(ops::softmax_cross_entropy(tape, masked_fwd.logits_orig, &pseudo)?))
        }
        Some(t) => {
            let (pseudo, keep) = teacher_pseudo_labels_thresholded(teacher, raw_images, t)?;
            let rows: Vec<usize> = keep
                .iter()
                .enumerate()
                .filter_map(|(i, &k)| if k { Some(i) } else { None })
                .collect();
            if rows.is_empty() {
                return Ok(None);
            }
            let kept_labels: Vec<usize> = rows.iter().map(|&i| pseudo[i]).collect();
            let kept_logits = ops::select_rows(tape, masked_fwd.logits_orig, &rows)?;
            Ok(Some(ops::softmax_cross_entropy(tape, kept_logits, &kept_labels)?))
        }
    }
}

/// Domain cross-entropy over every available feature set (original and
/// reconstructed, from both domains), each conditioned on its own class
/// probabilities and pushed through the reversal layer into D.
/// Domain labels: source = 1, target = 0.
pub fn domain_adversarial_loss(
    tape: &mut Tape,
    student: &StudentModel,
    src_fwd: &StudentForward,
    tgt_fwd: &StudentForward,
    grl_lambda: f32,
) -> Result<Var> {
    let disc = bind_student_discriminator(tape, student)?;
    let mut terms: Vec<(Var, f32)> = Vec::new();
    let mut sets: Vec<(Var, Var, usize)> = Vec::new(); // (features, logits, domain label)
    sets.push((src_fwd.features, src_fwd.logits_orig, 1));
    if let (Some(f), Some(l)) = (src_fwd.recon_features, src_fwd.logits_recon) {
        sets.push((f, l, 1));
    }
    sets.push((tgt_fwd.features, tgt_fwd.logits_orig, 0));
    if let (Some(f), Some(l)) = (tgt_fwd.recon_features, tgt_fwd.logits_recon) {
        sets.push((f, l, 0));
    }
    let count = sets.len() as f32;
    for (features, logits, domain) in sets {
        let n = tape.shape(features)[0];
        if n == 0 {
            return Err(Error::Usage("domain loss needs non-empty batches".into()));
        }
        let probs = ops::softmax(tape, logits)?;
        let cond = condition_features(tape, features, probs)?;
        let dlogits = discriminate(tape, &disc, cond, grl_lambda)?;
        let ce = ops::softmax_cross_entropy(tape, dlogits, &vec![domain; n])?;
        terms.push((ce, 1.0 / count));
    }
    ops::weighted_sum(tape, &terms)
}

/// One optimization step over a source batch and (when any unsupervised λ
/// is active) a target batch: forward, total loss, backward, SGD, EMA.
pub fn train_step(
    student: &mut StudentModel,
    teacher: &mut TeacherModel,
    opt: &mut SgdOptimizer,
    source: &SourceBatch,
    target: Option<&TargetBatch>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    let corruption = cfg.corruption();
    let with_dae = cfg.uses_dae();
    let mut tape = Tape::new();

    let mut drop_src = stream(cfg.seed, "dropout-src", step);
    let mut corr_src = stream(cfg.seed, "corrupt-src", step);
    let src_fwd = student_forward(
        &mut tape, student, &source.images, true, with_dae, &corruption, &mut drop_src,
        &mut corr_src,
    )?;
    let l_cls = classification_loss(&mut tape, &src_fwd, &source.labels)?;

    let mut recon_terms: Vec<(Var, f32)> = Vec::new();
    if let Some(r) = src_fwd.recon_loss {
        recon_terms.push((r, 1.0));
    }

    let tgt_fwd = match (cfg.uses_target(), target) {
        (true, Some(batch)) => {
            let mut drop_tgt = stream(cfg.seed, "dropout-tgt", step);
            let mut corr_tgt = stream(cfg.seed, "corrupt-tgt", step);
            let fwd = student_forward(
                &mut tape, student, &batch.masked, true, with_dae, &corruption, &mut drop_tgt,
                &mut corr_tgt,
            )?;
            if let Some(r) = fwd.recon_loss {
                recon_terms.push((r, 1.0));
            }
            Some(fwd)
        }
        (true, None) => {
            return Err(Error::Usage(
                "unsupervised losses are enabled but no target batch was provided".into(),
            ))
        }
        (false, _) => None,
    };

    let l_s = match (&tgt_fwd, target) {
        (Some(fwd), Some(batch)) if cfg.lambda_s > 0.0 => self_supervised_loss(
            &mut tape,
            fwd,
            teacher,
            &batch.raw,
            cfg.pseudo_label_threshold,
        )?,
        _ => None,
    };

    let l_re = if with_dae && !recon_terms.is_empty() {
        let w = 1.0 / recon_terms.len() as f32;
        let terms: Vec<(Var, f32)> = recon_terms.iter().map(|&(v, _)| (v, w)).collect();
        Some(ops::weighted_sum(&mut tape, &terms)?)
    } else {
        None
    };

    let l_d = match &tgt_fwd {
        Some(fwd) if cfg.lambda_d > 0.0 => {
            Some(domain_adversarial_loss(&mut tape, student, &src_fwd, fwd, cfg.grl_lambda)?)
        }
        _ => None,
    };

    let mut terms: Vec<(Var, f32)> = vec![(l_cls, 1.0)];
    if let Some(v) = l_s {
        terms.push((v, cfg.lambda_s));
    }
    if let Some(v) = l_re {
        terms.push((v, cfg.lambda_re));
    }
    if let Some(v) = l_d {
        terms.push((v, cfg.lambda_d));
    }
    let total = ops::weighted_sum(&mut tape, &terms)?;

    let breakdown = LossBreakdown {
        l_cls: tape.scalar_value(l_cls) as f64,
        l_s: l_s.map(|v| tape.scalar_value(v) as f64).unwrap_or(0.0),
        l_re: l_re.map(|v| tape.scalar_value(v) as f64).unwrap_or(0.0),
        l_d: l_d.map(|v| tape.scalar_value(v) as f64).unwrap_or(0.0),
        total: tape.scalar_value(total) as f64,
    };
    breakdown.check_finite()?;

    // Teacher parameters must never be trainable state on the tape.
    let student_names: Vec<&str> = student.named_params().iter().map(|(n, _)| *n).collect();
    for name in tape.param_names() {
        assert!(student_names.contains(&name), "unexpected tape parameter {name}");
    }

    let grads = tape.backward(total)?;
    // Only the branches that ran this step have parameters on the tape;
    // disabled branches receive no update (not even weight decay), exactly
    // as if they were absent from the model.
    let mut params: Vec<(&str, &mut Tensor)> = student
        .named_params_mut()
        .into_iter()
        .filter(|(name, _)| grads.get(name).is_some())
        .map(|(name, t)| (name, t))
        .collect();
    opt.step(&mut params, &grads)?;
    ema_update(teacher, student, cfg.ema_alpha)?;
    Ok(breakdown)
}

/// In-memory decoded dataset.
pub struct LoadedImages {
    pub images: Vec<Image>,
    pub labels: Vec<Option<usize>>,
    pub class_names: Vec<String>,
}

impl LoadedImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        !self.images.is_empty() && self.labels.iter().all(|l| l.is_some())
    }
}

/// Decodes every sample of a dataset into memory.
pub fn load_images(ds: &DomainDataset) -> Result<LoadedImages> {
    let mut images = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for sample in &ds.samples {
        let bytes = fs::read(&sample.path)?;
        images.push(decode_ppm(&bytes)?);
        labels.push(sample.label);
    }
    Ok(LoadedImages { images, labels, class_names: ds.class_names.clone() })
}

fn mask_cache_name(ds_root: &Path, sample_path: &Path) -> String {
    let rel = sample_path.strip_prefix(ds_root).unwrap_or(sample_path);
    rel.to_string_lossy().replace(['/', '\\'], "__")
}

fn path_stream_index(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Computes (or reads back) the masked version of every target image.
/// Masking is a pure function of (image bytes, seed), cached on disk as PPM;
/// the returned images always round-trip through the cached encoding so a
/// warm cache and a cold run see identical data.
pub fn precompute_masked_targets(
    target: &DomainDataset,
    raw: &LoadedImages,
    params: &GrabMaskParams,
    seed: u64,
    cache_dir: &Path,
) -> Result<Vec<Image>> {
    fs::create_dir_all(cache_dir)?;
    let entries: Vec<(usize, String)> = target
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i, mask_cache_name(&target.root, &s.path)))
        .collect();

    let results: Vec<Result<Image>> = entries
        .par_iter()
        .map(|(i, name)| {
            let cache_path = cache_dir.join(name);
            if let Ok(bytes) = fs::read(&cache_path) {
                return decode_ppm(&bytes);
            }
            let img = &raw.images[*i];
            let bytes = mask_one_image(img, params, seed, name)?;
            fs::write(&cache_path, &bytes)?;
            decode_ppm(&bytes)
        })
        .collect();
    results.into_iter().collect()
}

/// Segments and blurs one image, returning the encoded PPM bytes.
pub fn mask_one_image(
    img: &Image,
    params: &GrabMaskParams,
    seed: u64,
    cache_name: &str,
) -> Result<Vec<u8>> {
    let mut rng = stream(seed, "mask", path_stream_index(cache_name));
    let rect = Rect::centered_fraction(img.width, img.height, params.seed_frac);
    let result = grabcut_segment(img, &rect, params, &mut rng)?;
    let masked = apply_mask_blur(img, &result.mask, params.blur_sigma_for(img.width.max(img.height)))?;
    Ok(encode_ppm(&masked))
}

/// Accuracy per class plus their unweighted mean. Classes absent from the
/// dataset are listed with count 0 and excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_class_counts: Vec<usize>,
    pub per_class_accuracy: Vec<f64>,
    pub average_accuracy: f64,
}

/// Builds the report from prediction/label pairs.
pub fn report_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    class_names: &[String],
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let k = class_names.len();
    let mut counts = vec![0usize; k];
    let mut hits = vec![0usize; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= k {
            return Err(Error::Index(format!("label {l} out of range for {k} classes")));
        }
        counts[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let mut acc = vec![0.0f64; k];
    let mut sum = 0.0f64;
    let mut present = 0usize;
    for c in 0..k {
        if counts[c] > 0 {
            acc[c] = 100.0 * hits[c] as f64 / counts[c] as f64;
            sum += acc[c];
            present += 1;
        }
    }
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        per_class_counts: counts,
        per_class_accuracy: acc,
        average_accuracy: if present > 0 { sum / present as f64 } else { 0.0 },
    })
}

/// Student predictions on a set of images, dropout off, nothing recorded.
pub fn predict(student: &StudentModel, images: &[Image]) -> Result<Vec<usize>> {
    let side = student.cfg.image_side;
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let batch = batch_to_tensor(&refs, side)?;
        let mut tape = Tape::new();
        let bound = bind_frozen_classifier(&mut tape, student);
        let x = tape.input_tensor(&batch);
        let feats = extract_features(&mut tape, &bound, x)?;
        let mut unused = stream(0, "eval", 0);
        let logits = crate::model::classify(&mut tape, &bound, feats, false, &mut unused)?;
        preds.extend(crate::model::argmax_rows(
            tape.value(logits),
            chunk.len(),
            student.cfg.num_classes,
        ));
    }
    Ok(preds)
}

/// Teacher-free, dropout-off evaluation on unmasked labeled images.
pub fn evaluate(student: &StudentModel, data: &LoadedImages) -> Result<EvalReport> {
    if !data.has_labels() {
        return Err(Error::Usage("evaluation needs a labeled dataset".into()));
    }
    let labels: Vec<usize> = data.labels.iter().map(|l| l.expect("checked")).collect();
    let preds = predict(student, &data.images)?;
    report_from_predictions(&preds, &labels, &data.class_names)
}

/// Feature-vector export: one TSV row per sample with the domain tag, label
/// (−1 when unlabeled) and the extractor output.
pub fn export_embeddings(
    student: &StudentModel,
    data: &LoadedImages,
    domain_tag: &str,
    out_path: &Path,
) -> Result<()> {
    let side = student.cfg.image_side;
    let mut out = String::new();
    for (img, label) in data.images.iter().zip(&data.labels) {
        let batch = batch_to_tensor(&[img], side)?;
        let mut tape = Tape::new();
        let bound = bind_frozen_classifier(&mut tape, student);
        let x = tape.input_tensor(&batch);
        let feats = extract_features(&mut tape, &bound, x)?;
        out.push_str(domain_tag);
        out.push('\t');
        out.push_str(&label.map(|l| l as i64).unwrap_or(-1).to_string());
        for v in tape.value(feats) {
            out.push('\t');
            out.push_str(&format!("{v:.6e}"));
        }
        out.push('\n');
    }
    fs::write(out_path, out)?;
    Ok(())
}

/// Checkpoint names are the model's parameter names under `student.` and
/// `teacher.` prefixes.
pub fn save_models(
    path: &Path,
    student: &StudentModel,
    teacher: &TeacherModel,
    class_names: &[String],
) -> Result<()> {
    let meta = json!({
        "config": serde_json::to_value(&student.cfg)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        "class_names": class_names,
    });
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (n, t) in student.named_params() {
        named.push((format!("student.{n}"), t));
    }
    for (n, t) in teacher.named_params() {
        named.push((format!("teacher.{n}"), t));
    }
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    save_checkpoint(path, &meta, &refs)
}

pub fn load_models(path: &Path) -> Result<(StudentModel, TeacherModel, Vec<String>)> {
    let data = load_checkpoint(path)?;
    let cfg: ModelConfig = serde_json::from_value(
        data.meta.get("config").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| Error::Checkpoint(format!("bad model config in checkpoint: {e}")))?;
    let class_names: Vec<String> = serde_json::from_value(
        data.meta.get("class_names").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| Error::Checkpoint(format!("bad class names in checkpoint: {e}")))?;

    let mut init_rng = stream(0, "checkpoint-load", 0);
    let mut student = StudentModel::init(cfg.clone(), &mut init_rng)?;
    let mut teacher = TeacherModel::from_student(&student);

    let mut expected: Vec<String> = Vec::new();
    for (n, _) in student.named_params() {
        expected.push(format!("student.{n}"));
    }
    for (n, _) in teacher.named_params() {
        expected.push(format!("teacher.{n}"));
    }
    for (name, _) in &data.params {
        if !expected.contains(name) {
            return Err(Error::Checkpoint(format!("unknown parameter name {name}")));
        }
    }

    let fill = |prefix: &str, params: Vec<(&'static str, &mut Tensor)>| -> Result<()> {
        for (n, t) in params {
            let full = format!("{prefix}.{n}");
            let loaded = data
                .tensor(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {full} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(loaded.data());
        }
        Ok(())
    };
    fill("student", student.named_params_mut())?;
    fill("teacher", teacher.named_params_mut())?;
    Ok((student, teacher, class_names))
}

/// Outcome of a full [`train`] run.
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_eval: Option<EvalReport>,
}

/// Runs `epochs × batches` steps with per-epoch shuffling, one metrics.csv
/// row per epoch, masked-target precomputation and a final checkpoint.
/// Target labels, when present, are used only for the accuracy column.
pub fn train(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    if !source.is_labeled() {
        return Err(Error::Usage("source dataset must be fully labeled".into()));
    }

    // Fail on an unwritable run directory before doing any work.
    fs::create_dir_all(run_dir)?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path)?;
    writeln!(metrics, "epoch,L_cls,L_s,L_re,L_D,total,target_avg_acc")?;

    let source_data = load_images(source)?;
    let target_raw = load_images(target)?;
    let side = source_data.images[0].width;
    for img in source_data.images.iter().chain(&target_raw.images) {
        if img.width != side || img.height != side {
            return Err(Error::Shape(format!(
                "all images must be {side}×{side}; found {}×{}",
                img.width, img.height
            )));
        }
    }

    let masked = if cfg.uses_target() {
        precompute_masked_targets(target, &target_raw, &cfg.mask, cfg.seed, &run_dir.join("masks"))?
    } else {
        Vec::new()
    };

    let num_classes = source_data.class_names.len();
    let model_cfg = cfg.model_config(side, num_classes);
    let mut init_rng = stream(cfg.seed, "init", 0);
    let mut student = StudentModel::init(model_cfg, &mut init_rng)?;
    let mut teacher = TeacherModel::from_student(&student);
    let mut opt = SgdOptimizer::new(cfg.lr, cfg.momentum, cfg.weight_decay, &student.named_params())?;

    let eval_view = if target_raw.has_labels() && target_raw.class_names == source_data.class_names
    {
        Some(&target_raw)
    } else {
        None
    };

    let ns = source_data.len();
    let nt = target_raw.len();
    let batches_src = ns.div_ceil(cfg.batch_size);
    let batches_tgt = if cfg.uses_target() { nt.div_ceil(cfg.batch_size) } else { 0 };
    let steps_per_epoch = batches_src.max(batches_tgt).max(1);

    let mut step: u64 = 0;
    let mut final_eval = None;
    for epoch in 0..cfg.epochs {
        let src_order = shuffled_indices(ns, cfg.seed, "shuffle-src", epoch as u64);
        let tgt_order = shuffled_indices(nt, cfg.seed, "shuffle-tgt", epoch as u64);

        let mut sums = [0.0f64; 5];
        for s in 0..steps_per_epoch {
            let src_batch = gather_source(&source_data, &src_order, s, cfg.batch_size, side)?;
            let tgt_batch = if cfg.uses_target() {
                Some(gather_target(&target_raw, &masked, &tgt_order, s, cfg.batch_size, side)?)
            } else {
                None
            };
            let breakdown = train_step(
                &mut student,
                &mut teacher,
                &mut opt,
                &src_batch,
                tgt_batch.as_ref(),
                cfg,
                step,
            )?;
            sums[0] += breakdown.l_cls;
            sums[1] += breakdown.l_s;
            sums[2] += breakdown.l_re;
            sums[3] += breakdown.l_d;
            sums[4] += breakdown.total;
            step += 1;
        }

        let denom = steps_per_epoch as f64;
        let acc_field = match eval_view {
            Some(view) => {
                let report = evaluate(&student, view)?;
                let field = format!("{:.4}", report.average_accuracy);
                final_eval = Some(report);
                field
            }
            None => String::new(),
        };
        writeln!(
            metrics,
            "{epoch},{:.6},{:.6},{:.6},{:.6},{:.6},{acc_field}",
            sums[0] / denom,
            sums[1] / denom,
            sums[2] / denom,
            sums[3] / denom,
            sums[4] / denom,
        )?;
    }
    metrics.flush()?;

    let checkpoint_path = run_dir.join("checkpoint.gdck");
    save_models(&checkpoint_path, &student, &teacher, &source_data.class_names)?;
    Ok(TrainOutcome { checkpoint_path, metrics_path, final_eval })
}

fn shuffled_indices(n: usize, seed: u64, label: &str, epoch: u64) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, label, epoch);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn gather_source(
    data: &LoadedImages,
    order: &[usize],
    batch_idx: usize,
    batch_size: usize,
    side: usize,
) -> Result<SourceBatch> {
    let idxs = cycle_slice(order, batch_idx, batch_size);
    let images: Vec<&Image> = idxs.iter().map(|&i| &data.images[i]).collect();
    let labels: Vec<usize> = idxs
        .iter()
        .map(|&i| data.labels[i].ok_or_else(|| Error::Usage("unlabeled source sample".into())))
        .collect::<Result<_>>()?;
    Ok(SourceBatch { images: batch_to_tensor(&images, side)?, labels })
}

fn gather_target(
    raw: &LoadedImages,
    masked: &[Image],
    order: &[usize],
    batch_idx: usize,
    batch_size: usize,
    side: usize,
) -> Result<TargetBatch> {
    let idxs = cycle_slice(order, batch_idx, batch_size);
    let raw_refs: Vec<&Image> = idxs.iter().map(|&i| &raw.images[i]).collect();
    let masked_refs: Vec<&Image> = idxs.iter().map(|&i| &masked[i]).collect();
    Ok(TargetBatch {
        raw: batch_to_tensor(&raw_refs, side)?,
        masked: batch_to_tensor(&masked_refs, side)?,
    })
}

/// Indices for batch `batch_idx`, cycling from the start when the epoch of
/// the shorter stream is exhausted.
fn cycle_slice(order: &[usize], batch_idx: usize, batch_size: usize) -> Vec<usize> {
    let n = order.len();
    (0..batch_size.min(n)).map(|k| order[(batch_idx * batch_size + k) % n]).collect()
}
