//! The network assembly: feature extractor, classifier, conditional
//! discriminator and DAE on the student side; an EMA teacher carrying
//! copies of the extractor and classifier.
//!
//! Forward passes run on a fresh tape per call. Student parameters are
//! bound with their names so gradients can be routed back; teacher and
//! evaluation passes bind everything as constants, so nothing the teacher
//! touches is ever recorded for backward.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dae::{self, CorruptionSpec, DaeParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{glorot_bound, he_bound, ops, uniform_param, Tape, Tensor, Var};

/// Architecture description; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub num_classes: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub feature_dim: usize,
    pub disc_hidden: usize,
    pub dropout: f32,
}

impl ModelConfig {
    pub fn new(image_side: usize, num_classes: usize) -> Self {
        Self {
            image_side,
            num_classes,
            conv1_filters: 16,
            conv2_filters: 32,
            kernel: 3,
            feature_dim: 128,
            disc_hidden: 64,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 || self.image_side % 4 != 0 {
            return Err(Error::Param(format!(
                "image side must be a multiple of 4 and ≥ 8, got {}",
                self.image_side
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Param(format!("need ≥ 2 classes, got {}", self.num_classes)));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Param(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout must lie in [0,1), got {}", self.dropout)));
        }
        for (name, v) in [
            ("conv1_filters", self.conv1_filters),
            ("conv2_filters", self.conv2_filters),
            ("feature_dim", self.feature_dim),
            ("disc_hidden", self.disc_hidden),
        ] {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be ≥ 1")));
            }
        }
        Ok(())
    }

    /// Flattened extractor dimension after two 2×2 pools.
    pub fn flat_dim(&self) -> usize {
        let s = self.image_side / 4;
        self.conv2_filters * s * s
    }

    /// DAE bottleneck: half the feature width.
    pub fn dae_hidden(&self) -> usize {
        (self.feature_dim / 2).max(1)
    }

    /// Discriminator input width after conditioning.
    pub fn conditioned_dim(&self) -> usize {
        self.feature_dim * self.num_classes
    }
}

/// Trainable student: extractor g, classifier C, discriminator D, DAE.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub cfg: ModelConfig,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub disc_w1: Tensor,
    pub disc_b1: Tensor,
    pub disc_w2: Tensor,
    pub disc_b2: Tensor,
    pub dae: DaeParams,
}

/// Gradient-free copy of the extractor and classifier, updated by EMA.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub cfg: ModelConfig,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl StudentModel {
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let (f1, f2) = (cfg.conv1_filters, cfg.conv2_filters);
        // He-style bounds (√6/fan_in) for the ReLU trunk so activations keep
        // their scale through the pools; small output layers keep the
        // initial losses near their symmetric values (ln K for C, ln 2 for D).
        let conv1_bound = he_bound(3 * k * k);
        let conv2_bound = he_bound(f1 * k * k);
        let fc_bound = he_bound(cfg.flat_dim());
        let cls_bound = glorot_bound(cfg.feature_dim, cfg.num_classes, 0.1);
        let d1_bound = he_bound(cfg.conditioned_dim());
        let d2_bound = glorot_bound(cfg.disc_hidden, 2, 0.1);
        Ok(Self {
            conv1_w: uniform_param(vec![f1, 3, k, k], conv1_bound, rng),
            conv1_b: Tensor::zeros(vec![f1]).with_grad(),
            conv2_w: uniform_param(vec![f2, f1, k, k], conv2_bound, rng),
            conv2_b: Tensor::zeros(vec![f2]).with_grad(),
            fc_w: uniform_param(vec![cfg.flat_dim(), cfg.feature_dim], fc_bound, rng),
            fc_b: Tensor::zeros(vec![cfg.feature_dim]).with_grad(),
            cls_w: uniform_param(vec![cfg.feature_dim, cfg.num_classes], cls_bound, rng),
            cls_b: Tensor::zeros(vec![cfg.num_classes]).with_grad(),
            disc_w1: uniform_param(vec![cfg.conditioned_dim(), cfg.disc_hidden], d1_bound, rng),
            disc_b1: Tensor::zeros(vec![cfg.disc_hidden]).with_grad(),
            disc_w2: uniform_param(vec![cfg.disc_hidden, 2], d2_bound, rng),
            disc_b2: Tensor::zeros(vec![2]).with_grad(),
            dae: DaeParams::init(cfg.feature_dim, cfg.dae_hidden(), rng)?,
            cfg,
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("g.conv1.w", &self.conv1_w),
            ("g.conv1.b", &self.conv1_b),
            ("g.conv2.w", &self.conv2_w),
            ("g.conv2.b", &self.conv2_b),
            ("g.fc.w", &self.fc_w),
            ("g.fc.b", &self.fc_b),
            ("cls.w", &self.cls_w),
            ("cls.b", &self.cls_b),
            ("disc.fc1.w", &self.disc_w1),
            ("disc.fc1.b", &self.disc_b1),
            ("disc.fc2.w", &self.disc_w2),
            ("disc.fc2.b", &self.disc_b2),
            ("dae.enc.w", &self.dae.enc_w),
            ("dae.enc.b", &self.dae.enc_b),
            ("dae.dec.w", &self.dae.dec_w),
            ("dae.dec.b", &self.dae.dec_b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("g.conv1.w", &mut self.conv1_w),
            ("g.conv1.b", &mut self.conv1_b),
            ("g.conv2.w", &mut self.conv2_w),
            ("g.conv2.b", &mut self.conv2_b),
            ("g.fc.w", &mut self.fc_w),
            ("g.fc.b", &mut self.fc_b),
            ("cls.w", &mut self.cls_w),
            ("cls.b", &mut self.cls_b),
            ("disc.fc1.w", &mut self.disc_w1),
            ("disc.fc1.b", &mut self.disc_b1),
            ("disc.fc2.w", &mut self.disc_w2),
            ("disc.fc2.b", &mut self.disc_b2),
            ("dae.enc.w", &mut self.dae.enc_w),
            ("dae.enc.b", &mut self.dae.enc_b),
            ("dae.dec.w", &mut self.dae.dec_w),
            ("dae.dec.b", &mut self.dae.dec_b),
        ]
    }
}

impl TeacherModel {
    /// Initial teacher: a parameter copy of the student's g and C.
    pub fn from_student(s: &StudentModel) -> Self {
        Self {
            cfg: s.cfg.clone(),
            conv1_w: s.conv1_w.clone(),
            conv1_b: s.conv1_b.clone(),
            conv2_w: s.conv2_w.clone(),
            conv2_b: s.conv2_b.clone(),
            fc_w: s.fc_w.clone(),
            fc_b: s.fc_b.clone(),
            cls_w: s.cls_w.clone(),
            cls_b: s.cls_b.clone(),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("g.conv1.w", &self.conv1_w),
            ("g.conv1.b", &self.conv1_b),
            ("g.conv2.w", &self.conv2_w),
            ("g.conv2.b", &self.conv2_b),
            ("g.fc.w", &self.fc_w),
            ("g.fc.b", &self.fc_b),
            ("cls.w", &self.cls_w),
            ("cls.b", &self.cls_b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("g.conv1.w", &mut self.conv1_w),
            ("g.conv1.b", &mut self.conv1_b),
            ("g.conv2.w", &mut self.conv2_w),
            ("g.conv2.b", &mut self.conv2_b),
            ("g.fc.w", &mut self.fc_w),
            ("g.fc.b", &mut self.fc_b),
            ("cls.w", &mut self.cls_w),
            ("cls.b", &mut self.cls_b),
        ]
    }
}

/// Converts decoded images into one centered `[N×3×S×S]` batch tensor
/// (channels shifted to [−0.5, 0.5]).
pub fn batch_to_tensor(images: &[&Image], side: usize) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Usage("empty image batch".into()));
    }
    let n = images.len();
    let mut data = vec![0.0f32; n * 3 * side * side];
    for (b, img) in images.iter().enumerate() {
        if img.width != side || img.height != side {
            return Err(Error::Shape(format!(
                "image is {}×{}, expected {side}×{side}",
                img.width, img.height
            )));
        }
        for y in 0..side {
            for x in 0..side {
                let rgb = img.rgb(x, y);
                for c in 0..3 {
                    data[((b * 3 + c) * side + y) * side + x] = rgb[c] - 0.5;
                }
            }
        }
    }
    Tensor::new(vec![n, 3, side, side], data)
}

/// Tape handles for the extractor + classifier parameters.
pub struct BoundClassifier {
    conv1_w: Var,
    conv1_b: Var,
    conv2_w: Var,
    conv2_b: Var,
    fc_w: Var,
    fc_b: Var,
    cls_w: Var,
    cls_b: Var,
    dropout: f32,
}

/// Binds the student's g and C as named trainable parameters.
pub fn bind_student_classifier(tape: &mut Tape, m: &StudentModel) -> Result<BoundClassifier> {
    Ok(BoundClassifier {
        conv1_w: tape.param("g.conv1.w", &m.conv1_w)?,
        conv1_b: tape.param("g.conv1.b", &m.conv1_b)?,
        conv2_w: tape.param("g.conv2.w", &m.conv2_w)?,
        conv2_b: tape.param("g.conv2.b", &m.conv2_b)?,
        fc_w: tape.param("g.fc.w", &m.fc_w)?,
        fc_b: tape.param("g.fc.b", &m.fc_b)?,
        cls_w: tape.param("cls.w", &m.cls_w)?,
        cls_b: tape.param("cls.b", &m.cls_b)?,
        dropout: m.cfg.dropout,
    })
}

/// Binds a teacher's g and C as constants; nothing is recorded for backward.
pub fn bind_teacher_classifier(tape: &mut Tape, m: &TeacherModel) -> BoundClassifier {
    BoundClassifier {
        conv1_w: tape.input_tensor(&m.conv1_w),
        conv1_b: tape.input_tensor(&m.conv1_b),
        conv2_w: tape.input_tensor(&m.conv2_w),
        conv2_b: tape.input_tensor(&m.conv2_b),
        fc_w: tape.input_tensor(&m.fc_w),
        fc_b: tape.input_tensor(&m.fc_b),
        cls_w: tape.input_tensor(&m.cls_w),
        cls_b: tape.input_tensor(&m.cls_b),
        dropout: m.cfg.dropout,
    }
}

/// Binds the student's g and C as constants (evaluation, embedding export).
pub fn bind_frozen_classifier(tape: &mut Tape, m: &StudentModel) -> BoundClassifier {
    BoundClassifier {
        conv1_w: tape.input_tensor(&m.conv1_w),
        conv1_b: tape.input_tensor(&m.conv1_b),
        conv2_w: tape.input_tensor(&m.conv2_w),
        conv2_b: tape.input_tensor(&m.conv2_b),
        fc_w: tape.input_tensor(&m.fc_w),
        fc_b: tape.input_tensor(&m.fc_b),
        cls_w: tape.input_tensor(&m.cls_w),
        cls_b: tape.input_tensor(&m.cls_b),
        dropout: m.cfg.dropout,
    }
}

/// g: conv-ReLU-pool ×2, flatten, linear to the feature width. Deterministic
/// (no dropout in the extractor).
pub fn extract_features(tape: &mut Tape, b: &BoundClassifier, images: Var) -> Result<Var> {
    let c1 = ops::conv2d(tape, images, b.conv1_w, b.conv1_b, 1, 1)?;
    let r1 = ops::relu(tape, c1);
    let p1 = ops::mean_pool2(tape, r1)?;
    let c2 = ops::conv2d(tape, p1, b.conv2_w, b.conv2_b, 1, 1)?;
    let r2 = ops::relu(tape, c2);
    let p2 = ops::mean_pool2(tape, r2)?;
    let flat = ops::flatten(tape, p2);
    ops::linear(tape, flat, b.fc_w, b.fc_b)
}

/// C: dropout (training only) then an affine map to class logits.
pub fn classify(
    tape: &mut Tape,
    b: &BoundClassifier,
    features: Var,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let x = ops::dropout(tape, features, b.dropout, training, rng)?;
    ops::linear(tape, x, b.cls_w, b.cls_b)
}

/// Multilinear conditioning: row-wise `features ⊗ probs`, flattened.
pub fn condition_features(tape: &mut Tape, features: Var, probs: Var) -> Result<Var> {
    ops::outer_condition(tape, features, probs)
}

pub struct BoundDiscriminator {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub fn bind_student_discriminator(tape: &mut Tape, m: &StudentModel) -> Result<BoundDiscriminator> {
    Ok(BoundDiscriminator {
        w1: tape.param("disc.fc1.w", &m.disc_w1)?,
        b1: tape.param("disc.fc1.b", &m.disc_b1)?,
        w2: tape.param("disc.fc2.w", &m.disc_w2)?,
        b2: tape.param("disc.fc2.b", &m.disc_b2)?,
    })
}

/// D behind the reversal layer: identity forward, −λ gradient into the
/// conditioned features; domain logits out (source = 1, target = 0).
pub fn discriminate(
    tape: &mut Tape,
    d: &BoundDiscriminator,
    conditioned: Var,
    grl_lambda: f32,
) -> Result<Var> {
    let rev = ops::gradient_reversal(tape, conditioned, grl_lambda);
    let h = ops::linear(tape, rev, d.w1, d.b1)?;
    let h = ops::relu(tape, h);
    ops::linear(tape, h, d.w2, d.b2)
}

pub struct BoundDae {
    enc_w: Var,
    enc_b: Var,
    dec_w: Var,
    dec_b: Var,
}

pub fn bind_student_dae(tape: &mut Tape, m: &StudentModel) -> Result<BoundDae> {
    Ok(BoundDae {
        enc_w: tape.param("dae.enc.w", &m.dae.enc_w)?,
        enc_b: tape.param("dae.enc.b", &m.dae.enc_b)?,
        dec_w: tape.param("dae.dec.w", &m.dae.dec_w)?,
        dec_b: tape.param("dae.dec.b", &m.dae.dec_b)?,
    })
}

/// Everything one student pass produces for a batch.
pub struct StudentForward {
    pub features: Var,
    pub logits_orig: Var,
    /// Present when the reconstruction branch is enabled.
    pub recon_features: Option<Var>,
    pub logits_recon: Option<Var>,
    pub recon_loss: Option<Var>,
}

/// Full student pass: extract, optionally corrupt→encode→decode against the
/// detached clean features, and classify both feature sets with the shared
/// classifier. The reconstruction target is detached so the only gradient
/// path into g from the reconstruction loss runs through the corrupted copy.
#[allow(clippy::too_many_arguments)]
pub fn student_forward(
    tape: &mut Tape,
    m: &StudentModel,
    images: &Tensor,
    training: bool,
    with_dae: bool,
    corruption: &CorruptionSpec,
    dropout_rng: &mut ChaCha8Rng,
    corrupt_rng: &mut ChaCha8Rng,
) -> Result<StudentForward> {
    let bound = bind_student_classifier(tape, m)?;
    let x = tape.input_tensor(images);
    let features = extract_features(tape, &bound, x)?;
    let logits_orig = classify(tape, &bound, features, training, dropout_rng)?;

    if !with_dae {
        return Ok(StudentForward {
            features,
            logits_orig,
            recon_features: None,
            logits_recon: None,
            recon_loss: None,
        });
    }

    let dae_bound = bind_student_dae(tape, m)?;
    let corrupted = dae::corrupt(tape, features, corruption, corrupt_rng)?;
    let latent = dae::encode(tape, corrupted, dae_bound.enc_w, dae_bound.enc_b)?;
    let recon = dae::decode(tape, latent, dae_bound.dec_w, dae_bound.dec_b)?;
    let clean_target = ops::detach(tape, features);
    let recon_loss = dae::reconstruction_loss(tape, clean_target, recon)?;
    let logits_recon = classify(tape, &bound, recon, training, dropout_rng)?;

    Ok(StudentForward {
        features,
        logits_orig,
        recon_features: Some(recon),
        logits_recon: Some(logits_recon),
        recon_loss: Some(recon_loss),
    })
}

/// Row-wise argmax with ties broken toward the lowest class index.
pub fn argmax_rows(logits: &[f32], rows: usize, classes: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    out
}

/// Teacher logits on unmasked images: dropout off, nothing recorded.
pub fn teacher_logits(teacher: &TeacherModel, images: &Tensor) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = bind_teacher_classifier(&mut tape, teacher);
    let x = tape.input_tensor(images);
    let features = extract_features(&mut tape, &bound, x)?;
    // dropout is identity when not training; rng is never touched
    let mut unused = crate::rng::stream(0, "teacher-inference", 0);
    let logits = classify(&mut tape, &bound, features, false, &mut unused)?;
    debug_assert_eq!(tape.param_names().count(), 0, "teacher pass must not register params");
    Ok(tape.value(logits).to_vec())
}

/// Argmax pseudo-labels from the teacher on unmasked target images.
pub fn teacher_pseudo_labels(teacher: &TeacherModel, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let logits = teacher_logits(teacher, images)?;
    Ok(argmax_rows(&logits, n, teacher.cfg.num_classes))
}

/// Pseudo-labels plus a per-row confidence gate: `keep[i]` is true when the
/// teacher's softmax peak reaches `threshold`.
pub fn teacher_pseudo_labels_thresholded(
    teacher: &TeacherModel,
    images: &Tensor,
    threshold: f32,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let n = images.shape()[0];
    let k = teacher.cfg.num_classes;
    let logits = teacher_logits(teacher, images)?;
    let labels = argmax_rows(&logits, n, k);
    let mut keep = Vec::with_capacity(n);
    for r in 0..n {
        let row = &logits[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        keep.push((1.0 / z) >= threshold as f64);
    }
    Ok((labels, keep))
}

/// t ← α·t + (1−α)·s elementwise over the teacher's extractor and
/// classifier parameters.
pub fn ema_update(teacher: &mut TeacherModel, student: &StudentModel, alpha: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("EMA alpha must lie in [0,1], got {alpha}")));
    }
    let student_params = student.named_params();
    for (name, t) in teacher.named_params_mut() {
        let (_, s) = student_params
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::State(format!("student lacks parameter {name}")))?;
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "EMA extents differ for {name}: {:?} vs {:?}",
                t.shape(),
                s.shape()
            )));
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
