//! Foreground extraction by iterated GMM fitting and exact graph cuts,
//! followed by background blurring.
//!
//! The working state is a trimap: pixels outside the seed rectangle are
//! pinned background, pixels inside start as probable foreground. Each outer
//! iteration refits the two color mixtures on the current partition, builds
//! the pixel flow network from the Gibbs energy, solves an exact min-cut and
//! relabels the probable pixels. The energy is non-increasing across
//! iterations: the mixtures are warm-started (EM never worsens the data
//! term) and the cut is exact.

mod gmm;
mod graph;

pub use gmm::{data_term, fit_gmm, sym_eigen3, GmmFit, GmmModel, Mat3, Vec3};
pub use graph::FlowNetwork;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-pixel segmentation state. Hard labels are pinned in the cut; probable
/// labels are re-estimated each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    HardBg,
    HardFg,
    ProbBg,
    ProbFg,
}

impl Label {
    pub fn is_fg(self) -> bool {
        matches!(self, Label::HardFg | Label::ProbFg)
    }

    pub fn is_hard(self) -> bool {
        matches!(self, Label::HardFg | Label::HardBg)
    }
}

/// Label map with the extents of its image.
#[derive(Debug, Clone)]
pub struct Trimap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Label>,
}

impl Trimap {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "trimap {width}×{height} expects {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if labels.iter().all(|l| *l == Label::HardBg) {
            return Err(Error::Param("trimap needs at least one non-HardBG pixel".into()));
        }
        Ok(Self { width, height, labels })
    }

    /// Seed initialization: inside the rectangle probable foreground,
    /// outside pinned background.
    pub fn from_seed(width: usize, height: usize, seed: &Rect) -> Result<Self> {
        seed.validate(width, height)?;
        let mut labels = vec![Label::HardBg; width * height];
        for y in seed.y..seed.y + seed.h {
            for x in seed.x..seed.x + seed.w {
                labels[y * width + x] = Label::ProbFg;
            }
        }
        Trimap::new(width, height, labels)
    }
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub fg: Vec<bool>,
}

impl Mask {
    pub fn fg_count(&self) -> usize {
        self.fg.iter().filter(|&&b| b).count()
    }

    /// Intersection over union with another mask of the same extents.
    pub fn iou(&self, other: &Mask) -> f64 {
        debug_assert_eq!(self.fg.len(), other.fg.len());
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.fg.iter().zip(&other.fg) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Axis-aligned seed rectangle (pixel units, inclusive origin).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    /// Centered rectangle covering `frac` of each dimension.
    pub fn centered_fraction(width: usize, height: usize, frac: f64) -> Rect {
        let w = ((width as f64 * frac).round() as usize).clamp(1, width.saturating_sub(1).max(1));
        let h = ((height as f64 * frac).round() as usize).clamp(1, height.saturating_sub(1).max(1));
        Rect { x: (width - w) / 2, y: (height - h) / 2, w, h }
    }

    fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Param("seed rectangle must have positive area".into()));
        }
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::Param(format!(
                "seed rectangle {self:?} exceeds image {width}×{height}"
            )));
        }
        if self.w * self.h >= width * height {
            return Err(Error::Param("seed rectangle must be strictly inside the image".into()));
        }
        Ok(())
    }
}

/// Tuning knobs with the classic GrabCut defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct GrabMaskParams {
    /// GMM components per color model.
    pub components: usize,
    /// Smoothness strength γ.
    pub gamma: f64,
    /// Outer refit/cut iterations.
    pub outer_iters: usize,
    /// EM iterations per mixture fit.
    pub em_iters: usize,
    /// Background blur σ in pixels at a 32-pixel image side; scaled linearly
    /// with the actual side.
    pub blur_sigma: f64,
    /// Covariance eigenvalue floor ε.
    pub variance_floor: f64,
    /// Fraction of each dimension covered by the auto seed rectangle.
    pub seed_frac: f64,
}

impl Default for GrabMaskParams {
    fn default() -> Self {
        Self {
            components: 5,
            gamma: 50.0,
            outer_iters: 5,
            em_iters: 10,
            blur_sigma: 4.0,
            variance_floor: 1e-4,
            seed_frac: 0.6,
        }
    }
}

impl GrabMaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Param("components must be ≥ 1".into()));
        }
        if self.outer_iters == 0 {
            return Err(Error::Param("outer_iters must be ≥ 1".into()));
        }
        if self.em_iters == 0 {
            return Err(Error::Param("em_iters must be ≥ 1".into()));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("blur_sigma", self.blur_sigma),
            ("variance_floor", self.variance_floor),
            ("seed_frac", self.seed_frac),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.seed_frac >= 1.0 {
            return Err(Error::Param(format!("seed_frac must be < 1, got {}", self.seed_frac)));
        }
        Ok(())
    }

    /// Blur σ for an image side, anchored at 32 px.
    pub fn blur_sigma_for(&self, side: usize) -> f64 {
        self.blur_sigma * side as f64 / 32.0
    }
}

/// Segmentation output: final mask, per-iteration Gibbs energies, and
/// whether the degenerate-input fallback fired.
#[derive(Debug, Clone)]
pub struct SegmentResult {
    pub mask: Mask,
    pub energies: Vec<f64>,
    pub fallback: bool,
}

fn pixel_vec(img: &Image, idx: usize) -> Vec3 {
    let o = idx * 3;
    [img.pixels[o] as f64, img.pixels[o + 1] as f64, img.pixels[o + 2] as f64]
}

/// Neighbor offsets covering each 8-connected pair once: E, S, SE, SW.
const PAIR_OFFSETS: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

fn for_each_pair(width: usize, height: usize, mut f: impl FnMut(usize, usize)) {
    for y in 0..height {
        for x in 0..width {
            for (dx, dy) in PAIR_OFFSETS {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && (nx as usize) < width && ny >= 0 && (ny as usize) < height {
                    f(y * width + x, ny as usize * width + nx as usize);
                }
            }
        }
    }
}

/// Mean of ‖z_i − z_j‖² over all 8-neighbor pairs, floored at 1e-8 so a
/// constant image still yields a usable σ².
pub fn estimate_sigma2(img: &Image) -> Result<f64> {
    if img.pixel_count() < 2 {
        return Err(Error::Param("σ² estimation needs at least 2 pixels".into()));
    }
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for_each_pair(img.width, img.height, |i, j| {
        let (a, b) = (pixel_vec(img, i), pixel_vec(img, j));
        let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        total += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        pairs += 1;
    });
    Ok((total / pairs as f64).max(1e-8))
}

/// γ·exp(−‖z_i−z_j‖² / 2σ²). The label indicator of the pairwise term is
/// realized by the cut construction: the weight is charged only across it.
pub fn smoothness_weight(zi: Vec3, zj: Vec3, gamma: f64, sigma2: f64) -> f64 {
    debug_assert!(sigma2 > 0.0);
    let d = [zi[0] - zj[0], zi[1] - zj[1], zi[2] - zj[2]];
    let dist2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    gamma * (-dist2 / (2.0 * sigma2)).exp()
}

/// Assembles the pixel flow network: data-term t-links for probable pixels,
/// `1 + Σ capacities` pins for hard pixels, smoothness n-links on the
/// 8-neighborhood.
pub fn build_graph(
    img: &Image,
    trimap: &Trimap,
    fg: &GmmModel,
    bg: &GmmModel,
    params: &GrabMaskParams,
) -> Result<FlowNetwork> {
    if trimap.width != img.width || trimap.height != img.height {
        return Err(Error::Shape(format!(
            "trimap {}×{} does not match image {}×{}",
            trimap.width, trimap.height, img.width, img.height
        )));
    }
    let n = img.pixel_count();
    let mut net = FlowNetwork::new(n);

    if n > 1 {
        let sigma2 = estimate_sigma2(img)?;
        let mut edges = Vec::new();
        for_each_pair(img.width, img.height, |i, j| edges.push((i, j)));
        for (i, j) in edges {
            let w = smoothness_weight(pixel_vec(img, i), pixel_vec(img, j), params.gamma, sigma2);
            net.add_nlink(i, j, w)?;
        }
    }

    for i in 0..n {
        if !trimap.labels[i].is_hard() {
            let z = pixel_vec(img, i);
            // source side pays when the pixel is cut to background
            net.set_tlink(i, data_term(bg, z), data_term(fg, z))?;
        }
    }

    let big = 1.0 + net.capacity_sum();
    for i in 0..n {
        match trimap.labels[i] {
            Label::HardFg => net.set_tlink(i, big, 0.0)?,
            Label::HardBg => net.set_tlink(i, 0.0, big)?,
            _ => {}
        }
    }
    Ok(net)
}

/// Segmentation objective: Σ_i D(y_i) + Σ_{8-neighbors} V·𝕀[y_i≠y_j].
pub fn gibbs_energy(
    labels: &[bool],
    img: &Image,
    fg: &GmmModel,
    bg: &GmmModel,
    params: &GrabMaskParams,
) -> Result<f64> {
    if labels.len() != img.pixel_count() {
        return Err(Error::Shape(format!(
            "labeling has {} entries for {} pixels",
            labels.len(),
            img.pixel_count()
        )));
    }
    let mut e = 0.0f64;
    for (i, &is_fg) in labels.iter().enumerate() {
        let z = pixel_vec(img, i);
        e += if is_fg { data_term(fg, z) } else { data_term(bg, z) };
    }
    if img.pixel_count() > 1 {
        let sigma2 = estimate_sigma2(img)?;
        for_each_pair(img.width, img.height, |i, j| {
            if labels[i] != labels[j] {
                e += smoothness_weight(pixel_vec(img, i), pixel_vec(img, j), params.gamma, sigma2);
            }
        });
    }
    Ok(e)
}

fn seed_interior_mask(width: usize, height: usize, seed: &Rect) -> Mask {
    let mut fg = vec![false; width * height];
    for y in seed.y..seed.y + seed.h {
        for x in seed.x..seed.x + seed.w {
            fg[y * width + x] = true;
        }
    }
    Mask { width, height, fg }
}

/// Iterated segmentation from a seed rectangle. Degenerate inputs (constant
/// image, an emptied side of the partition) fall back to the seed interior
/// with `fallback = true`.
pub fn grabcut_segment(
    img: &Image,
    seed: &Rect,
    params: &GrabMaskParams,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentResult> {
    params.validate()?;
    seed.validate(img.width, img.height)?;
    let mut trimap = Trimap::from_seed(img.width, img.height, seed)?;
    let n = img.pixel_count();

    let fallback = |energies: Vec<f64>| SegmentResult {
        mask: seed_interior_mask(img.width, img.height, seed),
        energies,
        fallback: true,
    };

    let first = pixel_vec(img, 0);
    if (0..n).all(|i| pixel_vec(img, i) == first) {
        return Ok(fallback(Vec::new()));
    }

    let mut fg_model: Option<GmmModel> = None;
    let mut bg_model: Option<GmmModel> = None;
    let mut energies = Vec::with_capacity(params.outer_iters);

    for _ in 0..params.outer_iters {
        let fg_pixels: Vec<Vec3> = (0..n)
            .filter(|&i| trimap.labels[i].is_fg())
            .map(|i| pixel_vec(img, i))
            .collect();
        let bg_pixels: Vec<Vec3> = (0..n)
            .filter(|&i| !trimap.labels[i].is_fg())
            .map(|i| pixel_vec(img, i))
            .collect();
        if fg_pixels.len() < params.components || bg_pixels.len() < params.components {
            return Ok(fallback(energies));
        }

        fg_model = Some(
            fit_gmm(
                &fg_pixels,
                params.components,
                params.em_iters,
                params.variance_floor,
                fg_model.as_ref(),
                rng,
            )?
            .model,
        );
        bg_model = Some(
            fit_gmm(
                &bg_pixels,
                params.components,
                params.em_iters,
                params.variance_floor,
                bg_model.as_ref(),
                rng,
            )?
            .model,
        );
        let (fg, bg) = (fg_model.as_ref().unwrap(), bg_model.as_ref().unwrap());

        let net = build_graph(img, &trimap, fg, bg, params)?;
        let labels = net.min_cut();
        for i in 0..n {
            if !trimap.labels[i].is_hard() {
                trimap.labels[i] = if labels[i] { Label::ProbFg } else { Label::ProbBg };
            }
        }
        let binary: Vec<bool> = trimap.labels.iter().map(|l| l.is_fg()).collect();
        energies.push(gibbs_energy(&binary, img, fg, bg, params)?);
    }

    let fg: Vec<bool> = trimap.labels.iter().map(|l| l.is_fg()).collect();
    if fg.iter().all(|&b| !b) {
        return Ok(fallback(energies));
    }
    Ok(SegmentResult {
        mask: Mask { width: img.width, height: img.height, fg },
        energies,
        fallback: false,
    })
}

/// Background-blurred composite: foreground pixels are copied bit-exactly,
/// background pixels come from a separable Gaussian blur of the whole image
/// (kernel radius ⌈3σ⌉, edges clamped).
pub fn apply_mask_blur(img: &Image, mask: &Mask, blur_sigma: f64) -> Result<Image> {
    if mask.width != img.width || mask.height != img.height {
        return Err(Error::Shape(format!(
            "mask {}×{} does not match image {}×{}",
            mask.width, mask.height, img.width, img.height
        )));
    }
    if blur_sigma <= 0.0 || !blur_sigma.is_finite() {
        return Err(Error::Param(format!("blur_sigma must be positive, got {blur_sigma}")));
    }
    let mut out = gaussian_blur(img, blur_sigma);
    for (i, &is_fg) in mask.fg.iter().enumerate() {
        if is_fg {
            out.pixels[i * 3..i * 3 + 3].copy_from_slice(&img.pixels[i * 3..i * 3 + 3]);
        }
    }
    Ok(out)
}

/// Separable Gaussian with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let (w, h) = (img.width, img.height);
    let mut horiz = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                let o = (y * w + sx) * 3;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kv * img.pixels[o + c] as f64;
                }
            }
            let o = (y * w + x) * 3;
            horiz[o..o + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                let o = (sy * w + x) * 3;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kv * horiz[o + c];
                }
            }
            let o = (y * w + x) * 3;
            for (c, a) in acc.iter().enumerate() {
                out[o + c] = a.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image { width: w, height: h, pixels: out }
}
