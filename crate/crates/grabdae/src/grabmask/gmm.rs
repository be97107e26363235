//! Gaussian mixture models over RGB vectors, fitted with EM.
//!
//! Covariances are kept in the constrained family {Σ : eigenvalues ≥ floor}.
//! The M-step maximizes the expected complete log-likelihood *within that
//! family* (eigenvalue clamping is the constrained maximizer), so the
//! per-iteration log-likelihood is non-decreasing even when clusters
//! degenerate to single colors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

const LN_2PI: f64 = 1.8378770664093453;

/// K-component full-covariance mixture with cached inverses and log-dets.
#[derive(Debug, Clone)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<Vec3>,
    covariances: Vec<Mat3>,
    inv_covs: Vec<Mat3>,
    log_norms: Vec<f64>, // −½(3·ln2π + ln det Σ)
    variance_floor: f64,
}

/// Fit result: the model plus the log-likelihood trace, one value per
/// E-step (so `em_iters + 1` entries, the last after the final M-step).
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood: Vec<f64>,
}

impl GmmModel {
    /// Builds a model, clamping covariance eigenvalues to `variance_floor`.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec3>,
        covariances: Vec<Mat3>,
        variance_floor: f64,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::Shape(format!(
                "mixture sizes disagree: {k} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if variance_floor <= 0.0 {
            return Err(Error::Param(format!("variance floor must be positive, got {variance_floor}")));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("weights must be ≥ 0 and sum to 1, got sum {sum}")));
        }
        let mut model = Self {
            weights,
            means,
            covariances,
            inv_covs: vec![[[0.0; 3]; 3]; k],
            log_norms: vec![0.0; k],
            variance_floor,
        };
        for ci in 0..k {
            model.covariances[ci] = clamp_spd(&model.covariances[ci], variance_floor);
            let (inv, log_det) = invert_spd(&model.covariances[ci]);
            model.inv_covs[ci] = inv;
            model.log_norms[ci] = -0.5 * (3.0 * LN_2PI + log_det);
        }
        Ok(model)
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec3] {
        &self.means
    }

    pub fn covariances(&self) -> &[Mat3] {
        &self.covariances
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    /// log Σ_k w_k·N(z; μ_k, Σ_k), via log-sum-exp over active components.
    pub fn log_density(&self, z: Vec3) -> f64 {
        let mut terms = [f64::NEG_INFINITY; 16];
        let mut tmp: Vec<f64>;
        let buf: &mut [f64] = if self.weights.len() <= 16 {
            &mut terms[..self.weights.len()]
        } else {
            tmp = vec![f64::NEG_INFINITY; self.weights.len()];
            &mut tmp
        };
        for (ci, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                buf[ci] = w.ln() + self.log_component_density(ci, z);
            }
        }
        log_sum_exp(buf)
    }

    fn log_component_density(&self, ci: usize, z: Vec3) -> f64 {
        let m = &self.means[ci];
        let d = [z[0] - m[0], z[1] - m[1], z[2] - m[2]];
        let q = quadratic_form(&self.inv_covs[ci], &d);
        self.log_norms[ci] - 0.5 * q
    }
}

/// Negative log mixture density shifted so the theoretical maximum density
/// (a component pinned at the variance floor) maps to zero; clamped at zero
/// so graph capacities stay non-negative.
pub fn data_term(gmm: &GmmModel, z: Vec3) -> f64 {
    // max log density = −3/2·ln(2π·floor); −log p is bounded below by its
    // negation, so adding that bound keeps the term ≥ 0.
    let offset = -1.5 * (2.0 * std::f64::consts::PI * gmm.variance_floor()).ln();
    (-gmm.log_density(z) + offset).max(0.0)
}

/// EM fit of a K-component mixture. `warm_start` continues from an existing
/// model (used by the outer segmentation loop so its energy stays monotone);
/// otherwise means are seeded by distance-weighted sampling.
pub fn fit_gmm(
    pixels: &[Vec3],
    k: usize,
    em_iters: usize,
    variance_floor: f64,
    warm_start: Option<&GmmModel>,
    rng: &mut ChaCha8Rng,
) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::Param("component count must be ≥ 1".into()));
    }
    if pixels.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} pixels cannot support {k} components",
            pixels.len()
        )));
    }
    if variance_floor <= 0.0 {
        return Err(Error::Param(format!("variance floor must be positive, got {variance_floor}")));
    }

    let n = pixels.len();
    let mut model = match warm_start {
        Some(m) if m.component_count() == k => m.clone(),
        _ => init_model(pixels, k, variance_floor, rng)?,
    };

    let mut trace = Vec::with_capacity(em_iters + 1);
    let mut resp = vec![0.0f64; n * k];
    for _ in 0..em_iters {
        trace.push(e_step(&model, pixels, &mut resp));
        model = m_step(pixels, &resp, k, variance_floor, &model)?;
    }
    trace.push(e_step(&model, pixels, &mut resp));
    Ok(GmmFit { model, log_likelihood: trace })
}

/// Responsibilities + total log-likelihood.
fn e_step(model: &GmmModel, pixels: &[Vec3], resp: &mut [f64]) -> f64 {
    let k = model.component_count();
    let mut ll = 0.0f64;
    let mut logs = vec![f64::NEG_INFINITY; k];
    for (i, &z) in pixels.iter().enumerate() {
        for ci in 0..k {
            logs[ci] = if model.weights[ci] > 0.0 {
                model.weights[ci].ln() + model.log_component_density(ci, z)
            } else {
                f64::NEG_INFINITY
            };
        }
        let lse = log_sum_exp(&logs);
        ll += lse;
        for ci in 0..k {
            resp[i * k + ci] = (logs[ci] - lse).exp();
        }
    }
    ll
}

fn m_step(
    pixels: &[Vec3],
    resp: &[f64],
    k: usize,
    variance_floor: f64,
    previous: &GmmModel,
) -> Result<GmmModel> {
    let n = pixels.len();
    let mut weights = vec![0.0f64; k];
    let mut means = vec![[0.0f64; 3]; k];
    let mut covs = vec![[[0.0f64; 3]; 3]; k];

    for ci in 0..k {
        let mut nk = 0.0f64;
        let mut sum = [0.0f64; 3];
        for (i, z) in pixels.iter().enumerate() {
            let r = resp[i * k + ci];
            nk += r;
            sum[0] += r * z[0];
            sum[1] += r * z[1];
            sum[2] += r * z[2];
        }
        if nk <= 1e-12 {
            // Dead component: keep its previous shape with zero weight.
            weights[ci] = 0.0;
            means[ci] = previous.means[ci];
            covs[ci] = previous.covariances[ci];
            continue;
        }
        weights[ci] = nk / n as f64;
        let mean = [sum[0] / nk, sum[1] / nk, sum[2] / nk];
        means[ci] = mean;
        let mut scatter = [[0.0f64; 3]; 3];
        for (i, z) in pixels.iter().enumerate() {
            let r = resp[i * k + ci];
            if r == 0.0 {
                continue;
            }
            let d = [z[0] - mean[0], z[1] - mean[1], z[2] - mean[2]];
            for a in 0..3 {
                for b in a..3 {
                    scatter[a][b] += r * d[a] * d[b];
                }
            }
        }
        for a in 0..3 {
            for b in a..3 {
                let v = scatter[a][b] / nk;
                covs[ci][a][b] = v;
                covs[ci][b][a] = v;
            }
        }
    }

    // Renormalize against accumulated rounding so the weight invariant holds.
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    GmmModel::new(weights, means, covs, variance_floor)
}

/// Distance-weighted seeding: first mean uniform, then proportional to the
/// squared distance from the nearest chosen mean.
fn init_model(
    pixels: &[Vec3],
    k: usize,
    variance_floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GmmModel> {
    let n = pixels.len();
    let mut means: Vec<Vec3> = Vec::with_capacity(k);
    means.push(pixels[rng.random_range(0..n)]);
    let mut d2 = vec![0.0f64; n];
    while means.len() < k {
        let last = *means.last().expect("non-empty");
        let mut total = 0.0f64;
        for (i, z) in pixels.iter().enumerate() {
            let d = dist2(z, &last);
            if means.len() == 1 || d < d2[i] {
                d2[i] = d;
            }
            total += d2[i];
        }
        let next = if total <= 0.0 {
            pixels[rng.random_range(0..n)]
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            pixels[chosen]
        };
        means.push(next);
    }

    // Global covariance as the shared starting shape.
    let mut mean = [0.0f64; 3];
    for z in pixels {
        for a in 0..3 {
            mean[a] += z[a];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut cov = [[0.0f64; 3]; 3];
    for z in pixels {
        let d = [z[0] - mean[0], z[1] - mean[1], z[2] - mean[2]];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += d[a] * d[b];
            }
        }
    }
    for row in cov.iter_mut() {
        row.iter_mut().for_each(|v| *v /= n as f64);
    }

    GmmModel::new(vec![1.0 / k as f64; k], means, vec![cov; k], variance_floor)
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn quadratic_form(m: &Mat3, d: &Vec3) -> f64 {
    let mut q = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            q += d[a] * m[a][b] * d[b];
        }
    }
    q
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvector columns).
pub fn sym_eigen3(a: &Mat3) -> (Vec3, Mat3) {
    let mut m = *a;
    let mut v: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
        if off < 1e-30 {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if m[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // Apply the rotation G(p,q,θ) on both sides.
            let mut g = [[0.0f64; 3]; 3];
            for i in 0..3 {
                g[i][i] = 1.0;
            }
            g[p][p] = c;
            g[q][q] = c;
            g[p][q] = s;
            g[q][p] = -s;
            m = mat_mul(&mat_mul(&transpose(&g), &m), &g);
            v = mat_mul(&v, &g);
            m[p][q] = 0.0;
            m[q][p] = 0.0;
        }
    }
    ([m[0][0], m[1][1], m[2][2]], v)
}

/// Nearest member of {Σ : eigenvalues ≥ floor}: clamp the spectrum.
fn clamp_spd(a: &Mat3, floor: f64) -> Mat3 {
    let (vals, vecs) = sym_eigen3(a);
    if vals.iter().all(|&l| l >= floor) {
        // Return the symmetrized original to avoid eigen round-trip noise.
        let mut s = *a;
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] = 0.5 * (a[i][j] + a[j][i]);
            }
        }
        return s;
    }
    let clamped = [vals[0].max(floor), vals[1].max(floor), vals[2].max(floor)];
    let mut out = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for (e, &l) in clamped.iter().enumerate() {
                s += vecs[i][e] * l * vecs[j][e];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Inverse and log-determinant of an SPD 3×3 via its adjugate.
fn invert_spd(a: &Mat3) -> (Mat3, f64) {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    debug_assert!(det > 0.0, "covariance must be positive definite, det {det}");
    let inv_det = 1.0 / det;
    let mut inv = [[0.0f64; 3]; 3];
    inv[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_det;
    inv[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_det;
    inv[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_det;
    inv[1][0] = inv[0][1];
    inv[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_det;
    inv[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_det;
    inv[2][0] = inv[0][2];
    inv[2][1] = inv[1][2];
    inv[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_det;
    (inv, det.ln())
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    const FLOOR: f64 = 1e-4;

    #[test]
    fn identical_pixels_hit_variance_floor() {
        let c = [0.3f64, 0.6, 0.9];
        let pixels = vec![c; 100];
        let mut rng = stream(1, "gmm", 0);
        let fit = fit_gmm(&pixels, 1, 10, FLOOR, None, &mut rng).unwrap();
        let m = &fit.model;
        for a in 0..3 {
            assert!((m.means()[0][a] - c[a]).abs() < 1e-12);
            for b in 0..3 {
                let expect = if a == b { FLOOR } else { 0.0 };
                assert!((m.covariances()[0][a][b] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separable_clusters_recover_closed_form_means() {
        let mut pixels = vec![[0.0f64; 3]; 100];
        pixels.extend(vec![[1.0f64; 3]; 100]);
        let mut rng = stream(2, "gmm", 0);
        let fit = fit_gmm(&pixels, 2, 10, FLOOR, None, &mut rng).unwrap();
        let mut means: Vec<f64> = fit.model.means().iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!(means[0].abs() < 1e-3, "low mean {}", means[0]);
        assert!((means[1] - 1.0).abs() < 1e-3, "high mean {}", means[1]);
    }

    #[test]
    fn log_likelihood_trace_is_non_decreasing() {
        let mut rng = stream(3, "gmm", 0);
        for case in 0..20 {
            let mut data_rng = stream(3, "gmm-data", case);
            let n = 50 + (case as usize * 13) % 150;
            let pixels: Vec<Vec3> = (0..n)
                .map(|_| {
                    use rand::Rng;
                    let c = data_rng.random_range(0..3) as f64 * 0.4;
                    [
                        c + data_rng.random_range(-0.1..0.1),
                        c + data_rng.random_range(-0.1..0.1),
                        data_rng.random_range(0.0..1.0),
                    ]
                })
                .collect();
            let k = 1 + (case as usize) % 4;
            let fit = fit_gmm(&pixels, k, 8, FLOOR, None, &mut rng).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "case {case}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn fewer_pixels_than_components_errors() {
        let mut rng = stream(4, "gmm", 0);
        let pixels = vec![[0.0f64; 3]; 3];
        assert!(matches!(
            fit_gmm(&pixels, 4, 5, FLOOR, None, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn data_term_minimal_at_mean_over_grid() {
        let model = GmmModel::new(
            vec![1.0],
            vec![[0.5, 0.5, 0.5]],
            vec![[[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.01]]],
            FLOOR,
        )
        .unwrap();
        let at_mean = data_term(&model, [0.5, 0.5, 0.5]);
        let steps = 8;
        for i in 0..=steps {
            for j in 0..=steps {
                for l in 0..=steps {
                    let z = [
                        i as f64 / steps as f64,
                        j as f64 / steps as f64,
                        l as f64 / steps as f64,
                    ];
                    assert!(data_term(&model, z) >= at_mean);
                }
            }
        }
        // far tail exceeds the value at any mean
        assert!(data_term(&model, [0.0, 0.0, 0.0]) > at_mean);
    }

    #[test]
    fn data_term_difference_matches_isotropic_gaussian() {
        // For Σ = σ²I: D(z1) − D(z2) = (‖z1−μ‖² − ‖z2−μ‖²)/(2σ²).
        let s2 = 0.02f64;
        let mu = [0.4, 0.4, 0.4];
        let model = GmmModel::new(
            vec![1.0],
            vec![mu],
            vec![[[s2, 0.0, 0.0], [0.0, s2, 0.0], [0.0, 0.0, s2]]],
            FLOOR,
        )
        .unwrap();
        let z1 = [0.9, 0.1, 0.5];
        let z2 = [0.45, 0.35, 0.42];
        let got = data_term(&model, z1) - data_term(&model, z2);
        let want = (dist2(&z1, &mu) - dist2(&z2, &mu)) / (2.0 * s2);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn data_term_is_non_negative() {
        let model = GmmModel::new(
            vec![0.5, 0.5],
            vec![[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]],
            vec![[[1e-4, 0.0, 0.0], [0.0, 1e-4, 0.0], [0.0, 0.0, 1e-4]]; 2],
            FLOOR,
        )
        .unwrap();
        // even exactly at a mode with floor-tight covariance
        assert!(data_term(&model, [0.1, 0.1, 0.1]) >= 0.0);
    }

    #[test]
    fn eigen_clamp_restores_spd() {
        let a: Mat3 = [[0.0, 0.0, 0.0], [0.0, 1e-9, 0.0], [0.0, 0.0, 2.0]];
        let c = clamp_spd(&a, 1e-4);
        let (vals, _) = sym_eigen3(&c);
        for v in vals {
            assert!(v >= 1e-4 - 1e-12);
        }
        assert!((c[2][2] - 2.0).abs() < 1e-9);
    }
}
