//! Patch-similarity statistics: cosine-similarity matrices over per-head
//! attention outputs, kernel density estimates of their entries, and the
//! differential-entropy loss that drives image synthesis.
//!
//! For one layer the captured attention output `O` has shape `[H, N, d]` per
//! image. Each patch contributes a vector `u_i` of length `H*d`; the matrix
//! `G[i][j]` is the cosine similarity between patches `i` and `j`. Its strict
//! upper triangle feeds a normal-kernel density estimate whose differential
//! entropy measures how diverse the patch relationships are. Summed over
//! layers (and negated) this yields the generation loss: minimizing it pushes
//! synthetic images toward diverse, input-dependent patch structure.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView3, ArrayView4, IxDyn};

use crate::error::{Result, VitqError};
use crate::parallel;
use crate::tape::{kde_grid_eval, Tape, Var};
use crate::tensor::normal_kernel;

/// Denominator guard for zero-norm patch vectors.
pub const COSINE_EPS: f64 = 1e-8;

/// Pairwise cosine similarities of the patch vectors of one image at one
/// layer.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub gamma: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }

    /// Check symmetry, unit diagonal, and the [-1, 1] range, all within
    /// `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let g = &self.gamma;
        if g.nrows() != g.ncols() {
            return Err(VitqError::Contract(format!(
                "similarity matrix must be square, got {}x{}",
                g.nrows(),
                g.ncols()
            )));
        }
        for i in 0..g.nrows() {
            if (g[[i, i]] - 1.0).abs() > tol {
                return Err(VitqError::Contract(format!(
                    "diagonal entry [{i},{i}] = {} is not 1",
                    g[[i, i]]
                )));
            }
            for j in 0..g.ncols() {
                if (g[[i, j]] - g[[j, i]]).abs() > tol {
                    return Err(VitqError::Contract(format!(
                        "asymmetry at [{i},{j}]: {} vs {}",
                        g[[i, j]],
                        g[[j, i]]
                    )));
                }
                if g[[i, j]] < -1.0 - tol || g[[i, j]] > 1.0 + tol {
                    return Err(VitqError::Contract(format!(
                        "entry [{i},{j}] = {} outside [-1, 1]",
                        g[[i, j]]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cosine similarities between patch vectors; `o_l` is `[H, N, d]` for one
/// image, and patch `i`'s vector is `o_l[:, i, :]` flattened.
pub fn cosine_similarity_matrix(o_l: &ArrayView3<f64>) -> SimilarityMatrix {
    let (h, n, d) = o_l.dim();
    // u[i] = flattened [H*d] vector of patch i
    let mut u = Array2::<f64>::zeros((n, h * d));
    for hi in 0..h {
        for i in 0..n {
            for di in 0..d {
                u[[i, hi * d + di]] = o_l[[hi, i, di]];
            }
        }
    }
    let norms: Vec<f64> = (0..n).map(|i| u.row(i).dot(&u.row(i)).sqrt()).collect();
    let mut gamma = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = u.row(i).dot(&u.row(j)) / (norms[i] * norms[j] + COSINE_EPS);
            gamma[[i, j]] = v;
            gamma[[j, i]] = v;
        }
    }
    SimilarityMatrix { gamma }
}

/// Flat (row-major) indices of the strict upper triangle of an `n x n`
/// matrix, in row order.
pub fn upper_triangle_indices(n: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            idx.push(i * n + j);
        }
    }
    idx
}

/// The strict upper-triangle entries of the similarity matrix, the training
/// points of the density model. The constant-1 diagonal is excluded.
pub fn extract_training_points(m: &SimilarityMatrix) -> Result<Vec<f64>> {
    let n = m.n();
    if n < 2 {
        return Err(VitqError::Contract(format!(
            "need at least 2 patches to form similarity pairs, got {n}"
        )));
    }
    let flat = m.gamma.as_slice().expect("gamma is standard layout");
    Ok(upper_triangle_indices(n).into_iter().map(|i| flat[i]).collect())
}

/// How much smaller the similarity matrix is than the attention output it
/// summarizes: `(H*d*N) / N^2 = hidden / patches`.
pub fn data_reduction_ratio(hidden: usize, patches: usize) -> f64 {
    hidden as f64 / patches as f64
}

/// Bandwidth rule `1.06 * sigma * M^(-1/5)`, floored. `sigma` is the sample
/// standard deviation (zero for a single point).
pub fn silverman_bandwidth(points: &[f64], floor: f64) -> f64 {
    let m = points.len();
    let sigma = if m < 2 {
        0.0
    } else {
        let mean = points.iter().sum::<f64>() / m as f64;
        let var = points.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
        var.sqrt()
    };
    (1.06 * sigma * (m as f64).powf(-0.2)).max(floor)
}

/// Normal-kernel density estimate over a fixed point set.
#[derive(Debug, Clone)]
pub struct DensityModel {
    points: Vec<f64>,
    bandwidth: f64,
}

impl DensityModel {
    pub fn with_bandwidth(points: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(VitqError::Contract("density model needs at least one point".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(VitqError::Config(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(DensityModel { points, bandwidth })
    }

    /// Construct with the data-driven bandwidth rule.
    pub fn silverman(points: Vec<f64>, floor: f64) -> Result<Self> {
        let h = silverman_bandwidth(&points, floor);
        Self::with_bandwidth(points, h)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Density value `(1/Mh) sum_m K((x - x_m)/h)`.
    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let s: f64 = self.points.iter().map(|&p| normal_kernel((x - p) / h)).sum();
        s / (self.points.len() as f64 * h)
    }

    /// `[min - sigmas*h, max + sigmas*h]`, the span holding essentially all
    /// probability mass.
    pub fn auto_span(&self, sigmas: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &p in &self.points {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo - sigmas * self.bandwidth, hi + sigmas * self.bandwidth)
    }

    /// Density sampled on an even grid between `lo` and `hi`.
    pub fn curve_between(&self, lo: f64, hi: f64, grid_points: usize) -> DensityCurve {
        assert!(grid_points >= 2 && hi > lo);
        let step = (hi - lo) / (grid_points - 1) as f64;
        let grid: Vec<f64> = (0..grid_points).map(|i| lo + i as f64 * step).collect();
        let mut density = vec![0.0; grid_points];
        let pts: &[f64] = &self.points;
        let h = self.bandwidth;
        let norm = 1.0 / (pts.len() as f64 * h);
        let grid_ref: &[f64] = &grid;
        parallel::for_each_chunk(&mut density, 64, |start, chunk| {
            for (o, f) in chunk.iter_mut().enumerate() {
                let x = grid_ref[start + o];
                let mut acc = 0.0;
                for &p in pts {
                    acc += normal_kernel((x - p) / h);
                }
                *f = acc * norm;
            }
        });
        DensityCurve { grid, density }
    }

    /// Density curve over the automatic 6-sigma span.
    pub fn curve(&self, grid_points: usize) -> DensityCurve {
        let (lo, hi) = self.auto_span(6.0);
        self.curve_between(lo, hi, grid_points)
    }

    /// `-Integral f ln f` by trapezoidal quadrature over the automatic span;
    /// the integrand is treated as zero where the density is below 1e-12.
    pub fn differential_entropy(&self, grid_points: usize) -> f64 {
        entropy_from_curve(&self.curve(grid_points), DENSITY_FLOOR)
    }
}

pub const DENSITY_FLOOR: f64 = 1e-12;

/// Density values on an ascending grid.
#[derive(Debug, Clone)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl DensityCurve {
    /// Trapezoidal integral of the curve; close to 1 when the grid covers
    /// the mass.
    pub fn trapezoid(&self) -> f64 {
        let g = self.grid.len();
        let mut s = 0.0;
        for i in 0..g - 1 {
            s += 0.5 * (self.density[i] + self.density[i + 1]) * (self.grid[i + 1] - self.grid[i]);
        }
        s
    }

    /// Count local maxima whose topographic prominence is at least
    /// `prominence_frac` of the curve's global maximum.
    pub fn count_modes(&self, prominence_frac: f64) -> usize {
        let f = &self.density;
        let n = f.len();
        if n < 3 {
            return 0;
        }
        let global_max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if global_max <= 0.0 {
            return 0;
        }
        let threshold = prominence_frac * global_max;
        let mut count = 0;
        for i in 1..n - 1 {
            if !(f[i] > f[i - 1] && f[i] > f[i + 1]) {
                continue;
            }
            // Topographic prominence: drop to the highest saddle separating
            // this peak from higher ground (or the boundary).
            let mut left_min = f[i];
            let mut j = i;
            while j > 0 {
                j -= 1;
                left_min = left_min.min(f[j]);
                if f[j] > f[i] {
                    break;
                }
            }
            let mut right_min = f[i];
            let mut j = i;
            while j + 1 < n {
                j += 1;
                right_min = right_min.min(f[j]);
                if f[j] > f[i] {
                    break;
                }
            }
            let prominence = f[i] - left_min.max(right_min);
            if prominence >= threshold {
                count += 1;
            }
        }
        count
    }
}

/// Write labeled curves as CSV with columns `layer,x,density`.
pub fn write_density_csv<W: Write>(mut out: W, rows: &[(usize, &DensityCurve)]) -> Result<()> {
    writeln!(out, "layer,x,density")?;
    for (layer, curve) in rows {
        for (x, f) in curve.grid.iter().zip(curve.density.iter()) {
            writeln!(out, "{layer},{x},{f}")?;
        }
    }
    Ok(())
}

fn entropy_from_curve(curve: &DensityCurve, floor: f64) -> f64 {
    let g = curve.grid.len();
    let dx = (curve.grid[g - 1] - curve.grid[0]) / (g - 1) as f64;
    let mut s = 0.0;
    for (i, &f) in curve.density.iter().enumerate() {
        let plp = if f >= floor { f * f.ln() } else { 0.0 };
        let w = if i == 0 || i == g - 1 { 0.5 } else { 1.0 };
        s += w * plp * dx;
    }
    -s
}

/// Knobs for the entropy quadrature shared by the plain and differentiable
/// paths.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EntropyOptions {
    pub grid_points: usize,
    pub span_sigmas: f64,
    pub density_floor: f64,
    pub bandwidth_floor: f64,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        EntropyOptions {
            grid_points: 2048,
            span_sigmas: 6.0,
            density_floor: DENSITY_FLOOR,
            bandwidth_floor: 0.01,
        }
    }
}

/// Similarity-entropy loss over a captured trace: `-sum_l H_l`, where each
/// layer's entropy is averaged over the batch. `trace[l]` is `[B, H, N, d]`.
pub fn pse_loss(trace: &[ArrayView4<f64>], opts: &EntropyOptions) -> Result<f64> {
    if trace.is_empty() {
        return Err(VitqError::Contract("attention trace is empty".into()));
    }
    let b = trace[0].dim().0;
    for (li, o) in trace.iter().enumerate() {
        if o.dim().2 < 2 {
            return Err(VitqError::Contract(format!(
                "layer {li} capture has {} patches; need at least 2",
                o.dim().2
            )));
        }
    }
    let l = trace.len();
    // One slot per (layer, image); computed independently, reduced in fixed
    // order.
    let entropies = parallel::map_indexed(l * b, |k| {
        let (li, bi) = (k / b, k % b);
        let o = trace[li].index_axis(ndarray::Axis(0), bi);
        let gamma = cosine_similarity_matrix(&o);
        let points = extract_training_points(&gamma).expect("patch count checked above");
        let model =
            DensityModel::silverman(points, opts.bandwidth_floor).expect("nonempty points");
        let (lo, hi) = model.auto_span(opts.span_sigmas);
        let curve = model.curve_between(lo, hi, opts.grid_points);
        entropy_from_curve(&curve, opts.density_floor)
    });
    Ok(-entropies.iter().sum::<f64>() / b as f64)
}

/// Differentiable upper-triangle similarity points for one image's capture
/// `[H, N, d]`.
pub fn similarity_points_tape(o_l: &Var) -> Var {
    let shape = o_l.shape();
    assert_eq!(shape.len(), 3, "expected [H, N, d], got {shape:?}");
    let (h, n, d) = (shape[0], shape[1], shape[2]);
    let u = o_l.permute(&[1, 0, 2]).reshape(&[n, h * d]);
    let sq = u.sqr().sum_axis(1); // [n]
    let norms = sq.sqrt();
    let dots = u.matmul(&u.transpose_last2()); // [n, n]
    let outer = norms
        .reshape(&[n, 1])
        .matmul(&norms.reshape(&[1, n]))
        .add_scalar(COSINE_EPS);
    let gamma = dots.div(&outer);
    gamma.gather_flat(&upper_triangle_indices(n))
}

/// Differentiable entropy of the density estimate over `points` (a 1-d var).
/// The bandwidth follows the same data-driven rule as the plain path and is
/// itself differentiated; the quadrature grid is fixed from the current
/// values.
pub fn differential_entropy_tape(points: &Var, tape: &Tape, opts: &EntropyOptions) -> Var {
    let vals = points.value();
    let m = vals.len();
    assert!(m >= 1, "entropy needs at least one point");

    let h = if m < 2 {
        tape.scalar(opts.bandwidth_floor)
    } else {
        let mean = points.mean_all();
        let centered = points.sub(&mean);
        let var = centered.sqr().sum_all().scale(1.0 / (m - 1) as f64);
        let sigma = var.add_scalar(1e-30).sqrt();
        sigma
            .scale(1.06 * (m as f64).powf(-0.2))
            .clamp_min(opts.bandwidth_floor)
    };

    let h_val = h.scalar_value();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &p in vals.iter() {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    let span_lo = lo - opts.span_sigmas * h_val;
    let span_hi = hi + opts.span_sigmas * h_val;
    let g = opts.grid_points;
    let grid = Array1::linspace(span_lo, span_hi, g);
    let dx = (span_hi - span_lo) / (g - 1) as f64;

    let f = kde_grid_eval(points, &h, &grid);
    let plp = f.plogp(opts.density_floor);
    let mut weights = vec![dx; g];
    weights[0] = 0.5 * dx;
    weights[g - 1] = 0.5 * dx;
    let w = tape.leaf(ndarray::ArrayD::from_shape_vec(IxDyn(&[g]), weights).unwrap());
    plp.mul(&w).sum_all().neg()
}

/// Differentiable similarity-entropy loss; `trace[l]` is a `[B, H, N, d]`
/// var on `tape`. Entropies are averaged per layer over the batch, summed
/// over layers, and negated.
pub fn pse_loss_tape(trace: &[Var], tape: &Tape, opts: &EntropyOptions) -> Result<Var> {
    if trace.is_empty() {
        return Err(VitqError::Contract("attention trace is empty".into()));
    }
    let b = trace[0].shape()[0];
    let mut total: Option<Var> = None;
    for o_l in trace {
        let shape = o_l.shape();
        let (heads, n, d) = (shape[1], shape[2], shape[3]);
        for bi in 0..b {
            let single = o_l.slice_axis(0, bi, 1).reshape(&[heads, n, d]);
            let points = similarity_points_tape(&single);
            let h_l = differential_entropy_tape(&points, tape, opts);
            total = Some(match total {
                Some(t) => t.add(&h_l),
                None => h_l,
            });
        }
    }
    Ok(total.unwrap().scale(-1.0 / b as f64))
}
