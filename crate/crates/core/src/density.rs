//! Sample-based distribution machinery: Gaussian kernel density estimates
//! with Silverman bandwidths, grid-quadrature KL divergence, and exact
//! one-dimensional Wasserstein distances between empirical measures.

use thiserror::Error;

/// Floor applied to every bandwidth; degenerate spreads land here.
pub const BANDWIDTH_FLOOR: f64 = 1e-4;

/// Per-cell probability floor used by the KL quadrature.
pub const KL_CLAMP: f64 = 1e-12;

const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("empty sample set")]
    EmptySample,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite sample value")]
    NonFinite,
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("wasserstein order must be >= 1 and finite, got {0}")]
    BadOrder(f64),
    #[error("grid has no probability mass for {side} density")]
    EmptyGrid { side: &'static str },
    #[error("invalid grid: {0}")]
    BadGrid(String),
}

/// Result of a bandwidth selection; `degenerate` flags n < 2 or zero spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub value: f64,
    pub degenerate: bool,
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (ss / (n - 1.0)).sqrt()
}

/// Linear-interpolated quantile of pre-sorted data (type-7 convention).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Silverman's rule of thumb, `0.9 * min(std, iqr / 1.34) * n^(-1/5)`,
/// floored at `BANDWIDTH_FLOOR`.
pub fn silverman_bandwidth(xs: &[f64]) -> Result<Bandwidth, DensityError> {
    if xs.is_empty() {
        return Err(DensityError::EmptySample);
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(DensityError::NonFinite);
    }
    if xs.len() < 2 {
        return Ok(Bandwidth {
            value: BANDWIDTH_FLOOR,
            degenerate: true,
        });
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let std = sample_std(xs);
    let spread = std.min(iqr / 1.34);
    let n = xs.len() as f64;
    let h = 0.9 * spread * n.powf(-0.2);
    if h < BANDWIDTH_FLOOR {
        Ok(Bandwidth {
            value: BANDWIDTH_FLOOR,
            degenerate: spread == 0.0,
        })
    } else {
        Ok(Bandwidth {
            value: h,
            degenerate: false,
        })
    }
}

/// Gaussian product-kernel density estimate over n samples in d dimensions.
#[derive(Debug, Clone)]
pub struct KdeModel {
    samples: Vec<Vec<f64>>,
    bandwidths: Vec<f64>,
    dim: usize,
    /// Set when any dimension had fewer than two samples or zero spread.
    pub degenerate: bool,
}

impl KdeModel {
    /// Fits a KDE. With `bandwidth = Some(h)` the same raw-coordinate h is
    /// used on every axis; with `None` each axis gets its own Silverman
    /// bandwidth.
    pub fn fit(samples: &[Vec<f64>], bandwidth: Option<f64>) -> Result<KdeModel, DensityError> {
        if samples.is_empty() {
            return Err(DensityError::EmptySample);
        }
        let dim = samples[0].len();
        if dim == 0 {
            return Err(DensityError::EmptySample);
        }
        for row in samples {
            if row.len() != dim {
                return Err(DensityError::DimensionMismatch {
                    left: dim,
                    right: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DensityError::NonFinite);
            }
        }
        let mut bandwidths = Vec::with_capacity(dim);
        let mut degenerate = false;
        match bandwidth {
            Some(h) => {
                if !(h.is_finite() && h > 0.0) {
                    return Err(DensityError::BadBandwidth(h));
                }
                bandwidths.resize(dim, h.max(BANDWIDTH_FLOOR));
                degenerate = samples.len() < 2;
            }
            None => {
                for j in 0..dim {
                    let col: Vec<f64> = samples.iter().map(|r| r[j]).collect();
                    let bw = silverman_bandwidth(&col)?;
                    degenerate |= bw.degenerate;
                    bandwidths.push(bw.value);
                }
            }
        }
        Ok(KdeModel {
            samples: samples.to_vec(),
            bandwidths,
            dim,
            degenerate,
        })
    }

    /// Convenience constructor for one-dimensional data.
    pub fn fit_1d(samples: &[f64], bandwidth: Option<f64>) -> Result<KdeModel, DensityError> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|v| vec![*v]).collect();
        KdeModel::fit(&rows, bandwidth)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    /// Density at a point: `(1/n) * sum_i prod_j phi((x_j - s_ij)/h_j) / h_j`.
    pub fn eval(&self, x: &[f64]) -> Result<f64, DensityError> {
        if x.len() != self.dim {
            return Err(DensityError::DimensionMismatch {
                left: self.dim,
                right: x.len(),
            });
        }
        let mut acc = 0.0;
        for row in &self.samples {
            let mut k = 1.0;
            for j in 0..self.dim {
                let z = (x[j] - row[j]) / self.bandwidths[j];
                k *= INV_SQRT_TAU * (-0.5 * z * z).exp() / self.bandwidths[j];
            }
            acc += k;
        }
        Ok(acc / self.samples.len() as f64)
    }

    /// Sample extent on one axis, padded by `pad` on both sides.
    fn padded_range(&self, j: usize, pad: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &self.samples {
            lo = lo.min(row[j]);
            hi = hi.max(row[j]);
        }
        (lo - pad, hi + pad)
    }
}

/// Evaluation lattice shared by two densities during KL quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

/// Default per-axis resolution: 256 nodes in 1-D, 64 per axis otherwise.
pub fn default_grid_points(dim: usize) -> usize {
    if dim == 1 {
        256
    } else {
        64
    }
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self, DensityError> {
        if lower.len() != upper.len() || lower.len() != points.len() || lower.is_empty() {
            return Err(DensityError::BadGrid("inconsistent dimensions".into()));
        }
        for j in 0..lower.len() {
            if !(lower[j].is_finite() && upper[j].is_finite() && lower[j] < upper[j]) {
                return Err(DensityError::BadGrid(format!(
                    "axis {j}: need finite lower < upper"
                )));
            }
            if points[j] < 2 {
                return Err(DensityError::BadGrid(format!("axis {j}: need >= 2 points")));
            }
        }
        Ok(GridSpec {
            lower,
            upper,
            points,
        })
    }

    /// Grid covering the supports of both models, padded by three times the
    /// larger bandwidth on each axis.
    pub fn covering(p: &KdeModel, q: &KdeModel) -> Result<Self, DensityError> {
        if p.dim() != q.dim() {
            return Err(DensityError::DimensionMismatch {
                left: p.dim(),
                right: q.dim(),
            });
        }
        let d = p.dim();
        let npts = default_grid_points(d);
        let mut lower = Vec::with_capacity(d);
        let mut upper = Vec::with_capacity(d);
        for j in 0..d {
            let pad = 3.0 * p.bandwidths()[j].max(q.bandwidths()[j]);
            let (plo, phi) = p.padded_range(j, pad);
            let (qlo, qhi) = q.padded_range(j, pad);
            lower.push(plo.min(qlo));
            upper.push(phi.max(qhi));
        }
        GridSpec::new(lower, upper, vec![npts; d])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.points.iter().product()
    }

    /// Volume element of one cell (node spacing product).
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim())
            .map(|j| (self.upper[j] - self.lower[j]) / (self.points[j] as f64 - 1.0))
            .product()
    }

    /// Node coordinates for a flat row-major index.
    pub fn node(&self, mut flat: usize, out: &mut [f64]) {
        for j in (0..self.dim()).rev() {
            let n = self.points[j];
            let idx = flat % n;
            flat /= n;
            let step = (self.upper[j] - self.lower[j]) / (n as f64 - 1.0);
            out[j] = self.lower[j] + step * idx as f64;
        }
    }
}

fn grid_values(model: &KdeModel, grid: &GridSpec) -> Result<Vec<f64>, DensityError> {
    if model.dim() != grid.dim() {
        return Err(DensityError::DimensionMismatch {
            left: model.dim(),
            right: grid.dim(),
        });
    }
    let n = grid.num_nodes();
    let mut vals = Vec::with_capacity(n);
    let mut x = vec![0.0; grid.dim()];
    for flat in 0..n {
        grid.node(flat, &mut x);
        vals.push(model.eval(&x)?);
    }
    Ok(vals)
}

/// Total estimated probability mass of the model over the grid.
pub fn grid_mass(model: &KdeModel, grid: &GridSpec) -> Result<f64, DensityError> {
    let vals = grid_values(model, grid)?;
    Ok(vals.iter().sum::<f64>() * grid.cell_volume())
}

fn normalize_clamped(mut vals: Vec<f64>, side: &'static str) -> Result<Vec<f64>, DensityError> {
    let sum: f64 = vals.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(DensityError::EmptyGrid { side });
    }
    for v in &mut vals {
        *v /= sum;
        if *v < KL_CLAMP {
            *v = KL_CLAMP;
        }
    }
    // Renormalize after clamping so both sides stay exact simplexes; that
    // keeps the divergence nonnegative and zero for identical inputs.
    let sum2: f64 = vals.iter().sum();
    for v in &mut vals {
        *v /= sum2;
    }
    Ok(vals)
}

/// KL(p || q) by shared-grid quadrature with per-cell clamping. Finite and
/// nonnegative for any fitted pair; exactly zero when the models agree on
/// the grid.
pub fn kl_divergence(p: &KdeModel, q: &KdeModel, grid: &GridSpec) -> Result<f64, DensityError> {
    let vp = normalize_clamped(grid_values(p, grid)?, "p")?;
    let vq = normalize_clamped(grid_values(q, grid)?, "q")?;
    let mut kl = 0.0;
    for (a, b) in vp.iter().zip(vq.iter()) {
        if a == b {
            continue;
        }
        kl += a * (a / b).ln();
    }
    // Guard against summation noise on near-identical inputs.
    if kl < 0.0 && kl > -1e-9 {
        kl = 0.0;
    }
    Ok(kl)
}

/// KL between two 1-D sample sets with Silverman bandwidths on an
/// automatically covering grid.
pub fn kl_between_samples_1d(p: &[f64], q: &[f64]) -> Result<f64, DensityError> {
    let pm = KdeModel::fit_1d(p, None)?;
    let qm = KdeModel::fit_1d(q, None)?;
    let grid = GridSpec::covering(&pm, &qm)?;
    kl_divergence(&pm, &qm, &grid)
}

fn check_order(beta: f64) -> Result<(), DensityError> {
    if !(beta.is_finite() && beta >= 1.0) {
        return Err(DensityError::BadOrder(beta));
    }
    Ok(())
}

fn pow_beta(d: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        d
    } else if beta == 2.0 {
        d * d
    } else {
        d.powf(beta)
    }
}

/// Exact order-beta Wasserstein distance between two empirical quantile
/// functions given by callbacks over sorted values. The piecewise-constant
/// quantile functions are integrated segment by segment on the common
/// refinement of the two uniform partitions, so equal-size inputs reduce to
/// the mean of sorted pairwise differences.
fn wasserstein_sorted_fn(
    n: usize,
    m: usize,
    x: impl Fn(usize) -> f64,
    y: impl Fn(usize) -> f64,
    beta: f64,
) -> f64 {
    let total = (n as u64) * (m as u64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut prev = 0u64;
    let mut acc = 0.0;
    while prev < total {
        let next_x = ((i + 1) as u64) * m as u64;
        let next_y = ((j + 1) as u64) * n as u64;
        let next = next_x.min(next_y);
        let w = (next - prev) as f64 / total as f64;
        acc += w * pow_beta((x(i) - y(j)).abs(), beta);
        if next == next_x {
            i += 1;
        }
        if next == next_y {
            j += 1;
        }
        prev = next;
    }
    if beta == 1.0 {
        acc
    } else {
        acc.powf(1.0 / beta)
    }
}

/// Order-beta Wasserstein distance between two 1-D sample sets.
pub fn wasserstein_1d(xs: &[f64], ys: &[f64], beta: f64) -> Result<f64, DensityError> {
    check_order(beta)?;
    if xs.is_empty() || ys.is_empty() {
        return Err(DensityError::EmptySample);
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(DensityError::NonFinite);
    }
    let mut x = xs.to_vec();
    let mut y = ys.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    y.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(wasserstein_sorted_fn(
        x.len(),
        y.len(),
        |i| x[i],
        |j| y[j],
        beta,
    ))
}

/// Wasserstein distance between multi-dimensional sample sets, taken as the
/// mean of per-coordinate marginal distances.
pub fn wasserstein(
    p_samples: &[Vec<f64>],
    q_samples: &[Vec<f64>],
    beta: f64,
) -> Result<f64, DensityError> {
    check_order(beta)?;
    if p_samples.is_empty() || q_samples.is_empty() {
        return Err(DensityError::EmptySample);
    }
    let d = p_samples[0].len();
    for row in p_samples.iter().chain(q_samples.iter()) {
        if row.len() != d {
            return Err(DensityError::DimensionMismatch {
                left: d,
                right: row.len(),
            });
        }
    }
    let mut acc = 0.0;
    for j in 0..d {
        let xs: Vec<f64> = p_samples.iter().map(|r| r[j]).collect();
        let ys: Vec<f64> = q_samples.iter().map(|r| r[j]).collect();
        acc += wasserstein_1d(&xs, &ys, beta)?;
    }
    Ok(acc / d as f64)
}

/// Wasserstein distance between `base` (sorted ascending) and `base` with
/// one extra value inserted, without materializing the augmented array.
/// This is the per-probe informativeness kernel, O(n) per call.
pub fn wasserstein_insert_sorted(base_sorted: &[f64], probe: f64, beta: f64) -> Result<f64, DensityError> {
    check_order(beta)?;
    if base_sorted.is_empty() {
        return Err(DensityError::EmptySample);
    }
    if !probe.is_finite() {
        return Err(DensityError::NonFinite);
    }
    let n = base_sorted.len();
    let k = base_sorted.partition_point(|v| *v <= probe);
    let aug = |i: usize| -> f64 {
        if i < k {
            base_sorted[i]
        } else if i == k {
            probe
        } else {
            base_sorted[i - 1]
        }
    };
    Ok(wasserstein_sorted_fn(
        n + 1,
        n,
        aug,
        |j| base_sorted[j],
        beta,
    ))
}
