//! The geometric codec: window → Gram matrix → per-batch PCA (2 components)
//! → diagonal 2×2 state, and the way back.
//!
//! Squaring the projections destroys their signs, and taking the root of
//! the reconstructed Gram diagonal destroys the signs of the window values.
//! Both are carried outside the 2×2 state (see [`GeometricSample::signs`]
//! and [`SignPolicy`]).

use candle_core::Tensor;
use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::nn;

/// Outer product `x xᵀ`.
pub fn gram_matrix(x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    DMatrix::from_fn(d, d, |i, j| x[i] * x[j])
}

/// Gram matrix flattened row-major.
pub fn flat_gram(x: &[f64]) -> Vec<f64> {
    x.iter().flat_map(|a| x.iter().map(move |b| a * b)).collect()
}

/// A two-component PCA fitted on one mini-batch of flattened Gram matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaState {
    /// Column means, length `D²`.
    pub mean: Vec<f64>,
    /// Two orthonormal rows of length `D²`.
    pub components: [Vec<f64>; 2],
    /// Variance captured by each component.
    pub explained_variance: [f64; 2],
    pub source_batch_id: usize,
}

fn sign_of(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector orthogonal to `basis`, built from the first standard basis
/// vector with a substantial residual.
fn orthonormal_completion(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    for k in 0..dim {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        for b in basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 0.5 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
    unreachable!("dimension {dim} cannot host {} orthonormal vectors", basis.len() + 1)
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Fits the top-2 principal directions of `rows` (B × p).
///
/// Uses the B × B kernel `X_c X_cᵀ` whose eigenvectors map to the right
/// singular vectors of the centered matrix. Directions with no variance are
/// filled in by a deterministic orthonormal completion.
pub fn fit_pca(rows: &DMatrix<f64>, source_batch_id: usize) -> Result<PcaState> {
    let (b, p) = rows.shape();
    if b < 2 {
        return Err(Error::BatchTooSmall { got: b });
    }
    if p < 2 {
        return Err(Error::contract("PCA needs at least two features"));
    }
    let mean: Vec<f64> = (0..p).map(|j| rows.column(j).sum() / b as f64).collect();
    let centered = DMatrix::from_fn(b, p, |i, j| rows[(i, j)] - mean[j]);
    let kernel = &centered * centered.transpose();
    let eig = nalgebra::SymmetricEigen::new(kernel);

    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-12 * top.max(f64::MIN_POSITIVE) + 1e-300;

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut variance = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= tol || top == 0.0 {
            break;
        }
        let u = eig.eigenvectors.column(k);
        let mut v: Vec<f64> = (0..p)
            .map(|j| (0..b).map(|i| centered[(i, j)] * u[i]).sum::<f64>())
            .collect();
        for prev in &components {
            let c = dot(&v, prev);
            v.iter_mut().zip(prev).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n <= 0.0 || !n.is_finite() {
            break;
        }
        v.iter_mut().for_each(|x| *x /= n);
        variance[slot] = lambda / (b - 1) as f64;
        components.push(v);
    }
    while components.len() < 2 {
        let v = orthonormal_completion(&components, p);
        components.push(v);
    }
    for c in components.iter_mut() {
        canonical_sign(c);
    }
    let [c0, c1]: [Vec<f64>; 2] = components.try_into().expect("two components");
    Ok(PcaState {
        mean,
        components: [c0, c1],
        explained_variance: variance,
        source_batch_id,
    })
}

impl PcaState {
    /// Side length `D` of the Gram matrices this state was fitted on.
    pub fn window_len(&self) -> usize {
        (self.mean.len() as f64).sqrt().round() as usize
    }

    /// Projection of a flattened Gram matrix onto the two components.
    pub fn project(&self, flat: &[f64]) -> [f64; 2] {
        let centered: Vec<f64> = flat.iter().zip(&self.mean).map(|(g, m)| g - m).collect();
        [
            dot(&centered, &self.components[0]),
            dot(&centered, &self.components[1]),
        ]
    }

    /// Flattened Gram matrix `mean + z₁c₁ + z₂c₂`.
    pub fn inverse(&self, z: [f64; 2]) -> Vec<f64> {
        self.mean
            .iter()
            .enumerate()
            .map(|(j, m)| m + z[0] * self.components[0][j] + z[1] * self.components[1][j])
            .collect()
    }
}

/// A window in the geometric space: `M = diag(z₁², z₂²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricSample {
    pub m: [[f64; 2]; 2],
    /// Signs of the PCA projections (sign(0) = +1).
    pub signs: [f64; 2],
    pub paired_window_index: usize,
}

impl GeometricSample {
    /// Row-major flattening used as the diffusion state.
    pub fn flat(&self) -> [f64; 4] {
        [self.m[0][0], self.m[0][1], self.m[1][0], self.m[1][1]]
    }
}

/// Encodes every window of `batch`. Sample `i` is paired with window `i`.
pub fn encode_batch(batch: &WindowBatch, batch_id: usize) -> Result<(PcaState, Vec<GeometricSample>)> {
    let d = batch.window_len();
    let grams: Vec<Vec<f64>> = batch.windows().map(flat_gram).collect();
    let rows = DMatrix::from_fn(grams.len(), d * d, |i, j| grams[i][j]);
    let state = fit_pca(&rows, batch_id)?;
    let samples = grams
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let z = state.project(g);
            GeometricSample {
                m: [[z[0] * z[0], 0.0], [0.0, z[1] * z[1]]],
                signs: [sign_of(z[0]), sign_of(z[1])],
                paired_window_index: i,
            }
        })
        .collect();
    Ok((state, samples))
}

/// How signs are restored when decoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignPolicy {
    /// Window values come out non-negative (root of the Gram diagonal).
    /// Projection signs are taken from the paired sample when one is given.
    #[serde(rename = "paper", alias = "unsigned")]
    Unsigned,
    /// Projection signs from the paired sample and value signs from the
    /// paired real window.
    #[default]
    Paired,
}

/// Sign information borrowed from a real window.
#[derive(Debug, Clone, Copy)]
pub struct Paired<'a> {
    pub window: &'a [f64],
    pub signs: [f64; 2],
}

/// Singular values of the symmetrized, diagonalized `m_hat`, each assigned to
/// the coordinate axis its right singular vector is most aligned with.
fn axis_singular_values(m_hat: &[[f64; 2]; 2]) -> [f64; 2] {
    let a = m_hat[0][0];
    let b = m_hat[1][1];
    let sym = Matrix2::new(a, 0.0, 0.0, b);
    let svd = sym.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut out = [f64::NAN; 2];
    let mut taken = [false; 2];
    let mut order = [0usize, 1];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    for &k in &order {
        let row = v_t.row(k);
        let mut axis = if row[1].abs() > row[0].abs() { 1 } else { 0 };
        if taken[axis] {
            axis = 1 - axis;
        }
        taken[axis] = true;
        out[axis] = svd.singular_values[k];
    }
    out
}

/// Maps a generated 2×2 matrix back to a window of length `D`.
pub fn decode_sample(
    m_hat: &[[f64; 2]; 2],
    state: &PcaState,
    policy: SignPolicy,
    paired: Option<Paired<'_>>,
) -> Result<Vec<f64>> {
    let d = state.window_len();
    let (s, value_signs): ([f64; 2], Option<&[f64]>) = match (policy, paired) {
        (SignPolicy::Paired, None) => {
            return Err(Error::config("sign policy 'paired' requires a paired window"))
        }
        (SignPolicy::Paired, Some(p)) => (p.signs, Some(p.window)),
        (SignPolicy::Unsigned, Some(p)) => (p.signs, None),
        (SignPolicy::Unsigned, None) => ([1.0, 1.0], None),
    };
    if let Some(w) = value_signs {
        if w.len() != d {
            return Err(Error::contract(format!(
                "paired window has length {}, expected {d}",
                w.len()
            )));
        }
    }
    let sigma = axis_singular_values(m_hat);
    let z = [s[0] * sigma[0].sqrt(), s[1] * sigma[1].sqrt()];
    Ok((0..d)
        .map(|j| {
            let idx = j * d + j;
            let g = state.mean[idx] + z[0] * state.components[0][idx] + z[1] * state.components[1][idx];
            let t = value_signs.map_or(1.0, |w| sign_of(w[j]));
            t * g.max(0.0).sqrt()
        })
        .collect())
}

/// Differentiable counterpart of [`decode_sample`] over a batch of states.
///
/// Only the Gram diagonal is reconstructed. For a diagonal `M̂` the axis
/// singular values are `|M̂₁₁|, |M̂₂₂|`, which is what this computes.
#[derive(Debug, Clone)]
pub struct DiagDecoder {
    mean_diag: Tensor,
    comp_diag: Tensor,
    window_len: usize,
}

impl DiagDecoder {
    pub fn new(state: &PcaState) -> Result<Self> {
        let d = state.window_len();
        let diag = |v: &[f64]| -> Vec<f64> { (0..d).map(|j| v[j * d + j]).collect() };
        let mean_diag = Tensor::from_vec(diag(&state.mean), (1, d), &nn::device())?;
        let comp: Vec<f64> = [diag(&state.components[0]), diag(&state.components[1])].concat();
        let comp_diag = Tensor::from_vec(comp, (2, d), &nn::device())?;
        Ok(Self {
            mean_diag,
            comp_diag,
            window_len: d,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// `m_hat`: (B, 4) row-major 2×2 states; `proj_signs`: (B, 2);
    /// `value_signs`: (B, D) of ±1 → (B, D).
    pub fn decode(&self, m_hat: &Tensor, proj_signs: &Tensor, value_signs: &Tensor) -> Result<Tensor> {
        let a = m_hat.narrow(1, 0, 1)?;
        let b = m_hat.narrow(1, 3, 1)?;
        let sigma = Tensor::cat(&[a.abs()?, b.abs()?], 1)?;
        let z = nn::sqrt_clamped(&sigma)?.mul(proj_signs)?;
        let g = z.matmul(&self.comp_diag)?.broadcast_add(&self.mean_diag)?;
        Ok(nn::sqrt_clamped(&g)?.mul(value_signs)?)
    }
}

/// ±1 signs of a window's values (sign(0) = +1).
pub fn value_signs(window: &[f64]) -> Vec<f64> {
    window.iter().map(|&x| sign_of(x)).collect()
}
