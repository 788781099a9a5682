//! Non-negative factorisation of the noise variance, `sigma_n^2 = W H`.

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp for every factor entry. Multiplicative updates cannot leave zero.
pub const NMF_FLOOR: f64 = 1e-12;

/// Default NMF rank.
pub const DEFAULT_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum NmfError {
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("non-finite statistic in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NmfError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfParams {
    /// F x K spectral basis.
    pub w: Array2<f64>,
    /// K x T activations.
    pub h: Array2<f64>,
}

impl NmfParams {
    pub fn new(w: Array2<f64>, h: Array2<f64>) -> Result<Self> {
        if w.ncols() != h.nrows() {
            return Err(NmfError::Dimensions(format!(
                "W is {:?} but H is {:?}",
                w.dim(),
                h.dim()
            )));
        }
        let mut p = Self { w, h };
        p.clamp();
        Ok(p)
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn bins(&self) -> usize {
        self.w.nrows()
    }

    pub fn frames(&self) -> usize {
        self.h.ncols()
    }

    fn clamp(&mut self) {
        self.w.mapv_inplace(|v| v.max(NMF_FLOOR));
        self.h.mapv_inplace(|v| v.max(NMF_FLOOR));
    }
}

/// Entries drawn i.i.d. from `uniform(NMF_FLOOR, 1)`.
pub fn init_nmf<R: Rng + ?Sized>(bins: usize, frames: usize, rank: usize, rng: &mut R) -> Result<NmfParams> {
    if bins == 0 || frames == 0 || rank == 0 {
        return Err(NmfError::Dimensions(format!(
            "F={bins}, T={frames}, K={rank} must all be positive"
        )));
    }
    let w = Array2::from_shape_simple_fn((bins, rank), || rng.random_range(NMF_FLOOR..=1.0));
    let h = Array2::from_shape_simple_fn((rank, frames), || rng.random_range(NMF_FLOOR..=1.0));
    Ok(NmfParams { w, h })
}

pub fn noise_variance(params: &NmfParams) -> Array2<f64> {
    params.w.dot(&params.h)
}

fn check_stats(params: &NmfParams, y_pow: &Array2<f64>, avg_vinv: &Array2<f64>, avg_vinv2: &Array2<f64>) -> Result<()> {
    let dim = (params.bins(), params.frames());
    for (name, m) in [("Y_pow", y_pow), ("avg_Vinv", avg_vinv), ("avg_Vinv2", avg_vinv2)] {
        if m.dim() != dim {
            return Err(NmfError::Dimensions(format!(
                "{name} is {:?}, expected {dim:?}",
                m.dim()
            )));
        }
    }
    if !avg_vinv.iter().chain(avg_vinv2.iter()).all(|v| v.is_finite()) {
        return Err(NmfError::NonFinite("averaged V statistics"));
    }
    if !y_pow.iter().all(|v| v.is_finite()) {
        return Err(NmfError::NonFinite("Y_pow"));
    }
    Ok(())
}

/// `numerator = Y ⊙ E[V^-2]`, shared by both factor updates.
fn weighted_power(y_pow: &Array2<f64>, avg_vinv2: &Array2<f64>) -> Array2<f64> {
    let mut out = y_pow.clone();
    Zip::from(&mut out).and(avg_vinv2).for_each(|o, &v2| *o *= v2);
    out
}

fn apply_ratio(target: &mut Array2<f64>, num: &Array2<f64>, den: &Array2<f64>) {
    Zip::from(target).and(num).and(den).for_each(|x, &n, &d| {
        let ratio = if d > 0.0 { n / d } else { 1.0 };
        *x = (*x * ratio.sqrt()).max(NMF_FLOOR);
    });
}

/// `H <- H ⊙ [W^T (Y ⊙ E[V^-2]) / W^T E[V^-1]]^(1/2)`
pub fn update_h(
    params: &NmfParams,
    y_pow: &Array2<f64>,
    avg_vinv: &Array2<f64>,
    avg_vinv2: &Array2<f64>,
) -> Result<NmfParams> {
    check_stats(params, y_pow, avg_vinv, avg_vinv2)?;
    let num = params.w.t().dot(&weighted_power(y_pow, avg_vinv2));
    let den = params.w.t().dot(avg_vinv);
    let mut out = params.clone();
    apply_ratio(&mut out.h, &num, &den);
    Ok(out)
}

/// `W <- W ⊙ [(Y ⊙ E[V^-2]) H^T / E[V^-1] H^T]^(1/2)`
pub fn update_w(
    params: &NmfParams,
    y_pow: &Array2<f64>,
    avg_vinv: &Array2<f64>,
    avg_vinv2: &Array2<f64>,
) -> Result<NmfParams> {
    check_stats(params, y_pow, avg_vinv, avg_vinv2)?;
    let num = weighted_power(y_pow, avg_vinv2).dot(&params.h.t());
    let den = avg_vinv.dot(&params.h.t());
    let mut out = params.clone();
    apply_ratio(&mut out.w, &num, &den);
    Ok(out)
}

/// Itakura-Saito divergence `sum x/v - ln(x/v) - 1`, with both sides floored.
pub fn is_divergence(x: &Array2<f64>, v: &Array2<f64>) -> f64 {
    x.iter()
        .zip(v.iter())
        .map(|(&a, &b)| {
            let r = a.max(NMF_FLOOR) / b.max(NMF_FLOOR);
            r - r.ln() - 1.0
        })
        .sum()
}
