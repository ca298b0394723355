//! Parallel-scan filtering and smoothing.
//!
//! Filtering element `k` parameterizes `p(xₖ | xₖ₋₁, yₖ) = N(A xₖ₋₁ + b, C)`
//! together with the likelihood of `yₖ` as a function of `xₖ₋₁`,
//! `∝ exp(−½xᵀJx + ηᵀx)`. Smoothing element `k` parameterizes
//! `p(xₖ | xₖ₊₁, y) = N(E xₖ₊₁ + g, L)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::scan::{inclusive_scan, reverse_inclusive_scan, ScanStats};
use super::{
    gain_and_posterior, predict, smoother_gain, update, FilterOutput, GaussianSequence,
    SmootherOutput,
};
use crate::error::{AdmError, Result};
use crate::linalg;

#[derive(Debug, Clone)]
pub struct FilterElement {
    pub a: DMatrix<f64>,
    /// One column per trial.
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// One column per trial.
    pub eta: DMatrix<f64>,
    pub j: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SmootherElement {
    pub e: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

/// `earlier ⊗ later` for filtering elements.
pub fn combine_filter(ei: &FilterElement, ej: &FilterElement) -> FilterElement {
    let s = ei.a.nrows();
    let r = ei.b.ncols();
    let x = DMatrix::identity(s, s) + &ei.c * &ej.j;
    let lu = x.lu();
    // X⁻¹ applied to [Aᵢ | bᵢ + Cᵢηⱼ | Cᵢ] in one solve.
    let mut rhs = DMatrix::zeros(s, s + r + s);
    rhs.columns_mut(0, s).copy_from(&ei.a);
    rhs.columns_mut(s, r).copy_from(&(&ei.b + &ei.c * &ej.eta));
    rhs.columns_mut(s + r, s).copy_from(&ei.c);
    let sol = lu
        .solve(&rhs)
        .unwrap_or_else(|| DMatrix::from_element(s, s + r + s, f64::NAN));
    let w = sol.columns(0, s);
    let wb = sol.columns(s, r);
    let wc = sol.columns(s + r, s);

    let a = &ej.a * w;
    let b = &ej.a * wb + &ej.b;
    let c = linalg::symmetrized(&ej.a * wc * ej.a.transpose() + &ej.c);
    // Aᵢᵀ(I + JⱼCᵢ)⁻¹ = (X⁻¹Aᵢ)ᵀ = Wᵀ
    let wt = w.transpose();
    let eta = &wt * (&ej.eta - &ej.j * &ei.b) + &ei.eta;
    let j = linalg::symmetrized(&wt * &ej.j * &ei.a + &ei.j);
    FilterElement { a, b, c, eta, j }
}

/// `earlier ⊗ later` for smoothing elements.
pub fn combine_smoother(ei: &SmootherElement, ej: &SmootherElement) -> SmootherElement {
    SmootherElement {
        e: &ei.e * &ej.e,
        g: &ei.e * &ej.g + &ei.g,
        l: linalg::symmetrized(&ei.e * &ej.l * ei.e.transpose() + &ei.l),
    }
}

fn filter_elements(seq: &GaussianSequence) -> Result<Vec<FilterElement>> {
    let s = seq.state_dim();
    let r = seq.trials();
    (0..seq.bins())
        .into_par_iter()
        .map(|k| {
            let obs = &seq.observations[k];
            if k == 0 {
                let mut m = DMatrix::zeros(s, r);
                for mut c in m.column_iter_mut() {
                    c.copy_from(&seq.prior_mean);
                }
                let up = update(&m, &seq.prior_cov, obs, 0)?;
                return Ok(FilterElement {
                    a: DMatrix::zeros(s, s),
                    b: up.mean,
                    c: up.cov,
                    eta: DMatrix::zeros(s, r),
                    j: DMatrix::zeros(s, s),
                });
            }
            let f = &seq.transitions[k];
            let q = &seq.noises[k];
            if obs.is_missing() {
                return Ok(FilterElement {
                    a: f.clone(),
                    b: DMatrix::zeros(s, r),
                    c: q.clone(),
                    eta: DMatrix::zeros(s, r),
                    j: DMatrix::zeros(s, s),
                });
            }
            let lambda = obs.precision.as_ref();
            let (m, post, _) = gain_and_posterior(q, lambda, k)?;
            let a = (DMatrix::identity(s, s) - &m * lambda) * f;
            let b = &m * &obs.info;
            let lm = lambda * &m;
            let eta = f.transpose() * (&obs.info - &lm * &obs.info);
            let j = linalg::symmetrized(f.transpose() * (lambda - &lm * lambda) * f);
            Ok(FilterElement {
                a,
                b,
                c: post,
                eta,
                j,
            })
        })
        .collect()
}

/// Kalman filter via an associative scan of depth `⌈log₂ T⌉`.
pub fn parallel_filter(seq: &GaussianSequence) -> Result<FilterOutput> {
    let bins = seq.bins();
    let mut elems = filter_elements(seq)?;
    let stats = inclusive_scan(&mut elems, combine_filter);
    if let Some(k) = elems
        .iter()
        .position(|e| e.b.iter().chain(e.c.iter()).any(|v| !v.is_finite()))
    {
        return Err(AdmError::Inference {
            step: k,
            reason: "parallel filter combination is singular".into(),
        });
    }
    let (filtered_means, filtered_covs): (Vec<_>, Vec<_>) =
        elems.into_iter().map(|e| (e.b, e.c)).unzip();

    // Predictive moments and evidence are local once the filtered moments
    // are known.
    let steps: Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> = (0..bins)
        .into_par_iter()
        .map(|t| {
            let (m, p) = if t == 0 {
                let mut m = DMatrix::zeros(seq.state_dim(), seq.trials());
                for mut c in m.column_iter_mut() {
                    c.copy_from(&seq.prior_mean);
                }
                (m, seq.prior_cov.clone())
            } else {
                predict(
                    &filtered_means[t - 1],
                    &filtered_covs[t - 1],
                    &seq.transitions[t],
                    &seq.noises[t],
                )
            };
            let up = update(&m, &p, &seq.observations[t], t)?;
            Ok((m, p, up.evidence))
        })
        .collect::<Result<_>>()?;
    let mut predicted_means = Vec::with_capacity(bins);
    let mut predicted_covs = Vec::with_capacity(bins);
    let mut log_evidence = Vec::with_capacity(bins);
    for (m, p, ev) in steps {
        predicted_means.push(m);
        predicted_covs.push(p);
        log_evidence.push(ev);
    }
    Ok(FilterOutput {
        predicted_means,
        predicted_covs,
        filtered_means,
        filtered_covs,
        log_evidence,
        scan_stats: Some(stats),
    })
}

/// RTS smoother via a reverse associative scan.
pub fn parallel_smoother(seq: &GaussianSequence, filt: &FilterOutput) -> Result<SmootherOutput> {
    let bins = seq.bins();
    let s = seq.state_dim();
    let gains: Vec<DMatrix<f64>> = (0..bins.saturating_sub(1))
        .into_par_iter()
        .map(|k| {
            smoother_gain(
                &filt.filtered_covs[k],
                &seq.transitions[k + 1],
                &filt.predicted_covs[k + 1],
                k,
            )
        })
        .collect::<Result<_>>()?;
    let mut elems: Vec<SmootherElement> = (0..bins)
        .into_par_iter()
        .map(|k| {
            if k + 1 == bins {
                return SmootherElement {
                    e: DMatrix::zeros(s, s),
                    g: filt.filtered_means[k].clone(),
                    l: filt.filtered_covs[k].clone(),
                };
            }
            let e = &gains[k];
            SmootherElement {
                e: e.clone(),
                g: &filt.filtered_means[k] - e * &filt.predicted_means[k + 1],
                l: linalg::symmetrized(
                    &filt.filtered_covs[k] - e * &filt.predicted_covs[k + 1] * e.transpose(),
                ),
            }
        })
        .collect();
    let stats: ScanStats = reverse_inclusive_scan(&mut elems, combine_smoother);
    let (means, covs): (Vec<_>, Vec<_>) = elems.into_iter().map(|e| (e.g, e.l)).unzip();
    let cross_covs = (0..bins)
        .into_par_iter()
        .map(|t| {
            if t == 0 {
                DMatrix::zeros(s, s)
            } else {
                &covs[t] * gains[t - 1].transpose()
            }
        })
        .collect();
    Ok(SmootherOutput {
        means,
        covs,
        cross_covs,
        scan_stats: Some(stats),
    })
}
