use nalgebra::DMatrix;

use super::{predict, smoother_gain, update, FilterOutput, GaussianSequence, SmootherOutput};
use crate::error::Result;
use crate::linalg;

/// Time-varying Kalman filter, one step after another.
pub fn seq_filter(seq: &GaussianSequence) -> Result<FilterOutput> {
    let bins = seq.bins();
    let r = seq.trials();
    let mut out = FilterOutput {
        predicted_means: Vec::with_capacity(bins),
        predicted_covs: Vec::with_capacity(bins),
        filtered_means: Vec::with_capacity(bins),
        filtered_covs: Vec::with_capacity(bins),
        log_evidence: Vec::with_capacity(bins),
        scan_stats: None,
    };
    for t in 0..bins {
        let (m_pred, p_pred) = if t == 0 {
            let mut m = DMatrix::zeros(seq.state_dim(), r);
            for mut c in m.column_iter_mut() {
                c.copy_from(&seq.prior_mean);
            }
            (m, seq.prior_cov.clone())
        } else {
            predict(
                &out.filtered_means[t - 1],
                &out.filtered_covs[t - 1],
                &seq.transitions[t],
                &seq.noises[t],
            )
        };
        let up = update(&m_pred, &p_pred, &seq.observations[t], t)?;
        out.predicted_means.push(m_pred);
        out.predicted_covs.push(p_pred);
        out.filtered_means.push(up.mean);
        out.filtered_covs.push(up.cov);
        out.log_evidence.push(up.evidence);
    }
    Ok(out)
}

/// Rauch–Tung–Striebel backward pass.
pub fn seq_smoother(seq: &GaussianSequence, filt: &FilterOutput) -> Result<SmootherOutput> {
    let bins = seq.bins();
    let s = seq.state_dim();
    let mut means = filt.filtered_means.clone();
    let mut covs = filt.filtered_covs.clone();
    let mut cross_covs = vec![DMatrix::zeros(s, s); bins];
    for t in (0..bins.saturating_sub(1)).rev() {
        let g = smoother_gain(
            &filt.filtered_covs[t],
            &seq.transitions[t + 1],
            &filt.predicted_covs[t + 1],
            t,
        )?;
        let dm = &means[t + 1] - &filt.predicted_means[t + 1];
        means[t] = &filt.filtered_means[t] + &g * dm;
        let dp = &covs[t + 1] - &filt.predicted_covs[t + 1];
        covs[t] = linalg::symmetrized(&filt.filtered_covs[t] + &g * dp * g.transpose());
        cross_covs[t + 1] = &covs[t + 1] * g.transpose();
    }
    Ok(SmootherOutput {
        means,
        covs,
        cross_covs,
        scan_stats: None,
    })
}
