//! Parameter initialization: structured factor analysis for the loadings and
//! an autocorrelation-based guess for the length scales.

use nalgebra::{DMatrix, DVector};

use crate::error::{AdmError, Result};
use crate::linalg;
use crate::model::{LatentLayout, TrialSet};

const FA_ITERATIONS: usize = 300;

/// Factor analysis with one loading column per latent: the `m_a` across
/// factors load on every channel, within factor `(w, n)` only on region `n`.
pub(crate) struct StructuredFa {
    /// `D × L`, latent order: across groups, then `(w, n)` with `n` fastest.
    pub loadings: DMatrix<f64>,
    pub noise: DVector<f64>,
}

impl StructuredFa {
    pub fn latent_count(layout: &LatentLayout) -> usize {
        layout.across + layout.within * layout.regions
    }

    fn allowed(layout: &LatentLayout, region: usize) -> Vec<usize> {
        let mut a: Vec<usize> = (0..layout.across).collect();
        for w in 0..layout.within {
            a.push(layout.across + w * layout.regions + region);
        }
        a
    }

    /// Posterior-mean projection `(I + ΛᵀΨ⁻¹Λ)⁻¹ΛᵀΨ⁻¹` (`L × D`).
    pub fn projection(&self) -> DMatrix<f64> {
        let l = self.loadings.ncols();
        let mut wt = self.loadings.transpose();
        for (j, mut c) in wt.column_iter_mut().enumerate() {
            c /= self.noise[j];
        }
        let m = DMatrix::identity(l, l) + &wt * &self.loadings;
        m.cholesky()
            .map(|c| c.solve(&wt))
            .unwrap_or_else(|| DMatrix::zeros(l, self.loadings.nrows()))
    }
}

/// Per-channel mean and pooled covariance over all trials and bins.
pub(crate) fn pooled_moments(data: &TrialSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = data.obs_dim();
    let n = (data.len() * data.bins()) as f64;
    let mut mean = DVector::zeros(d);
    for y in &data.trials {
        mean += y.column_sum();
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for y in &data.trials {
        let mut c = y.clone();
        for mut col in c.column_iter_mut() {
            col -= &mean;
        }
        cov += &c * c.transpose();
    }
    cov /= n;
    linalg::symmetrize(&mut cov);
    for k in 0..d {
        if cov[(k, k)] <= 1e-12 * mean[k].abs().max(1.0).powi(2) {
            return Err(AdmError::Init(format!(
                "channel {k} has zero variance (constant value {})",
                mean[k]
            )));
        }
    }
    Ok((mean, cov))
}

fn top_eigenpairs(m: &DMatrix<f64>, k: usize) -> Vec<(f64, DVector<f64>)> {
    let eig = m.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    idx.into_iter()
        .take(k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .collect()
}

pub(crate) fn structured_fa(
    layout: &LatentLayout,
    cov: &DMatrix<f64>,
) -> Result<StructuredFa> {
    let d = cov.nrows();
    let l = StructuredFa::latent_count(layout);
    let mut lam = DMatrix::zeros(d, l);

    // PCA start: across columns from the pooled covariance, within columns
    // from what remains in each region.
    for (g, (val, vec)) in top_eigenpairs(cov, layout.across).into_iter().enumerate() {
        lam.set_column(g, &(vec * val.max(0.0).sqrt()));
    }
    for i in 0..layout.regions {
        let rows = layout.region_rows(i);
        let la = lam.view((rows.start, 0), (rows.len(), layout.across)).into_owned();
        let resid = cov.view((rows.start, rows.start), (rows.len(), rows.len())).into_owned()
            - &la * la.transpose();
        for (w, (val, vec)) in top_eigenpairs(&resid, layout.within).into_iter().enumerate() {
            let col = layout.across + w * layout.regions + i;
            lam.view_mut((rows.start, col), (rows.len(), 1))
                .copy_from(&(vec * val.max(0.0).sqrt()));
        }
    }
    let diag = cov.diagonal();
    let floor = diag.map(|v| 1e-4 * v);
    let mut psi = DVector::from_fn(d, |k, _| {
        (diag[k] - lam.row(k).norm_squared()).max(0.1 * diag[k])
    });

    let allowed: Vec<Vec<usize>> = (0..layout.regions)
        .map(|i| StructuredFa::allowed(layout, i))
        .collect();
    let region_of: Vec<usize> = (0..layout.regions)
        .flat_map(|i| std::iter::repeat(i).take(layout.region_dims[i]))
        .collect();

    for _ in 0..FA_ITERATIONS {
        let fa = StructuredFa {
            loadings: lam.clone(),
            noise: psi.clone(),
        };
        let b = fa.projection();
        let ezy = &b * cov;
        let mut wt = lam.transpose();
        for (j, mut c) in wt.column_iter_mut().enumerate() {
            c /= psi[j];
        }
        let g = (DMatrix::identity(l, l) + &wt * &lam)
            .cholesky()
            .ok_or_else(|| AdmError::Init("factor-analysis posterior is singular".into()))?
            .inverse();
        let ezz = linalg::symmetrized(g + &ezy * b.transpose());
        let mut change: f64 = 0.0;
        for k in 0..d {
            let a = &allowed[region_of[k]];
            let sub = DMatrix::from_fn(a.len(), a.len(), |r, c| ezz[(a[r], a[c])]);
            let rhs = DVector::from_fn(a.len(), |r, _| ezy[(a[r], k)]);
            let Some(ch) = sub.cholesky() else {
                return Err(AdmError::Init(format!(
                    "factor-analysis regression singular for channel {k}"
                )));
            };
            let row = ch.solve(&rhs);
            let new_psi = (cov[(k, k)] - row.dot(&rhs)).max(floor[k]);
            for (r, &col) in a.iter().enumerate() {
                change = change.max((lam[(k, col)] - row[r]).abs());
                lam[(k, col)] = row[r];
            }
            change = change.max((psi[k] - new_psi).abs() / diag[k]);
            psi[k] = new_psi;
        }
        if change < 1e-9 {
            break;
        }
    }
    Ok(StructuredFa {
        loadings: lam,
        noise: psi,
    })
}

/// Average autocorrelation over the given projected latents, and the first
/// lag at which it falls below `e^{-1/2}` (linearly interpolated).
pub(crate) fn autocorrelation_length(latents: &[DMatrix<f64>], rows: &[usize]) -> f64 {
    let bins = latents.first().map_or(0, |z| z.ncols());
    if bins < 2 || rows.is_empty() {
        return 1.0;
    }
    let max_lag = bins - 1;
    let target = (-0.5f64).exp();
    let mut rho = vec![0.0; max_lag + 1];
    for &j in rows {
        let mut c = vec![0.0; max_lag + 1];
        for z in latents {
            let row = z.row(j);
            let mu = row.mean();
            for (tau, ct) in c.iter_mut().enumerate() {
                let mut acc = 0.0;
                for t in 0..bins - tau {
                    acc += (row[t] - mu) * (row[t + tau] - mu);
                }
                *ct += acc / (bins - tau) as f64;
            }
        }
        if c[0] > 0.0 {
            for tau in 0..=max_lag {
                rho[tau] += c[tau] / c[0] / rows.len() as f64;
            }
        }
    }
    for tau in 1..=max_lag {
        if rho[tau] < target {
            let (a, b) = (rho[tau - 1], rho[tau]);
            let frac = if a > b { (a - target) / (a - b) } else { 1.0 };
            return ((tau - 1) as f64 + frac).max(0.5);
        }
    }
    (bins / 2) as f64
}

/// Plain factor analysis of each region separately.
pub(crate) struct RegionFa {
    /// Per region `dims(i) × M`.
    pub loadings: Vec<DMatrix<f64>>,
    pub noise: DVector<f64>,
    pub mean: DVector<f64>,
    /// Per trial, per region: posterior-mean latents (`M × T`).
    pub latents: Vec<Vec<DMatrix<f64>>>,
}

pub(crate) fn region_fa(layout: &LatentLayout, data: &TrialSet) -> Result<RegionFa> {
    let (mean, cov) = pooled_moments(data)?;
    let m = layout.latents_per_region();
    let mut loadings = Vec::with_capacity(layout.regions);
    let mut noise = DVector::zeros(layout.obs_dim());
    let mut projections = Vec::with_capacity(layout.regions);
    for i in 0..layout.regions {
        let rows = layout.region_rows(i);
        let single = LatentLayout {
            regions: 1,
            across: m,
            within: 0,
            order: layout.order,
            region_dims: vec![rows.len()],
            bins: layout.bins,
        };
        let sub_cov = cov.view((rows.start, rows.start), (rows.len(), rows.len())).into_owned();
        let fa = structured_fa(&single, &sub_cov)?;
        projections.push(fa.projection());
        noise.rows_mut(rows.start, rows.len()).copy_from(&fa.noise);
        loadings.push(fa.loadings);
    }
    let latents = data
        .trials
        .iter()
        .map(|y| {
            (0..layout.regions)
                .map(|i| {
                    let rows = layout.region_rows(i);
                    let mut c = y.rows(rows.start, rows.len()).into_owned();
                    for mut col in c.column_iter_mut() {
                        col -= mean.rows(rows.start, rows.len());
                    }
                    &projections[i] * c
                })
                .collect()
        })
        .collect();
    Ok(RegionFa {
        loadings,
        noise,
        mean,
        latents,
    })
}

/// `Σ_{r,t} z^a_t z^b_{t+τ}ᵀ / n` for one pair of regions.
fn lagged_cross(latents: &[Vec<DMatrix<f64>>], a: usize, b: usize, tau: isize) -> DMatrix<f64> {
    let m = latents[0][a].nrows();
    let bins = latents[0][a].ncols() as isize;
    let mut acc = DMatrix::zeros(m, m);
    let mut n = 0usize;
    for trial in latents {
        let (za, zb) = (&trial[a], &trial[b]);
        for t in 0.max(-tau)..bins.min(bins - tau) {
            acc += za.column(t as usize) * zb.column((t + tau) as usize).transpose();
            n += 1;
        }
    }
    if n > 0 {
        acc /= n as f64;
    }
    acc
}

/// Orthonormal basis of the complement of the columns of `q` (`m × k`).
fn complement(q: &DMatrix<f64>) -> DMatrix<f64> {
    let m = q.nrows();
    let proj = DMatrix::identity(m, m) - q * q.transpose();
    let eig = linalg::symmetrized(proj).symmetric_eigen();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let k = m - q.ncols();
    DMatrix::from_fn(m, k, |r, c| eig.eigenvectors[(r, idx[c])])
}

/// Sub-bin peak location by a parabola through the best lag and its
/// neighbours.
fn refine_peak(scores: &[f64], best: usize) -> f64 {
    if best == 0 || best + 1 >= scores.len() {
        return best as f64;
    }
    let (a, b, c) = (scores[best - 1], scores[best], scores[best + 1]);
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return best as f64;
    }
    best as f64 + (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Lagged alignment of the region latents. For each across group in turn,
/// finds the direction in region 0 and, for every other region, the lag and
/// direction of strongest lagged covariance; the found directions are then
/// removed from later searches. Returns per-region rotations (`M × M`,
/// across directions first, then a basis of the remainder) and the constant
/// delay of each group and region.
pub(crate) fn lagged_alignment(
    latents: &[Vec<DMatrix<f64>>],
    across: usize,
    max_lag: usize,
) -> (Vec<DMatrix<f64>>, Vec<Vec<f64>>) {
    let regions = latents[0].len();
    let m = latents[0][0].nrows();
    if regions < 2 || across == 0 {
        return (vec![DMatrix::identity(m, m); regions], vec![vec![0.0; regions]; across]);
    }
    let lags: Vec<isize> = (-(max_lag as isize)..=max_lag as isize).collect();
    let cross: Vec<Vec<DMatrix<f64>>> = (1..regions)
        .map(|b| lags.iter().map(|&tau| lagged_cross(latents, 0, b, tau)).collect())
        .collect();
    let mut dirs: Vec<Vec<DVector<f64>>> = vec![Vec::new(); regions];
    let mut delays = Vec::with_capacity(across);
    let deflate = |v: DVector<f64>, found: &[DVector<f64>]| {
        let mut v = v;
        for q in found {
            let c = q.dot(&v);
            v -= q * c;
        }
        v
    };
    for _ in 0..across {
        // Region 0 direction: top singular pair over all lags of pair (0, 1).
        let mut best = (f64::NEG_INFINITY, 0usize, DVector::zeros(m));
        for (k, c) in cross[0].iter().enumerate() {
            let pa = projector(m, &dirs[0]);
            let pb = projector(m, &dirs[1]);
            let svd = (&pa * c * &pb).svd(true, false);
            let (i, s) = svd
                .singular_values
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
            if s > best.0 {
                let u = svd.u.as_ref().map(|u| u.column(i).into_owned()).unwrap_or_else(|| DVector::zeros(m));
                best = (s, k, u);
            }
        }
        let u = deflate(best.2, &dirs[0]);
        let u = u.normalize();
        let mut group_delays = vec![0.0; regions];
        for b in 1..regions {
            let pb = projector(m, &dirs[b]);
            let scores: Vec<f64> = cross[b - 1]
                .iter()
                .map(|c| (&pb * c.transpose() * &u).norm())
                .collect();
            let k = scores
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc })
                .0;
            let v = deflate(cross[b - 1][k].transpose() * &u, &dirs[b]).normalize();
            group_delays[b] = refine_peak(&scores, k) - max_lag as f64;
            dirs[b].push(v);
        }
        dirs[0].push(u);
        delays.push(group_delays);
    }
    let rotations = dirs
        .iter()
        .map(|d| {
            let q = DMatrix::from_columns(d);
            let rest = complement(&q);
            let mut r = DMatrix::zeros(m, m);
            r.columns_mut(0, q.ncols()).copy_from(&q);
            r.columns_mut(q.ncols(), rest.ncols()).copy_from(&rest);
            r
        })
        .collect();
    (rotations, delays)
}

fn projector(m: usize, found: &[DVector<f64>]) -> DMatrix<f64> {
    let mut p = DMatrix::identity(m, m);
    for q in found {
        p -= q * q.transpose();
    }
    p
}
