#![allow(dead_code)]

pub mod gradcheck;

use adm::inference::GaussianSequence;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let b = gaussian_matrix(rng, n, n, 1.0 / (n as f64).sqrt());
    &b * b.transpose() + DMatrix::identity(n, n) * floor
}

/// Parameters of a random time-varying linear-Gaussian model plus data.
pub struct RandomLgssm {
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub transitions: Vec<DMatrix<f64>>,
    pub noises: Vec<DMatrix<f64>>,
    pub emission: DMatrix<f64>,
    pub noise_var: DVector<f64>,
    pub bias: DVector<f64>,
    pub data: Vec<DMatrix<f64>>,
}

impl RandomLgssm {
    pub fn new(seed: u64, s: usize, d: usize, t: usize, trials: usize) -> Self {
        let mut rng = rng(seed);
        let prior_mean = gaussian_matrix(&mut rng, s, 1, 0.5).column(0).into_owned();
        let prior_cov = random_spd(&mut rng, s, 0.3);
        let transitions = (0..t)
            .map(|_| gaussian_matrix(&mut rng, s, s, 0.8 / (s as f64).sqrt()))
            .collect();
        let noises = (0..t).map(|_| random_spd(&mut rng, s, 0.1)).collect();
        let emission = gaussian_matrix(&mut rng, d, s, 1.0);
        let noise_var = DVector::from_fn(d, |_, _| rng.random_range(0.2..1.0));
        let bias = gaussian_matrix(&mut rng, d, 1, 1.0).column(0).into_owned();
        let data = (0..trials)
            .map(|_| gaussian_matrix(&mut rng, d, t, 1.5))
            .collect();
        Self {
            prior_mean,
            prior_cov,
            transitions,
            noises,
            emission,
            noise_var,
            bias,
            data,
        }
    }

    pub fn sequence(&self) -> GaussianSequence {
        let refs: Vec<&DMatrix<f64>> = self.data.iter().collect();
        GaussianSequence::from_lgssm(
            self.prior_mean.clone(),
            self.prior_cov.clone(),
            self.transitions.clone(),
            self.noises.clone(),
            &self.emission,
            &self.noise_var,
            &self.bias,
            &refs,
        )
        .unwrap()
    }

    pub fn state_dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn bins(&self) -> usize {
        self.transitions.len()
    }

    /// Prior mean and covariance of the stacked trajectory `[x₀; …; x_{T-1}]`.
    pub fn stacked_prior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let s = self.state_dim();
        let t = self.bins();
        let mut mean = DVector::zeros(s * t);
        let mut cov = DMatrix::zeros(s * t, s * t);
        let mut m = self.prior_mean.clone();
        for k in 0..t {
            if k > 0 {
                m = &self.transitions[k] * m;
            }
            mean.rows_mut(k * s, s).copy_from(&m);
        }
        cov.view_mut((0, 0), (s, s)).copy_from(&self.prior_cov);
        for k in 1..t {
            let f = &self.transitions[k];
            // Cov(x_k, x_j) = F_k Cov(x_{k-1}, x_j) for j < k.
            for j in 0..k {
                let prev = cov.view(((k - 1) * s, j * s), (s, s)).into_owned();
                let blk = f * prev;
                cov.view_mut((k * s, j * s), (s, s)).copy_from(&blk);
                cov.view_mut((j * s, k * s), (s, s)).copy_from(&blk.transpose());
            }
            let prev = cov.view(((k - 1) * s, (k - 1) * s), (s, s)).into_owned();
            let diag = f * prev * f.transpose() + &self.noises[k];
            cov.view_mut((k * s, k * s), (s, s)).copy_from(&diag);
        }
        (mean, cov)
    }

    /// Condition the stacked prior on observations `0..upto` of trial `r`.
    /// Returns the posterior mean, covariance and `log p(y₀:upto)`.
    pub fn dense_posterior(&self, r: usize, upto: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
        let s = self.state_dim();
        let d = self.emission.nrows();
        let (mu, sigma) = self.stacked_prior();
        let n = s * self.bins();
        let mut h = DMatrix::zeros(d * upto, n);
        let mut y = DVector::zeros(d * upto);
        let mut v = DMatrix::zeros(d * upto, d * upto);
        for k in 0..upto {
            h.view_mut((k * d, k * s), (d, s)).copy_from(&self.emission);
            let yk = self.data[r].column(k) - &self.bias;
            y.rows_mut(k * d, d).copy_from(&yk);
            for i in 0..d {
                v[(k * d + i, k * d + i)] = self.noise_var[i];
            }
        }
        let sy = &h * &sigma * h.transpose() + v;
        let chol = sy.clone().cholesky().unwrap();
        let resid = &y - &h * &mu;
        let gain_t = chol.solve(&(&h * &sigma));
        let post_mean = &mu + gain_t.transpose() * &resid;
        let post_cov = &sigma - &sigma * h.transpose() * &gain_t;
        let alpha = chol.solve(&resid);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let ll = -0.5
            * ((d * upto) as f64 * (2.0 * std::f64::consts::PI).ln()
                + logdet
                + resid.dot(&alpha));
        (post_mean, post_cov, ll)
    }

    /// `log p(x, y)` for a full trajectory (`S × T`) and trial `r`.
    pub fn complete_log_density(&self, x: &DMatrix<f64>, r: usize) -> f64 {
        let mut total = gaussian_logpdf(&x.column(0).into_owned(), &self.prior_mean, &self.prior_cov);
        for k in 0..self.bins() {
            if k > 0 {
                let mean = &self.transitions[k] * x.column(k - 1);
                total += gaussian_logpdf(&x.column(k).into_owned(), &mean, &self.noises[k]);
            }
            let mean = &self.emission * x.column(k) + &self.bias;
            let cov = DMatrix::from_diagonal(&self.noise_var);
            total += gaussian_logpdf(&self.data[r].column(k).into_owned(), &mean, &cov);
        }
        total
    }
}

pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().unwrap();
    let r = x - mean;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&chol.solve(&r)))
}

pub fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}

/// Stationary covariance of `x ← A x + q`, `q ~ N(0, Q)`, by doubling:
/// `P = Σₖ Aᵏ Q Aᵏᵀ`.
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = q.clone();
    let mut ak = a.clone();
    for _ in 0..60 {
        let next = &p + &ak * &p * ak.transpose();
        ak = &ak * &ak;
        let done = adm::linalg::max_abs_diff(&next, &p) < 1e-14 * p.amax();
        p = next;
        if done {
            break;
        }
    }
    p
}

/// Model-implied `Cov(y_{t+τ}, y_t)` for `τ = 0…max_lag`.
pub fn implied_lags(ssm: &adm::convert::CompanionSsm, max_lag: usize) -> Vec<DMatrix<f64>> {
    let p = lyapunov(&ssm.transition, &ssm.noise);
    let h = &ssm.mask;
    let mut apow = DMatrix::identity(p.nrows(), p.nrows());
    (0..=max_lag)
        .map(|_| {
            let c = h * &apow * &p * h.transpose();
            apow = &ssm.transition * &apow;
            c
        })
        .collect()
}

/// Largest entry error, each entry scaled by `√(K_ii(0) K_jj(0))`.
pub fn scaled_error(got: &DMatrix<f64>, want: &DMatrix<f64>, k0: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..want.nrows() {
        for j in 0..want.ncols() {
            let scale = (k0[(i, i)] * k0[(j, j)]).sqrt();
            worst = worst.max((got[(i, j)] - want[(i, j)]).abs() / scale);
        }
    }
    worst
}
