//! Exact Kalman filter for the linear-Gaussian model.
//!
//! The closed-form log p(y_{1:T}) and filtered moments are the reference
//! every particle estimate in this crate is measured against.

use alloc::vec::Vec;

use crate::math;
use crate::ssm::lgssm::LgssmModel;
use crate::ssm::Dataset;

/// Filtered moments after processing y_t, plus the predictive pieces.
#[derive(Clone, Copy, Debug)]
pub struct KalmanStep {
    pub mean: f64,
    pub var: f64,
    /// Predictive mean and variance of y_t given y_{1:t-1}.
    pub y_pred_mean: f64,
    pub y_pred_var: f64,
}

/// Full filter pass: per-step moments and the exact log-likelihood.
pub fn kalman_filter(model: &LgssmModel, data: &Dataset, theta: &[f64]) -> (Vec<KalmanStep>, f64) {
    let (t1, t2) = (theta[0], theta[1]);
    let mut mean = 0.0;
    let mut var = model.init_var;
    let mut loglik = 0.0;
    let mut steps = Vec::with_capacity(data.t_count());
    for &y in &data.y {
        // predict
        let m_pred = t1 * mean;
        let p_pred = t1 * t1 * var + model.trans_var;
        // observe
        let s = t2 * t2 * p_pred + model.obs_var;
        assert!(s > 0.0, "non-positive innovation variance");
        let y_mean = t2 * m_pred;
        let resid = y - y_mean;
        loglik += -0.5 * (math::LN_2PI + math::ln(s)) - 0.5 * resid * resid / s;
        // update
        let gain = p_pred * t2 / s;
        mean = m_pred + gain * resid;
        var = (1.0 - gain * t2) * p_pred;
        steps.push(KalmanStep { mean, var, y_pred_mean: y_mean, y_pred_var: s });
    }
    (steps, loglik)
}

/// Exact log p(y_{1:T}) under the linear-Gaussian model.
pub fn kalman_loglik(model: &LgssmModel, data: &Dataset, theta: &[f64]) -> f64 {
    kalman_filter(model, data, theta).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dataset(y: Vec<f64>) -> Dataset {
        Dataset::new(y).unwrap()
    }

    #[test]
    fn one_step_closed_form() {
        // y_1 ~ N(0, theta2^2 (theta1^2 init_var + trans_var) + obs_var)
        let model = LgssmModel::default();
        let data = dataset(vec![0.0]);
        let got = kalman_loglik(&model, &data, &[0.9, 1.0]);
        let var = 0.81 + 1.0 + 1.0;
        let expect = -0.5 * (math::LN_2PI + math::ln(var));
        assert!((got - expect).abs() < 1e-12);
    }

    // Dense multivariate-Gaussian marginalization for T <= 3: build the
    // covariance of y explicitly and evaluate the joint normal density.
    fn dense_loglik(model: &LgssmModel, y: &[f64], theta: &[f64]) -> f64 {
        let t = y.len();
        assert!(t <= 3);
        let (t1, t2) = (theta[0], theta[1]);
        // latent covariance: P[i][j] = Cov(x_{i+1}, x_{j+1})
        let mut p = [[0.0f64; 3]; 3];
        let mut var = model.init_var;
        for i in 0..t {
            var = t1 * t1 * var + model.trans_var;
            p[i][i] = var;
            let mut cov = var;
            for j in (i + 1)..t {
                cov *= t1;
                p[i][j] = cov;
                p[j][i] = cov;
            }
        }
        // observation covariance
        let mut s = [[0.0f64; 3]; 3];
        for i in 0..t {
            for j in 0..t {
                s[i][j] = t2 * t2 * p[i][j];
            }
            s[i][i] += model.obs_var;
        }
        // log N(y; 0, S) by Cholesky
        let mut l = [[0.0f64; 3]; 3];
        for i in 0..t {
            for j in 0..=i {
                let mut sum = s[i][j];
                for k in 0..j {
                    sum -= l[i][k] * l[j][k];
                }
                if i == j {
                    l[i][i] = math::sqrt(sum);
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        // solve L z = y
        let mut z = [0.0f64; 3];
        for i in 0..t {
            let mut sum = y[i];
            for k in 0..i {
                sum -= l[i][k] * z[k];
            }
            z[i] = sum / l[i][i];
        }
        let mut logdet = 0.0;
        let mut quad = 0.0;
        for i in 0..t {
            logdet += 2.0 * math::ln(l[i][i]);
            quad += z[i] * z[i];
        }
        -0.5 * (t as f64 * math::LN_2PI + logdet + quad)
    }

    #[test]
    fn matches_dense_marginalization_t_up_to_3() {
        let model = LgssmModel::default();
        let theta = [0.9, 1.0];
        for ys in [vec![0.4], vec![0.4, -1.1], vec![0.4, -1.1, 2.0]] {
            let got = kalman_loglik(&model, &dataset(ys.clone()), &theta);
            let expect = dense_loglik(&model, &ys, &theta);
            assert!((got - expect).abs() < 1e-10, "T={}: {got} vs {expect}", ys.len());
        }
        // a different parameterization, off the defaults
        let model = LgssmModel::new(0.5, 2.0, 1.5).unwrap();
        let theta = [0.7, 1.3];
        let ys = vec![1.0, 0.3, -0.8];
        let got = kalman_loglik(&model, &dataset(ys.clone()), &theta);
        let expect = dense_loglik(&model, &ys, &theta);
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn filtered_mean_tracks_strong_signal() {
        // tiny obs noise pins the filtered mean near y / theta2
        let model = LgssmModel::new(1.0, 1e-6, 1.0).unwrap();
        let data = dataset(vec![3.0]);
        let (steps, _) = kalman_filter(&model, &data, &[0.9, 1.0]);
        assert!((steps[0].mean - 3.0).abs() < 1e-4);
    }
}
