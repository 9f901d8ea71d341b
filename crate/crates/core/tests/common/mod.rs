//! Linear-Gaussian chain shared by the smoother oracle and the acceptance run.

use gvi_core::graph::{Factor, FactorGraph};
use gvi_core::liegroup::{Side, Vec3State};
use gvi_core::noise::{GaussianParams, NoiseModel};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Chain {
    m0: Vector3<f64>,
    p0: Matrix3<f64>,
    /// `x_k = x_{k−1} + u_k + w_k`, `w_k ~ N(0, Q_k)`; index 0 unused
    u: Vec<Vector3<f64>>,
    q: Vec<Matrix3<f64>>,
    /// `y_k = x_k + v_k`, `v_k ~ N(0, R_k)`
    y: Vec<Option<(Vector3<f64>, Matrix3<f64>)>>,
}

fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    (a * a.transpose() + Matrix3::identity() * 0.3) * scale
}

pub fn chain(n: usize, seed: u64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = vec![Vector3::zeros()];
    let mut q = vec![Matrix3::zeros()];
    let mut y = Vec::new();
    for k in 0..n {
        if k > 0 {
            u.push(Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)));
            q.push(random_spd(&mut rng, 0.01));
        }
        // every fifth state unobserved
        y.push((k % 5 != 3).then(|| {
            (
                Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
                random_spd(&mut rng, 0.05),
            )
        }));
    }
    Chain {
        m0: Vector3::new(0.1, -0.2, 0.3),
        p0: random_spd(&mut rng, 0.02),
        u,
        q,
        y,
    }
}

/// Smoothed means and marginal covariances.
pub fn rts(c: &Chain) -> (Vec<Vector3<f64>>, Vec<Matrix3<f64>>) {
    let n = c.y.len();
    let mut mf = Vec::with_capacity(n);
    let mut pf = Vec::with_capacity(n);
    let mut mp = Vec::with_capacity(n);
    let mut pp = Vec::with_capacity(n);
    for k in 0..n {
        let (m, p) = if k == 0 {
            (c.m0, c.p0)
        } else {
            (mf[k - 1] + c.u[k], pf[k - 1] + c.q[k])
        };
        mp.push(m);
        pp.push(p);
        let (m, p) = match &c.y[k] {
            Some((yk, r)) => {
                let s: Matrix3<f64> = p + r;
                let gain = p * s.try_inverse().unwrap();
                (m + gain * (yk - m), (Matrix3::identity() - gain) * p)
            }
            None => (m, p),
        };
        mf.push(m);
        pf.push(p);
    }
    let mut ms = mf.clone();
    let mut ps = pf.clone();
    for k in (0..n - 1).rev() {
        let gain = pf[k] * pp[k + 1].try_inverse().unwrap();
        ms[k] = mf[k] + gain * (ms[k + 1] - mp[k + 1]);
        ps[k] = pf[k] + gain * (ps[k + 1] - pp[k + 1]) * gain.transpose();
    }
    (ms, ps)
}

pub fn graph(c: &Chain) -> FactorGraph<Vec3State> {
    let n = c.y.len();
    let model = NoiseModel::Gaussian(GaussianParams::new(1.0).unwrap());
    let mut g = FactorGraph::new(n, Side::Right, model).unwrap();
    g.add(Factor::Prior { k: 0, mean: Vec3State(c.m0), info: c.p0.try_inverse().unwrap() }).unwrap();
    for k in 0..n {
        if k > 0 {
            g.add(Factor::Process { k, increment: c.u[k], info: c.q[k].try_inverse().unwrap() }).unwrap();
        }
        if let Some((yk, r)) = &c.y[k] {
            g.add(Factor::Prior { k, mean: Vec3State(*yk), info: r.try_inverse().unwrap() }).unwrap();
        }
    }
    g
}
