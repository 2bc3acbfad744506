//! Discrete-time LTI plants driven by Gaussian process and measurement noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::rng::Rng;

/// Local tick length in seconds.
pub const TICK_SECONDS: f64 = 0.01;

/// A state component beyond this magnitude is treated as blow-up.
pub const DIVERGENCE_BOUND: f64 = 1e3;

/// `x(k+1) = A x(k) + B u(k) + v(k)`, `y(k) = x(k) + w(k)`.
#[derive(Debug, Clone)]
pub struct PlantModel {
    a: Mat,
    b: Mat,
    sigma_v: Mat,
    sigma_w: Mat,
    base_interval: u32,
    v_factor: Option<Mat>,
    w_factor: Option<Mat>,
}

impl PlantModel {
    pub fn new(a: Mat, b: Mat, sigma_v: Mat, sigma_w: Mat, base_interval: u32) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Config(format!("A must be square and non-empty, got {:?}", a.shape())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Config(format!("B must be {n}xm with m >= 1, got {:?}", b.shape())));
        }
        for (name, s) in [("SigmaV", &sigma_v), ("SigmaW", &sigma_w)] {
            if s.shape() != (n, n) {
                return Err(Error::Config(format!("{name} must be {n}x{n}, got {:?}", s.shape())));
            }
            if !linalg::is_symmetric(s, 1e-12) {
                return Err(Error::Config(format!("{name} is not symmetric")));
            }
        }
        if base_interval == 0 {
            return Err(Error::Config("base_interval must be positive".into()));
        }
        if ![&a, &b, &sigma_v, &sigma_w].iter().all(|m| linalg::all_finite(m)) {
            return Err(Error::Config("plant matrices contain non-finite entries".into()));
        }
        let v_factor = nonzero_factor(&sigma_v)?;
        let w_factor = nonzero_factor(&sigma_w)?;
        Ok(Self { a, b, sigma_v, sigma_w, base_interval, v_factor, w_factor })
    }

    /// Noise-free model with a one-tick base interval.
    pub fn deterministic(a: Mat, b: Mat) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, b, Mat::zeros(n, n), Mat::zeros(n, n), 1)
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn sigma_v(&self) -> &Mat {
        &self.sigma_v
    }
    pub fn sigma_w(&self) -> &Mat {
        &self.sigma_w
    }
    pub fn base_interval(&self) -> u32 {
        self.base_interval
    }
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn with_noise(&self, sigma_v: Mat, sigma_w: Mat) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), sigma_v, sigma_w, self.base_interval)
    }

    /// The plant under an inner loop `u = K y + u_outer`.
    ///
    /// Measurement noise fed through the inner gain shows up as extra
    /// process noise `B K SigmaW Kᵀ Bᵀ`.
    pub fn with_state_feedback(&self, k: &Mat) -> Result<Self> {
        if k.shape() != (self.input_dim(), self.state_dim()) {
            return Err(Error::Config(format!(
                "inner gain must be {}x{}, got {:?}",
                self.input_dim(),
                self.state_dim(),
                k.shape()
            )));
        }
        let bk = &self.b * k;
        let sigma_v = &self.sigma_v + &bk * &self.sigma_w * bk.transpose();
        let sigma_v = (&sigma_v + sigma_v.transpose()) * 0.5;
        Self::new(&self.a + &bk, self.b.clone(), sigma_v, self.sigma_w.clone(), self.base_interval)
    }
}

fn nonzero_factor(sigma: &Mat) -> Result<Option<Mat>> {
    let l = linalg::psd_factor(sigma)?;
    Ok(if l.iter().all(|v| *v == 0.0) { None } else { Some(l) })
}

fn draw(factor: &Option<Mat>, n: usize, rng: &mut Rng) -> Option<Vector> {
    factor.as_ref().map(|l| {
        let z = Vector::from_fn(n, |_, _| rng.gaussian());
        l * z
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: Vector,
    pub tick: u64,
}

impl PlantState {
    pub fn new(x: Vector) -> Self {
        Self { x, tick: 0 }
    }
}

/// One base interval of the plant under input `u`.
pub fn step_plant(model: &PlantModel, state: &PlantState, u: &Vector, rng: &mut Rng) -> Result<PlantState> {
    if state.x.len() != model.state_dim() || u.len() != model.input_dim() {
        return Err(Error::Config(format!(
            "step_plant: state has {} entries and input {}, model expects {} and {}",
            state.x.len(),
            u.len(),
            model.state_dim(),
            model.input_dim()
        )));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { tick: state.tick, detail: "non-finite control input".into() });
    }
    let mut x = &model.a * &state.x + &model.b * u;
    if let Some(v) = draw(&model.v_factor, model.state_dim(), rng) {
        x += v;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { tick: state.tick, detail: "state became non-finite".into() });
    }
    Ok(PlantState { x, tick: state.tick + u64::from(model.base_interval) })
}

/// Full-state measurement `y = x + w`.
pub fn measure(model: &PlantModel, state: &PlantState, rng: &mut Rng) -> Result<Vector> {
    if state.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { tick: state.tick, detail: "measuring a non-finite state".into() });
    }
    let mut y = state.x.clone();
    if let Some(w) = draw(&model.w_factor, model.state_dim(), rng) {
        y += w;
    }
    Ok(y)
}

/// The model sampled every `steps` base intervals with the input held in between.
pub fn lift_model(model: &PlantModel, steps: u32) -> Result<PlantModel> {
    if steps == 0 {
        return Err(Error::Argument("lift_model needs steps >= 1".into()));
    }
    if steps == 1 {
        return Ok(model.clone());
    }
    let n = model.state_dim();
    let mut power = Mat::identity(n, n);
    let mut power_sum = Mat::zeros(n, n);
    let mut sigma_v = Mat::zeros(n, n);
    for _ in 0..steps {
        power_sum += &power;
        sigma_v += &power * &model.sigma_v * power.transpose();
        power = &power * &model.a;
    }
    let sigma_v = (&sigma_v + sigma_v.transpose()) * 0.5;
    PlantModel::new(
        power,
        power_sum * &model.b,
        sigma_v,
        model.sigma_w.clone(),
        steps * model.base_interval,
    )
}

/// True when some component exceeds [`DIVERGENCE_BOUND`].
pub fn diverged(x: &Vector) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
}

/// Named parameter sets for the cart-pole testbed.
///
/// State order is cart position [m], pole angle [rad], cart velocity [m/s],
/// pole angular velocity [rad/s]; one base interval is 10 ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Least-squares identified model of the self-built carts.
    Selfbuilt,
    /// Selfbuilt with every off-diagonal entry of A scaled by 1.15.
    /// Not a physical system; it only provides heterogeneous agents.
    Perturbed,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "selfbuilt" => Ok(Preset::Selfbuilt),
            "perturbed" => Ok(Preset::Perturbed),
            other => Err(Error::Config(format!("unknown plant preset '{other}'"))),
        }
    }

    pub fn model(self) -> PlantModel {
        let mut a = Mat::from_row_slice(
            4,
            4,
            &[
                1.0, -3e-3, 8e-3, 5e-4, //
                -2e-3, 1.02, -6e-3, 1e-2, //
                1e-2, -0.11, 0.94, 2e-2, //
                1e-2, -2e-2, -8e-2, 1.03,
            ],
        );
        if self == Preset::Perturbed {
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        a[(i, j)] *= 1.15;
                    }
                }
            }
        }
        let b = Mat::from_column_slice(4, 1, &[3e-4, 9e-4, 8e-3, 1e-2]);
        PlantModel::new(a, b, default_sigma_v(), default_sigma_w(), 1).expect("preset is well formed")
    }
}

pub fn default_sigma_v() -> Mat {
    Mat::identity(4, 4) * 1e-6
}

pub fn default_sigma_w() -> Mat {
    linalg::diag(&[1e-6, 1e-6, 1e-5, 1e-5])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise(model: &PlantModel) -> PlantModel {
        let n = model.state_dim();
        model.with_noise(Mat::zeros(n, n), Mat::zeros(n, n)).unwrap()
    }

    #[test]
    fn identity_plant_without_noise_is_static() {
        let m = PlantModel::deterministic(Mat::identity(4, 4), Mat::zeros(4, 1)).unwrap();
        let s = PlantState::new(Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let next = step_plant(&m, &s, &Vector::from_element(1, 7.0), &mut Rng::new(1)).unwrap();
        assert_eq!(next.x, s.x);
        assert_eq!(next.tick, 1);
    }

    #[test]
    fn unit_input_from_rest_yields_b() {
        let m = zero_noise(&Preset::Selfbuilt.model());
        let s = PlantState::new(Vector::zeros(4));
        let next = step_plant(&m, &s, &Vector::from_element(1, 1.0), &mut Rng::new(1)).unwrap();
        let expected = [3e-4, 9e-4, 8e-3, 1e-2];
        for (got, want) in next.x.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn process_noise_mean_matches_dynamics() {
        let sigma2 = 1e-2;
        let base = Preset::Selfbuilt.model();
        let m = base.with_noise(Mat::identity(4, 4) * sigma2, Mat::zeros(4, 4)).unwrap();
        let s = PlantState::new(Vector::from_vec(vec![0.1, -0.05, 0.2, 0.0]));
        let u = Vector::from_element(1, 0.5);
        let mean_expected = m.a() * &s.x + m.b() * &u;
        let n = 100_000;
        let mut rng = Rng::new(99);
        let mut acc = Vector::zeros(4);
        for _ in 0..n {
            acc += step_plant(&m, &s, &u, &mut rng).unwrap().x;
        }
        acc /= n as f64;
        let bound = 4.0 * sigma2.sqrt() / (n as f64).sqrt();
        for i in 0..4 {
            assert!((acc[i] - mean_expected[i]).abs() < bound, "component {i}");
        }
    }

    #[test]
    fn measurement_noise_variance() {
        let m = Preset::Selfbuilt.model().with_noise(Mat::zeros(4, 4), Mat::identity(4, 4) * 1e-4).unwrap();
        let s = PlantState::new(Vector::zeros(4));
        let n = 100_000;
        let mut rng = Rng::new(5);
        let mut sq = Vector::zeros(4);
        for _ in 0..n {
            let y = measure(&m, &s, &mut rng).unwrap();
            sq += y.component_mul(&y);
        }
        for i in 0..4 {
            let var = sq[i] / n as f64;
            assert!((var - 1e-4).abs() < 0.05 * 1e-4, "component {i}: {var}");
        }
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let m = zero_noise(&Preset::Selfbuilt.model());
        let s = PlantState::new(Vector::from_vec(vec![0.3, 0.1, -0.2, 0.4]));
        assert_eq!(measure(&m, &s, &mut Rng::new(0)).unwrap(), s.x);
        let z = PlantState::new(Vector::zeros(4));
        assert_eq!(measure(&m, &z, &mut Rng::new(0)).unwrap(), Vector::zeros(4));
    }

    #[test]
    fn lift_by_one_is_identity() {
        let m = Preset::Selfbuilt.model();
        let l = lift_model(&m, 1).unwrap();
        assert_eq!(l.a(), m.a());
        assert_eq!(l.b(), m.b());
        assert_eq!(l.sigma_v(), m.sigma_v());
        assert!(lift_model(&m, 0).is_err());
    }

    #[test]
    fn lift_scalar_diagonal_geometric_sum() {
        let a = 0.9;
        let m = PlantModel::deterministic(Mat::identity(2, 2) * a, Mat::from_column_slice(2, 1, &[1.0, 2.0])).unwrap();
        let l = lift_model(&m, 3).unwrap();
        assert!(linalg::max_abs(&(l.a() - Mat::identity(2, 2) * a.powi(3))) < 1e-15);
        let g = 1.0 + a + a * a;
        assert!((l.b()[(0, 0)] - g).abs() < 1e-15 && (l.b()[(1, 0)] - 2.0 * g).abs() < 1e-15);
        assert_eq!(l.base_interval(), 3);
    }

    #[test]
    fn lift_matches_repeated_stepping() {
        let m = zero_noise(&Preset::Selfbuilt.model());
        let lifted = lift_model(&m, 10).unwrap();
        let mut rng = Rng::new(0);
        for (x0, u0) in [([0.1, 0.02, -0.3, 0.5], 1.5), ([0.0, 0.0, 0.0, 0.0], -2.0)] {
            let u = Vector::from_element(1, u0);
            let mut s = PlantState::new(Vector::from_row_slice(&x0));
            for _ in 0..10 {
                s = step_plant(&m, &s, &u, &mut rng).unwrap();
            }
            let direct = lifted.a() * Vector::from_row_slice(&x0) + lifted.b() * &u;
            assert!((s.x - direct).amax() < 1e-12);
        }
    }

    #[test]
    fn lift_composes() {
        let m = Preset::Perturbed.model();
        let l6 = lift_model(&m, 6).unwrap();
        let l23 = lift_model(&lift_model(&m, 2).unwrap(), 3).unwrap();
        assert!(linalg::max_abs(&(l6.a() - l23.a())) < 1e-12);
        assert!(linalg::max_abs(&(l6.b() - l23.b())) < 1e-12);
        assert!(linalg::max_abs(&(l6.sigma_v() - l23.sigma_v())) < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let m = Preset::Selfbuilt.model();
        let s = PlantState::new(Vector::zeros(3));
        let err = step_plant(&m, &s, &Vector::zeros(1), &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let bad = Mat::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(PlantModel::new(Mat::identity(2, 2), Mat::zeros(2, 1), bad, Mat::zeros(2, 2), 1).is_err());
    }

    #[test]
    fn process_noise_is_white() {
        let m = PlantModel::new(Mat::zeros(1, 1), Mat::zeros(1, 1), Mat::identity(1, 1), Mat::zeros(1, 1), 1).unwrap();
        let mut rng = Rng::new(17);
        let s = PlantState::new(Vector::zeros(1));
        let n = 100_000;
        let v: Vec<f64> = (0..n)
            .map(|_| step_plant(&m, &s, &Vector::zeros(1), &mut rng).unwrap().x[0])
            .collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        for lag in 1..4 {
            let cov: f64 = (lag..n).map(|i| (v[i] - mean) * (v[i - lag] - mean)).sum();
            assert!((cov / var).abs() < 4.0 / (n as f64).sqrt(), "lag {lag}");
        }
    }
}
