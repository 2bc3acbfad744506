//! Mean-square stability of loops closed over lossy links, and dwell-time
//! bounds for switching between individually stable modes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::plant::PlantModel;

/// Jump-linear closed loop `z⁺ = A_j z` with `j` drawn i.i.d. each round.
#[derive(Debug, Clone)]
pub struct ClosedLoopEnsemble {
    members: Vec<(f64, Mat)>,
    dim: usize,
}

impl ClosedLoopEnsemble {
    pub fn new(members: Vec<(f64, Mat)>) -> Result<Self> {
        let dim = members
            .first()
            .map(|(_, a)| a.nrows())
            .ok_or_else(|| Error::Argument("ensemble needs at least one member".into()))?;
        let mut total = 0.0;
        for (p, a) in &members {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Argument(format!("member probability {p} outside [0, 1]")));
            }
            if a.shape() != (dim, dim) {
                return Err(Error::Argument(format!("member is {:?}, expected {dim}x{dim}", a.shape())));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("member probabilities sum to {total}")));
        }
        Ok(Self { members, dim })
    }

    pub fn members(&self) -> &[(f64, Mat)] {
        &self.members
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.members.iter().map(|(p, _)| *p).collect()
    }

    /// Second-moment operator `Σ p_j A_j ⊗ A_j`.
    pub fn second_moment_operator(&self) -> Mat {
        let d2 = self.dim * self.dim;
        self.members
            .iter()
            .fold(Mat::zeros(d2, d2), |acc, (p, a)| acc + linalg::kron(a, a) * *p)
    }

    fn lyapunov_map(&self, p: &Mat) -> Mat {
        self.members
            .iter()
            .fold(Mat::zeros(self.dim, self.dim), |acc, (w, a)| acc + a.transpose() * p * a * *w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Sensor and actuator at the plant, controller across the network.
    Remote,
    /// Two agents with local feedback exchanging measurements.
    DistributedPair,
}

impl Architecture {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "remote" => Ok(Self::Remote),
            "distributed-pair" | "distributed_pair" => Ok(Self::DistributedPair),
            other => Err(Error::Argument(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Closed-loop matrix of the remote loop for one delivery outcome.
///
/// State `z = (x, x̂, û, u_prev)`: plant state, controller prediction,
/// input due at the plant and the input the actuator currently holds.
/// `theta` is the sensor message of this round, `phi` the control message
/// carrying `û`.
pub fn remote_closed_loop(model: &PlantModel, f: &Mat, theta: bool, phi: bool) -> Mat {
    let n = model.state_dim();
    let m = model.input_dim();
    let a = model.a();
    let b = model.b();
    let (t, p) = (theta as u8 as f64, phi as u8 as f64);
    let d = 2 * n + 2 * m;
    let mut z = Mat::zeros(d, d);
    let (ix, ih, iu, ip) = (0, n, 2 * n, 2 * n + m);
    // x⁺ = A x + B(φ û + (1−φ) u_prev)
    z.view_mut((ix, ix), (n, n)).copy_from(a);
    z.view_mut((ix, iu), (n, m)).copy_from(&(b * p));
    z.view_mut((ix, ip), (n, m)).copy_from(&(b * (1.0 - p)));
    // x̂⁺ = θ A x + (1−θ) A x̂ + B û
    z.view_mut((ih, ix), (n, n)).copy_from(&(a * t));
    z.view_mut((ih, ih), (n, n)).copy_from(&(a * (1.0 - t)));
    z.view_mut((ih, iu), (n, m)).copy_from(b);
    // û⁺ = F(A x̂ + B û)
    z.view_mut((iu, ih), (m, n)).copy_from(&(f * a));
    z.view_mut((iu, iu), (m, m)).copy_from(&(f * b));
    // u_prev⁺ = φ û + (1−φ) u_prev
    z.view_mut((ip, iu), (m, m)).copy_from(&(Mat::identity(m, m) * p));
    z.view_mut((ip, ip), (m, m)).copy_from(&(Mat::identity(m, m) * (1.0 - p)));
    z
}

/// Closed-loop matrix of two agents coupled through held peer measurements.
///
/// State `z = (x1, x2, h12, h21)` with `h_ij` agent i's copy of `x_j`.
/// `theta12` is delivery of agent 2's measurement to agent 1.
pub fn pair_closed_loop(models: [&PlantModel; 2], f: &Mat, theta12: bool, theta21: bool) -> Mat {
    let n = models[0].state_dim();
    let m = models[0].input_dim();
    let (a1, b1) = (models[0].a(), models[0].b());
    let (a2, b2) = (models[1].a(), models[1].b());
    let blk = |i: usize, j: usize| f.view((i * m, j * n), (m, n)).into_owned();
    let mut z = Mat::zeros(4 * n, 4 * n);
    let (x1, x2, h12, h21) = (0, n, 2 * n, 3 * n);
    z.view_mut((x1, x1), (n, n)).copy_from(&(a1 + b1 * blk(0, 0)));
    z.view_mut((x1, h12), (n, n)).copy_from(&(b1 * blk(0, 1)));
    z.view_mut((x2, x2), (n, n)).copy_from(&(a2 + b2 * blk(1, 1)));
    z.view_mut((x2, h21), (n, n)).copy_from(&(b2 * blk(1, 0)));
    let eye = Mat::identity(n, n);
    let (t12, t21) = (theta12 as u8 as f64, theta21 as u8 as f64);
    z.view_mut((h12, x2), (n, n)).copy_from(&(&eye * t12));
    z.view_mut((h12, h12), (n, n)).copy_from(&(&eye * (1.0 - t12)));
    z.view_mut((h21, x1), (n, n)).copy_from(&(&eye * t21));
    z.view_mut((h21, h21), (n, n)).copy_from(&(&eye * (1.0 - t21)));
    z
}

/// Ensemble over the four joint delivery outcomes with independent losses.
///
/// `loss_theta` and `loss_phi` are loss probabilities. For the remote loop
/// they apply to the sensor and control message; for the pair they apply to
/// the links 2→1 and 1→2. `model` runs at the network rate.
pub fn build_ensemble(
    model: &PlantModel,
    f: &Mat,
    loss_theta: f64,
    loss_phi: f64,
    architecture: Architecture,
) -> Result<ClosedLoopEnsemble> {
    for p in [loss_theta, loss_phi] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Argument(format!("loss probability {p} outside [0, 1]")));
        }
    }
    let mut law = Vec::new();
    for (t, pt) in [(true, 1.0 - loss_theta), (false, loss_theta)] {
        for (p, pp) in [(true, 1.0 - loss_phi), (false, loss_phi)] {
            law.push((pt * pp, t, p));
        }
    }
    build_ensemble_from_law(model, f, &law, architecture)
}

/// Ensemble from an explicit joint law over `(probability, first, second)`
/// delivery outcomes. Zero-probability outcomes are dropped.
pub fn build_ensemble_from_law(
    model: &PlantModel,
    f: &Mat,
    law: &[(f64, bool, bool)],
    architecture: Architecture,
) -> Result<ClosedLoopEnsemble> {
    build_ensemble_pair_models([model, model], f, law, architecture)
}

/// As [`build_ensemble_from_law`] with a separate model per agent of a pair.
/// The remote loop uses the first model.
pub fn build_ensemble_pair_models(
    models: [&PlantModel; 2],
    f: &Mat,
    law: &[(f64, bool, bool)],
    architecture: Architecture,
) -> Result<ClosedLoopEnsemble> {
    let model = models[0];
    if models[1].state_dim() != model.state_dim() || models[1].input_dim() != model.input_dim() {
        return Err(Error::Argument("paired models differ in dimension".into()));
    }
    let (n, m) = (model.state_dim(), model.input_dim());
    let expected = match architecture {
        Architecture::Remote => (m, n),
        Architecture::DistributedPair => (2 * m, 2 * n),
    };
    if f.shape() != expected {
        return Err(Error::Argument(format!("gain is {:?}, expected {expected:?}", f.shape())));
    }
    let members = law
        .iter()
        .filter(|(p, _, _)| *p > 0.0)
        .map(|&(p, a, b)| {
            let m = match architecture {
                Architecture::Remote => remote_closed_loop(model, f, a, b),
                Architecture::DistributedPair => pair_closed_loop(models, f, a, b),
            };
            (p, m)
        })
        .collect();
    ClosedLoopEnsemble::new(members)
}

/// Joint law of the two exchange directions of a pair of non-host nodes
/// when a node that misses the beacon neither sends nor listens.
pub fn pair_delivery_law(beacon_loss: f64, loss: f64) -> Vec<(f64, bool, bool)> {
    let hear = 1.0 - beacon_loss;
    let both = hear * hear;
    let mut law = vec![(1.0 - both, false, false)];
    for (a, pa) in [(true, 1.0 - loss), (false, loss)] {
        for (b, pb) in [(true, 1.0 - loss), (false, loss)] {
            if !a && !b {
                law[0].0 += both * pa * pb;
            } else {
                law.push((both * pa * pb, a, b));
            }
        }
    }
    law
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub spectral_radius: f64,
    pub stable: bool,
    pub dim: usize,
    pub probabilities: Vec<f64>,
}

/// Second-moment test `ρ(Σ p_j A_j ⊗ A_j) < 1`.
pub fn mean_square_stable(ens: &ClosedLoopEnsemble) -> Result<StabilityReport> {
    let rho = linalg::spectral_radius(&ens.second_moment_operator())?;
    Ok(StabilityReport {
        spectral_radius: rho,
        stable: rho < 1.0,
        dim: ens.dim * ens.dim,
        probabilities: ens.probabilities(),
    })
}

/// Lyapunov matrix `P ≻ 0` with `Σ p_j A_jᵀ P A_j ⪯ rho² P`.
///
/// Solves `P = I + L(P)/γ` with `γ` halfway between the second-moment
/// radius and 1, then reports the smallest `rho` the matrix certifies.
pub fn lyapunov_certificate(ens: &ClosedLoopEnsemble) -> Result<(Mat, f64)> {
    let report = mean_square_stable(ens)?;
    if !report.stable {
        return Err(Error::Numerical(format!(
            "no certificate: second-moment spectral radius {} is not below 1",
            report.spectral_radius
        )));
    }
    let d = ens.dim;
    let gamma = 0.5 * (1.0 + report.spectral_radius);
    // vec(AᵀPA) = (Aᵀ ⊗ Aᵀ) vec(P)
    let lt = ens.second_moment_operator().transpose();
    let system = Mat::identity(d * d, d * d) - lt / gamma;
    let rhs = linalg::vec_of(&Mat::identity(d, d));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov system is singular".into()))?;
    let p = linalg::unvec(&sol, d);
    let p = (&p + p.transpose()) * 0.5;
    if !linalg::all_finite(&p) {
        return Err(Error::Numerical("Lyapunov solve produced non-finite entries".into()));
    }
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Lyapunov matrix is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Lyapunov factor is singular".into()))?;
    let scaled = &l_inv * ens.lyapunov_map(&p) * l_inv.transpose();
    let top = linalg::sym_eigenvalues(&((&scaled + scaled.transpose()) * 0.5))?
        .last()
        .copied()
        .unwrap_or(0.0);
    Ok((p, top.max(0.0).sqrt()))
}

#[derive(Debug, Clone)]
pub struct ModeStabilityData {
    pub p: Mat,
    pub rho: f64,
}

impl ModeStabilityData {
    pub fn from_ensemble(ens: &ClosedLoopEnsemble) -> Result<Self> {
        let (p, rho) = lyapunov_certificate(ens)?;
        Ok(Self { p, rho })
    }
}

/// Smallest `μ ≥ 1` with `P_i ⪯ μ P_j` for every ordered pair of modes.
pub fn level_ratio(modes: &[ModeStabilityData]) -> Result<f64> {
    let mut mu: f64 = 1.0;
    for (i, mi) in modes.iter().enumerate() {
        for (j, mj) in modes.iter().enumerate() {
            if i == j {
                continue;
            }
            let chol = mj
                .p
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical(format!("mode {j} Lyapunov matrix is not positive definite")))?;
            let l_inv = chol
                .l()
                .try_inverse()
                .ok_or_else(|| Error::Numerical(format!("mode {j} Lyapunov factor is singular")))?;
            let s = &l_inv * &mi.p * l_inv.transpose();
            let top = linalg::sym_eigenvalues(&((&s + s.transpose()) * 0.5))?
                .last()
                .copied()
                .unwrap_or(1.0);
            mu = mu.max(top);
        }
    }
    Ok(mu)
}

/// `τ_a = ln μ / ln(1/ρ_max)` in rounds; 0 when no switching penalty exists.
pub fn average_dwell_time(modes: &[ModeStabilityData]) -> Result<f64> {
    if let Some((i, m)) = modes.iter().enumerate().find(|(_, m)| !(m.rho < 1.0)) {
        return Err(Error::Numerical(format!("unstable mode admitted: mode {i} has rho {}", m.rho)));
    }
    if modes.len() < 2 {
        return Ok(0.0);
    }
    let mu = level_ratio(modes)?;
    if mu <= 1.0 + 1e-12 {
        return Ok(0.0);
    }
    let rho_max = modes.iter().map(|m| m.rho).fold(0.0, f64::max);
    if rho_max == 0.0 {
        return Ok(0.0);
    }
    Ok(mu.ln() / (1.0 / rho_max).ln())
}

/// Scalar loop applying `a_closed` with probability `q` and `a_open`
/// otherwise.
pub fn scalar_loss_ensemble(q: f64, a_closed: f64, a_open: f64) -> Result<ClosedLoopEnsemble> {
    ClosedLoopEnsemble::new(vec![
        (q, Mat::from_element(1, 1, a_closed)),
        (1.0 - q, Mat::from_element(1, 1, a_open)),
    ])
}

/// Delivery probability at which the scalar loss loop turns mean-square
/// stable, located by bisection on the verdict.
pub fn scalar_stability_boundary(a_closed: f64, a_open: f64, tol: f64) -> Result<f64> {
    let verdict = |q: f64| -> Result<bool> { Ok(mean_square_stable(&scalar_loss_ensemble(q, a_closed, a_open)?)?.stable) };
    let (mut lo, mut hi) = (0.0, 1.0);
    if verdict(lo)? || !verdict(hi)? {
        return Err(Error::Argument("verdict does not change over q in [0, 1]".into()));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if verdict(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
