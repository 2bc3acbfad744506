//! Controller synthesis and the run-time control laws.
//!
//! Gains are stored with the sign folded in, so every law reads `u = F x`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::plant::{PlantModel, TICK_SECONDS};

const SDA_MAX_ITER: usize = 200;
const RICCATI_MAX_ITER: usize = 100_000;
const RICCATI_TOL: f64 = 1e-12;

fn invert(m: &Mat, what: &str) -> Result<Mat> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Synthesis(format!("{what} is singular")))
}

fn rel_change(new: &Mat, old: &Mat) -> f64 {
    linalg::max_abs(&(new - old)) / linalg::max_abs(new).max(1.0)
}

/// Stabilizing solution of `P = AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`.
///
/// Uses the structure-preserving doubling iteration and falls back to plain
/// Riccati value iteration when doubling does not settle.
pub fn solve_dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Synthesis(format!(
            "inconsistent DARE dimensions: A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::Synthesis("R must be positive definite".into()));
    }
    if linalg::sym_eigenvalues(q)?.first().copied().unwrap_or(0.0) < -1e-12 {
        return Err(Error::Synthesis("Q must be positive semidefinite".into()));
    }
    let p = match doubling(a, b, q, r) {
        Some(p) => p,
        None => riccati_iteration(a, b, q, r)?,
    };
    let gain = lqr_gain_from(a, b, r, &p)?;
    let rho = linalg::spectral_radius(&(a + b * &gain))?;
    if rho >= 1.0 {
        return Err(Error::Synthesis(format!(
            "Riccati solution does not stabilize the pair (closed-loop spectral radius {rho})"
        )));
    }
    Ok(p)
}

fn doubling(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Option<Mat> {
    let n = a.nrows();
    let eye = Mat::identity(n, n);
    let r_inv = r.clone().try_inverse()?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    for _ in 0..SDA_MAX_ITER {
        let w = (&eye + &gk * &hk).try_inverse()?;
        let aw = &ak * &w;
        let a_next = &aw * &ak;
        let g_next = &gk + &aw * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        if !linalg::all_finite(&h_next) || !linalg::all_finite(&g_next) {
            return None;
        }
        let done = rel_change(&h_next, &hk) <= RICCATI_TOL;
        ak = a_next;
        gk = (&g_next + g_next.transpose()) * 0.5;
        hk = (&h_next + h_next.transpose()) * 0.5;
        if done {
            return Some(hk);
        }
    }
    None
}

fn riccati_iteration(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let next = riccati_step(a, b, q, r, &p)?;
        if !linalg::all_finite(&next) {
            return Err(Error::Synthesis("Riccati iteration diverged".into()));
        }
        if rel_change(&next, &p) <= RICCATI_TOL {
            return Ok(next);
        }
        p = next;
    }
    Err(Error::Synthesis(format!(
        "Riccati iteration did not converge in {RICCATI_MAX_ITER} iterations"
    )))
}

fn riccati_step(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let btp = b.transpose() * p;
    let s = invert(&(r + &btp * b), "R + BᵀPB")?;
    let next = a.transpose() * p * a - a.transpose() * p * b * s * &btp * a + q;
    Ok((&next + next.transpose()) * 0.5)
}

fn lqr_gain_from(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let btp = b.transpose() * p;
    let s = invert(&(r + &btp * b), "R + BᵀPB")?;
    Ok(-(s * btp * a))
}

/// ‖P − AᵀPA + AᵀPB(R+BᵀPB)⁻¹BᵀPA − Q‖∞ (entrywise max).
pub fn dare_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> f64 {
    match riccati_step(a, b, q, r, p) {
        Ok(next) => linalg::max_abs(&(p - next)),
        Err(_) => f64::INFINITY,
    }
}

/// Infinite-horizon discrete LQR gain `F` for the law `u = F x`.
pub fn design_lqr(model: &PlantModel, q: &Mat, r: &Mat) -> Result<Mat> {
    let p = solve_dare(model.a(), model.b(), q, r)?;
    lqr_gain_from(model.a(), model.b(), r, &p)
}

/// Feedback matrix plus the consensus and self-trigger parameters of a team.
#[derive(Debug, Clone)]
pub struct GainSet {
    /// `(N·m) × (N·n)`; block `(i, j)` is agent i's feedback on agent j.
    pub f: Mat,
    pub agents: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    /// Row-stochastic N×N matrix of consensus weights.
    pub consensus_weights: Mat,
    pub track_gain: f64,
    pub integrator_gain: f64,
    /// Self-trigger threshold on the expected squared input error.
    pub delta: f64,
    /// Longest silence a self-triggered agent may request, in rounds.
    pub m_max: u32,
}

impl GainSet {
    pub fn from_feedback(f: Mat, agents: usize, state_dim: usize, input_dim: usize) -> Result<Self> {
        if f.shape() != (agents * input_dim, agents * state_dim) {
            return Err(Error::Config(format!(
                "feedback matrix is {:?}, expected {}x{}",
                f.shape(),
                agents * input_dim,
                agents * state_dim
            )));
        }
        let gs = Self {
            f,
            agents,
            state_dim,
            input_dim,
            consensus_weights: Mat::identity(agents, agents),
            track_gain: 0.0,
            integrator_gain: 0.0,
            delta: 0.0,
            m_max: 1,
        };
        Ok(gs)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agents;
        let mut problems = Vec::new();
        if self.consensus_weights.shape() != (n, n) {
            problems.push(format!("consensus weights must be {n}x{n}"));
        } else {
            for i in 0..n {
                let row = self.consensus_weights.row(i);
                if row.iter().any(|w| *w < 0.0) {
                    problems.push(format!("consensus weight row {i} has a negative entry"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    problems.push(format!("consensus weight row {i} sums to {sum}"));
                }
            }
        }
        if !(self.delta >= 0.0) {
            problems.push(format!("delta must be nonnegative, got {}", self.delta));
        }
        if self.m_max < 1 {
            problems.push("m_max must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn block(&self, i: usize, j: usize) -> Mat {
        self.f
            .view((i * self.input_dim, j * self.state_dim), (self.input_dim, self.state_dim))
            .into_owned()
    }

    /// Agents whose state enters agent `i`'s law.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.agents)
            .filter(|&j| j != i && linalg::max_abs(&self.block(i, j)) > 0.0)
            .collect()
    }
}

/// Team LQR over stacked agent states with pairwise penalties
/// `(x_i − x_j)ᵀ Q_sync (x_i − x_j)` on the listed pairs.
pub fn design_sync_lqr(
    models: &[PlantModel],
    q: &[Mat],
    r: &[Mat],
    q_sync: &Mat,
    pairs: &[(usize, usize)],
) -> Result<GainSet> {
    let agents = models.len();
    if agents == 0 || q.len() != agents || r.len() != agents {
        return Err(Error::Synthesis("need one Q and one R per agent".into()));
    }
    let n = models[0].state_dim();
    let m = models[0].input_dim();
    if models.iter().any(|p| p.state_dim() != n || p.input_dim() != m) {
        return Err(Error::Synthesis("all agents must share state and input dimensions".into()));
    }
    if q_sync.shape() != (n, n) {
        return Err(Error::Synthesis(format!("Q_sync must be {n}x{n}")));
    }
    if linalg::sym_eigenvalues(q_sync)?.first().copied().unwrap_or(0.0) < -1e-12 {
        return Err(Error::Synthesis("Q_sync must be positive semidefinite".into()));
    }
    let a = linalg::block_diag(&models.iter().map(|p| p.a().clone()).collect::<Vec<_>>());
    let b = linalg::block_diag(&models.iter().map(|p| p.b().clone()).collect::<Vec<_>>());
    let mut qa = linalg::block_diag(q);
    let ra = linalg::block_diag(r);
    let mut coupling = Mat::zeros(agents, agents);
    for &(i, j) in pairs {
        if i >= agents || j >= agents || i == j {
            return Err(Error::Synthesis(format!("invalid coupled pair ({i}, {j})")));
        }
        coupling[(i, i)] += 1.0;
        coupling[(j, j)] += 1.0;
        coupling[(i, j)] -= 1.0;
        coupling[(j, i)] -= 1.0;
    }
    qa += linalg::kron(&coupling, q_sync);
    let p = solve_dare(&a, &b, &qa, &ra)?;
    let f = lqr_gain_from(&a, &b, &ra, &p)?;
    GainSet::from_feedback(f, agents, n, m)
}

/// All unordered pairs of `0..n`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Controller-side memory of a remote loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteLoopState {
    /// Prediction of the current plant state.
    pub xhat: Vector,
    /// Input computed last round, due at the plant now.
    pub uhat: Vector,
    /// Input computed the round before that.
    pub uhat_prev: Vector,
    /// Actuator value held by the plant.
    pub u_applied: Vector,
    pub last_meas_round: Option<u64>,
}

impl RemoteLoopState {
    pub fn zero(state_dim: usize, input_dim: usize) -> Self {
        Self {
            xhat: Vector::zeros(state_dim),
            uhat: Vector::zeros(input_dim),
            uhat_prev: Vector::zeros(input_dim),
            u_applied: Vector::zeros(input_dim),
            last_meas_round: None,
        }
    }

    /// Record the input just sent.
    pub fn advance(&mut self, u_next: Vector) {
        self.uhat_prev = std::mem::replace(&mut self.uhat, u_next);
    }
}

/// Model-based prediction of the current state from the (possibly lost)
/// one-round-old measurement.
pub fn remote_estimate(lp: &RemoteLoopState, model: &PlantModel, received_y: Option<&Vector>) -> RemoteLoopState {
    let base = received_y.unwrap_or(&lp.xhat);
    let mut next = lp.clone();
    next.xhat = model.a() * base + model.b() * &lp.uhat_prev;
    next
}

/// Input for the next round, predicted one more step ahead to cover the
/// downlink delay.
pub fn remote_control_input(lp: &RemoteLoopState, model: &PlantModel, f: &Mat) -> Vector {
    f * (model.a() * &lp.xhat + model.b() * &lp.uhat)
}

/// Zero-order hold at the actuator.
pub fn apply_actuation_zoh(phi_received: bool, uhat: &Vector, u_prev: &Vector) -> Vector {
    if phi_received {
        uhat.clone()
    } else {
        u_prev.clone()
    }
}

/// What an agent knows about one peer.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerEstimate {
    pub xhat_j: Vector,
    /// Last input contribution received from the peer.
    pub u12_last: Vector,
    pub last_rx_round: Option<u64>,
}

impl PeerEstimate {
    pub fn zero(state_dim: usize, input_dim: usize) -> Self {
        Self { xhat_j: Vector::zeros(state_dim), u12_last: Vector::zeros(input_dim), last_rx_round: None }
    }
}

/// Hold the latest received peer measurement.
pub fn peer_estimate_zoh(est: &PeerEstimate, received: Option<&Vector>, round: u64) -> PeerEstimate {
    match received {
        Some(y) => PeerEstimate { xhat_j: y.clone(), u12_last: est.u12_last.clone(), last_rx_round: Some(round) },
        None => est.clone(),
    }
}

/// `u_i = F_ii x_i + Σ_{j∈Ω_i} F_ij x̂_j`.
pub fn distributed_input(
    i: usize,
    x_i: &Vector,
    peers: &BTreeMap<usize, PeerEstimate>,
    gains: &GainSet,
) -> Result<Vector> {
    let mut u = gains.block(i, i) * x_i;
    for j in gains.neighbors(i) {
        let est = peers
            .get(&j)
            .ok_or_else(|| Error::Contract(format!("agent {i} has no estimate of neighbor {j}")))?;
        u += gains.block(i, j) * &est.xhat_j;
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub x_des: Vector,
    pub agreed: bool,
    pub agree_round: Option<u64>,
    pub x_star: Option<Vector>,
}

impl ConsensusState {
    pub fn new(initial: Vector) -> Self {
        Self { x_des: initial, agreed: false, agree_round: None, x_star: None }
    }

    pub fn agree(&mut self, round: u64) {
        if !self.agreed {
            self.agreed = true;
            self.agree_round = Some(round);
            self.x_star = Some(self.x_des.clone());
        }
    }
}

/// `x_i,des(k) = p_ii x_i,des(k−1) + Σ p_ij x̂_j,des(k−1)`.
///
/// `received` holds the latest value heard from each peer. Peers with a
/// positive weight that have never been heard lend their weight to the
/// agent itself.
pub fn consensus_update(
    state: &ConsensusState,
    received: &BTreeMap<usize, Vector>,
    weights_row: &[f64],
    self_index: usize,
) -> ConsensusState {
    let mut self_weight = weights_row[self_index];
    let mut acc = Vector::zeros(state.x_des.len());
    for (j, &w) in weights_row.iter().enumerate() {
        if j == self_index || w == 0.0 {
            continue;
        }
        match received.get(&j) {
            Some(v) => acc += v * w,
            None => self_weight += w,
        }
    }
    let mut next = state.clone();
    next.x_des = &state.x_des * self_weight + acc;
    next
}

/// Tracking law after agreement: `F_i (p − x*) + k_I ∫(p − x*)`.
///
/// Returns the input and the accumulator advanced by one tick.
pub fn consensus_track_input(
    position: f64,
    state: &ConsensusState,
    gains: &GainSet,
    integ: f64,
) -> Result<(Vector, f64)> {
    let target = match (&state.x_star, state.agreed) {
        (Some(x), true) => x[0],
        _ => return Err(Error::Contract("tracking requested before agreement".into())),
    };
    let err = position - target;
    let u = gains.track_gain * err + gains.integrator_gain * integ;
    Ok((Vector::from_element(gains.input_dim, u), integ + err * TICK_SECONDS))
}

/// True when every history's last `r + 1` values span less than `tol`.
pub fn agreement_detector(histories: &[&[f64]], tol: f64, r: usize) -> bool {
    histories.iter().all(|h| {
        if h.len() < r + 1 {
            return false;
        }
        let window = &h[h.len() - (r + 1)..];
        let lo = window.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo < tol
    })
}

/// Smallest `M ≥ 1` with `m(M)ᵀm(M) + tr Σ(M) > delta`, capped at `m_max`.
pub fn self_trigger_horizon(
    drift: impl Fn(u32) -> Vector,
    accumulated_cov: impl Fn(u32) -> Mat,
    delta: f64,
    m_max: u32,
) -> u32 {
    let m_max = m_max.max(1);
    if delta <= 0.0 {
        return 1;
    }
    for horizon in 1..=m_max {
        let d = drift(horizon);
        let expected = d.dot(&d) + accumulated_cov(horizon).trace();
        if expected > delta {
            return horizon;
        }
    }
    m_max
}

/// Expected growth of an agent's broadcast input error while it stays silent.
///
/// Between transmissions the agent's state follows `x⁺ = Φ x + B̄ c + v`,
/// with Φ its round-rate dynamics under its own feedback and `c` the peer
/// contributions it holds. The error on the inputs it broadcasts is
/// `G (y(k+M) − y(k))`.
#[derive(Debug, Clone)]
pub struct TriggerPredictor {
    powers: Vec<Mat>,
    /// Σ_{i<M} Φ^i B̄ for each M.
    input_sums: Vec<Mat>,
    /// Σ_{i<M} Φ^i Σ_v Φ^iᵀ for each M.
    state_covs: Vec<Mat>,
    g: Mat,
    sigma_w: Mat,
}

impl TriggerPredictor {
    /// `round_model` holds Φ in `A`, the input map in `B` and the per-round
    /// process noise; `g` stacks the gains applied to this agent's state.
    pub fn new(round_model: &PlantModel, g: Mat, m_max: u32) -> Self {
        let n = round_model.state_dim();
        let mut powers = vec![Mat::identity(n, n)];
        let mut input_sums = vec![Mat::zeros(n, round_model.input_dim())];
        let mut state_covs = vec![Mat::zeros(n, n)];
        for k in 0..m_max as usize {
            let pk = &powers[k];
            input_sums.push(&input_sums[k] + pk * round_model.b());
            state_covs.push(&state_covs[k] + pk * round_model.sigma_v() * pk.transpose());
            powers.push(round_model.a() * pk);
        }
        Self { powers, input_sums, state_covs, g, sigma_w: round_model.sigma_w().clone() }
    }

    pub fn drift(&self, y: &Vector, held: &Vector, horizon: u32) -> Vector {
        let k = horizon as usize;
        &self.g * (&self.powers[k] * y + &self.input_sums[k] * held - y)
    }

    pub fn covariance(&self, horizon: u32) -> Mat {
        let k = horizon as usize;
        &self.g * (&self.state_covs[k] + &self.sigma_w) * self.g.transpose()
    }

    pub fn expected_sq_error(&self, y: &Vector, held: &Vector, horizon: u32) -> f64 {
        let d = self.drift(y, held, horizon);
        d.dot(&d) + self.covariance(horizon).trace()
    }

    pub fn horizon(&self, y: &Vector, held: &Vector, delta: f64, m_max: u32) -> u32 {
        let m_max = m_max.min(self.powers.len() as u32 - 1);
        self_trigger_horizon(|k| self.drift(y, held, k), |k| self.covariance(k), delta, m_max)
    }
}

/// `u_ij = F_ij x_j`, the contribution agent j sends to agent i.
pub fn self_triggered_peer_input(x_j: &Vector, gains: &GainSet, i: usize, j: usize) -> Vector {
    gains.block(i, j) * x_j
}

/// Rows of `F` acting on agent `j`'s state for every other agent, stacked.
pub fn outgoing_gain(gains: &GainSet, j: usize) -> Mat {
    let m = gains.input_dim;
    let mut g = Mat::zeros(m * gains.agents, gains.state_dim);
    for i in (0..gains.agents).filter(|&i| i != j) {
        g.view_mut((i * m, 0), (m, gains.state_dim)).copy_from(&gains.block(i, j));
    }
    g
}
