//! Transfer-operator world model learned by kernel ridge regression.
//!
//! A fit over transitions `(x_i, a_i, x_i', r_i)` assembles the regularized
//! Gram matrix `K_lambda = G + n*lambda*I` on the state-action kernel, the
//! reward coefficients `b = K_lambda^{-1} y`, and the cross-Gram
//! `H_ij = k(x_i', x_j)` between evolved and anchor states. For a policy
//! `pi`, the action-value estimator is the anchor expansion
//! `q(x, a) = sum_i c_i k(x, x_i) [a == a_i]` whose coefficients solve
//!
//! `(Id - gamma K_lambda^{-1} M_pi) c = b`,   `(M_pi)_ij = H_ij pi(a_j | x_i')`.
//!
//! The solve is carried out as the equivalent dense system
//! `(K_lambda - gamma M_pi) c = y`, which avoids forming `K_lambda^{-1}`.
//! A spectral-radius guard checks `gamma * rho(K_lambda^{-1} M_pi) < 1`
//! before each solve so the underlying Neumann series is convergent.
//!
//! Two interchangeable representations implement the same estimator:
//! [`WorldModel`] keeps every transition as its own anchor (any kernel);
//! [`TabularWorldModel`] merges duplicate `(x, a)` anchors of one-hot
//! discrete problems with multiplicity weights, which caps the coefficient
//! dimension at `|X||A|` and makes the per-iteration solve sparse. Both
//! satisfy [`QModel`] and agree to solver precision on the same data.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::env::{validate_policy_probs, State, Transition, TransitionDataset};
use crate::error::{Error, Result};
use crate::kernel::StateActionKernel;
use crate::oracle::TabularMdp;

/// Coefficients of an action-value estimate in the anchor expansion.
#[derive(Debug, Clone)]
pub struct QEstimate {
    pub c: DVector<f64>,
}

/// An estimate together with the diagnostics gathered while producing it.
#[derive(Debug, Clone)]
pub struct QEstimateInfo {
    pub q: QEstimate,
    /// Power-iteration estimate of `rho(K_lambda^{-1} M_pi)`.
    pub spectral_radius: f64,
    /// Largest per-state logit spread of the evaluated policy; large values
    /// mean the softmax has saturated.
    pub max_logit_spread: f64,
}

/// Number of power iterations for spectral-radius estimation.
const POWER_ITERS: usize = 50;
const POWER_TOL: f64 = 1e-6;
/// Guard margin: the solve is refused when `gamma * rho >= 1 - GUARD_MARGIN`.
const GUARD_MARGIN: f64 = 1e-6;

/// Largest-modulus-eigenvalue estimate of a linear map by power iteration
/// with Aitken extrapolation of the geometric tail.
pub fn spectral_radius(apply: impl Fn(&DVector<f64>) -> DVector<f64>, dim: usize) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    // Positive start vector: for the substochastic-like operators this guard
    // targets, the dominant eigenvector is itself non-negative.
    let mut v = DVector::from_element(dim, 1.0);
    v /= v.norm();
    let mut lambda = 0.0;
    let mut delta_prev = f64::NAN;
    let mut delta = f64::NAN;
    for _ in 0..POWER_ITERS {
        let w = apply(&v);
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            return if norm == 0.0 { 0.0 } else { f64::INFINITY };
        }
        delta_prev = delta;
        delta = norm - lambda;
        lambda = norm;
        v = w / norm;
        if delta.abs() < POWER_TOL {
            break;
        }
    }
    // When the estimates decay geometrically, sum the remaining tail.
    let ratio = delta / delta_prev;
    if ratio.is_finite() && ratio.abs() < 1.0 && delta_prev != 0.0 {
        lambda += delta * ratio / (1.0 - ratio);
    }
    lambda
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn logit_spread(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = logits.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// Common surface of the fitted world-model representations.
pub trait QModel {
    /// Length of coefficient vectors (anchor count).
    fn coeff_len(&self) -> usize;
    fn action_count(&self) -> usize;
    /// Action of anchor `i`; the mirror-descent update adds `c_i` to this
    /// column of the weight matrix.
    fn anchor_action(&self, i: usize) -> usize;
    fn lambda(&self) -> f64;
    fn reward_shift(&self) -> f64;
    /// Re-solves the fit with a new ridge parameter, keeping the data.
    fn refit_with_lambda(&mut self, lambda: f64) -> Result<()>;
    /// Policy logits at `x` for cumulative weights `C`:
    /// `l(x, a) = sum_i k(x, x_i) C[i, a]`.
    fn logits(&self, weights: &DMatrix<f64>, x: &State) -> Result<Vec<f64>>;
    /// Action-value coefficients for an arbitrary policy evaluation function.
    fn estimate_q_policy(
        &self,
        policy: &dyn Fn(&State) -> Vec<f64>,
        gamma: f64,
    ) -> Result<QEstimateInfo>;
    /// Action-value coefficients for the softmax policy defined by weights
    /// `C` and step size `eta`; equivalent to `estimate_q_policy` on that
    /// softmax but reuses the cached cross-Gram.
    fn estimate_q_weights(
        &self,
        weights: &DMatrix<f64>,
        eta: f64,
        gamma: f64,
    ) -> Result<QEstimateInfo>;
    /// Spectral-radius estimate of the policy-conditioned model operator.
    fn operator_norm_estimate(&self, policy: &dyn Fn(&State) -> Vec<f64>) -> Result<f64>;
    /// Evaluates an estimate at one state-action pair.
    fn eval_q(&self, q: &QEstimate, x: &State, a: usize) -> Result<f64>;
    /// States at which cross-round weight reprojection matches logits.
    fn reprojection_states(&self) -> Vec<State>;
    /// Weights whose logits best match `targets` rows at `states`.
    fn weights_from_logit_targets(
        &self,
        states: &[State],
        targets: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>>;
}

/// Retry policy around the contraction guard: on a violation the ridge is
/// increased tenfold and the model refit, at most three times.
pub fn estimate_with_guard<M: QModel>(
    model: &mut M,
    attempt: impl Fn(&M) -> Result<QEstimateInfo>,
) -> Result<QEstimateInfo> {
    const MAX_REFITS: usize = 3;
    let mut last = attempt(model);
    for _ in 0..MAX_REFITS {
        match last {
            Err(Error::ContractionViolation { .. }) => {
                model.refit_with_lambda(model.lambda() * 10.0)?;
                last = attempt(model);
            }
            other => return other,
        }
    }
    last
}

// ---------------------------------------------------------------------------
// Dense representation
// ---------------------------------------------------------------------------

/// Dense world model: one anchor per transition, any kernel family.
pub struct WorldModel {
    kernel: StateActionKernel,
    anchors: Vec<(State, usize)>,
    evolved: Vec<State>,
    /// Shifted rewards (raw reward plus the env's reward shift).
    y: DVector<f64>,
    lambda: f64,
    reward_shift: f64,
    k_lambda: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    h: DMatrix<f64>,
    b: DVector<f64>,
}

impl WorldModel {
    /// Fits the transfer-operator and reward model on a dataset.
    pub fn fit(
        dataset: &TransitionDataset,
        kernel: StateActionKernel,
        lambda: f64,
        reward_shift: f64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument("ridge parameter must be positive".into()));
        }
        let n = dataset.len();
        let mut anchors = Vec::with_capacity(n);
        let mut evolved = Vec::with_capacity(n);
        let mut y = DVector::zeros(n);
        for (i, t) in dataset.transitions.iter().enumerate() {
            anchors.push((t.state, t.action));
            evolved.push(t.next);
            y[i] = t.reward + reward_shift;
            if !y[i].is_finite() {
                return Err(Error::Numerical(format!("non-finite reward at sample {i}")));
            }
        }
        let gram = kernel.gram(&anchors, &anchors)?;
        let anchor_states: Vec<State> = anchors.iter().map(|p| p.0).collect();
        let h = crate::kernel::gram(&kernel.base, &evolved, &anchor_states)?;
        let mut model = Self {
            kernel,
            anchors,
            evolved,
            y,
            lambda: 0.0,
            reward_shift,
            k_lambda: gram,
            chol: Cholesky::new(DMatrix::identity(1, 1)).expect("identity is SPD"),
            h,
            b: DVector::zeros(n),
        };
        model.set_lambda(lambda)?;
        Ok(model)
    }

    /// Replaces the ridge parameter and refactorizes. `k_lambda` is updated
    /// in place by shifting the diagonal, so the Gram is never re-evaluated.
    fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        let n = self.anchors.len();
        let shift = n as f64 * (lambda - self.lambda);
        for i in 0..n {
            self.k_lambda[(i, i)] += shift;
        }
        self.lambda = lambda;
        let nan = self.k_lambda.iter().filter(|v| !v.is_finite()).count();
        if nan > 0 {
            return Err(Error::Numerical(format!("{nan} non-finite Gram entries")));
        }
        self.chol = Cholesky::new(self.k_lambda.clone()).ok_or_else(|| {
            Error::Numerical(format!(
                "Cholesky of K_lambda failed (n = {n}, lambda = {lambda}); \
                 the Gram matrix is not positive definite"
            ))
        })?;
        self.b = self.chol.solve(&self.y);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self) -> &[(State, usize)] {
        &self.anchors
    }

    pub fn evolved(&self) -> &[State] {
        &self.evolved
    }

    pub fn shifted_rewards(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn kernel(&self) -> &StateActionKernel {
        &self.kernel
    }

    pub fn reward_coefficients(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn k_lambda(&self) -> &DMatrix<f64> {
        &self.k_lambda
    }

    pub fn cross_gram(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Policy probabilities at every evolved state, one row per sample, plus
    /// the largest observed logit spread.
    fn policy_rows(&self, policy: &dyn Fn(&State) -> Vec<f64>) -> Result<(DMatrix<f64>, f64)> {
        let n = self.n();
        let a = self.kernel.action_count;
        let mut rows = DMatrix::zeros(n, a);
        let mut spread: f64 = 0.0;
        for (i, x) in self.evolved.iter().enumerate() {
            let probs = policy(x);
            validate_policy_probs(&probs, a)?;
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            for (j, p) in probs.iter().enumerate() {
                rows[(i, j)] = *p;
                hi = hi.max(*p);
                if *p > 0.0 {
                    lo = lo.min(*p);
                } else {
                    spread = f64::INFINITY;
                }
            }
            if spread.is_finite() {
                spread = spread.max((hi / lo).ln());
            }
        }
        Ok((rows, spread))
    }

    /// `M_pi` from policy rows at evolved states.
    fn m_matrix(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.h[(i, j)] * rows[(i, self.anchors[j].1)])
    }

    fn estimate_from_rows(
        &self,
        rows: &DMatrix<f64>,
        spread: f64,
        gamma: f64,
    ) -> Result<QEstimateInfo> {
        let m = self.m_matrix(rows);
        let rho = spectral_radius(|v| self.chol.solve(&(&m * v)), self.n());
        if gamma * rho >= 1.0 - GUARD_MARGIN {
            return Err(Error::ContractionViolation { rho, gamma });
        }
        let mut a = self.k_lambda.clone();
        a -= &m * gamma;
        let c = a
            .lu()
            .solve(&self.y)
            .ok_or_else(|| Error::Numerical("singular (K_lambda - gamma M) system".into()))?;
        Ok(QEstimateInfo { q: QEstimate { c }, spectral_radius: rho, max_logit_spread: spread })
    }
}

impl QModel for WorldModel {
    fn coeff_len(&self) -> usize {
        self.n()
    }

    fn action_count(&self) -> usize {
        self.kernel.action_count
    }

    fn anchor_action(&self, i: usize) -> usize {
        self.anchors[i].1
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn reward_shift(&self) -> f64 {
        self.reward_shift
    }

    fn refit_with_lambda(&mut self, lambda: f64) -> Result<()> {
        self.set_lambda(lambda)
    }

    fn logits(&self, weights: &DMatrix<f64>, x: &State) -> Result<Vec<f64>> {
        let a = self.action_count();
        let mut out = vec![0.0; a];
        for (i, (xi, _)) in self.anchors.iter().enumerate() {
            let w = self.kernel.base.eval(x, xi)?;
            if w != 0.0 {
                for (col, o) in out.iter_mut().enumerate() {
                    *o += w * weights[(i, col)];
                }
            }
        }
        Ok(out)
    }

    fn estimate_q_policy(
        &self,
        policy: &dyn Fn(&State) -> Vec<f64>,
        gamma: f64,
    ) -> Result<QEstimateInfo> {
        let (rows, spread) = self.policy_rows(policy)?;
        self.estimate_from_rows(&rows, spread, gamma)
    }

    fn estimate_q_weights(
        &self,
        weights: &DMatrix<f64>,
        eta: f64,
        gamma: f64,
    ) -> Result<QEstimateInfo> {
        // Logits at evolved states are the rows of H C.
        let logits = &self.h * weights;
        let n = self.n();
        let a = self.action_count();
        let mut rows = DMatrix::zeros(n, a);
        let mut spread: f64 = 0.0;
        let mut scaled = vec![0.0; a];
        for i in 0..n {
            for (j, s) in scaled.iter_mut().enumerate() {
                *s = eta * logits[(i, j)];
            }
            spread = spread.max(logit_spread(&scaled));
            let probs = softmax(&scaled);
            for (j, p) in probs.iter().enumerate() {
                rows[(i, j)] = *p;
            }
        }
        self.estimate_from_rows(&rows, spread, gamma)
    }

    fn operator_norm_estimate(&self, policy: &dyn Fn(&State) -> Vec<f64>) -> Result<f64> {
        let (rows, _) = self.policy_rows(policy)?;
        let m = self.m_matrix(&rows);
        Ok(spectral_radius(|v| self.chol.solve(&(&m * v)), self.n()))
    }

    fn eval_q(&self, q: &QEstimate, x: &State, a: usize) -> Result<f64> {
        let mut sum = 0.0;
        for (i, (xi, ai)) in self.anchors.iter().enumerate() {
            if *ai == a {
                sum += q.c[i] * self.kernel.base.eval(x, xi)?;
            }
        }
        Ok(sum)
    }

    fn reprojection_states(&self) -> Vec<State> {
        self.evolved.clone()
    }

    fn weights_from_logit_targets(
        &self,
        states: &[State],
        targets: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = self.n();
        if states.len() != targets.nrows() || targets.ncols() != self.action_count() {
            return Err(Error::InvalidArgument("target shape mismatch".into()));
        }
        let anchor_states: Vec<State> = self.anchors.iter().map(|p| p.0).collect();
        let phi = crate::kernel::gram(&self.kernel.base, states, &anchor_states)?;
        let mut normal = phi.transpose() * &phi;
        let mu = 1e-8 * n as f64;
        for i in 0..n {
            normal[(i, i)] += mu;
        }
        let rhs = phi.transpose() * targets;
        let chol = Cholesky::new(normal)
            .ok_or_else(|| Error::Numerical("singular reprojection system".into()))?;
        Ok(chol.solve(&rhs))
    }
}

// ---------------------------------------------------------------------------
// Deduplicated tabular representation
// ---------------------------------------------------------------------------

/// One-hot discrete world model with duplicate anchors merged.
///
/// With one-hot state features, distinct `(x, a)` anchors are orthonormal,
/// so the weighted ridge solution over unique anchors is algebraically
/// identical to the dense fit over the duplicated data: the Gram reduces to
/// the identity, the reward coefficients to `m_u ybar_u / (m_u + n lambda)`,
/// and `M_pi` to the empirical next-state law weighted by the policy.
pub struct TabularWorldModel {
    n_states: usize,
    n_actions: usize,
    /// Unique anchors in first-occurrence order.
    slots: Vec<(usize, usize)>,
    slot_of: HashMap<(usize, usize), usize>,
    counts: Vec<f64>,
    /// Mean shifted reward per slot.
    mean_reward: Vec<f64>,
    /// Empirical next-state distribution per slot, sorted by state.
    next_hist: Vec<Vec<(usize, f64)>>,
    /// Distinct next states across all slots.
    next_states: Vec<usize>,
    /// Slots anchored at each state.
    state_slots: Vec<Vec<usize>>,
    total_n: usize,
    lambda: f64,
    reward_shift: f64,
    /// Ridge shrinkage `m / (m + n lambda)` per slot.
    shrink: Vec<f64>,
    b: Vec<f64>,
}

impl TabularWorldModel {
    pub fn fit(
        dataset: &TransitionDataset,
        n_states: usize,
        n_actions: usize,
        lambda: f64,
        reward_shift: f64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument("ridge parameter must be positive".into()));
        }
        let mut slots: Vec<(usize, usize)> = Vec::new();
        let mut slot_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut reward_sum: Vec<f64> = Vec::new();
        let mut next_counts: Vec<HashMap<usize, f64>> = Vec::new();
        for t in &dataset.transitions {
            let (x, xp) = match (t.state.index(), t.next.index()) {
                (Some(x), Some(xp)) if x < n_states && xp < n_states => (x, xp),
                _ => {
                    return Err(Error::InvalidArgument(
                        "tabular fit needs discrete in-range states".into(),
                    ))
                }
            };
            if t.action >= n_actions {
                return Err(Error::InvalidArgument("action out of range".into()));
            }
            if !t.reward.is_finite() {
                return Err(Error::Numerical("non-finite reward".into()));
            }
            let slot = *slot_of.entry((x, t.action)).or_insert_with(|| {
                slots.push((x, t.action));
                counts.push(0.0);
                reward_sum.push(0.0);
                next_counts.push(HashMap::new());
                slots.len() - 1
            });
            counts[slot] += 1.0;
            reward_sum[slot] += t.reward + reward_shift;
            *next_counts[slot].entry(xp).or_insert(0.0) += 1.0;
        }
        let mean_reward: Vec<f64> = reward_sum.iter().zip(&counts).map(|(s, m)| s / m).collect();
        let mut next_hist = Vec::with_capacity(slots.len());
        let mut seen = vec![false; n_states];
        for (slot, nc) in next_counts.iter().enumerate() {
            let mut hist: Vec<(usize, f64)> =
                nc.iter().map(|(x, c)| (*x, c / counts[slot])).collect();
            hist.sort_by_key(|(x, _)| *x);
            for (x, _) in &hist {
                seen[*x] = true;
            }
            next_hist.push(hist);
        }
        let next_states: Vec<usize> = (0..n_states).filter(|x| seen[*x]).collect();
        let mut state_slots = vec![Vec::new(); n_states];
        for (u, (x, _)) in slots.iter().enumerate() {
            state_slots[*x].push(u);
        }
        let mut model = Self {
            n_states,
            n_actions,
            slots,
            slot_of,
            counts,
            mean_reward,
            next_hist,
            next_states,
            state_slots,
            total_n: dataset.len(),
            lambda: 0.0,
            reward_shift,
            shrink: Vec::new(),
            b: Vec::new(),
        };
        model.set_lambda(lambda);
        Ok(model)
    }

    fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
        let ridge = self.total_n as f64 * lambda;
        self.shrink = self.counts.iter().map(|m| m / (m + ridge)).collect();
        self.b = self
            .shrink
            .iter()
            .zip(&self.mean_reward)
            .map(|(s, r)| s * r)
            .collect();
    }

    /// Rebuilds a fitted model from stored sufficient statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn from_stats(
        n_states: usize,
        n_actions: usize,
        slots: Vec<(usize, usize)>,
        counts: Vec<f64>,
        mean_shifted_reward: Vec<f64>,
        next_hist: Vec<Vec<(usize, f64)>>,
        total_n: usize,
        lambda: f64,
        reward_shift: f64,
    ) -> Result<Self> {
        let u = slots.len();
        if counts.len() != u || mean_shifted_reward.len() != u || next_hist.len() != u || u == 0 {
            return Err(Error::InvalidArgument("inconsistent model statistics".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument("ridge parameter must be positive".into()));
        }
        let mut slot_of = HashMap::new();
        let mut state_slots = vec![Vec::new(); n_states];
        let mut seen = vec![false; n_states];
        for (i, (x, a)) in slots.iter().enumerate() {
            if *x >= n_states || *a >= n_actions {
                return Err(Error::InvalidArgument("slot out of range".into()));
            }
            if slot_of.insert((*x, *a), i).is_some() {
                return Err(Error::InvalidArgument("duplicate slot".into()));
            }
            state_slots[*x].push(i);
        }
        for (i, hist) in next_hist.iter().enumerate() {
            let sum: f64 = hist.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-9 || hist.iter().any(|(x, p)| *x >= n_states || *p < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "slot {i} next-state histogram is not a distribution"
                )));
            }
            for (x, _) in hist {
                seen[*x] = true;
            }
        }
        let next_states = (0..n_states).filter(|x| seen[*x]).collect();
        let mut model = Self {
            n_states,
            n_actions,
            slots,
            slot_of,
            counts,
            mean_reward: mean_shifted_reward,
            next_hist,
            next_states,
            state_slots,
            total_n,
            lambda: 0.0,
            reward_shift,
            shrink: Vec::new(),
            b: Vec::new(),
        };
        model.set_lambda(lambda);
        Ok(model)
    }

    pub fn n_unique(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[(usize, usize)] {
        &self.slots
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn mean_shifted_rewards(&self) -> &[f64] {
        &self.mean_reward
    }

    pub fn next_histograms(&self) -> &[Vec<(usize, f64)>] {
        &self.next_hist
    }

    pub fn total_samples(&self) -> usize {
        self.total_n
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }

    /// Policy probabilities at each distinct next state (indexed by state).
    fn policy_at_next(&self, policy: &dyn Fn(&State) -> Vec<f64>) -> Result<(Vec<Vec<f64>>, f64)> {
        let mut rows = vec![Vec::new(); self.n_states];
        let mut spread: f64 = 0.0;
        for &x in &self.next_states {
            let probs = policy(&State::Index(x));
            validate_policy_probs(&probs, self.n_actions)?;
            let hi = probs.iter().cloned().fold(0.0f64, f64::max);
            let lo = probs
                .iter()
                .cloned()
                .filter(|p| *p > 0.0)
                .fold(f64::INFINITY, f64::min);
            if probs.iter().any(|p| *p == 0.0) {
                spread = f64::INFINITY;
            } else if spread.is_finite() {
                spread = spread.max((hi / lo).ln());
            }
            rows[x] = probs;
        }
        Ok((rows, spread))
    }

    /// Applies `B M_pi` to a coefficient vector through the sparse structure.
    fn apply_bm(&self, rows: &[Vec<f64>], c: &[f64], out: &mut [f64]) {
        // s[x] = sum over slots anchored at x of pi(a_slot | x) * c_slot.
        let mut s = vec![0.0; self.n_states];
        for &x in &self.next_states {
            let probs = &rows[x];
            let mut acc = 0.0;
            for &u in &self.state_slots[x] {
                acc += probs[self.slots[u].1] * c[u];
            }
            s[x] = acc;
        }
        for (u, hist) in self.next_hist.iter().enumerate() {
            let mut acc = 0.0;
            for (x, w) in hist {
                acc += w * s[*x];
            }
            out[u] = self.shrink[u] * acc;
        }
    }

    fn estimate_from_rows(
        &self,
        rows: &[Vec<f64>],
        spread: f64,
        gamma: f64,
    ) -> Result<QEstimateInfo> {
        let u = self.n_unique();
        let rho = spectral_radius(
            |v: &DVector<f64>| {
                let mut out = vec![0.0; u];
                self.apply_bm(rows, v.as_slice(), &mut out);
                DVector::from_vec(out)
            },
            u,
        );
        if gamma * rho >= 1.0 - GUARD_MARGIN {
            return Err(Error::ContractionViolation { rho, gamma });
        }
        // Fixed-point iteration c = b + gamma B M c; the map contracts at
        // rate gamma * rho < 1.
        let mut c = self.b.clone();
        let mut next = vec![0.0; u];
        let mut converged = false;
        for _ in 0..200_000 {
            self.apply_bm(rows, &c, &mut next);
            let mut delta: f64 = 0.0;
            let mut scale: f64 = 1.0;
            for i in 0..u {
                next[i] = self.b[i] + gamma * next[i];
                delta = delta.max((next[i] - c[i]).abs());
                scale = scale.max(next[i].abs());
            }
            std::mem::swap(&mut c, &mut next);
            if delta <= 1e-14 * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical("fixed-point solve did not converge".into()));
        }
        Ok(QEstimateInfo {
            q: QEstimate { c: DVector::from_vec(c) },
            spectral_radius: rho,
            max_logit_spread: spread,
        })
    }
}

impl QModel for TabularWorldModel {
    fn coeff_len(&self) -> usize {
        self.n_unique()
    }

    fn action_count(&self) -> usize {
        self.n_actions
    }

    fn anchor_action(&self, i: usize) -> usize {
        self.slots[i].1
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn reward_shift(&self) -> f64 {
        self.reward_shift
    }

    fn refit_with_lambda(&mut self, lambda: f64) -> Result<()> {
        self.set_lambda(lambda);
        Ok(())
    }

    fn logits(&self, weights: &DMatrix<f64>, x: &State) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_actions];
        let xi = match x.index() {
            Some(i) if i < self.n_states => i,
            _ => {
                return Err(Error::InvalidArgument(
                    "tabular logits need a discrete in-range state".into(),
                ))
            }
        };
        for &u in &self.state_slots[xi] {
            for (a, o) in out.iter_mut().enumerate() {
                *o += weights[(u, a)];
            }
        }
        Ok(out)
    }

    fn estimate_q_policy(
        &self,
        policy: &dyn Fn(&State) -> Vec<f64>,
        gamma: f64,
    ) -> Result<QEstimateInfo> {
        let (rows, spread) = self.policy_at_next(policy)?;
        self.estimate_from_rows(&rows, spread, gamma)
    }

    fn estimate_q_weights(
        &self,
        weights: &DMatrix<f64>,
        eta: f64,
        gamma: f64,
    ) -> Result<QEstimateInfo> {
        let mut rows = vec![Vec::new(); self.n_states];
        let mut spread: f64 = 0.0;
        for &x in &self.next_states {
            let mut logits = self.logits(weights, &State::Index(x))?;
            for l in logits.iter_mut() {
                *l *= eta;
            }
            spread = spread.max(logit_spread(&logits));
            rows[x] = softmax(&logits);
        }
        self.estimate_from_rows(&rows, spread, gamma)
    }

    fn operator_norm_estimate(&self, policy: &dyn Fn(&State) -> Vec<f64>) -> Result<f64> {
        let (rows, _) = self.policy_at_next(policy)?;
        let u = self.n_unique();
        Ok(spectral_radius(
            |v: &DVector<f64>| {
                let mut out = vec![0.0; u];
                self.apply_bm(&rows, v.as_slice(), &mut out);
                DVector::from_vec(out)
            },
            u,
        ))
    }

    fn eval_q(&self, q: &QEstimate, x: &State, a: usize) -> Result<f64> {
        let xi = match x.index() {
            Some(i) if i < self.n_states => i,
            _ => {
                return Err(Error::InvalidArgument(
                    "tabular eval needs a discrete in-range state".into(),
                ))
            }
        };
        Ok(self.slot_of.get(&(xi, a)).map_or(0.0, |u| q.c[*u]))
    }

    fn reprojection_states(&self) -> Vec<State> {
        (0..self.n_states)
            .filter(|x| !self.state_slots[*x].is_empty())
            .map(State::Index)
            .collect()
    }

    fn weights_from_logit_targets(
        &self,
        states: &[State],
        targets: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        if states.len() != targets.nrows() || targets.ncols() != self.n_actions {
            return Err(Error::InvalidArgument("target shape mismatch".into()));
        }
        let mut c = DMatrix::zeros(self.n_unique(), self.n_actions);
        for (row, x) in states.iter().enumerate() {
            let xi = match x.index() {
                Some(i) if i < self.n_states => i,
                _ => {
                    return Err(Error::InvalidArgument(
                        "tabular reprojection needs discrete states".into(),
                    ))
                }
            };
            let slots = &self.state_slots[xi];
            if slots.is_empty() {
                continue;
            }
            // Each slot anchored at x contributes a full weight row; an even
            // split reproduces the target exactly under the one-hot kernel.
            let share = 1.0 / slots.len() as f64;
            for &u in slots {
                for a in 0..self.n_actions {
                    c[(u, a)] = targets[(row, a)] * share;
                }
            }
        }
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Builds a dataset whose empirical next-state frequencies equal the exact
/// transition law: every `(x, a)` appears `reps` times with outcome counts
/// `reps * tau(x'|x,a)`, which must be integral. Rewards are the exact
/// expected rewards.
pub fn exhaustive_dataset(mdp: &TabularMdp, reps: usize, env_id: &str) -> Result<TransitionDataset> {
    let mut ds = TransitionDataset::new(env_id, 0, "exhaustive");
    for x in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let row = mdp.transition_row(x, a);
            let mut assigned = 0usize;
            for (xp, p) in row.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                let k = reps as f64 * p;
                if (k - k.round()).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "reps {reps} does not make tau({xp}|{x},{a}) = {p} integral"
                    )));
                }
                for _ in 0..k.round() as usize {
                    ds.push(Transition {
                        state: State::Index(x),
                        action: a,
                        next: State::Index(xp),
                        reward: mdp.reward(x, a),
                        done: false,
                        truncated: false,
                    });
                    assigned += 1;
                }
            }
            if assigned != reps {
                return Err(Error::Numerical("row counts did not add up".into()));
            }
        }
    }
    Ok(ds)
}
