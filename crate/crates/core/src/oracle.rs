//! Exact tabular oracle.
//!
//! Dense linear-algebra reference implementations over finite MDPs: the true
//! transfer operator in matrix form, exact action values, values and
//! objective, the discounted state-visitation measure, exact mirror-descent
//! iterations, and numerical checks of the operator identities (performance
//! difference, simulation identity, inverse-swap, Markov-operator facts).
//! Everything here is a pure function of its inputs and is deliberately dense
//! and small: it exists to validate the estimators, not to scale.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Hard cap on |X||A| for dense oracle solves.
pub const MAX_PAIRS: usize = 5000;

/// Exact finite MDP: transition tensor, expected-reward table, discount and
/// start distribution.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-stochastic tensor, flattened as `[x][a][x']`.
    p: Vec<f64>,
    /// Expected reward per `(x, a)` pair, flattened as `[x][a]`.
    r: Vec<f64>,
    pub gamma: f64,
    /// Start distribution over states.
    pub nu: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
        nu: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument("empty state or action space".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} not in [0,1)")));
        }
        if p.len() != n_states * n_actions * n_states || r.len() != n_states * n_actions {
            return Err(Error::InvalidArgument("tensor shape mismatch".into()));
        }
        if nu.len() != n_states {
            return Err(Error::InvalidArgument("start distribution shape mismatch".into()));
        }
        for x in 0..n_states {
            for a in 0..n_actions {
                let row = &p[(x * n_actions + a) * n_states..(x * n_actions + a + 1) * n_states];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || row.iter().any(|v| *v < -1e-15) {
                    return Err(Error::InvalidArgument(format!(
                        "transition row ({x},{a}) is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite reward".into()));
        }
        let nu_sum: f64 = nu.iter().sum();
        if (nu_sum - 1.0).abs() > 1e-10 || nu.iter().any(|v| *v < -1e-15) {
            return Err(Error::InvalidArgument("start distribution does not sum to 1".into()));
        }
        Ok(Self { n_states, n_actions, p, r, gamma, nu })
    }

    /// Same MDP with a different discount.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} not in [0,1)")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Flat index of the pair `(x, a)`.
    pub fn pair(&self, x: usize, a: usize) -> usize {
        x * self.n_actions + a
    }

    /// Transition row `tau(.|x, a)`.
    pub fn transition_row(&self, x: usize, a: usize) -> &[f64] {
        let i = self.pair(x, a) * self.n_states;
        &self.p[i..i + self.n_states]
    }

    pub fn reward(&self, x: usize, a: usize) -> f64 {
        self.r[self.pair(x, a)]
    }

    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.r)
    }

    /// Transfer operator restricted to the tabular basis: an
    /// `(|X||A|) x |X|` matrix sending state functions to state-action
    /// functions.
    pub fn transfer_matrix(&self) -> DMatrix<f64> {
        let (s, a) = (self.n_states, self.n_actions);
        DMatrix::from_fn(s * a, s, |pair, xp| self.p[pair * s + xp])
    }

    fn check_cap(&self) -> Result<()> {
        if self.n_pairs() > MAX_PAIRS {
            return Err(Error::InvalidArgument(format!(
                "oracle capped at {MAX_PAIRS} state-action pairs, got {}",
                self.n_pairs()
            )));
        }
        Ok(())
    }
}

/// Stochastic policy table, rows `pi(.|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::InvalidArgument("policy shape mismatch".into()));
        }
        for x in 0..n_states {
            let row = &probs[x * n_actions..(x + 1) * n_actions];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|v| *v < -1e-12 || !v.is_finite()) {
                return Err(Error::Policy(format!("row {x} is not a distribution")));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy from an action per state.
    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; n_states * n_actions];
        for (x, &a) in actions.iter().enumerate() {
            probs[x * n_actions + a] = 1.0;
        }
        Self { n_states, n_actions, probs }
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[x * self.n_actions + a]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Policy operator in the tabular basis: an `|X| x (|X||A|)` matrix
    /// averaging state-action functions over the policy.
    pub fn operator_matrix(&self) -> DMatrix<f64> {
        let (s, a) = (self.n_states, self.n_actions);
        let mut m = DMatrix::zeros(s, s * a);
        for x in 0..s {
            for act in 0..a {
                m[(x, x * a + act)] = self.prob(x, act);
            }
        }
        m
    }

    /// Largest absolute difference in action probabilities over all states.
    pub fn max_prob_diff(&self, other: &TabularPolicy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves `(Id - gamma T P_pi) q = r` exactly; `q` is indexed by pair.
pub fn exact_q(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<DVector<f64>> {
    mdp.check_cap()?;
    let t = mdp.transfer_matrix();
    let p = policy.operator_matrix();
    let n = mdp.n_pairs();
    let mut a = DMatrix::identity(n, n);
    a -= (&t * &p) * mdp.gamma;
    a.lu()
        .solve(&mdp.reward_vector())
        .ok_or_else(|| Error::Numerical("singular action-value system".into()))
}

/// Value table `v = P_pi q` and objective `J = <v, nu>`.
pub fn exact_value_and_j(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<(DVector<f64>, f64)> {
    let q = exact_q(mdp, policy)?;
    let v = policy.operator_matrix() * &q;
    let j = v
        .iter()
        .zip(&mdp.nu)
        .map(|(vi, ni)| vi * ni)
        .sum();
    Ok((v, j))
}

/// Normalized discounted state-visitation distribution
/// `(1 - gamma) (Id - gamma P_pi T)^{-*} nu`.
pub fn state_visitation(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<DVector<f64>> {
    mdp.check_cap()?;
    let pt = policy.operator_matrix() * mdp.transfer_matrix(); // |X| x |X|
    let s = mdp.n_states();
    let mut a = DMatrix::identity(s, s);
    a -= pt.transpose() * mdp.gamma;
    let rhs = DVector::from_iterator(s, mdp.nu.iter().map(|v| v * (1.0 - mdp.gamma)));
    let d = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular visitation system".into()))?;
    Ok(d)
}

/// Residual of the performance-difference identity
/// `J(P1) - J(P2) = <(P1 - P2) q(P2), d_nu(P1)> / (1 - gamma)`,
/// both sides computed independently.
pub fn check_performance_difference(
    mdp: &TabularMdp,
    policy1: &TabularPolicy,
    policy2: &TabularPolicy,
) -> Result<f64> {
    let (_, j1) = exact_value_and_j(mdp, policy1)?;
    let (_, j2) = exact_value_and_j(mdp, policy2)?;
    let q2 = exact_q(mdp, policy2)?;
    let diff_op = policy1.operator_matrix() - policy2.operator_matrix();
    let lhs_fn = diff_op * &q2; // |X| vector
    let d1 = state_visitation(mdp, policy1)?;
    let rhs = lhs_fn.dot(&d1) / (1.0 - mdp.gamma);
    Ok(((j1 - j2) - rhs).abs())
}

/// Residuals of the simulation identity for a perturbed model.
///
/// The first residual perturbs the transfer operator only:
/// `q(P,T1) - q(P,T2) = gamma (Id - gamma T1 P)^{-1} (T1 - T2) v(P,T2)`,
/// which is the resolvent identity `M^{-1} - N^{-1} = M^{-1} (N - M) N^{-1}`
/// applied to `M = Id - gamma T1 P`. The second also perturbs the reward:
/// `q(P,T1,r1) - q(P,T2,r2) = (Id - gamma T1 P)^{-1} (r1 - r2)
///  + gamma (Id - gamma T1 P)^{-1} (T1 - T2) v(P,T2,r2)`.
/// Here `(T1, r1)` come from `mdp` and `(T2, r2)` from `perturbed`.
pub fn check_simulation_lemma(
    mdp: &TabularMdp,
    perturbed: &TabularMdp,
    policy: &TabularPolicy,
) -> Result<(f64, f64)> {
    mdp.check_cap()?;
    if perturbed.n_states() != mdp.n_states() || perturbed.n_actions() != mdp.n_actions() {
        return Err(Error::InvalidArgument("perturbed model shape mismatch".into()));
    }
    let gamma = mdp.gamma;
    let p = policy.operator_matrix();
    let t1 = mdp.transfer_matrix();
    let t2 = perturbed.transfer_matrix();
    let n = mdp.n_pairs();
    let resolvent1 = {
        let mut a = DMatrix::identity(n, n);
        a -= (&t1 * &p) * gamma;
        a.lu()
    };
    let solve1 = |rhs: &DVector<f64>| -> Result<DVector<f64>> {
        resolvent1
            .solve(rhs)
            .ok_or_else(|| Error::Numerical("singular resolvent".into()))
    };

    // Transfer-operator perturbation at fixed reward r1.
    let q1 = solve1(&mdp.reward_vector())?;
    let q2_same_r = {
        let mut a = DMatrix::identity(n, n);
        a -= (&t2 * &p) * gamma;
        a.lu()
            .solve(&mdp.reward_vector())
            .ok_or_else(|| Error::Numerical("singular perturbed system".into()))?
    };
    let v2_same_r = &p * &q2_same_r;
    let rhs_plain = solve1(&((&t1 - &t2) * &v2_same_r))? * gamma;
    let res_plain = (&q1 - &q2_same_r - rhs_plain).amax();

    // Joint transfer and reward perturbation.
    let q2 = exact_q(perturbed, policy)?;
    let v2 = &p * &q2;
    let dr = mdp.reward_vector() - perturbed.reward_vector();
    let rhs_reward = solve1(&dr)? + solve1(&((&t1 - &t2) * &v2))? * gamma;
    let res_reward = (&q1 - &q2 - rhs_reward).amax();

    Ok((res_plain, res_reward))
}

/// Residuals of the Markov-operator facts for `(Id - gamma P_pi T)^{-1}`:
/// the normalized inverse has unit row sums, and it dominates the identity on
/// non-negative functions. Returns `(row_sum_residual, monotonicity_residual)`.
pub fn markov_fact_residuals(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    mdp.check_cap()?;
    let s = mdp.n_states();
    let pt = policy.operator_matrix() * mdp.transfer_matrix();
    let mut a = DMatrix::identity(s, s);
    a -= &pt * mdp.gamma;
    let lu = a.lu();
    let ones = DVector::from_element(s, 1.0);
    let rows = lu
        .solve(&ones)
        .ok_or_else(|| Error::Numerical("singular system".into()))?;
    let row_sum_residual = rows
        .iter()
        .map(|v| (v * (1.0 - mdp.gamma) - 1.0).abs())
        .fold(0.0, f64::max);

    let f = DVector::from_fn(s, |_, _| rng.gen::<f64>());
    let g = lu
        .solve(&f)
        .ok_or_else(|| Error::Numerical("singular system".into()))?;
    let monotonicity_residual = f
        .iter()
        .zip(g.iter())
        .map(|(fi, gi)| (fi - gi).max(0.0))
        .fold(0.0, f64::max);
    Ok((row_sum_residual, monotonicity_residual))
}

/// Residual of the inverse-swap identity `(I + AB)^{-1} A = A (I + BA)^{-1}`
/// on random conformable matrices.
pub fn inverse_swap_residual(rng: &mut Rng, n: usize, m: usize) -> Result<f64> {
    let scale = 0.5 / ((n * m) as f64).sqrt();
    let a = DMatrix::from_fn(n, m, |_, _| (rng.gen::<f64>() - 0.5) * scale);
    let b = DMatrix::from_fn(m, n, |_, _| (rng.gen::<f64>() - 0.5) * scale);
    let lhs = (DMatrix::identity(n, n) + &a * &b)
        .lu()
        .solve(&a)
        .ok_or_else(|| Error::Numerical("singular I + AB".into()))?;
    let rhs_inv = (DMatrix::identity(m, m) + &b * &a)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular I + BA".into()))?;
    let rhs = &a * rhs_inv;
    Ok((lhs - rhs).amax())
}

/// Exact mirror-descent run: multiplicative softmax updates from exact action
/// values, starting at the uniform policy.
pub struct ExactPmd {
    /// Policies per iteration, `policies[0]` uniform, length `iters + 1`.
    pub policies: Vec<TabularPolicy>,
    /// Objective per iteration, same indexing.
    pub objectives: Vec<f64>,
    /// Gap `J(pi*) - J(pi_t)` per iteration.
    pub gaps: Vec<f64>,
    pub optimal: TabularPolicy,
    pub j_star: f64,
}

/// Runs `iters` exact mirror-descent updates with step size `eta`.
pub fn exact_pmd(mdp: &TabularMdp, eta: f64, iters: usize) -> Result<ExactPmd> {
    let (s, a) = (mdp.n_states(), mdp.n_actions());
    let optimal = policy_iteration(mdp)?;
    let (_, j_star) = exact_value_and_j(mdp, &optimal)?;

    let mut current = TabularPolicy::uniform(s, a);
    let mut policies = Vec::with_capacity(iters + 1);
    let mut objectives = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let (_, j) = exact_value_and_j(mdp, &current)?;
        objectives.push(j);
        policies.push(current.clone());
        let q = exact_q(mdp, &current)?;
        let mut probs = vec![0.0; s * a];
        for x in 0..s {
            let row_q: Vec<f64> = (0..a).map(|act| q[mdp.pair(x, act)]).collect();
            let m = row_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut norm = 0.0;
            for act in 0..a {
                let w = current.prob(x, act) * (eta * (row_q[act] - m)).exp();
                probs[x * a + act] = w;
                norm += w;
            }
            for act in 0..a {
                probs[x * a + act] /= norm;
            }
        }
        current = TabularPolicy::new(s, a, probs)?;
    }
    let (_, j) = exact_value_and_j(mdp, &current)?;
    objectives.push(j);
    policies.push(current);
    let gaps = objectives.iter().map(|j| j_star - j).collect();
    Ok(ExactPmd { policies, objectives, gaps, optimal, j_star })
}

/// Exact policy iteration; terminates when the greedy policy is stable.
/// Greedy ties break toward the lowest action index.
pub fn policy_iteration(mdp: &TabularMdp) -> Result<TabularPolicy> {
    let (s, a) = (mdp.n_states(), mdp.n_actions());
    let mut actions = vec![0usize; s];
    // Policy iteration on a finite MDP visits each deterministic policy at
    // most once; s*a + 1 sweeps can never be reached without a cycle.
    for _ in 0..(s * a + 1) {
        let policy = TabularPolicy::deterministic(s, a, &actions);
        let q = exact_q(mdp, &policy)?;
        let mut next = vec![0usize; s];
        for x in 0..s {
            let mut best = 0;
            let mut best_q = q[mdp.pair(x, 0)];
            for act in 1..a {
                let v = q[mdp.pair(x, act)];
                if v > best_q + 1e-13 {
                    best = act;
                    best_q = v;
                }
            }
            next[x] = best;
        }
        if next == actions {
            return Ok(TabularPolicy::deterministic(s, a, &actions));
        }
        actions = next;
    }
    Err(Error::Numerical("policy iteration cycled".into()))
}

/// Random row-stochastic MDP for property suites (Dirichlet(1) rows, uniform
/// rewards in [0, 1], Dirichlet(1) start distribution).
pub fn random_mdp(rng: &mut Rng, n_states: usize, n_actions: usize, gamma: f64) -> TabularMdp {
    let mut p = vec![0.0; n_states * n_actions * n_states];
    for row in p.chunks_mut(n_states) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = -(rng.gen::<f64>().max(1e-12)).ln();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        // Exact renormalization so row sums hold to 1e-12 even after division.
        let s: f64 = row.iter().sum();
        row[n_states - 1] += 1.0 - s;
    }
    let r = (0..n_states * n_actions).map(|_| rng.gen::<f64>()).collect();
    let mut nu: Vec<f64> = (0..n_states).map(|_| -(rng.gen::<f64>().max(1e-12)).ln()).collect();
    let sum: f64 = nu.iter().sum();
    for v in nu.iter_mut() {
        *v /= sum;
    }
    let s: f64 = nu.iter().sum();
    nu[n_states - 1] += 1.0 - s;
    TabularMdp::new(n_states, n_actions, p, r, gamma, nu).expect("construction is valid")
}

/// Random stochastic policy (Dirichlet(1) rows).
pub fn random_policy(rng: &mut Rng, n_states: usize, n_actions: usize) -> TabularPolicy {
    let mut probs = vec![0.0; n_states * n_actions];
    for row in probs.chunks_mut(n_actions) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = -(rng.gen::<f64>().max(1e-12)).ln();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    TabularPolicy::new(n_states, n_actions, probs).expect("rows normalized")
}

/// Mixes the transition tensor of `mdp` with a random stochastic tensor and
/// optionally perturbs rewards; the result is a valid MDP.
pub fn perturbed_mdp(
    rng: &mut Rng,
    mdp: &TabularMdp,
    transition_weight: f64,
    reward_jitter: f64,
) -> TabularMdp {
    let other = random_mdp(rng, mdp.n_states(), mdp.n_actions(), mdp.gamma);
    let mut p = Vec::with_capacity(mdp.p.len());
    for (a, b) in mdp.p.iter().zip(&other.p) {
        p.push((1.0 - transition_weight) * a + transition_weight * b);
    }
    // Re-tighten row sums after the convex mix.
    for row in p.chunks_mut(mdp.n_states()) {
        let s: f64 = row.iter().sum();
        row[mdp.n_states() - 1] += 1.0 - s;
    }
    let r = mdp
        .r
        .iter()
        .map(|v| v + reward_jitter * (rng.gen::<f64>() - 0.5))
        .collect();
    TabularMdp::new(mdp.n_states(), mdp.n_actions(), p, r, mdp.gamma, mdp.nu.clone())
        .expect("mix of stochastic tensors is stochastic")
}

/// Worst residuals of the operator identities over a batch of random MDPs.
#[derive(Debug, Clone, Copy)]
pub struct IdentityReport {
    pub performance_difference: f64,
    pub simulation_plain: f64,
    pub simulation_reward: f64,
    pub inverse_swap: f64,
    pub markov_rows: f64,
    pub markov_monotone: f64,
}

impl IdentityReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.performance_difference,
            self.simulation_plain,
            self.simulation_reward,
            self.inverse_swap,
            self.markov_rows,
            self.markov_monotone,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Checks every operator identity on `instances` seeded random MDPs with up
/// to 8 states and 4 actions and returns the worst residual per identity.
pub fn identity_suite(seed: u64, instances: usize) -> Result<IdentityReport> {
    let mut rng = crate::rng::rng_stream(seed, 7);
    let mut report = IdentityReport {
        performance_difference: 0.0,
        simulation_plain: 0.0,
        simulation_reward: 0.0,
        inverse_swap: 0.0,
        markov_rows: 0.0,
        markov_monotone: 0.0,
    };
    for _ in 0..instances {
        let s = 2 + (rng.gen::<u64>() % 7) as usize;
        let a = 2 + (rng.gen::<u64>() % 3) as usize;
        let gamma = 0.5 + 0.45 * rng.gen::<f64>();
        let mdp = random_mdp(&mut rng, s, a, gamma);
        let p1 = random_policy(&mut rng, s, a);
        let p2 = random_policy(&mut rng, s, a);
        let pd = check_performance_difference(&mdp, &p1, &p2)?;
        report.performance_difference = report.performance_difference.max(pd);
        let perturbed = perturbed_mdp(&mut rng, &mdp, 0.3, 0.5);
        let (plain, reward) = check_simulation_lemma(&mdp, &perturbed, &p1)?;
        report.simulation_plain = report.simulation_plain.max(plain);
        report.simulation_reward = report.simulation_reward.max(reward);
        let n = 2 + (rng.gen::<u64>() % 7) as usize;
        let m = 2 + (rng.gen::<u64>() % 7) as usize;
        let swap = inverse_swap_residual(&mut rng, n, m)?;
        report.inverse_swap = report.inverse_swap.max(swap);
        let (rows, mono) = markov_fact_residuals(&mdp, &p1, &mut rng)?;
        report.markov_rows = report.markov_rows.max(rows);
        report.markov_monotone = report.markov_monotone.max(mono);
    }
    Ok(report)
}

/// Monte-Carlo discounted return from the start distribution; returns
/// `(mean, standard_error)`.
pub fn mc_return(mdp: &TabularMdp, policy: &TabularPolicy, episodes: usize, rng: &mut Rng) -> (f64, f64) {
    let horizon = ((1e-12f64).ln() / mdp.gamma.ln()).ceil() as usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..episodes {
        let mut x = sample_index(&mdp.nu, rng);
        let mut ret = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            let a = sample_index(policy.row(x), rng);
            ret += disc * mdp.reward(x, a);
            disc *= mdp.gamma;
            x = sample_index(mdp.transition_row(x, a), rng);
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = episodes as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimate of the discounted state-visitation distribution.
pub fn mc_state_visitation(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    episodes: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let horizon = ((1e-10f64).ln() / mdp.gamma.ln()).ceil() as usize;
    let mut d = vec![0.0; mdp.n_states()];
    for _ in 0..episodes {
        let mut x = sample_index(&mdp.nu, rng);
        let mut disc = 1.0 - mdp.gamma;
        for _ in 0..horizon {
            d[x] += disc;
            disc *= mdp.gamma;
            let a = sample_index(policy.row(x), rng);
            x = sample_index(mdp.transition_row(x, a), rng);
        }
    }
    let total: f64 = d.iter().sum();
    for v in d.iter_mut() {
        *v /= total;
    }
    d
}

/// Samples an index from a weight vector summing to one.
pub fn sample_index(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use approx::assert_abs_diff_eq;

    fn absorbing_single_state(gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![1.0], gamma, vec![1.0]).unwrap()
    }

    #[test]
    fn single_absorbing_state_gives_geometric_series() {
        let mdp = absorbing_single_state(0.5);
        let q = exact_q(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert_abs_diff_eq!(q[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gamma_zero_gives_reward() {
        let mut rng = rng_stream(3, 0);
        let mdp = random_mdp(&mut rng, 4, 3, 0.0);
        let pi = random_policy(&mut rng, 4, 3);
        let q = exact_q(&mdp, &pi).unwrap();
        for x in 0..4 {
            for a in 0..3 {
                assert_abs_diff_eq!(q[mdp.pair(x, a)], mdp.reward(x, a), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn q_matches_truncated_neumann_series() {
        let mut rng = rng_stream(11, 0);
        let mdp = random_mdp(&mut rng, 3, 2, 0.9);
        let pi = random_policy(&mut rng, 3, 2);
        let q = exact_q(&mdp, &pi).unwrap();
        // Independent route: iterate q <- r + gamma T P q.
        let t = mdp.transfer_matrix();
        let p = pi.operator_matrix();
        let r = mdp.reward_vector();
        let mut qn = DVector::zeros(mdp.n_pairs());
        for _ in 0..100_000 {
            qn = &r + (&t * (&p * &qn)) * mdp.gamma;
        }
        assert!((q - qn).amax() < 1e-8);
    }

    #[test]
    fn j_is_nonnegative_for_nonnegative_rewards() {
        let mut rng = rng_stream(5, 0);
        for _ in 0..10 {
            let mdp = random_mdp(&mut rng, 5, 3, 0.9);
            let pi = random_policy(&mut rng, 5, 3);
            let (_, j) = exact_value_and_j(&mdp, &pi).unwrap();
            assert!(j >= 0.0);
        }
    }

    #[test]
    fn symmetric_two_state_objective_matches_per_state_value() {
        // Fully symmetric 2-state MDP with uniform start: J equals v(x) at
        // either state.
        let p = vec![
            0.5, 0.5, 0.5, 0.5, // x=0, a in {0,1}
            0.5, 0.5, 0.5, 0.5, // x=1
        ];
        let r = vec![0.3, 0.7, 0.3, 0.7];
        let mdp = TabularMdp::new(2, 2, p, r, 0.9, vec![0.5, 0.5]).unwrap();
        let pi = TabularPolicy::uniform(2, 2);
        let (v, j) = exact_value_and_j(&mdp, &pi).unwrap();
        assert_abs_diff_eq!(v[0], v[1], epsilon = 1e-12);
        assert_abs_diff_eq!(j, v[0], epsilon = 1e-12);
    }

    #[test]
    fn j_matches_monte_carlo() {
        let mut rng = rng_stream(17, 0);
        let mdp = random_mdp(&mut rng, 4, 2, 0.85);
        let pi = random_policy(&mut rng, 4, 2);
        let (_, j) = exact_value_and_j(&mdp, &pi).unwrap();
        let (mc, se) = mc_return(&mdp, &pi, 100_000, &mut rng);
        assert!(
            (j - mc).abs() < 3.0 * se.max(1e-6),
            "J {j} vs MC {mc} (se {se})"
        );
    }

    #[test]
    fn visitation_is_distribution_and_limits() {
        let mut rng = rng_stream(23, 0);
        // Near gamma -> 0, the visitation collapses to the start distribution.
        let mdp = random_mdp(&mut rng, 5, 2, 1e-12);
        let pi = random_policy(&mut rng, 5, 2);
        let d = state_visitation(&mdp, &pi).unwrap();
        let sum: f64 = d.iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
        for (di, ni) in d.iter().zip(&mdp.nu) {
            assert_abs_diff_eq!(*di, *ni, epsilon = 1e-9);
            assert!(*di >= 0.0);
        }
    }

    #[test]
    fn visitation_concentrates_on_absorbing_start() {
        // Single absorbing start state in a 2-state MDP.
        let p = vec![
            1.0, 0.0, 1.0, 0.0, // x=0 loops
            0.0, 1.0, 0.0, 1.0, // x=1 loops
        ];
        let mdp = TabularMdp::new(2, 2, p, vec![0.0; 4], 0.9, vec![1.0, 0.0]).unwrap();
        let d = state_visitation(&mdp, &TabularPolicy::uniform(2, 2)).unwrap();
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn visitation_matches_monte_carlo() {
        let mut rng = rng_stream(29, 0);
        let mdp = random_mdp(&mut rng, 4, 2, 0.9);
        let pi = random_policy(&mut rng, 4, 2);
        let d = state_visitation(&mdp, &pi).unwrap();
        let mc = mc_state_visitation(&mdp, &pi, 100_000, &mut rng);
        let tv: f64 = d.iter().zip(&mc).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "TV distance {tv}");
    }

    #[test]
    fn performance_difference_identity_holds() {
        let mut rng = rng_stream(31, 0);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let p1 = random_policy(&mut rng, 4, 3);
        let p2 = random_policy(&mut rng, 4, 3);
        assert_eq!(check_performance_difference(&mdp, &p1, &p1).unwrap(), 0.0);
        assert!(check_performance_difference(&mdp, &p1, &p2).unwrap() < 1e-10);
    }

    #[test]
    fn performance_difference_on_deterministic_chain_pair() {
        // 3-state deterministic chain, move right or stay.
        let mut p = vec![0.0; 3 * 2 * 3];
        let set = |p: &mut Vec<f64>, x: usize, a: usize, xp: usize| p[(x * 2 + a) * 3 + xp] = 1.0;
        set(&mut p, 0, 0, 0);
        set(&mut p, 0, 1, 1);
        set(&mut p, 1, 0, 1);
        set(&mut p, 1, 1, 2);
        set(&mut p, 2, 0, 2);
        set(&mut p, 2, 1, 2);
        let r = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mdp = TabularMdp::new(3, 2, p, r, 0.5, vec![1.0, 0.0, 0.0]).unwrap();
        let p1 = TabularPolicy::deterministic(3, 2, &[1, 1, 0]);
        let p2 = TabularPolicy::deterministic(3, 2, &[0, 0, 0]);
        assert!(check_performance_difference(&mdp, &p1, &p2).unwrap() < 1e-12);
    }

    #[test]
    fn simulation_identity_holds() {
        let mut rng = rng_stream(37, 0);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let pi = random_policy(&mut rng, 4, 3);
        let (plain, reward) = check_simulation_lemma(&mdp, &mdp, &pi).unwrap();
        assert_eq!((plain, reward), (0.0, 0.0));
        let pert = perturbed_mdp(&mut rng, &mdp, 0.3, 0.5);
        let (plain, reward) = check_simulation_lemma(&mdp, &pert, &pi).unwrap();
        assert!(plain < 1e-10 && reward < 1e-10, "plain {plain} reward {reward}");
        // Reward-only perturbation.
        let r_only = TabularMdp::new(
            mdp.n_states(),
            mdp.n_actions(),
            mdp.p.clone(),
            mdp.r.iter().map(|v| v + 0.25).collect(),
            mdp.gamma,
            mdp.nu.clone(),
        )
        .unwrap();
        let (plain, reward) = check_simulation_lemma(&mdp, &r_only, &pi).unwrap();
        assert!(plain < 1e-12);
        assert!(reward < 1e-10);
    }

    #[test]
    fn markov_facts_hold() {
        let mut rng = rng_stream(41, 0);
        for _ in 0..10 {
            let mdp = random_mdp(&mut rng, 6, 3, 0.95);
            let pi = random_policy(&mut rng, 6, 3);
            let (rows, mono) = markov_fact_residuals(&mdp, &pi, &mut rng).unwrap();
            assert!(rows < 1e-10, "row-sum residual {rows}");
            assert!(mono < 1e-10, "monotonicity residual {mono}");
        }
    }

    #[test]
    fn inverse_swap_holds() {
        let mut rng = rng_stream(43, 0);
        for _ in 0..20 {
            let n = 2 + (rng.gen::<u64>() % 6) as usize;
            let m = 2 + (rng.gen::<u64>() % 6) as usize;
            assert!(inverse_swap_residual(&mut rng, n, m).unwrap() < 1e-10);
        }
    }

    #[test]
    fn exact_pmd_zero_iterations_is_uniform() {
        let mut rng = rng_stream(47, 0);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let run = exact_pmd(&mdp, 1.0, 0).unwrap();
        assert_eq!(run.policies.len(), 1);
        assert_eq!(run.policies[0], TabularPolicy::uniform(4, 3));
    }

    #[test]
    fn exact_pmd_objective_is_monotone() {
        let mut rng = rng_stream(53, 0);
        let mdp = random_mdp(&mut rng, 5, 3, 0.9);
        let run = exact_pmd(&mdp, 1.0, 40).unwrap();
        for w in run.objectives.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "objective decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn policy_iteration_beats_random_policies() {
        let mut rng = rng_stream(59, 0);
        let mdp = random_mdp(&mut rng, 5, 3, 0.9);
        let star = policy_iteration(&mdp).unwrap();
        let (_, j_star) = exact_value_and_j(&mdp, &star).unwrap();
        for _ in 0..20 {
            let pi = random_policy(&mut rng, 5, 3);
            let (_, j) = exact_value_and_j(&mdp, &pi).unwrap();
            assert!(j <= j_star + 1e-10);
        }
    }
}
