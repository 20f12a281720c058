//! Softmax policy mirror descent on a fitted world model.
//!
//! The policy is parameterized by a cumulative coefficient matrix `C`:
//! at any state, action logits are `eta * sum_i k(x, x_i) C[i, a]` and the
//! policy is their softmax. Starting from `C = 0` (the uniform policy), every
//! iteration estimates the action values of the current policy from the
//! world model and adds the coefficient vector into the columns picked out by
//! the anchor actions; accumulating logits this way is exactly the
//! multiplicative mirror-descent update applied to the softmax in closed
//! form.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::env::State;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::worldmodel::{estimate_with_guard, softmax, QModel};

/// Threshold on per-state logit spread beyond which the softmax is
/// considered saturated (step size likely too large).
pub const SATURATION_SPREAD: f64 = 30.0;

/// Cumulative mirror-descent weights.
#[derive(Debug, Clone)]
pub struct PolicyWeights {
    /// Anchor-by-action coefficient matrix.
    pub c: DMatrix<f64>,
    /// Mirror-descent step size.
    pub eta: f64,
    /// Completed iterations.
    pub t: usize,
}

impl PolicyWeights {
    /// Zero weights: the induced policy is uniform everywhere.
    pub fn zeros(len: usize, action_count: usize, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::InvalidArgument(format!("bad step size {eta}")));
        }
        Ok(Self { c: DMatrix::zeros(len, action_count), eta, t: 0 })
    }

    pub fn matches<M: QModel>(&self, model: &M) -> bool {
        self.c.nrows() == model.coeff_len() && self.c.ncols() == model.action_count()
    }
}

/// Softmax policy induced by weights over a model's anchors.
pub struct SoftmaxPolicy<'a, M: QModel> {
    pub model: &'a M,
    pub weights: &'a PolicyWeights,
}

impl<'a, M: QModel> SoftmaxPolicy<'a, M> {
    pub fn new(model: &'a M, weights: &'a PolicyWeights) -> Self {
        Self { model, weights }
    }

    /// Action distribution at a state.
    pub fn probs(&self, x: &State) -> Result<Vec<f64>> {
        let logits = self.model.logits(&self.weights.c, x)?;
        if logits.iter().any(|l| l.is_nan()) {
            return Err(Error::Numerical("NaN in policy logits".into()));
        }
        let scaled: Vec<f64> = logits.iter().map(|l| self.weights.eta * l).collect();
        Ok(softmax(&scaled))
    }

    pub fn sample(&self, x: &State, rng: &mut Rng) -> Result<usize> {
        let probs = self.probs(x)?;
        Ok(crate::env::sample_action(&probs, rng))
    }

    /// Plain-function adapter for rollout and estimation interfaces.
    pub fn prob_fn(&self) -> impl Fn(&State) -> Vec<f64> + '_ {
        move |x| self.probs(x).expect("policy evaluation failed")
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct PmdIterDiag {
    pub t: usize,
    /// Sup norm of the action-value coefficient vector.
    pub c_inf: f64,
    /// Spectral-radius estimate of the policy-conditioned model operator.
    pub rho: f64,
    /// Sup-norm action-value error against an oracle, when one is available.
    pub epsilon: Option<f64>,
    pub saturated: bool,
    pub wall_ms: f64,
}

/// One mirror-descent step: estimate action values of the current softmax
/// policy, then scatter the coefficients into the anchor-action columns.
/// On a contraction violation the model ridge escalates (refit up to three
/// times) before the error propagates.
pub fn pmd_step<M: QModel>(
    weights: &PolicyWeights,
    model: &mut M,
    gamma: f64,
) -> Result<(PolicyWeights, PmdIterDiag)> {
    if !weights.matches(model) {
        return Err(Error::InvalidArgument(
            "weights do not match the model's anchors".into(),
        ));
    }
    let start = Instant::now();
    let eta = weights.eta;
    let c_mat = weights.c.clone();
    let info = estimate_with_guard(model, |m| m.estimate_q_weights(&c_mat, eta, gamma))?;
    let mut next = weights.clone();
    for i in 0..model.coeff_len() {
        next.c[(i, model.anchor_action(i))] += info.q.c[i];
    }
    next.t += 1;
    let diag = PmdIterDiag {
        t: weights.t,
        c_inf: info.q.c.amax(),
        rho: info.spectral_radius,
        epsilon: None,
        saturated: info.max_logit_spread > SATURATION_SPREAD,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((next, diag))
}

/// Runs `iters` mirror-descent iterations from `init` (zero weights when
/// absent). `eps_fn`, when given, is evaluated on the policy of each
/// iteration before its step and logged in the diagnostics.
pub fn run_pmd<M: QModel>(
    model: &mut M,
    gamma: f64,
    eta: f64,
    iters: usize,
    init: Option<PolicyWeights>,
    mut eps_fn: Option<&mut dyn FnMut(&M, &PolicyWeights) -> Result<f64>>,
) -> Result<(PolicyWeights, Vec<PmdIterDiag>)> {
    if iters == 0 {
        return Err(Error::InvalidArgument("need at least one iteration".into()));
    }
    let mut weights = match init {
        Some(w) => {
            if !w.matches(model) {
                return Err(Error::InvalidArgument(
                    "initial weights do not match the model".into(),
                ));
            }
            w
        }
        None => PolicyWeights::zeros(model.coeff_len(), model.action_count(), eta)?,
    };
    let mut diags = Vec::with_capacity(iters);
    for _ in 0..iters {
        let eps = match eps_fn.as_mut() {
            Some(f) => Some(f(model, &weights)?),
            None => None,
        };
        let (next, mut diag) = pmd_step(&weights, model, gamma)?;
        diag.epsilon = eps;
        diags.push(diag);
        weights = next;
    }
    Ok((weights, diags))
}
