//! Cross-module invariants: mirror-descent improvement guarantees, policy
//! positivity, convergence of the model-based loop, and consistency between
//! sampled environments and their exact dynamics.

use nalgebra::DVector;
use powr_core::env::{Environment, GridWorld, State, Transition, TransitionDataset};
use powr_core::harness::{track_epsilon, uniform_policy};
use powr_core::oracle::{self, TabularPolicy};
use powr_core::pmd::{pmd_step, PolicyWeights, SoftmaxPolicy};
use powr_core::rng::rng_stream;
use powr_core::worldmodel::{exhaustive_dataset, QModel, TabularWorldModel};
use rand::Rng as _;

fn sampled_gridworld(n: usize, seed: u64) -> (oracle::TabularMdp, TransitionDataset) {
    let env = GridWorld::new();
    let mdp = env.exact_dynamics().unwrap();
    let mut rng = rng_stream(seed, 0);
    let mut ds = TransitionDataset::new("gridworld4", seed, "sampled");
    for _ in 0..n {
        let x = rng.gen_range(0..16);
        let a = rng.gen_range(0..4);
        let xp = oracle::sample_index(mdp.transition_row(x, a), &mut rng);
        ds.push(Transition {
            state: State::Index(x),
            action: a,
            next: State::Index(xp),
            reward: mdp.reward(x, a),
            done: false,
            truncated: false,
        });
    }
    (mdp, ds)
}

fn policy_table<M: QModel>(model: &M, w: &PolicyWeights) -> TabularPolicy {
    let sp = SoftmaxPolicy::new(model, w);
    let mut probs = Vec::with_capacity(16 * 4);
    for x in 0..16 {
        probs.extend(sp.probs(&State::Index(x)).unwrap());
    }
    TabularPolicy::new(16, 4, probs).unwrap()
}

/// Mirror-descent improvement: exactly monotone with oracle action values,
/// and within `2 eps_t / (1 - gamma)` of monotone with estimated ones.
/// Every iterate stays strictly positive.
#[test]
fn inexact_improvement_bound_and_positivity() {
    let (mdp, ds) = sampled_gridworld(800, 42);
    // Moderate discount keeps cumulative logit spreads well inside f64 exp
    // range, where strict softmax positivity is representable.
    let mdp = mdp.with_gamma(0.95).unwrap();
    let gamma = mdp.gamma;
    let mut model = TabularWorldModel::fit(&ds, 16, 4, 1e-8, 0.0).unwrap();
    let mut weights = PolicyWeights::zeros(model.coeff_len(), 4, 1.0).unwrap();
    let mut prev_j: Option<f64> = None;
    let mut prev_eps = 0.0;
    for _ in 0..12 {
        let table = policy_table(&model, &weights);
        let (_, j) = oracle::exact_value_and_j(&mdp, &table).unwrap();
        let sp = SoftmaxPolicy::new(&model, &weights);
        let eps = track_epsilon(&model, &mdp, &sp.prob_fn()).unwrap();
        if let Some(pj) = prev_j {
            let slack = 2.0 * prev_eps / (1.0 - gamma) + 1e-10;
            assert!(
                j >= pj - slack,
                "improvement bound violated: {pj} -> {j} with eps {prev_eps}"
            );
        }
        let min_prob = (0..16)
            .flat_map(|x| table.row(x).to_vec())
            .fold(f64::INFINITY, f64::min);
        assert!(min_prob > 0.0, "softmax iterate lost strict positivity");
        prev_j = Some(j);
        prev_eps = eps;
        let (next, _) = pmd_step(&weights, &mut model, gamma).unwrap();
        weights = next;
    }
}

/// Exact-oracle mirror descent never decreases the objective.
#[test]
fn exact_updates_are_monotone() {
    let env = GridWorld::new();
    let mdp = env.exact_dynamics().unwrap().with_gamma(0.95).unwrap();
    let run = oracle::exact_pmd(&mdp, 1.0, 60).unwrap();
    for w in run.objectives.windows(2) {
        assert!(w[1] >= w[0] - 1e-10);
    }
}

/// The model-based loop on exhaustive data converges at the 1/T rate:
/// log-log slope of the optimality gap is at most -0.9.
#[test]
fn model_based_gap_decays_like_one_over_t() {
    let env = GridWorld::new();
    let mdp = env.exact_dynamics().unwrap().with_gamma(0.95).unwrap();
    let ds = exhaustive_dataset(&mdp, 3, "gridworld4").unwrap();
    let mut model = TabularWorldModel::fit(&ds, 16, 4, 1e-10, 0.0).unwrap();
    let star = oracle::policy_iteration(&mdp).unwrap();
    let (_, j_star) = oracle::exact_value_and_j(&mdp, &star).unwrap();

    let checkpoints = [5usize, 10, 20, 50, 100, 200];
    let mut weights = PolicyWeights::zeros(model.coeff_len(), 4, 1.0).unwrap();
    let mut gaps = Vec::new();
    for t in 1..=200 {
        let (next, _) = pmd_step(&weights, &mut model, mdp.gamma).unwrap();
        weights = next;
        if checkpoints.contains(&t) {
            let table = policy_table(&model, &weights);
            let (_, j) = oracle::exact_value_and_j(&mdp, &table).unwrap();
            gaps.push((t as f64, (j_star - j).max(1e-14)));
        }
    }
    let xs: Vec<f64> = gaps.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = gaps.iter().map(|(_, g)| g.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = num / den;
    assert!(slope <= -0.9, "log-log slope {slope}, gaps {gaps:?}");
}

/// Monte-Carlo stepping matches exact dynamics in total variation on the
/// stochastic discrete env.
#[test]
fn gridworld_monte_carlo_total_variation() {
    let env = GridWorld::new();
    let mdp = env.exact_dynamics().unwrap();
    let mut rng = rng_stream(99, 0);
    // Non-terminal states have stochastic rows; spot-check them all.
    for s in 0..16 {
        for a in 0..4 {
            let n = 30_000;
            let mut counts = vec![0usize; 16];
            for _ in 0..n {
                let step = env.step(&State::Index(s), a, &mut rng).unwrap();
                counts[step.next.index().unwrap()] += 1;
            }
            let tv: f64 = mdp
                .transition_row(s, a)
                .iter()
                .enumerate()
                .map(|(i, p)| (p - counts[i] as f64 / n as f64).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.02, "TV {tv} at ({s},{a})");
        }
    }
}

/// The exact-dedup tabular fit on a mixed replay buffer reproduces the
/// empirical model regardless of collection order.
#[test]
fn tabular_fit_is_order_independent() {
    let (_, ds) = sampled_gridworld(600, 7);
    let mut reversed = ds.clone();
    reversed.transitions.reverse();
    let a = TabularWorldModel::fit(&ds, 16, 4, 1e-7, 0.0).unwrap();
    let b = TabularWorldModel::fit(&reversed, 16, 4, 1e-7, 0.0).unwrap();
    let pol = uniform_policy(4);
    let qa = a.estimate_q_policy(&pol, 0.95).unwrap();
    let qb = b.estimate_q_policy(&pol, 0.95).unwrap();
    for x in 0..16 {
        for act in 0..4 {
            let va = a.eval_q(&qa.q, &State::Index(x), act).unwrap();
            let vb = b.eval_q(&qb.q, &State::Index(x), act).unwrap();
            assert!((va - vb).abs() < 1e-12);
        }
    }
}

/// Reward-shifted fits change estimates by exactly the constant
/// `shift / (1 - gamma)` on absorbing-complete data.
#[test]
fn reward_shift_is_a_constant_offset_on_closed_data() {
    let env = GridWorld::new();
    // The residual ridge bias scales like lambda / (1 - gamma)^2; a moderate
    // discount keeps it far below the assertion tolerance.
    let mdp = env.exact_dynamics().unwrap().with_gamma(0.8).unwrap();
    let ds = exhaustive_dataset(&mdp, 3, "gridworld4").unwrap();
    let shift = 2.5;
    let plain = TabularWorldModel::fit(&ds, 16, 4, 1e-10, 0.0).unwrap();
    let shifted = TabularWorldModel::fit(&ds, 16, 4, 1e-10, shift).unwrap();
    let pol = uniform_policy(4);
    let qp = plain.estimate_q_policy(&pol, mdp.gamma).unwrap();
    let qs = shifted.estimate_q_policy(&pol, mdp.gamma).unwrap();
    let offset = shift / (1.0 - mdp.gamma);
    let mut worst = 0.0f64;
    for x in 0..16 {
        for a in 0..4 {
            let vp = plain.eval_q(&qp.q, &State::Index(x), a).unwrap();
            let vs = shifted.eval_q(&qs.q, &State::Index(x), a).unwrap();
            worst = worst.max((vs - vp - offset).abs());
        }
    }
    assert!(worst < 1e-6, "offset deviation {worst}");
}

/// Coefficients of a zero-reward fit are exactly zero (no spurious signal).
#[test]
fn zero_rewards_give_zero_coefficients() {
    let (_, mut ds) = sampled_gridworld(300, 21);
    for t in ds.transitions.iter_mut() {
        t.reward = 0.0;
    }
    let model = TabularWorldModel::fit(&ds, 16, 4, 1e-6, 0.0).unwrap();
    let info = model.estimate_q_policy(&uniform_policy(4), 0.99).unwrap();
    assert_eq!(info.q.c, DVector::zeros(model.coeff_len()));
}
