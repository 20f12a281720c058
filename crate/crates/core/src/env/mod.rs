//! Environments and transition data.
//!
//! Environments are value-like: `reset` and `step` are pure functions of
//! (state, action, rng), so independent rollouts can run on independent
//! threads with independent seeds. Terminal states are absorbing; stepping
//! from one returns the same state with the terminal reward and `done`, which
//! is how exact dynamics and collected self-loop samples stay consistent.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::oracle::TabularMdp;
use crate::rng::{rng_stream, Rng};

mod chain;
mod gridworld;
mod mountain_car;
mod taxi;

pub use chain::Chain;
pub use gridworld::GridWorld;
pub use mountain_car::MountainCar;
pub use taxi::Taxi;

/// Environment state: either a discrete index or a point in a 2-d box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum State {
    Index(usize),
    Point2(f64, f64),
}

impl State {
    pub fn index(&self) -> Option<usize> {
        match self {
            State::Index(i) => Some(*i),
            State::Point2(..) => None,
        }
    }

    pub fn coords(&self) -> Option<[f64; 2]> {
        match self {
            State::Index(_) => None,
            State::Point2(a, b) => Some([*a, *b]),
        }
    }
}

/// Shape of the state space.
#[derive(Debug, Clone, PartialEq)]
pub enum StateDescriptor {
    Discrete { count: usize },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl StateDescriptor {
    pub fn is_discrete(&self) -> bool {
        matches!(self, StateDescriptor::Discrete { .. })
    }

    pub fn contains(&self, state: &State) -> bool {
        match (self, state) {
            (StateDescriptor::Discrete { count }, State::Index(i)) => i < count,
            (StateDescriptor::Box { lower, upper }, State::Point2(a, b)) => {
                lower.len() == 2
                    && *a >= lower[0]
                    && *a <= upper[0]
                    && *b >= lower[1]
                    && *b <= upper[1]
            }
            _ => false,
        }
    }
}

/// Static description of an environment.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub id: &'static str,
    pub state: StateDescriptor,
    pub action_count: usize,
    pub max_episode_steps: usize,
    /// Default discount; experiment configs may override it.
    pub gamma: f64,
    /// Mean evaluation return regarded as solving the environment.
    pub reward_threshold: f64,
    /// Affine constant added to raw rewards before model fitting so the
    /// internal reward is non-negative; reporting always inverts it.
    pub reward_shift: f64,
}

impl EnvSpec {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.action_count < 2 {
            return Err(Error::InvalidArgument("need at least two actions".into()));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::InvalidArgument("gamma must be in (0,1)".into()));
        }
        if let StateDescriptor::Box { lower, upper } = &self.state {
            for (lo, hi) in lower.iter().zip(upper) {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::InvalidArgument("bad box bounds".into()));
                }
            }
        }
        Ok(())
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy)]
pub struct Step {
    pub next: State,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Start state drawn from the initial distribution; deterministic in the
    /// seed.
    fn reset(&self, seed: u64) -> State;

    fn step(&self, state: &State, action: usize, rng: &mut Rng) -> Result<Step>;

    /// Exact transition tensor and expected-reward table. Only discrete
    /// environments support this.
    fn exact_dynamics(&self) -> Result<TabularMdp> {
        Err(Error::Unsupported(format!(
            "exact dynamics unavailable for env `{}`",
            self.spec().id
        )))
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.spec().action_count {
            return Err(Error::InvalidArgument(format!(
                "action {action} out of range for env `{}`",
                self.spec().id
            )));
        }
        Ok(())
    }
}

/// Environment lookup by CLI identifier.
pub fn by_id(id: &str) -> Result<Box<dyn Environment>> {
    match id {
        "gridworld4" => Ok(Box::new(GridWorld::new())),
        "taxi" => Ok(Box::new(Taxi::new())),
        "mountaincar" => Ok(Box::new(MountainCar::new())),
        other => Err(Error::Config(format!(
            "unknown env `{other}` (expected gridworld4|taxi|mountaincar)"
        ))),
    }
}

/// One observed transition. `done` marks entry into (or absorption at) a
/// terminal state; `truncated` marks an episode cut by the step limit, which
/// is still a valid transition sample.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub state: State,
    pub action: usize,
    pub next: State,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

/// Replay buffer of transitions together with collection metadata.
#[derive(Debug, Clone)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub env_id: String,
    pub collection_seed: u64,
    pub policy_tag: String,
}

impl TransitionDataset {
    pub fn new(env_id: impl Into<String>, collection_seed: u64, policy_tag: impl Into<String>) -> Self {
        Self {
            transitions: Vec::new(),
            env_id: env_id.into(),
            collection_seed,
            policy_tag: policy_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn extend(&mut self, other: &TransitionDataset) {
        self.transitions.extend_from_slice(&other.transitions);
    }

    /// Uniform subsample without replacement down to `n_max` transitions.
    pub fn subsample(&self, n_max: usize, rng: &mut Rng) -> TransitionDataset {
        use rand::seq::SliceRandom;
        let mut out = self.clone();
        if out.transitions.len() > n_max {
            out.transitions.shuffle(rng);
            out.transitions.truncate(n_max);
        }
        out
    }

    /// Columnar text serialization, one transition per line:
    /// state fields, action, next-state fields, reward, done flag
    /// (0 ongoing, 1 terminal, 2 truncated).
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(
            out,
            "# env={} seed={} policy={}",
            self.env_id, self.collection_seed, self.policy_tag
        )
        .expect("string write");
        for t in &self.transitions {
            push_state(&mut out, &t.state);
            write!(out, " {} ", t.action).expect("string write");
            push_state(&mut out, &t.next);
            let done = if t.truncated {
                2
            } else {
                t.done as u8
            };
            writeln!(out, " {:e} {}", t.reward, done).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<TransitionDataset> {
        let text = std::fs::read_to_string(path)?;
        let mut ds = TransitionDataset::new("unknown", 0, "unknown");
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix('#') {
                for field in meta.split_whitespace() {
                    if let Some(v) = field.strip_prefix("env=") {
                        ds.env_id = v.to_string();
                    } else if let Some(v) = field.strip_prefix("seed=") {
                        ds.collection_seed = v.parse().map_err(|_| bad_line(line))?;
                    } else if let Some(v) = field.strip_prefix("policy=") {
                        ds.policy_tag = v.to_string();
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            // Discrete rows have 5 fields; 2-d continuous rows have 7.
            let (state, action, next, rest) = match fields.len() {
                5 => (
                    State::Index(fields[0].parse().map_err(|_| bad_line(line))?),
                    fields[1],
                    State::Index(fields[2].parse().map_err(|_| bad_line(line))?),
                    &fields[3..],
                ),
                7 => (
                    State::Point2(
                        fields[0].parse().map_err(|_| bad_line(line))?,
                        fields[1].parse().map_err(|_| bad_line(line))?,
                    ),
                    fields[2],
                    State::Point2(
                        fields[3].parse().map_err(|_| bad_line(line))?,
                        fields[4].parse().map_err(|_| bad_line(line))?,
                    ),
                    &fields[5..],
                ),
                _ => return Err(bad_line(line)),
            };
            let done_flag: u8 = rest[1].parse().map_err(|_| bad_line(line))?;
            ds.push(Transition {
                state,
                action: action.parse().map_err(|_| bad_line(line))?,
                next,
                reward: rest[0].parse().map_err(|_| bad_line(line))?,
                done: done_flag >= 1,
                truncated: done_flag == 2,
            });
        }
        Ok(ds)
    }
}

fn push_state(out: &mut String, s: &State) {
    match s {
        State::Index(i) => write!(out, "{i}").expect("string write"),
        State::Point2(a, b) => write!(out, "{a:e} {b:e}").expect("string write"),
    }
}

fn bad_line(line: &str) -> Error {
    Error::InvalidArgument(format!("malformed dataset line: {line}"))
}

/// Validates a probability vector produced by a policy function.
pub fn validate_policy_probs(probs: &[f64], action_count: usize) -> Result<()> {
    if probs.len() != action_count {
        return Err(Error::Policy(format!(
            "policy returned {} probabilities for {} actions",
            probs.len(),
            action_count
        )));
    }
    let mut sum = 0.0;
    for p in probs {
        if !p.is_finite() || *p < -1e-12 {
            return Err(Error::Policy(format!("bad probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Policy(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// Samples an action index from a validated probability vector.
pub fn sample_action(probs: &[f64], rng: &mut Rng) -> usize {
    crate::oracle::sample_index(probs, rng)
}

/// Runs one episode of at most `horizon` steps under `policy_fn` and returns
/// the visited transitions along with the discounted episode return at the
/// environment's discount.
pub fn rollout(
    env: &dyn Environment,
    policy_fn: &dyn Fn(&State) -> Vec<f64>,
    horizon: usize,
    seed: u64,
) -> Result<(TransitionDataset, f64)> {
    let spec = env.spec();
    let mut dataset = TransitionDataset::new(spec.id, seed, "rollout");
    let mut state = env.reset(seed);
    let mut rng = rng_stream(seed, 1);
    let mut ret = 0.0;
    let mut disc = 1.0;
    for t in 0..horizon {
        let probs = policy_fn(&state);
        validate_policy_probs(&probs, spec.action_count)?;
        let action = sample_action(&probs, &mut rng);
        let step = env.step(&state, action, &mut rng)?;
        // The step cap reports done with the distinct truncated flag set.
        let truncated = t + 1 == horizon && !step.done;
        dataset.push(Transition {
            state,
            action,
            next: step.next,
            reward: step.reward,
            done: step.done || truncated,
            truncated,
        });
        ret += disc * step.reward;
        disc *= spec.gamma;
        if step.done {
            break;
        }
        state = step.next;
    }
    Ok((dataset, ret))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_policy(n: usize) -> impl Fn(&State) -> Vec<f64> {
        move |_| vec![1.0 / n as f64; n]
    }

    #[test]
    fn rollout_horizon_zero_is_empty() {
        let env = GridWorld::new();
        let (ds, ret) = rollout(&env, &uniform_policy(4), 0, 7).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ret, 0.0);
    }

    #[test]
    fn rollout_is_bit_reproducible() {
        let env = GridWorld::new();
        let (a, ra) = rollout(&env, &uniform_policy(4), 100, 42).unwrap();
        let (b, rb) = rollout(&env, &uniform_policy(4), 100, 42).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.transitions.iter().zip(&b.transitions) {
            assert_eq!(x.state, y.state);
            assert_eq!(x.action, y.action);
            assert_eq!(x.next, y.next);
            assert_eq!(x.reward, y.reward);
        }
    }

    #[test]
    fn rollout_action_frequencies_are_uniform() {
        let env = GridWorld::new();
        let mut counts = [0usize; 4];
        let mut total = 0;
        let mut ep = 0;
        while total < 10_000 {
            let (ds, _) = rollout(&env, &uniform_policy(4), 100, 1000 + ep).unwrap();
            for t in &ds.transitions {
                counts[t.action] += 1;
            }
            total += ds.len();
            ep += 1;
        }
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 0.25).abs() < 0.02, "action frequency {f}");
        }
    }

    #[test]
    fn rollout_rejects_bad_policies() {
        let env = GridWorld::new();
        let nan = |_: &State| vec![f64::NAN, 0.0, 0.0, 0.0];
        assert!(matches!(rollout(&env, &nan, 10, 0), Err(Error::Policy(_))));
        let negative = |_: &State| vec![-0.5, 0.5, 0.5, 0.5];
        assert!(matches!(rollout(&env, &negative, 10, 0), Err(Error::Policy(_))));
    }

    #[test]
    fn rollout_on_two_state_chain_matches_hand_computation() {
        // Optimal policy steps straight into the goal: return = 1 at t = 0.
        let env = Chain::new(2);
        let right = |_: &State| vec![0.0, 1.0];
        let (ds, ret) = rollout(&env, &right, 10, 3).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ret, 1.0);

        // Three-state chain: rewards (0, 1) discounted at 0.5 give 0.5.
        let env = Chain::new(3);
        let (ds, ret) = rollout(&env, &right, 10, 3).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ret, 0.5);
    }

    #[test]
    fn dataset_text_round_trip() {
        let env = MountainCar::new();
        let (ds, _) = rollout(&env, &uniform_policy(3), 25, 9).unwrap();
        let dir = std::env::temp_dir().join("powr_ds_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mc.txt");
        ds.write_text(&path).unwrap();
        let back = TransitionDataset::read_text(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.env_id, ds.env_id);
        for (a, b) in ds.transitions.iter().zip(&back.transitions) {
            assert_eq!(a.state, b.state);
            assert_eq!(a.action, b.action);
            assert_eq!(a.reward, b.reward);
            assert_eq!(a.done, b.done);
            assert_eq!(a.truncated, b.truncated);
        }
    }

    #[test]
    fn truncation_is_flagged_and_distinct_from_termination() {
        let env = MountainCar::new();
        let (ds, _) = rollout(&env, &uniform_policy(3), 5, 11).unwrap();
        let last = ds.transitions.last().unwrap();
        assert!(last.truncated && last.done);
        // A genuine terminal entry is done without the truncated flag.
        let env = Chain::new(2);
        let right = |_: &State| vec![0.0, 1.0];
        let (ds, _) = rollout(&env, &right, 1, 0).unwrap();
        let last = ds.transitions.last().unwrap();
        assert!(last.done && !last.truncated);
    }
}
