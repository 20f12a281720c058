//! Deterministic chain used by tests and small demonstrations.
//!
//! States 0..len-1, start at 0, last state absorbing. Action 1 moves right,
//! action 0 moves left (clamped at 0). Reward is 1 exactly when the next
//! state is the goal.

use crate::env::{EnvSpec, Environment, State, StateDescriptor, Step};
use crate::error::Result;
use crate::oracle::TabularMdp;
use crate::rng::Rng;

pub struct Chain {
    spec: EnvSpec,
    len: usize,
}

impl Chain {
    pub fn new(len: usize) -> Self {
        assert!(len >= 2, "chain needs at least two states");
        let spec = EnvSpec {
            id: "chain",
            state: StateDescriptor::Discrete { count: len },
            action_count: 2,
            max_episode_steps: 4 * len,
            gamma: 0.5,
            reward_threshold: 1.0,
            reward_shift: 0.0,
        };
        spec.validate().expect("static spec");
        Self { spec, len }
    }

    fn goal(&self) -> usize {
        self.len - 1
    }
}

impl Environment for Chain {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, _seed: u64) -> State {
        State::Index(0)
    }

    fn step(&self, state: &State, action: usize, _rng: &mut Rng) -> Result<Step> {
        self.check_action(action)?;
        let s = state
            .index()
            .filter(|i| *i < self.len)
            .ok_or_else(|| crate::Error::InvalidArgument("bad chain state".into()))?;
        let next = if s == self.goal() {
            s
        } else if action == 1 {
            s + 1
        } else {
            s.saturating_sub(1)
        };
        Ok(Step {
            next: State::Index(next),
            reward: (next == self.goal()) as u8 as f64,
            done: next == self.goal(),
        })
    }

    fn exact_dynamics(&self) -> Result<TabularMdp> {
        let n = self.len;
        let mut p = vec![0.0; n * 2 * n];
        let mut r = vec![0.0; n * 2];
        for s in 0..n {
            for a in 0..2 {
                let next = if s == self.goal() {
                    s
                } else if a == 1 {
                    s + 1
                } else {
                    s.saturating_sub(1)
                };
                p[(s * 2 + a) * n + next] = 1.0;
                r[s * 2 + a] = (next == self.goal()) as u8 as f64;
            }
        }
        let mut nu = vec![0.0; n];
        nu[0] = 1.0;
        TabularMdp::new(n, 2, p, r, self.spec.gamma, nu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamics_are_deterministic_zero_one() {
        let env = Chain::new(4);
        let mdp = env.exact_dynamics().unwrap();
        for s in 0..4 {
            for a in 0..2 {
                for v in mdp.transition_row(s, a) {
                    assert!(*v == 0.0 || *v == 1.0);
                }
            }
        }
    }
}
