//! Underpowered car on a hill, continuous 2-d state (position, velocity).
//!
//! Actions push left, idle, push right. Every step costs -1 until the car
//! reaches the goal position on the right crest; the 200-step cap is applied
//! by the caller. Reaching the goal absorbs with reward 0.

use rand::Rng as _;

use crate::env::{EnvSpec, Environment, State, StateDescriptor, Step};
use crate::error::Result;
use crate::rng::{rng_stream, Rng};

const FORCE: f64 = 0.001;
const GRAVITY: f64 = 0.0025;
const MIN_POSITION: f64 = -1.2;
const MAX_POSITION: f64 = 0.6;
const MAX_SPEED: f64 = 0.07;
const GOAL_POSITION: f64 = 0.5;

pub struct MountainCar {
    spec: EnvSpec,
}

impl MountainCar {
    pub fn new() -> Self {
        let spec = EnvSpec {
            id: "mountaincar",
            state: StateDescriptor::Box {
                lower: vec![MIN_POSITION, -MAX_SPEED],
                upper: vec![MAX_POSITION, MAX_SPEED],
            },
            action_count: 3,
            max_episode_steps: 200,
            gamma: 0.99,
            reward_threshold: -110.0,
            reward_shift: 1.0,
        };
        spec.validate().expect("static spec");
        Self { spec }
    }

    fn terminal(position: f64) -> bool {
        position >= GOAL_POSITION
    }
}

impl Default for MountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for MountainCar {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> State {
        let mut rng = rng_stream(seed, 0);
        State::Point2(rng.gen_range(-0.6..-0.4), 0.0)
    }

    fn step(&self, state: &State, action: usize, _rng: &mut Rng) -> Result<Step> {
        self.check_action(action)?;
        let [position, velocity] = state
            .coords()
            .ok_or_else(|| crate::Error::InvalidArgument("bad mountaincar state".into()))?;
        if Self::terminal(position) {
            return Ok(Step { next: *state, reward: 0.0, done: true });
        }
        let mut v = velocity + (action as f64 - 1.0) * FORCE + (3.0 * position).cos() * (-GRAVITY);
        v = v.clamp(-MAX_SPEED, MAX_SPEED);
        let p = (position + v).clamp(MIN_POSITION, MAX_POSITION);
        if p == MIN_POSITION && v < 0.0 {
            v = 0.0;
        }
        Ok(Step {
            next: State::Point2(p, v),
            reward: -1.0,
            done: Self::terminal(p),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resets_land_in_the_start_interval_with_zero_velocity() {
        let env = MountainCar::new();
        for seed in 0..10_000u64 {
            let [p, v] = env.reset(seed).coords().unwrap();
            assert!((-0.6..-0.4).contains(&p), "position {p}");
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn push_right_matches_the_update_formula() {
        let env = MountainCar::new();
        let mut rng = rng_stream(0, 4);
        let step = env.step(&State::Point2(-0.5, 0.0), 2, &mut rng).unwrap();
        // Independent evaluation of the update at (-0.5, 0), push right.
        let v_expected = 0.0 + FORCE + (3.0f64 * -0.5).cos() * (-GRAVITY);
        let p_expected = (-0.5f64 + v_expected).clamp(MIN_POSITION, MAX_POSITION);
        let [p, v] = step.next.coords().unwrap();
        assert_eq!(v, v_expected);
        assert_eq!(p, p_expected);
        assert_eq!(step.reward, -1.0);
        assert!(!step.done);
    }

    #[test]
    fn goal_states_absorb() {
        let env = MountainCar::new();
        let mut rng = rng_stream(0, 4);
        let step = env.step(&State::Point2(0.55, 0.03), 1, &mut rng).unwrap();
        assert_eq!(step.next, State::Point2(0.55, 0.03));
        assert_eq!(step.reward, 0.0);
        assert!(step.done);
    }

    #[test]
    fn exact_dynamics_is_unsupported() {
        let env = MountainCar::new();
        assert!(matches!(
            env.exact_dynamics(),
            Err(crate::Error::Unsupported(_))
        ));
    }

    #[test]
    fn velocity_zeroes_at_the_left_wall() {
        let env = MountainCar::new();
        let mut rng = rng_stream(0, 4);
        let step = env.step(&State::Point2(-1.19, -0.07), 0, &mut rng).unwrap();
        let [p, v] = step.next.coords().unwrap();
        assert_eq!(p, MIN_POSITION);
        assert_eq!(v, 0.0);
    }
}
