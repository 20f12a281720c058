//! 5x5 taxi on the standard 500-state layout.
//!
//! State encodes (taxi row, taxi column, passenger location, destination) as
//! `((row * 5 + col) * 5 + passenger) * 4 + destination`, with passenger 4
//! meaning "in the taxi". Actions: south, north, east, west, pickup, dropoff.
//! Moves are deterministic; interior walls block east/west travel. Every step
//! costs -1, illegal pickup/dropoff costs -10, and a successful dropoff pays
//! +20 and ends the episode.

use rand::Rng as _;

use crate::env::{EnvSpec, Environment, State, StateDescriptor, Step};
use crate::error::Result;
use crate::oracle::TabularMdp;
use crate::rng::{rng_stream, Rng};

/// Depot coordinates (row, col) in the order red, green, yellow, blue.
const DEPOTS: [(usize, usize); 4] = [(0, 0), (0, 4), (4, 0), (4, 3)];
/// Cells whose eastern edge is a wall.
const WALLS_EAST: [(usize, usize); 6] = [(0, 1), (1, 1), (3, 0), (3, 2), (4, 0), (4, 2)];
const IN_TAXI: usize = 4;
const N_STATES: usize = 500;

pub struct Taxi {
    spec: EnvSpec,
}

#[derive(Clone, Copy)]
struct Parts {
    row: usize,
    col: usize,
    passenger: usize,
    destination: usize,
}

fn encode(p: Parts) -> usize {
    ((p.row * 5 + p.col) * 5 + p.passenger) * 4 + p.destination
}

fn decode(s: usize) -> Parts {
    let destination = s % 4;
    let rest = s / 4;
    let passenger = rest % 5;
    let rest = rest / 5;
    Parts { row: rest / 5, col: rest % 5, passenger, destination }
}

fn wall_east(row: usize, col: usize) -> bool {
    WALLS_EAST.contains(&(row, col))
}

fn is_terminal(p: Parts) -> bool {
    p.passenger < IN_TAXI && p.passenger == p.destination
}

impl Taxi {
    pub fn new() -> Self {
        let spec = EnvSpec {
            id: "taxi",
            state: StateDescriptor::Discrete { count: N_STATES },
            action_count: 6,
            max_episode_steps: 200,
            gamma: 0.99,
            reward_threshold: 6.0,
            reward_shift: 10.0,
        };
        spec.validate().expect("static spec");
        Self { spec }
    }

    /// Deterministic transition from a decoded state.
    fn apply(p: Parts, action: usize) -> (Parts, f64) {
        let mut next = p;
        let mut reward = -1.0;
        match action {
            0 => next.row = (p.row + 1).min(4),
            1 => next.row = p.row.saturating_sub(1),
            2 => {
                if !wall_east(p.row, p.col) {
                    next.col = (p.col + 1).min(4);
                }
            }
            3 => {
                if p.col > 0 && !wall_east(p.row, p.col - 1) {
                    next.col = p.col - 1;
                }
            }
            4 => {
                // Pickup succeeds only with the passenger waiting right here.
                if p.passenger < IN_TAXI && DEPOTS[p.passenger] == (p.row, p.col) {
                    next.passenger = IN_TAXI;
                } else {
                    reward = -10.0;
                }
            }
            _ => {
                if p.passenger == IN_TAXI && DEPOTS[p.destination] == (p.row, p.col) {
                    next.passenger = p.destination;
                    reward = 20.0;
                } else if p.passenger == IN_TAXI
                    && DEPOTS.iter().any(|d| *d == (p.row, p.col))
                {
                    // Dropping at the wrong depot leaves the passenger there.
                    next.passenger = DEPOTS
                        .iter()
                        .position(|d| *d == (p.row, p.col))
                        .expect("depot just matched");
                } else {
                    reward = -10.0;
                }
            }
        }
        (next, reward)
    }

    fn start_states() -> Vec<usize> {
        let mut out = Vec::with_capacity(300);
        for row in 0..5 {
            for col in 0..5 {
                for passenger in 0..4 {
                    for destination in 0..4 {
                        if passenger != destination {
                            out.push(encode(Parts { row, col, passenger, destination }));
                        }
                    }
                }
            }
        }
        out
    }
}

impl Default for Taxi {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Taxi {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> State {
        let starts = Self::start_states();
        let mut rng = rng_stream(seed, 0);
        State::Index(starts[rng.gen_range(0..starts.len())])
    }

    fn step(&self, state: &State, action: usize, _rng: &mut Rng) -> Result<Step> {
        self.check_action(action)?;
        let s = state
            .index()
            .filter(|i| *i < N_STATES)
            .ok_or_else(|| crate::Error::InvalidArgument("bad taxi state".into()))?;
        let parts = decode(s);
        if is_terminal(parts) {
            return Ok(Step { next: State::Index(s), reward: 0.0, done: true });
        }
        let (next, reward) = Self::apply(parts, action);
        Ok(Step {
            next: State::Index(encode(next)),
            reward,
            done: is_terminal(next),
        })
    }

    fn exact_dynamics(&self) -> Result<TabularMdp> {
        let mut p = vec![0.0; N_STATES * 6 * N_STATES];
        let mut r = vec![0.0; N_STATES * 6];
        for s in 0..N_STATES {
            let parts = decode(s);
            for a in 0..6 {
                let (next, reward) = if is_terminal(parts) {
                    (s, 0.0)
                } else {
                    let (np, rew) = Self::apply(parts, a);
                    (encode(np), rew)
                };
                p[(s * 6 + a) * N_STATES + next] = 1.0;
                r[s * 6 + a] = reward;
            }
        }
        let starts = Self::start_states();
        let mut nu = vec![0.0; N_STATES];
        for s in &starts {
            nu[*s] = 1.0 / starts.len() as f64;
        }
        let total: f64 = nu.iter().sum();
        nu[starts[0]] += 1.0 - total;
        TabularMdp::new(N_STATES, 6, p, r, self.spec.gamma, nu)
    }
}
