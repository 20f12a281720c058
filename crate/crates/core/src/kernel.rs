//! Positive-definite kernels on states and the induced state-action kernel.
//!
//! The state-action kernel is separable: feature maps factor as a state
//! feature times a one-hot action encoding, so
//! `k((x,a),(x',a')) = k(x,x') * [a == a']` and Gram matrices over pairs are
//! the state Gram masked by action agreement. Kernels are immutable after
//! construction.

use nalgebra::DMatrix;

use crate::env::State;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// `exp(-||x - x'|| / sigma)`; reproducing kernel of a Sobolev space of
    /// smoothness ceil(d/2), which keeps softmax policy iterates inside the
    /// hypothesis space.
    Laplacian,
    /// `exp(-||x - x'||^2 / (2 sigma^2))`; shipped for ablations.
    Gaussian,
    /// Kronecker delta on discrete states; realizes the exactly
    /// well-specified tabular regime.
    OneHotTabular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub family: KernelFamily,
    /// Bandwidth; ignored by the one-hot family.
    pub sigma: f64,
    /// Optional per-dimension length scales dividing coordinate differences
    /// before the norm (used to normalize box-shaped state spaces).
    pub scales: Option<Vec<f64>>,
}

impl Kernel {
    pub fn laplacian(sigma: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplacian, sigma)
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, sigma)
    }

    pub fn one_hot() -> Self {
        Self { family: KernelFamily::OneHotTabular, sigma: 1.0, scales: None }
    }

    pub fn new(family: KernelFamily, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {sigma}")));
        }
        Ok(Self { family, sigma, scales: None })
    }

    pub fn with_scales(mut self, scales: Vec<f64>) -> Result<Self> {
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("length scales must be positive".into()));
        }
        self.scales = Some(scales);
        Ok(self)
    }

    /// Scaled Euclidean distance between two continuous states.
    fn distance(&self, a: &State, b: &State) -> Result<f64> {
        match (a, b) {
            (State::Point2(a0, a1), State::Point2(b0, b1)) => {
                let (s0, s1) = match &self.scales {
                    Some(s) if s.len() == 2 => (s[0], s[1]),
                    Some(_) => {
                        return Err(Error::InvalidArgument("length-scale dimension mismatch".into()))
                    }
                    None => (1.0, 1.0),
                };
                let d0 = (a0 - b0) / s0;
                let d1 = (a1 - b1) / s1;
                Ok((d0 * d0 + d1 * d1).sqrt())
            }
            _ => Err(Error::InvalidArgument(
                "distance kernels need continuous states of matching dimension".into(),
            )),
        }
    }

    pub fn eval(&self, a: &State, b: &State) -> Result<f64> {
        match self.family {
            KernelFamily::OneHotTabular => match (a, b) {
                (State::Index(i), State::Index(j)) => Ok((i == j) as u8 as f64),
                _ => Err(Error::InvalidArgument("one-hot kernel needs discrete states".into())),
            },
            KernelFamily::Laplacian => {
                let d = self.distance(a, b)?;
                Ok((-d / self.sigma).exp())
            }
            KernelFamily::Gaussian => {
                let d = self.distance(a, b)?;
                Ok((-d * d / (2.0 * self.sigma * self.sigma)).exp())
            }
        }
    }
}

/// Gram matrix with entries `k(a_i, b_j)`.
pub fn gram(kernel: &Kernel, points_a: &[State], points_b: &[State]) -> Result<DMatrix<f64>> {
    if points_a.is_empty() || points_b.is_empty() {
        return Err(Error::InvalidArgument("gram needs nonempty point lists".into()));
    }
    let mut m = DMatrix::zeros(points_a.len(), points_b.len());
    for (i, a) in points_a.iter().enumerate() {
        for (j, b) in points_b.iter().enumerate() {
            m[(i, j)] = kernel.eval(a, b)?;
        }
    }
    Ok(m)
}

/// Kernel on state-action pairs induced by a state kernel and one-hot
/// actions.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionKernel {
    pub base: Kernel,
    pub action_count: usize,
}

impl StateActionKernel {
    pub fn new(base: Kernel, action_count: usize) -> Result<Self> {
        if action_count == 0 {
            return Err(Error::InvalidArgument("need at least one action".into()));
        }
        Ok(Self { base, action_count })
    }

    pub fn eval(&self, a: &(State, usize), b: &(State, usize)) -> Result<f64> {
        if a.1 >= self.action_count || b.1 >= self.action_count {
            return Err(Error::InvalidArgument("action out of range".into()));
        }
        if a.1 != b.1 {
            return Ok(0.0);
        }
        self.base.eval(&a.0, &b.0)
    }

    /// Gram matrix over pairs; entries vanish whenever actions differ.
    pub fn gram(&self, pairs_a: &[(State, usize)], pairs_b: &[(State, usize)]) -> Result<DMatrix<f64>> {
        if pairs_a.is_empty() || pairs_b.is_empty() {
            return Err(Error::InvalidArgument("gram needs nonempty pair lists".into()));
        }
        let mut m = DMatrix::zeros(pairs_a.len(), pairs_b.len());
        for (i, a) in pairs_a.iter().enumerate() {
            for (j, b) in pairs_b.iter().enumerate() {
                m[(i, j)] = self.eval(a, b)?;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
        SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn laplacian_at_zero_distance_is_one() {
        let k = Kernel::laplacian(0.3).unwrap();
        let x = State::Point2(0.4, -0.2);
        assert_eq!(k.eval(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn laplacian_at_unit_distance_is_inverse_e() {
        let k = Kernel::laplacian(1.0).unwrap();
        let v = k.eval(&State::Point2(0.0, 0.0), &State::Point2(1.0, 0.0)).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-16);
        assert!((v - 0.367879441171442).abs() < 1e-15);
    }

    #[test]
    fn one_hot_is_kronecker_delta() {
        let k = Kernel::one_hot();
        assert_eq!(k.eval(&State::Index(3), &State::Index(3)).unwrap(), 1.0);
        assert_eq!(k.eval(&State::Index(3), &State::Index(4)).unwrap(), 0.0);
        assert!(k.eval(&State::Index(0), &State::Point2(0.0, 0.0)).is_err());
    }

    #[test]
    fn one_hot_gram_on_distinct_states_is_identity() {
        let k = Kernel::one_hot();
        let pts: Vec<State> = (0..5).map(State::Index).collect();
        let g = gram(&k, &pts, &pts).unwrap();
        assert_eq!(g, DMatrix::identity(5, 5));
    }

    #[test]
    fn gram_is_symmetric_and_psd_on_random_points() {
        let pts = [
            State::Point2(0.1, 0.9),
            State::Point2(-0.4, 0.3),
            State::Point2(0.7, -0.6),
        ];
        for k in [Kernel::laplacian(0.5).unwrap(), Kernel::gaussian(0.5).unwrap()] {
            let g = gram(&k, &pts, &pts).unwrap();
            assert!((g.clone() - g.transpose()).amax() < 1e-14);
            assert!(min_eigenvalue(&g) >= -1e-8);
        }
    }

    #[test]
    fn bandwidth_scaling_identity() {
        let k_sigma = Kernel::laplacian(0.37).unwrap();
        let k_unit = Kernel::laplacian(1.0).unwrap();
        let x = State::Point2(0.21, -0.55);
        let y = State::Point2(-0.13, 0.4);
        let scaled_x = State::Point2(0.21 / 0.37, -0.55 / 0.37);
        let scaled_y = State::Point2(-0.13 / 0.37, 0.4 / 0.37);
        let a = k_sigma.eval(&x, &y).unwrap();
        let b = k_unit.eval(&scaled_x, &scaled_y).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn state_action_diagonal_when_actions_all_differ() {
        let sak = StateActionKernel::new(Kernel::laplacian(1.0).unwrap(), 3).unwrap();
        let pairs: Vec<(State, usize)> = (0..3)
            .map(|i| (State::Point2(i as f64 * 0.2, 0.0), i))
            .collect();
        let g = sak.gram(&pairs, &pairs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_eq!(g[(i, j)], expected);
            }
        }
    }

    #[test]
    fn sorting_by_action_yields_block_diagonal() {
        let sak = StateActionKernel::new(Kernel::gaussian(0.7).unwrap(), 2).unwrap();
        let mut pairs: Vec<(State, usize)> = vec![
            (State::Point2(0.0, 0.1), 1),
            (State::Point2(0.3, 0.4), 0),
            (State::Point2(0.9, 0.2), 1),
            (State::Point2(0.5, 0.6), 0),
        ];
        pairs.sort_by_key(|p| p.1);
        let g = sak.gram(&pairs, &pairs).unwrap();
        // First two rows hold action 0, last two action 1.
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(g[(i, j)], 0.0);
                assert_eq!(g[(j, i)], 0.0);
            }
        }
        for i in 0..2 {
            assert!(g[(i, i)] > 0.0 && g[(i + 2, i + 2)] > 0.0);
        }
    }

    #[test]
    fn single_action_reduces_to_state_gram() {
        let base = Kernel::laplacian(0.4).unwrap();
        let sak = StateActionKernel::new(base.clone(), 1).unwrap();
        let states = [State::Point2(0.0, 0.0), State::Point2(0.2, 0.8)];
        let pairs: Vec<(State, usize)> = states.iter().map(|s| (*s, 0)).collect();
        assert_eq!(sak.gram(&pairs, &pairs).unwrap(), gram(&base, &states, &states).unwrap());
    }

    proptest! {
        // Hadamard identity: the pair Gram equals the state Gram masked by
        // action agreement, entrywise.
        #[test]
        fn pair_gram_is_masked_state_gram(
            coords in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0usize..3), 2..8),
            sigma in 0.1f64..2.0,
        ) {
            let base = Kernel::laplacian(sigma).unwrap();
            let sak = StateActionKernel::new(base.clone(), 3).unwrap();
            let pairs: Vec<(State, usize)> =
                coords.iter().map(|(x, y, a)| (State::Point2(*x, *y), *a)).collect();
            let states: Vec<State> = pairs.iter().map(|p| p.0).collect();
            let gs = gram(&base, &states, &states).unwrap();
            let gp = sak.gram(&pairs, &pairs).unwrap();
            for i in 0..pairs.len() {
                for j in 0..pairs.len() {
                    let mask = (pairs[i].1 == pairs[j].1) as u8 as f64;
                    prop_assert!((gp[(i, j)] - gs[(i, j)] * mask).abs() < 1e-15);
                }
            }
        }

        // Gram matrices of the shipped families are symmetric PSD with
        // entries in [0, 1].
        #[test]
        fn gram_matrices_are_psd(
            coords in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..10),
            sigma in 0.05f64..3.0,
            gaussian in proptest::bool::ANY,
        ) {
            let k = if gaussian {
                Kernel::gaussian(sigma).unwrap()
            } else {
                Kernel::laplacian(sigma).unwrap()
            };
            let pts: Vec<State> = coords.iter().map(|(x, y)| State::Point2(*x, *y)).collect();
            let g = gram(&k, &pts, &pts).unwrap();
            prop_assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((g.clone() - g.transpose()).amax() < 1e-14);
            prop_assert!(min_eigenvalue(&g) >= -1e-8);
        }
    }
}
