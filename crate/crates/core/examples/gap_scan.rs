// Dev scan: exact-PMD gap vs iterations for several discounts and step
// sizes on the 4x4 gridworld.
use powr_core::env::{Environment, GridWorld};
use powr_core::oracle::exact_pmd;

fn main() {
    let env = GridWorld::new();
    for gamma in [0.5, 0.8, 0.9, 0.95, 0.99] {
        let mdp = env.exact_dynamics().unwrap().with_gamma(gamma).unwrap();
        for eta in [1.0, 2.0, 5.0, 10.0] {
            let run = exact_pmd(&mdp, eta, 200).unwrap();
            let g = |t: usize| run.gaps[t];
            println!(
                "gamma={gamma} eta={eta}: J*={:.4} gap5={:.2e} gap10={:.2e} gap20={:.2e} gap50={:.2e} gap100={:.2e} gap200={:.2e}",
                run.j_star, g(5), g(10), g(20), g(50), g(100), g(200)
            );
        }
    }
}
