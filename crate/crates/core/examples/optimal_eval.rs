// Dev check: undiscounted evaluation of oracle-optimal policies.
use powr_core::env::{by_id, Environment, State};
use powr_core::harness::evaluate;
use powr_core::oracle::{exact_value_and_j, policy_iteration};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let id = args.get(1).map(|s| s.as_str()).unwrap_or("gridworld4");
    let gammas: Vec<f64> = args[2..].iter().map(|s| s.parse().unwrap()).collect();
    let env = by_id(id).unwrap();
    for gamma in &gammas {
        let mdp = env.exact_dynamics().unwrap().with_gamma(*gamma).unwrap();
        let star = policy_iteration(&mdp).unwrap();
        let (_, j) = exact_value_and_j(&mdp, &star).unwrap();
        let policy = |x: &State| star.row(x.index().unwrap()).to_vec();
        let (mean, lo, hi) = evaluate(&policy, env.as_ref(), 4000, 123).unwrap();
        println!("{id} gamma={gamma}: J*={j:.3} eval mean={mean:.4} min={lo} max={hi}");
    }
}
