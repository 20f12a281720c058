use powr_core::env::{Environment, GridWorld, State};
use powr_core::kernel::{Kernel, StateActionKernel};
use powr_core::pmd::{pmd_step, PolicyWeights};
use powr_core::worldmodel::{exhaustive_dataset, QModel, WorldModel};

fn main() {
    let env = GridWorld::new();
    let mdp = env.exact_dynamics().unwrap().with_gamma(0.9).unwrap();
    let ds = exhaustive_dataset(&mdp, 3, "gridworld4").unwrap();
    let sak = StateActionKernel::new(Kernel::one_hot(), 4).unwrap();
    let mut model = WorldModel::fit(&ds, sak, 1e-10, 0.0).unwrap();
    let mut w = PolicyWeights::zeros(model.coeff_len(), 4, 1.0).unwrap();
    for it in 0..3 {
        let (next, diag) = pmd_step(&w, &mut model, 0.9).unwrap();
        let delta = &next.c - &w.c;
        // inspect group structure of the first anchor group (state 0, action 0)
        let mut vals = vec![];
        for i in 0..model.coeff_len() {
            let (x, a) = model.anchors()[i];
            if x == State::Index(0) && a == 0 {
                vals.push(delta[(i, 0)]);
            }
        }
        println!(
            "iter {it}: c_inf={:.3e} group(0,0) deltas = {:?} sum={:.6e}",
            diag.c_inf,
            vals,
            vals.iter().sum::<f64>()
        );
        w = next;
    }
}
