//! Solves instances exactly and cross-checks the dynamic programme against
//! enumeration and a nearest-feasible heuristic.
use pdpnet::baselines::{brute_force, exact_dp, greedy_nearest_feasible};
use pdpnet::instances::{Distribution, PdpInstance};

fn main() -> pdpnet::Result<()> {
    for seed in 0..5 {
        let inst = PdpInstance::generate(3, Distribution::Clustered, seed)?;
        let dp = exact_dp(&inst)?;
        let bf = brute_force(&inst)?;
        let heur = greedy_nearest_feasible(&inst);
        println!(
            "seed {seed}: dp {:.6} brute force {:.6} nearest feasible {:.6} tour {:?}",
            dp.tour().length,
            bf.tour().length,
            heur.length,
            dp.tour().order
        );
    }
    let big = PdpInstance::generate(8, Distribution::Uniform, 7)?;
    let start = std::time::Instant::now();
    let dp = exact_dp(&big)?;
    println!("n = 8: optimum {:.6} in {:.2?}", dp.tour().length, start.elapsed());
    Ok(())
}
