//! Generates a clustered and a uniform instance, prints their coordinates and
//! writes a small frozen test set.
use pdpnet::bench::TestSet;
use pdpnet::instances::{Distribution, PdpInstance};

fn main() -> pdpnet::Result<()> {
    for dist in [Distribution::Clustered, Distribution::Uniform] {
        let inst = PdpInstance::generate(3, dist, 42)?;
        println!("{dist} instance, n = {}", inst.n());
        for (i, c) in inst.coords().iter().enumerate() {
            println!("  node {i:>2} {:?} ({:.3}, {:.3})", inst.role(i), c[0], c[1]);
        }
    }
    let out = std::env::temp_dir().join("pdp5_clustered.json");
    let set = TestSet::generate(5, Distribution::Clustered, 100, 1234)?;
    set.write(&out)?;
    assert_eq!(TestSet::read(&out)?, set);
    println!("wrote {} instances to {}", set.len(), out.display());
    Ok(())
}
