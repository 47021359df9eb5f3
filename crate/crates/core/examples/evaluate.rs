//! Evaluates a checkpoint (or a fresh policy) with greedy, single-start greedy
//! and sampling decodes, with gaps against the exact optimum.
use pdpnet::bench::{evaluate, eval_oracle, markdown_table, Decode, TestSet};
use pdpnet::instances::Distribution;
use pdpnet::policy::{ModelConfig, Policy};

fn main() -> pdpnet::Result<()> {
    let policy = match std::env::args().nth(1) {
        Some(path) => Policy::<f32>::load(path)?,
        None => Policy::init(ModelConfig::default(), 0)?,
    };
    let set = TestSet::generate(5, Distribution::Clustered, 20, 1234)?;
    let exact = eval_oracle(&set)?;
    let reference: Vec<f64> = exact.rows.iter().map(|r| r.obj).collect();
    let mut rows = exact.rows.clone();
    for decode in [Decode::Greedy, Decode::GreedySingle, Decode::Sample(128)] {
        let mut report = evaluate(&policy, &set, "full", decode, 0)?;
        report.set_reference(&reference)?;
        rows.extend(report.rows);
    }
    print!("{}", markdown_table(&rows));
    Ok(())
}
