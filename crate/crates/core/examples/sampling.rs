//! Best-of-K sampling with nested streams: enlarging K never worsens the
//! per-instance result.
use pdpnet::bench::{eval_sampling, TestSet};
use pdpnet::instances::Distribution;
use pdpnet::policy::{ModelConfig, Policy};

fn main() -> pdpnet::Result<()> {
    let policy = Policy::<f32>::init(ModelConfig::default(), 5)?;
    let set = TestSet::generate(5, Distribution::Clustered, 5, 1234)?;
    let mut previous: Option<Vec<f64>> = None;
    for k in [1, 16, 128, 1280] {
        let report = eval_sampling(&policy, &set, "full", k, 0)?;
        let objs: Vec<f64> = report.rows.iter().map(|r| r.obj).collect();
        if let Some(prev) = &previous {
            assert!(objs.iter().zip(prev).all(|(a, b)| a <= b));
        }
        println!("K = {k:>5}: mean best {:.4}, {:.3} s per instance", report.mean_obj(), report.mean_time_s());
        previous = Some(objs);
    }
    Ok(())
}
