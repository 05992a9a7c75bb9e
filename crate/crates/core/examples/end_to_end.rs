//! The full chain on a noise-free scenario: simulate, LiDAR SLAM per
//! sequence, merge, bundle adjustment, query localization and evaluation.
//! Every intermediate dataset is written under the system temp directory.

use std::collections::BTreeMap;

use trajforge::config::PipelineConfig;
use trajforge::dataset::write_dataset;
use trajforge::localize::{evaluate, THRESHOLDS};
use trajforge::pipeline::{estimates_to_csv, localize_queries, run_ba, run_merge, run_slam};
use trajforge::simulator::{simulate, SimConfig};

fn main() -> trajforge::Result<()> {
    let cfg = PipelineConfig {
        sim: SimConfig::noise_free(),
        ..PipelineConfig::default()
    };
    let root = std::env::temp_dir().join("trajforge_end_to_end");
    let sim = simulate(&cfg.sim)?;
    write_dataset(&sim.dataset, &root.join("sim"))?;
    let (slam, _) = run_slam(&sim.dataset, &cfg.slam)?;
    write_dataset(&slam, &root.join("slam"))?;
    let (merged, m) = run_merge(&[slam], &cfg)?;
    write_dataset(&merged, &root.join("merged"))?;
    println!(
        "merged graph: {} nodes, {} cross-sequence edges",
        m.graph.nodes.len(),
        m.cross.accepted
    );
    let (map, report) = run_ba(&merged, &cfg)?;
    write_dataset(&map, &root.join("ba"))?;
    println!(
        "bundle adjustment: {:.2e} px mean reprojection",
        report.final_mean_reprojection()
    );

    let truth = sim.dataset.ground_truth.as_ref().expect("simulated");
    let worst = map
        .images
        .iter()
        .map(|im| (im.pose.translation() - truth.images[&im.id].translation()).norm())
        .fold(0.0, f64::max);
    println!("largest image position error: {worst:.2e} m");

    let est = localize_queries(&map, &sim.queries, &cfg.ransac)?;
    std::fs::write(root.join("estimates.csv"), estimates_to_csv(&est))?;
    let found: BTreeMap<_, _> = est
        .into_iter()
        .filter_map(|(id, p)| p.map(|p| (id, p)))
        .collect();
    print!(
        "{}",
        evaluate(&found, &sim.queries.ground_truth, &THRESHOLDS).to_table()
    );
    println!("outputs in {}", root.display());
    Ok(())
}
