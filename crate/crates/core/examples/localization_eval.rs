//! PnP-RANSAC localization of query images against the true landmark map and
//! scoring at the (0.1 m, 1 deg) / (0.25 m, 2 deg) / (1 m, 5 deg) thresholds.

use std::collections::BTreeMap;

use trajforge::localize::{evaluate, RansacConfig, THRESHOLDS};
use trajforge::pipeline::localize_queries;
use trajforge::simulator::{simulate, SimConfig};

fn main() -> trajforge::Result<()> {
    let cfg = SimConfig {
        query_pixel_std: 2.0,
        queries: 40,
        ..SimConfig::default()
    };
    let sim = simulate(&cfg)?;
    // Use the true landmark positions as the map.
    let mut map = sim.dataset.clone();
    let truth = map.ground_truth.clone().expect("simulated");
    for l in map.landmarks.iter_mut() {
        l.position = truth.landmarks[&l.id];
        l.triangulated = true;
    }
    let est = localize_queries(&map, &sim.queries, &RansacConfig::default())?;
    let found: BTreeMap<_, _> = est
        .iter()
        .filter_map(|(id, p)| p.map(|p| (id.clone(), p)))
        .collect();
    let report = evaluate(&found, &sim.queries.ground_truth, &THRESHOLDS);
    print!("{}", report.to_table());
    Ok(())
}
