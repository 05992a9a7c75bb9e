//! Write a simulated dataset to disk in the plain-text layout, read it back
//! and check that nothing changed.

use trajforge::dataset::{read_dataset, read_queries, write_dataset, write_queries};
use trajforge::simulator::{simulate, SimConfig};

fn main() -> trajforge::Result<()> {
    let cfg = SimConfig {
        sequences: 2,
        duration_s: 20.0,
        ..SimConfig::default()
    };
    let sim = simulate(&cfg)?;
    let dir = std::env::temp_dir().join("trajforge_dataset_example");
    write_dataset(&sim.dataset, &dir)?;
    write_queries(&sim.queries, &dir.join("queries"))?;
    let back = read_dataset(&dir)?;
    let queries = read_queries(&dir.join("queries"))?;
    println!(
        "{}: {} sensors, {} images, {} observations, {} scans, {} queries",
        dir.display(),
        back.sensors.len(),
        back.images.len(),
        back.observations.len(),
        back.scans.len(),
        queries.queries.len()
    );
    println!(
        "dataset identical after round trip: {}",
        back == sim.dataset
    );
    println!(
        "queries identical after round trip: {}",
        queries == sim.queries
    );
    Ok(())
}
