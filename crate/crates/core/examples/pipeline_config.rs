//! Every configuration key with its default, and how a `key = value` file
//! overrides them.

use trajforge::config::{PipelineConfig, KEYS};

fn main() -> trajforge::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.apply_text(
        "# lighter run\nsim.sequences = 2\nba.schedule = 8:20,2:40\nransac.inlier_px = 4\n",
    )?;
    for (key, doc) in KEYS {
        println!(
            "{key:<36} = {:<24} # {doc}",
            cfg.get(key).unwrap_or_default()
        );
    }
    match cfg.apply_text("ba.typo = 1") {
        Err(e) => println!("\nrejected: {e}"),
        Ok(()) => unreachable!(),
    }
    Ok(())
}
