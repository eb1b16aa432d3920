//! Replays a scenario script from recorded transcripts and prints its trace.

use eui_engine::scenario::{run_scenario, RunOptions};

#[tokio::main]
async fn main() {
    let script = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/scenarios/image_sampling.json").into());
    let report = run_scenario(&script, RunOptions::default()).await;
    print!("{}", report.masked_trace());
    eprintln!("{}: {} in {:.2}s", report.name, report.outcome, report.elapsed.as_secs_f64());
    std::process::exit(report.exit_code());
}
