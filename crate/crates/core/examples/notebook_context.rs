//! Loads the tutorial notebook, lists its cells and shows the code context a
//! prompt cell would send to the pipeline.

use eui_engine::notebook::{read_notebook, CellKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/ml_tutorial.ipynb").into());
    let doc = read_notebook(path.as_ref())?;
    for cell in doc.cells() {
        let first = cell.source().lines().next().unwrap_or("");
        println!("{:<14} {:<8?} {first}", cell.id().as_str(), cell.kind());
    }
    for prompt in doc.cells().iter().filter(|c| c.kind() == CellKind::Prompt) {
        let ctx = doc.build_code_context(prompt.id())?;
        println!("\n{}: {} preceding code cells", prompt.id().as_str(), ctx.preamble.len() + 1);
        println!("focal code:\n{}", ctx.focal_code);
    }
    Ok(())
}
