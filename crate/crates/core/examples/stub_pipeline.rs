//! Runs the ephemeral-UI pipeline against canned agent responses, moves a
//! widget and generates the code cell for the selection.

use eui_engine::kernel::{KernelConfig, KernelSession, SyncValue};
use eui_engine::llm::{AgentId, LlmGateway, Responder, StubBackend};
use eui_engine::notebook::{CellId, CodeContext};
use eui_engine::pipeline::Pipeline;
use eui_engine::widgets::{apply_event, snapshot_state, PanelRegistry, WidgetEvent};

const PLAN: &str = r#"{"elements": [
  {"element_id": 1, "name": "Bins", "widget_kind": "slider", "range": {"min": 2, "max": 40, "step": 1}},
  {"element_id": 2, "name": "Log Scale", "widget_kind": "checkbox"}
]}"#;

const CODER: &str = "```python
bins = 10
log_scale = False
```
```python
_eui.slider(1, \"Bins\", \"bins\", min=2, max=40, step=1)
_eui.checkbox(2, \"Log Scale\", \"log_scale\")
```";

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let stub = StubBackend::new()
        .with(AgentId::Advisor, Responder::Fixed("Plot a histogram of values with adjustable bins.".into()))
        .with(AgentId::UiPlanner, Responder::Fixed(PLAN.into()))
        .with(AgentId::UiCoder, Responder::Fixed(CODER.into()))
        .with(
            AgentId::CodeInjector,
            Responder::Template("plt.hist(values, bins={widget.Bins}, log={widget.Log Scale})".into()),
        );
    let pipeline = Pipeline::with_defaults(LlmGateway::stub(stub));
    let kernel = KernelSession::start("stub-pipeline", &KernelConfig::default()).await?;
    kernel
        .execute(
            "import matplotlib\nmatplotlib.use('Agg')\nimport matplotlib.pyplot as plt\nvalues = list(range(100))",
            None,
        )
        .await?;

    let ctx = CodeContext {
        focal_code: "values = list(range(100))".into(),
        preamble: vec![],
        prompt_cell_id: CellId::new("ask"),
    };
    let mut handle = pipeline.run_ephemeral_ui("histogram of values", &ctx, &kernel).await?;
    let mut panels = PanelRegistry::new();
    let live = handle.liveness();
    let panel_id = panels.replace_panel(&mut handle.payload, live);
    println!("{}", handle.payload.html);

    let event =
        WidgetEvent { panel_id: panel_id.clone(), element_id: 1, value: SyncValue::new(25.into())?, sequence_no: 1 };
    apply_event(panels.panel_mut(&panel_id)?, &event, &kernel).await?;
    let state = snapshot_state(panels.panel(&panel_id)?.manifest(), &kernel).await?;
    let code = pipeline.inject_code(&state, "histogram of values", &ctx, &kernel).await?;
    println!("\ninjected: {code}");
    kernel.shutdown().await;
    Ok(())
}
