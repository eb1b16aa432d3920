use std::collections::BTreeSet;

use eui_engine::kernel::{KernelSession, BINDING_PREFIX};
use eui_engine::llm::{AgentId, LlmGateway, Responder, StubBackend};
use eui_engine::notebook::{CellId, CodeContext};
use eui_engine::pipeline::Templates;
use eui_engine::pipeline::{CodeStage, KernelFailure, Pipeline, PipelineError, PipelineOptions};
use eui_engine::widgets::{html_anchors, snapshot_state, WidgetKind};

mod common;

const ADVICE: &str = "Let the user pick a threshold and a colour for the plot.";

const PLAN: &str = r##"{"elements": [
  {"element_id": 1, "name": "Threshold", "widget_kind": "slider", "range": {"min": 0, "max": 10, "step": 1}},
  {"element_id": 2, "name": "Colour", "widget_kind": "dropdown", "options": ["red", "blue"]}
]}"##;

const CODER: &str = r##"```python
threshold = 3
colour = "red"
```

```python
_eui.slider(1, "Threshold", "threshold", min=0, max=10, step=1)
_eui.dropdown(2, "Colour", "colour", options=["red", "blue"])
```"##;

fn ctx() -> CodeContext {
    CodeContext {
        focal_code: "data = list(range(10))".into(),
        preamble: vec!["import math".into()],
        prompt_cell_id: CellId::new("ask"),
    }
}

fn stub(plan: Responder, coder: Responder) -> StubBackend {
    StubBackend::new()
        .with(AgentId::Advisor, Responder::Fixed(ADVICE.into()))
        .with(AgentId::UiPlanner, plan)
        .with(AgentId::UiCoder, coder)
}

fn pipeline(stub: StubBackend, regenerate_once: bool) -> Pipeline {
    let options = PipelineOptions { regenerate_once, ..PipelineOptions::default() };
    Pipeline::new(LlmGateway::stub(stub), Templates::builtin(), options)
}

fn fixed(s: &str) -> Responder {
    Responder::Fixed(s.into())
}

async fn run_failing(p: &Pipeline, kernel: &KernelSession) -> PipelineError {
    let before = kernel.namespace_digest().await.unwrap();
    let err = p.run_ephemeral_ui("pick a threshold", &ctx(), kernel).await.unwrap_err();
    assert_eq!(kernel.namespace_digest().await.unwrap(), before, "kernel changed after {err}");
    err
}

#[tokio::test]
async fn bindings_are_a_bijection_onto_reserved_globals() {
    let kernel = common::kernel("pipe-ok").await;
    let p = pipeline(stub(fixed(PLAN), fixed(CODER)), false);
    let handle = p.run_ephemeral_ui("  pick a threshold ", &ctx(), &kernel).await.unwrap();
    assert_eq!(handle.request, "pick a threshold");
    assert_eq!(handle.instruction.text, ADVICE);

    let ids: BTreeSet<u32> = handle.bundle.bindings.keys().copied().collect();
    assert_eq!(ids, BTreeSet::from([1, 2]));
    let names: BTreeSet<&String> = handle.bundle.bindings.values().collect();
    assert_eq!(names.len(), 2);
    assert!(names.iter().all(|n| n.starts_with(BINDING_PREFIX)));
    assert!(!handle.bundle.globals_snippet.contains("threshold ="));

    let globals = kernel.list_globals(BINDING_PREFIX).await.unwrap();
    for name in names {
        assert!(globals.contains(name), "{name} missing from {globals:?}");
    }
    assert!(kernel.list_globals("threshold").await.unwrap().is_empty());

    let manifest = &handle.payload.manifest;
    assert!(manifest.submit_present);
    let kinds: Vec<WidgetKind> = manifest.widgets.iter().map(|w| w.widget_kind).collect();
    assert_eq!(kinds, [WidgetKind::Slider, WidgetKind::Dropdown]);
    assert_eq!(manifest.widgets[0].current_value.as_f64(), Some(3.0));
    assert_eq!(manifest.widgets[1].current_value.as_str(), Some("red"));
    let mut anchors = html_anchors(&handle.payload.html);
    anchors.sort_unstable();
    assert_eq!(anchors, [1, 2]);
    assert!(handle.payload.html.contains("data-eui-submit"));
    kernel.shutdown().await;
}

#[tokio::test]
async fn compile_gate_rejects_before_anything_runs() {
    let kernel = common::kernel("pipe-gate").await;
    let cases = [
        ("```python\nthreshold = (\n```\n\n```python\npass\n```", CodeStage::Globals),
        ("```python\nthreshold = 3\ncolour = 'red'\n```\n\n```python\n_eui.slider(1,\n```", CodeStage::Widgets),
        ("```python\nthreshold = 3\n```", CodeStage::Response),
        ("no code at all", CodeStage::Response),
        (
            "```python\nthreshold = 3\ncolour = 'red'\n```\n```python\n_eui.slider(1, 'Threshold', 'threshold', min=0, max=10)\n```",
            CodeStage::Response,
        ),
    ];
    for (coder, stage) in cases {
        let p = pipeline(stub(fixed(PLAN), fixed(coder)), false);
        match run_failing(&p, &kernel).await {
            PipelineError::CompileFailure { stage: got, .. } => assert_eq!(got, stage, "{coder}"),
            other => panic!("expected CompileFailure for {coder:?}, got {other}"),
        }
    }
    kernel.shutdown().await;
}

#[tokio::test]
async fn planner_failures_are_typed() {
    let kernel = common::kernel("pipe-plan").await;
    let p = pipeline(stub(fixed(""), fixed(CODER)), false);
    assert_eq!(run_failing(&p, &kernel).await, PipelineError::EmptyPlan);
    let p = pipeline(stub(fixed(r#"{"elements": []}"#), fixed(CODER)), false);
    assert_eq!(run_failing(&p, &kernel).await, PipelineError::EmptyPlan);
    let p = pipeline(stub(fixed("I would suggest a slider."), fixed(CODER)), false);
    assert_eq!(run_failing(&p, &kernel).await.kind(), "MalformedPlan");
    let p = pipeline(
        stub(fixed(r#"{"elements": [{"element_id": 1, "name": "x", "widget_kind": "knob"}]}"#), fixed(CODER)),
        false,
    );
    assert_eq!(run_failing(&p, &kernel).await.kind(), "MalformedPlan");

    let p = pipeline(stub(fixed(PLAN), fixed(CODER)).with(AgentId::Advisor, fixed("  \n ")), false);
    assert_eq!(run_failing(&p, &kernel).await, PipelineError::EmptyAdvice);
    kernel.shutdown().await;
}

#[tokio::test]
async fn runtime_failure_in_widget_snippet_is_a_kernel_error() {
    let kernel = common::kernel("pipe-runtime").await;
    let coder = "```python\nthreshold = 3\ncolour = 'red'\n```\n```python\n_eui.slider(1, 'Threshold', 'threshold', min=10, max=0)\n_eui.dropdown(2, 'Colour', 'colour', options=['red'])\n```";
    let p = pipeline(stub(fixed(PLAN), fixed(coder)), false);
    match p.run_ephemeral_ui("pick", &ctx(), &kernel).await.unwrap_err() {
        PipelineError::Kernel(KernelFailure::Execution { stage, error }) => {
            assert_eq!(stage, CodeStage::Widgets);
            assert_eq!(error.ename, "ValueError");
        }
        other => panic!("unexpected {other}"),
    }
    kernel.shutdown().await;
}

#[tokio::test]
async fn kind_mismatch_between_plan_and_toolkit_is_reported() {
    let kernel = common::kernel("pipe-kind").await;
    let coder = "```python\nthreshold = 3\ncolour = 'red'\n```\n```python\n_eui.number_input(1, 'Threshold', 'threshold', min=0, max=10)\n_eui.dropdown(2, 'Colour', 'colour', options=['red'])\n```";
    let p = pipeline(stub(fixed(PLAN), fixed(coder)), false);
    let err = p.run_ephemeral_ui("pick", &ctx(), &kernel).await.unwrap_err();
    assert!(matches!(err, PipelineError::Kernel(KernelFailure::Manifest(_))), "{err}");
    kernel.shutdown().await;
}

#[tokio::test]
async fn regenerate_once_retries_a_single_time() {
    let kernel = common::kernel("pipe-regen").await;
    let plans = || Responder::Sequence(vec!["".into(), PLAN.into()]);
    let p = pipeline(stub(plans(), fixed(CODER)), true);
    assert!(p.run_ephemeral_ui("pick", &ctx(), &kernel).await.is_ok());

    let p = pipeline(stub(plans(), fixed(CODER)), false);
    assert_eq!(p.run_ephemeral_ui("pick", &ctx(), &kernel).await.unwrap_err(), PipelineError::EmptyPlan);

    let coders = Responder::Sequence(vec!["bad".into(), "bad".into(), CODER.into()]);
    let p = pipeline(stub(fixed(PLAN), coders), true);
    assert_eq!(p.run_ephemeral_ui("pick", &ctx(), &kernel).await.unwrap_err().kind(), "CompileFailure");
    let planner_calls = p.gateway().exchanges().iter().filter(|e| e.agent_id == AgentId::UiCoder).count();
    assert_eq!(planner_calls, 2);
    kernel.shutdown().await;
}

#[tokio::test]
async fn injected_code_is_filled_from_widget_state_and_gated() {
    let kernel = common::kernel("pipe-inject").await;
    let s = stub(fixed(PLAN), fixed(CODER)).with(
        AgentId::CodeInjector,
        Responder::Template("```python\nplot(data, {widget.Threshold}, {widget.Colour})\n```".into()),
    );
    let p = pipeline(s, false);
    let handle = p.run_ephemeral_ui("pick", &ctx(), &kernel).await.unwrap();
    let state = snapshot_state(&handle.payload.manifest, &kernel).await.unwrap();
    let code = p.inject_code(&state, "pick", &ctx(), &kernel).await.unwrap();
    assert_eq!(code, r#"plot(data, 3, "red")"#);
    let prompt = p.gateway().exchanges().last().unwrap().request_messages.clone();
    let user = prompt.last().unwrap().content.clone();
    assert!(user.contains("- Threshold: 3") && user.contains(r#"- Colour: "red""#), "{user}");

    p.gateway().stub_backend().unwrap().register(AgentId::CodeInjector, fixed("```python\nplot(data,\n```"));
    let before = kernel.namespace_digest().await.unwrap();
    let err = p.inject_code(&state, "pick", &ctx(), &kernel).await.unwrap_err();
    assert!(matches!(err, PipelineError::CompileFailure { stage: CodeStage::Injected, .. }), "{err}");
    assert_eq!(kernel.namespace_digest().await.unwrap(), before);

    p.gateway().stub_backend().unwrap().register(AgentId::CodeInjector, fixed("```python\n```"));
    assert_eq!(p.inject_code(&state, "pick", &ctx(), &kernel).await.unwrap_err(), PipelineError::EmptyGeneration);
    let empty = Default::default();
    assert_eq!(p.inject_code(&empty, "pick", &ctx(), &kernel).await.unwrap_err(), PipelineError::EmptyGeneration);
    kernel.shutdown().await;
}

#[tokio::test]
async fn suggestions_are_cleaned() {
    let cases = [
        ("Plot the loss.", Some("Plot the loss.")),
        ("%prompt \"Plot the loss.\"", Some("Plot the loss.")),
        ("  'Compare models'\n", Some("Compare models")),
        ("%prompt", None),
        ("\"\"", None),
    ];
    for (raw, want) in cases {
        let s = StubBackend::new().with(AgentId::PromptSuggester, fixed(raw));
        let p = pipeline(s, false);
        match (p.suggest_prompt(None, &ctx()).await, want) {
            (Ok(text), Some(w)) => assert_eq!(text, w),
            (Err(e), None) => assert_eq!(e, PipelineError::EmptySuggestion),
            (got, want) => panic!("{raw:?}: got {got:?}, want {want:?}"),
        }
    }
}

#[tokio::test]
async fn same_responses_give_the_same_panel() {
    let mut payloads = Vec::new();
    for i in 0..2 {
        let kernel = common::kernel(&format!("pipe-pure-{i}")).await;
        let p = pipeline(stub(fixed(PLAN), fixed(CODER)), false);
        let handle = p.run_ephemeral_ui("pick", &ctx(), &kernel).await.unwrap();
        payloads.push((handle.bundle, handle.payload));
        kernel.shutdown().await;
    }
    assert_eq!(payloads[0], payloads[1]);
}

#[tokio::test]
async fn backend_failures_surface_as_backend_errors() {
    let kernel = common::kernel("pipe-backend").await;
    let p = pipeline(StubBackend::new(), false);
    let err = run_failing(&p, &kernel).await;
    assert_eq!(err.kind(), "StubMiss");
    assert!(matches!(err, PipelineError::Backend(_)));
    kernel.shutdown().await;
}
