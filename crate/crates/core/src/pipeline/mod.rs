//! The agent chain: advisor, UI planner, UI coder, code injector, plus the
//! independent prompt suggester.

mod code;
mod context;
mod plan;
mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{Diagnostic, ExecError, KernelError, KernelSession, BINDING_PREFIX, TOOLKIT_MODULE};
use crate::llm::{AgentId, LlmError, LlmGateway, Prompt};
use crate::notebook::CodeContext;
use crate::widgets::{self, RenderPayload, WidgetError, WidgetStateSnapshot};

pub use code::{describe_state, extract_code_blocks, python_literal, reference_ui_code, strip_fences};
pub use context::{budget_preamble, BudgetedPreamble, DEFAULT_CONTEXT_BUDGET, TRUNCATION_SENTINEL};
pub use plan::{parse_plan, repair_json, AdvisorInstruction, PlanParseError, UIPlan, UIPlanElement};
pub use templates::{required_slots, PromptTemplate, TemplateError, Templates, SLOTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeStage {
    /// The coder response as a whole, before snippet checks.
    Response,
    Globals,
    Widgets,
    Injected,
}

impl std::fmt::Display for CodeStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CodeStage::Response => "ui coder response",
            CodeStage::Globals => "globals snippet",
            CodeStage::Widgets => "widgets snippet",
            CodeStage::Injected => "injected code",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelFailure {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{stage} raised {}: {}", .error.ename, .error.message)]
    Execution { stage: CodeStage, error: ExecError },
    #[error("{0}")]
    Manifest(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("the request is empty")]
    EmptyRequest,
    #[error("the advisor returned no instruction")]
    EmptyAdvice,
    #[error("the UI planner returned no elements")]
    EmptyPlan,
    #[error("the UI plan is malformed: {0}")]
    MalformedPlan(String),
    #[error("{stage} does not compile: {diagnostic}")]
    CompileFailure { stage: CodeStage, diagnostic: Diagnostic },
    #[error("the code injector returned no code")]
    EmptyGeneration,
    #[error("the prompt suggester returned no suggestion")]
    EmptySuggestion,
    #[error("kernel error: {0}")]
    Kernel(KernelFailure),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::EmptyRequest => "EmptyRequest",
            PipelineError::EmptyAdvice => "EmptyAdvice",
            PipelineError::EmptyPlan => "EmptyPlan",
            PipelineError::MalformedPlan(_) => "MalformedPlan",
            PipelineError::CompileFailure { .. } => "CompileFailure",
            PipelineError::EmptyGeneration => "EmptyGeneration",
            PipelineError::EmptySuggestion => "EmptySuggestion",
            PipelineError::Kernel(_) => "KernelError",
            PipelineError::Backend(e) => e.kind(),
        }
    }

    /// Failures a fresh model call might fix.
    pub fn is_regenerable(&self) -> bool {
        matches!(
            self,
            PipelineError::EmptyAdvice
                | PipelineError::EmptyPlan
                | PipelineError::MalformedPlan(_)
                | PipelineError::CompileFailure { .. }
                | PipelineError::EmptyGeneration
        )
    }

    pub fn kernel_died(&self) -> bool {
        matches!(
            self,
            PipelineError::Kernel(KernelFailure::Kernel(
                KernelError::KernelDead | KernelError::Timeout { killed: true, .. }
            ))
        )
    }
}

impl From<KernelError> for PipelineError {
    fn from(e: KernelError) -> Self {
        PipelineError::Kernel(KernelFailure::Kernel(e))
    }
}

impl From<WidgetError> for PipelineError {
    fn from(e: WidgetError) -> Self {
        match e {
            WidgetError::Kernel(k) => k.into(),
            other => PipelineError::Kernel(KernelFailure::Manifest(other.to_string())),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Snippets ready to run, with binding names already rewritten.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UICodeBundle {
    pub globals_snippet: String,
    pub widgets_snippet: String,
    pub bindings: BTreeMap<u32, String>,
}

#[derive(Debug)]
pub struct EphemeralUiHandle {
    pub request: String,
    pub instruction: AdvisorInstruction,
    pub plan: UIPlan,
    pub bundle: UICodeBundle,
    pub payload: RenderPayload,
    live: Arc<AtomicBool>,
}

impl EphemeralUiHandle {
    pub fn is_superseded(&self) -> bool {
        !self.live.load(Ordering::SeqCst)
    }

    /// Flag shared with the panel registry; cleared when a newer panel
    /// replaces this one.
    pub fn liveness(&self) -> Arc<AtomicBool> {
        self.live.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    pub context_budget: usize,
    /// Retry a failed planner, coder or injector call once.
    pub regenerate_once: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { context_budget: DEFAULT_CONTEXT_BUDGET, regenerate_once: false }
    }
}

#[derive(Debug)]
pub struct Pipeline {
    gateway: LlmGateway,
    templates: Templates,
    options: PipelineOptions,
}

impl Pipeline {
    /// Installs each template's system section into the gateway's agent
    /// configs.
    pub fn new(mut gateway: LlmGateway, templates: Templates, options: PipelineOptions) -> Self {
        for agent in AgentId::ALL {
            let mut config = gateway.config(agent).clone();
            config.system_template = templates.get(agent).system.clone();
            gateway.set_config(config);
        }
        Self { gateway, templates, options }
    }

    pub fn with_defaults(gateway: LlmGateway) -> Self {
        Self::new(gateway, Templates::builtin(), PipelineOptions::default())
    }

    pub fn gateway(&self) -> &LlmGateway {
        &self.gateway
    }

    pub fn options(&self) -> PipelineOptions {
        self.options
    }

    fn base_slots(&self, request: &str, context: &CodeContext) -> BTreeMap<String, String> {
        let preamble = budget_preamble(&context.preamble, self.options.context_budget).render();
        BTreeMap::from([
            ("request".to_string(), request.to_string()),
            ("focal_code".to_string(), context.focal_code.clone()),
            ("preamble".to_string(), preamble),
        ])
    }

    async fn call(&self, agent: AgentId, slots: BTreeMap<String, String>) -> Result<String> {
        let user_content = self.templates.get(agent).render_user(&slots);
        Ok(self.gateway.complete_prompt(agent, &Prompt { user_content, slots }, &[]).await?)
    }

    pub async fn advise(&self, request: &str, context: &CodeContext) -> Result<AdvisorInstruction> {
        let request = request.trim();
        if request.is_empty() {
            return Err(PipelineError::EmptyRequest);
        }
        let raw = self.call(AgentId::Advisor, self.base_slots(request, context)).await?;
        AdvisorInstruction::from_response(&raw).ok_or(PipelineError::EmptyAdvice)
    }

    pub async fn plan_ui(
        &self,
        instruction: &AdvisorInstruction,
        request: &str,
        context: &CodeContext,
    ) -> Result<UIPlan> {
        let mut slots = self.base_slots(request.trim(), context);
        slots.insert("instruction".into(), instruction.text.clone());
        let raw = self.call(AgentId::UiPlanner, slots).await?;
        parse_plan(&raw, instruction).map_err(|e| match e {
            PlanParseError::Empty => PipelineError::EmptyPlan,
            PlanParseError::Malformed(m) => PipelineError::MalformedPlan(m),
        })
    }

    async fn gate(kernel: &KernelSession, stage: CodeStage, code: &str) -> Result<()> {
        kernel.compile_check(code).await?.map_err(|diagnostic| PipelineError::CompileFailure { stage, diagnostic })
    }

    pub async fn code_ui(&self, plan: &UIPlan, context: &CodeContext, kernel: &KernelSession) -> Result<UICodeBundle> {
        if plan.elements.is_empty() {
            return Err(PipelineError::EmptyPlan);
        }
        let mut slots = self.base_slots("", context);
        slots.remove("request");
        slots.insert("instruction".into(), plan.instruction.text.clone());
        slots.insert("ui_plan".into(), plan.elements_json());
        let raw = self.call(AgentId::UiCoder, slots).await?;

        let structural = |message: String| PipelineError::CompileFailure {
            stage: CodeStage::Response,
            diagnostic: Diagnostic { line: None, message },
        };
        let blocks = extract_code_blocks(&raw);
        let [globals, widgets] = blocks.as_slice() else {
            return Err(structural(format!("expected two fenced code blocks, found {}", blocks.len())));
        };
        Self::gate(kernel, CodeStage::Globals, globals).await?;
        Self::gate(kernel, CodeStage::Widgets, widgets).await?;

        let rewritten = kernel
            .rewrite_bindings(globals, widgets)
            .await?
            .map_err(|diagnostic| PipelineError::CompileFailure { stage: CodeStage::Widgets, diagnostic })?;

        let planned: BTreeSet<u32> = plan.elements.iter().map(|e| e.element_id).collect();
        let bound: BTreeSet<u32> = rewritten.bindings.keys().copied().collect();
        if planned != bound {
            return Err(structural(format!("plan elements {planned:?} but constructors for {bound:?}")));
        }
        let names: BTreeSet<&str> = rewritten.bindings.values().map(String::as_str).collect();
        let declared: BTreeSet<&str> = rewritten.declared.iter().map(String::as_str).collect();
        if names != declared {
            return Err(structural(format!("globals snippet declares {declared:?}, bindings are {names:?}")));
        }
        if let Some(bad) = names.iter().find(|n| !n.starts_with(BINDING_PREFIX) || **n == TOOLKIT_MODULE) {
            return Err(structural(format!("binding `{bad}` lacks the reserved prefix")));
        }
        Self::gate(kernel, CodeStage::Globals, &rewritten.globals).await?;
        Self::gate(kernel, CodeStage::Widgets, &rewritten.widgets).await?;
        Ok(UICodeBundle {
            globals_snippet: rewritten.globals,
            widgets_snippet: rewritten.widgets,
            bindings: rewritten.bindings,
        })
    }

    pub async fn inject_code(
        &self,
        state: &WidgetStateSnapshot,
        request: &str,
        context: &CodeContext,
        kernel: &KernelSession,
    ) -> Result<String> {
        if state.is_empty() {
            return Err(PipelineError::EmptyGeneration);
        }
        let mut slots = self.base_slots(request.trim(), context);
        slots.insert("widget_state".into(), describe_state(state));
        for entry in &state.entries {
            slots.insert(format!("widget.{}", entry.label), python_literal(&entry.value));
        }
        let raw = self.call(AgentId::CodeInjector, slots).await?;
        let code = strip_fences(&raw);
        if code.is_empty() {
            return Err(PipelineError::EmptyGeneration);
        }
        Self::gate(kernel, CodeStage::Injected, &code).await?;
        Ok(code)
    }

    pub async fn suggest_prompt(&self, existing_request: Option<&str>, context: &CodeContext) -> Result<String> {
        let request = existing_request.map(str::trim).unwrap_or_default();
        let raw = self.call(AgentId::PromptSuggester, self.base_slots(request, context)).await?;
        let mut text = raw.trim();
        if let Some(rest) = text.strip_prefix(crate::notebook::PROMPT_MARKER) {
            text = rest.trim();
        }
        for quote in ['"', '\'', '`'] {
            if text.len() >= 2 && text.starts_with(quote) && text.ends_with(quote) {
                text = text[1..text.len() - 1].trim();
            }
        }
        if text.is_empty() {
            return Err(PipelineError::EmptySuggestion);
        }
        Ok(text.to_string())
    }

    /// Injector call with the optional single regeneration.
    pub async fn inject_code_with_policy(
        &self,
        state: &WidgetStateSnapshot,
        request: &str,
        context: &CodeContext,
        kernel: &KernelSession,
    ) -> Result<String> {
        match self.inject_code(state, request, context, kernel).await {
            Err(e) if self.options.regenerate_once && e.is_regenerable() => {
                tracing::info!("regenerating injected code after {}", e.kind());
                self.inject_code(state, request, context, kernel).await
            }
            other => other,
        }
    }

    /// Advisor, planner and coder, then both snippets in the kernel and the
    /// render. Nothing runs in the kernel before the coder output passed the
    /// compile gate.
    pub async fn run_ephemeral_ui(
        &self,
        request: &str,
        context: &CodeContext,
        kernel: &KernelSession,
    ) -> Result<EphemeralUiHandle> {
        let request = request.trim();
        let instruction = self.advise(request, context).await?;
        let plan = match self.plan_ui(&instruction, request, context).await {
            Err(e) if self.options.regenerate_once && e.is_regenerable() => {
                tracing::info!("regenerating plan after {}", e.kind());
                self.plan_ui(&instruction, request, context).await
            }
            other => other,
        }?;
        let bundle = match self.code_ui(&plan, context, kernel).await {
            Err(e) if self.options.regenerate_once && e.is_regenerable() => {
                tracing::info!("regenerating widget code after {}", e.kind());
                self.code_ui(&plan, context, kernel).await
            }
            other => other,
        }?;

        let run = |stage: CodeStage, code: String| async move {
            let result = kernel.execute(&code, None).await?;
            match result.error {
                Some(error) if !result.ok => Err(PipelineError::Kernel(KernelFailure::Execution { stage, error })),
                _ => Ok(()),
            }
        };
        run(CodeStage::Globals, bundle.globals_snippet.clone()).await?;
        kernel.toolkit_reset().await?;
        run(CodeStage::Widgets, bundle.widgets_snippet.clone()).await?;
        let payload = widgets::render(&bundle, &plan, kernel).await?;

        Ok(EphemeralUiHandle {
            request: request.to_string(),
            instruction,
            plan,
            bundle,
            payload,
            live: Arc::new(AtomicBool::new(true)),
        })
    }
}
