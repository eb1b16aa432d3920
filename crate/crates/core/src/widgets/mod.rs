//! Ephemeral widget panels.
//!
//! After the widget snippets ran in a kernel, [`render`] collects what the
//! toolkit registered into a [`RenderPayload`]: an HTML string plus a
//! structured [`WidgetManifest`]. Client events are validated against the
//! manifest and written to the bound kernel globals by [`apply_event`].

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{KernelError, KernelSession, SyncValue};
use crate::pipeline::{UICodeBundle, UIPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Slider,
    Dropdown,
    Checkbox,
    ColorPicker,
    Textbox,
    NumberInput,
    ImageGallery,
}

impl WidgetKind {
    pub const ALL: [WidgetKind; 7] = [
        WidgetKind::Slider,
        WidgetKind::Dropdown,
        WidgetKind::Checkbox,
        WidgetKind::ColorPicker,
        WidgetKind::Textbox,
        WidgetKind::NumberInput,
        WidgetKind::ImageGallery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WidgetKind::Slider => "slider",
            WidgetKind::Dropdown => "dropdown",
            WidgetKind::Checkbox => "checkbox",
            WidgetKind::ColorPicker => "color_picker",
            WidgetKind::Textbox => "textbox",
            WidgetKind::NumberInput => "number_input",
            WidgetKind::ImageGallery => "image_gallery",
        }
    }

    pub fn needs_range(self) -> bool {
        matches!(self, WidgetKind::Slider | WidgetKind::NumberInput)
    }
}

impl fmt::Display for WidgetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl NumericRange {
    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min < self.max && self.step > 0.0
    }

    pub fn contains(&self, v: f64) -> bool {
        let eps = 1e-9 * (self.max - self.min).abs().max(1.0);
        v >= self.min - eps && v <= self.max + eps
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PanelId(String);

impl PanelId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PanelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WidgetError {
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("unknown element {0}")]
    UnknownElement(u32),
    #[error("value {value} is outside the domain of element {element_id}: {reason}")]
    ValueOutOfDomain { element_id: u32, value: String, reason: String },
    #[error("stale event: sequence {sequence_no} is not after {last_applied}")]
    StaleEvent { sequence_no: u64, last_applied: u64 },
    #[error("panel `{0}` is not the active panel")]
    StalePanel(PanelId),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl WidgetError {
    pub fn kind(&self) -> &'static str {
        match self {
            WidgetError::ManifestMismatch(_) => "ManifestMismatch",
            WidgetError::UnknownElement(_) => "UnknownElement",
            WidgetError::ValueOutOfDomain { .. } => "ValueOutOfDomain",
            WidgetError::StaleEvent { .. } => "StaleEvent",
            WidgetError::StalePanel(_) => "StalePanel",
            WidgetError::Kernel(KernelError::KernelDead) => "KernelDead",
            WidgetError::Kernel(_) => "KernelError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestWidget {
    pub element_id: u32,
    pub widget_kind: WidgetKind,
    pub label: String,
    #[serde(default)]
    pub description: String,
    pub binding: String,
    pub current_value: SyncValue,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<NumericRange>,
}

impl ManifestWidget {
    /// Checks that `value` is acceptable for this widget.
    pub fn check_value(&self, value: &SyncValue) -> Result<(), WidgetError> {
        let reject = |reason: &str| {
            Err(WidgetError::ValueOutOfDomain {
                element_id: self.element_id,
                value: value.to_string(),
                reason: reason.to_string(),
            })
        };
        match self.widget_kind {
            WidgetKind::Slider | WidgetKind::NumberInput => {
                let Some(v) = value.as_f64().filter(|_| value.as_json().is_number()) else {
                    return reject("expected a number");
                };
                match &self.range {
                    Some(range) if !range.contains(v) => reject("number outside range"),
                    _ => Ok(()),
                }
            }
            WidgetKind::Dropdown => match value.as_str() {
                Some(s) if self.options.as_deref().unwrap_or_default().iter().any(|o| o == s) => Ok(()),
                Some(_) => reject("not one of the options"),
                None => reject("expected a string option"),
            },
            WidgetKind::Checkbox => match value.as_bool() {
                Some(_) => Ok(()),
                None => reject("expected a boolean"),
            },
            WidgetKind::ColorPicker => match value.as_str() {
                Some(s) if is_hex_color(s) => Ok(()),
                _ => reject("expected a #rrggbb color"),
            },
            WidgetKind::Textbox => match value.as_str() {
                Some(_) => Ok(()),
                None => reject("expected text"),
            },
            WidgetKind::ImageGallery => {
                if value.is_null() || value.as_list().is_some_and(|l| l.iter().all(|v| v.is_string())) {
                    Ok(())
                } else {
                    reject("expected a list of image references")
                }
            }
        }
    }
}

fn is_hex_color(s: &str) -> bool {
    s.len() == 7 && s.starts_with('#') && s[1..].bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidgetManifest {
    pub panel_id: PanelId,
    pub widgets: Vec<ManifestWidget>,
    pub submit_present: bool,
}

impl WidgetManifest {
    pub fn widget(&self, element_id: u32) -> Option<&ManifestWidget> {
        self.widgets.iter().find(|w| w.element_id == element_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderPayload {
    pub html: String,
    pub manifest: WidgetManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidgetEvent {
    pub panel_id: PanelId,
    pub element_id: u32,
    pub value: SyncValue,
    pub sequence_no: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAck {
    pub panel_id: PanelId,
    pub element_id: u32,
    pub sequence_no: u64,
    pub value: SyncValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidgetValue {
    pub element_id: u32,
    pub label: String,
    pub binding: String,
    pub value: SyncValue,
}

/// Current kernel values of every widget binding in a panel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WidgetStateSnapshot {
    pub entries: Vec<WidgetValue>,
}

impl WidgetStateSnapshot {
    pub fn get(&self, label: &str) -> Option<&SyncValue> {
        self.entries.iter().find(|e| e.label == label).map(|e| &e.value)
    }

    pub fn by_element(&self, element_id: u32) -> Option<&SyncValue> {
        self.entries.iter().find(|e| e.element_id == element_id).map(|e| &e.value)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

pub(crate) fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#x27;"),
            c => out.push(c),
        }
    }
    out
}

/// Element ids carried by `data-eui-id` anchors, in document order.
pub fn html_anchors(html: &str) -> Vec<u32> {
    static ANCHOR: OnceLock<Regex> = OnceLock::new();
    let re = ANCHOR.get_or_init(|| Regex::new(r#"data-eui-id="(\d+)""#).expect("valid regex"));
    re.captures_iter(html).filter_map(|c| c[1].parse().ok()).collect()
}

/// Builds the render payload from what the toolkit registered in `kernel`.
/// The panel id is left empty until [`PanelRegistry::replace_panel`].
pub async fn render(
    bundle: &UICodeBundle,
    plan: &UIPlan,
    kernel: &KernelSession,
) -> Result<RenderPayload, WidgetError> {
    let registered = kernel.toolkit_state().await?;

    let mut seen = HashSet::new();
    for w in &registered {
        if !seen.insert(w.element_id) {
            return Err(WidgetError::ManifestMismatch(format!("element {} registered twice", w.element_id)));
        }
    }
    let planned: BTreeSet<u32> = plan.elements.iter().map(|e| e.element_id).collect();
    let got: BTreeSet<u32> = seen.into_iter().collect();
    if planned != got {
        return Err(WidgetError::ManifestMismatch(format!(
            "plan has elements {planned:?}, toolkit registered {got:?}"
        )));
    }

    let mut widgets = Vec::with_capacity(plan.elements.len());
    let mut fragments = Vec::with_capacity(plan.elements.len());
    for element in &plan.elements {
        let w = registered.iter().find(|w| w.element_id == element.element_id).expect("id sets are equal");
        if w.widget_kind != element.widget_kind {
            return Err(WidgetError::ManifestMismatch(format!(
                "element {} planned as {} but rendered as {}",
                w.element_id, element.widget_kind, w.widget_kind
            )));
        }
        if bundle.bindings.get(&w.element_id) != Some(&w.binding) {
            return Err(WidgetError::ManifestMismatch(format!(
                "element {} is bound to `{}`, expected {:?}",
                w.element_id,
                w.binding,
                bundle.bindings.get(&w.element_id)
            )));
        }
        if let Some(err) = &w.value_error {
            return Err(WidgetError::ManifestMismatch(format!("binding `{}`: {err}", w.binding)));
        }
        let current_value = SyncValue::new(w.value.clone().unwrap_or_default())
            .map_err(|e| WidgetError::ManifestMismatch(e.to_string()))?;
        widgets.push(ManifestWidget {
            element_id: w.element_id,
            widget_kind: w.widget_kind,
            label: w.label.clone(),
            description: if w.description.is_empty() { element.description.clone() } else { w.description.clone() },
            binding: w.binding.clone(),
            current_value,
            options: w.options.clone(),
            range: w.range,
        });
        fragments.push(w.html.as_str());
    }

    let html = format!(
        "<div class=\"eui-panel\">\n<p class=\"eui-instruction\">{}</p>\n{}\n<button class=\"eui-submit\" type=\"button\" data-eui-submit=\"true\">Submit</button>\n</div>",
        escape_html(&plan.instruction.text),
        fragments.join("\n"),
    );
    let manifest = WidgetManifest { panel_id: PanelId::new(""), widgets, submit_present: true };

    let mut anchors = html_anchors(&html);
    anchors.sort_unstable();
    let mut ids: Vec<u32> = manifest.widgets.iter().map(|w| w.element_id).collect();
    ids.sort_unstable();
    if anchors != ids {
        return Err(WidgetError::ManifestMismatch(format!("html anchors {anchors:?} != manifest {ids:?}")));
    }
    Ok(RenderPayload { html, manifest })
}

/// A rendered panel accepting events.
#[derive(Debug)]
pub struct Panel {
    manifest: WidgetManifest,
    last_sequence: Option<u64>,
    live: Arc<AtomicBool>,
}

impl Panel {
    pub fn id(&self) -> &PanelId {
        &self.manifest.panel_id
    }

    pub fn manifest(&self) -> &WidgetManifest {
        &self.manifest
    }

    pub fn last_sequence(&self) -> Option<u64> {
        self.last_sequence
    }
}

/// Validates `event` against the panel and writes its value to the bound
/// kernel global. Rejected events leave both the kernel and the panel alone.
pub async fn apply_event(
    panel: &mut Panel,
    event: &WidgetEvent,
    kernel: &KernelSession,
) -> Result<EventAck, WidgetError> {
    if &event.panel_id != panel.id() || !panel.live.load(Ordering::SeqCst) {
        return Err(WidgetError::StalePanel(event.panel_id.clone()));
    }
    if let Some(last) = panel.last_sequence {
        if event.sequence_no <= last {
            return Err(WidgetError::StaleEvent { sequence_no: event.sequence_no, last_applied: last });
        }
    }
    let widget = panel
        .manifest
        .widgets
        .iter_mut()
        .find(|w| w.element_id == event.element_id)
        .ok_or(WidgetError::UnknownElement(event.element_id))?;
    widget.check_value(&event.value)?;
    kernel.set_global(&widget.binding, &event.value).await?;
    widget.current_value = event.value.clone();
    panel.last_sequence = Some(event.sequence_no);
    Ok(EventAck {
        panel_id: event.panel_id.clone(),
        element_id: event.element_id,
        sequence_no: event.sequence_no,
        value: event.value.clone(),
    })
}

/// Reads every binding fresh from the kernel.
pub async fn snapshot_state(
    manifest: &WidgetManifest,
    kernel: &KernelSession,
) -> Result<WidgetStateSnapshot, WidgetError> {
    let names: Vec<String> = manifest.widgets.iter().map(|w| w.binding.clone()).collect();
    let values = kernel.get_globals(&names).await?;
    Ok(WidgetStateSnapshot {
        entries: manifest
            .widgets
            .iter()
            .zip(values)
            .map(|(w, value)| WidgetValue {
                element_id: w.element_id,
                label: w.label.clone(),
                binding: w.binding.clone(),
                value,
            })
            .collect(),
    })
}

/// Holds the single active panel of a session.
#[derive(Debug, Default)]
pub struct PanelRegistry {
    active: Option<Panel>,
    generation: u64,
}

impl PanelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes `payload` the active panel under a fresh id, superseding the
    /// previous one. `live` is cleared when this panel is itself replaced.
    pub fn replace_panel(&mut self, payload: &mut RenderPayload, live: Arc<AtomicBool>) -> PanelId {
        if let Some(old) = self.active.take() {
            old.live.store(false, Ordering::SeqCst);
        }
        self.generation += 1;
        let id = PanelId(format!("panel-{}", self.generation));
        payload.manifest.panel_id = id.clone();
        live.store(true, Ordering::SeqCst);
        self.active = Some(Panel { manifest: payload.manifest.clone(), last_sequence: None, live });
        id
    }

    pub fn active(&self) -> Option<&Panel> {
        self.active.as_ref()
    }

    pub fn panel(&self, id: &PanelId) -> Result<&Panel, WidgetError> {
        self.active.as_ref().filter(|p| p.id() == id).ok_or_else(|| WidgetError::StalePanel(id.clone()))
    }

    pub fn panel_mut(&mut self, id: &PanelId) -> Result<&mut Panel, WidgetError> {
        self.active.as_mut().filter(|p| p.id() == id).ok_or_else(|| WidgetError::StalePanel(id.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn widget(kind: WidgetKind) -> ManifestWidget {
        ManifestWidget {
            element_id: 1,
            widget_kind: kind,
            label: "w".into(),
            description: String::new(),
            binding: "__eui_1".into(),
            current_value: SyncValue::null(),
            options: (kind == WidgetKind::Dropdown).then(|| vec!["cat".into(), "dog".into()]),
            range: kind.needs_range().then_some(NumericRange { min: 1.0, max: 50.0, step: 1.0 }),
        }
    }

    fn v(value: serde_json::Value) -> SyncValue {
        SyncValue::new(value).unwrap()
    }

    #[test]
    fn slider_domain() {
        let w = widget(WidgetKind::Slider);
        assert!(w.check_value(&v(json!(20))).is_ok());
        assert!(w.check_value(&v(json!(1))).is_ok());
        assert!(w.check_value(&v(json!(50.0))).is_ok());
        assert!(w.check_value(&v(json!(51))).is_err());
        assert!(w.check_value(&v(json!("20"))).is_err());
        assert!(w.check_value(&v(json!(null))).is_err());
    }

    #[test]
    fn dropdown_domain() {
        let w = widget(WidgetKind::Dropdown);
        assert!(w.check_value(&v(json!("dog"))).is_ok());
        let err = w.check_value(&v(json!("horse"))).unwrap_err();
        assert_eq!(err.kind(), "ValueOutOfDomain");
        assert!(w.check_value(&v(json!(1))).is_err());
    }

    #[test]
    fn other_domains() {
        assert!(widget(WidgetKind::Checkbox).check_value(&v(json!(false))).is_ok());
        assert!(widget(WidgetKind::Checkbox).check_value(&v(json!("false"))).is_err());
        assert!(widget(WidgetKind::ColorPicker).check_value(&v(json!("#1f77b4"))).is_ok());
        assert!(widget(WidgetKind::ColorPicker).check_value(&v(json!("blue"))).is_err());
        assert!(widget(WidgetKind::ColorPicker).check_value(&v(json!("#1f77bz"))).is_err());
        assert!(widget(WidgetKind::Textbox).check_value(&v(json!("anything"))).is_ok());
        assert!(widget(WidgetKind::ImageGallery).check_value(&v(json!(["a.png"]))).is_ok());
        assert!(widget(WidgetKind::ImageGallery).check_value(&v(json!([1]))).is_err());
    }

    #[test]
    fn anchors_are_extracted_in_order() {
        let html = r#"<div data-eui-id="3"></div><div data-eui-id="1" data-eui-kind="x"></div>"#;
        assert_eq!(html_anchors(html), vec![3, 1]);
    }

    fn payload() -> RenderPayload {
        RenderPayload {
            html: String::new(),
            manifest: WidgetManifest {
                panel_id: PanelId::new(""),
                widgets: vec![widget(WidgetKind::Slider)],
                submit_present: true,
            },
        }
    }

    #[test]
    fn replace_panel_supersedes_previous() {
        let mut registry = PanelRegistry::new();
        let first_live = Arc::new(AtomicBool::new(false));
        let mut p = payload();
        let first = registry.replace_panel(&mut p, first_live.clone());
        assert_eq!(p.manifest.panel_id, first);
        assert!(first_live.load(Ordering::SeqCst));
        assert!(registry.panel(&first).is_ok());

        let second_live = Arc::new(AtomicBool::new(false));
        let second = registry.replace_panel(&mut payload(), second_live.clone());
        assert_ne!(first, second);
        assert!(!first_live.load(Ordering::SeqCst));
        assert!(second_live.load(Ordering::SeqCst));
        assert!(matches!(registry.panel(&first), Err(WidgetError::StalePanel(_))));
        assert!(registry.panel(&second).is_ok());
    }

    #[test]
    fn identical_payload_gets_fresh_id() {
        let mut registry = PanelRegistry::new();
        let a = registry.replace_panel(&mut payload(), Arc::default());
        let b = registry.replace_panel(&mut payload(), Arc::default());
        assert_ne!(a, b);
    }

    #[test]
    fn escapes_html() {
        assert_eq!(escape_html(r#"<a href="x">&'"#), "&lt;a href=&quot;x&quot;&gt;&amp;&#x27;");
    }
}
