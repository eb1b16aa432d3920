use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use super::{AgentId, ChatMessage};

/// What a stub responder sees for one call.
#[derive(Debug, Clone)]
pub struct StubRequest<'a> {
    pub agent_id: AgentId,
    pub messages: &'a [ChatMessage],
    pub user_content: &'a str,
    /// Template slot values used to build `user_content`.
    pub slots: &'a BTreeMap<String, String>,
}

type ResponderFn = Arc<dyn Fn(&StubRequest<'_>) -> Option<String> + Send + Sync>;

#[derive(Clone)]
pub enum Responder {
    Fixed(String),
    /// Returns items in order; the last one repeats once exhausted.
    Sequence(Vec<String>),
    /// Returns the user content unchanged.
    Echo,
    /// Substitutes `{slot}` placeholders from the request slots.
    Template(String),
    /// A sequence of templates.
    TemplateSequence(Vec<String>),
    Func(ResponderFn),
}

impl fmt::Debug for Responder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Responder::Fixed(s) => f.debug_tuple("Fixed").field(s).finish(),
            Responder::Sequence(s) => f.debug_tuple("Sequence").field(s).finish(),
            Responder::Echo => f.write_str("Echo"),
            Responder::Template(t) => f.debug_tuple("Template").field(t).finish(),
            Responder::TemplateSequence(t) => f.debug_tuple("TemplateSequence").field(t).finish(),
            Responder::Func(_) => f.write_str("Func(..)"),
        }
    }
}

impl Responder {
    pub fn func(f: impl Fn(&StubRequest<'_>) -> Option<String> + Send + Sync + 'static) -> Self {
        Responder::Func(Arc::new(f))
    }
}

/// Fills `{name}` placeholders whose name is a key of `slots`; every other
/// brace sequence is left as is.
pub fn fill_slots(template: &str, slots: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if slots.contains_key(&after[..close]) => {
                out.push_str(&slots[&after[..close]]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Default)]
pub struct StubBackend {
    responders: Mutex<HashMap<AgentId, (Responder, usize)>>,
}

impl StubBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(self, agent_id: AgentId, responder: Responder) -> Self {
        self.register(agent_id, responder);
        self
    }

    /// Template responders read from `<agent_id>.txt` files in `dir`.
    /// Agents without a file stay unregistered.
    pub fn from_dir(dir: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let stub = Self::new();
        for agent in AgentId::ALL {
            let path = dir.as_ref().join(format!("{}.txt", agent.as_str()));
            match std::fs::read_to_string(&path) {
                Ok(text) => stub.register(agent, Responder::Template(text)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(stub)
    }

    /// Replaces the responder for `agent_id` and resets its sequence position.
    pub fn register(&self, agent_id: AgentId, responder: Responder) {
        self.responders.lock().unwrap().insert(agent_id, (responder, 0));
    }

    pub fn respond(&self, request: &StubRequest<'_>) -> Option<String> {
        let mut responders = self.responders.lock().unwrap();
        let (responder, calls) = responders.get_mut(&request.agent_id)?;
        let n = *calls;
        *calls += 1;
        match responder {
            Responder::Fixed(s) => Some(s.clone()),
            Responder::Sequence(items) => items.get(n.min(items.len().saturating_sub(1))).cloned(),
            Responder::Echo => Some(request.user_content.to_string()),
            Responder::Template(t) => Some(fill_slots(t, request.slots)),
            Responder::TemplateSequence(items) => {
                items.get(n.min(items.len().saturating_sub(1))).map(|t| fill_slots(t, request.slots))
            }
            Responder::Func(f) => {
                let f = f.clone();
                drop(responders);
                f(request)
            }
        }
    }
}
