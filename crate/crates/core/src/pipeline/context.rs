pub const DEFAULT_CONTEXT_BUDGET: usize = 24_000;
pub const TRUNCATION_SENTINEL: &str = "[context truncated]";

/// Preamble blocks that fit the character budget, in document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetedPreamble {
    pub blocks: Vec<String>,
    /// Number of older blocks left out.
    pub dropped: usize,
}

/// Takes blocks newest-first while their total character count stays within
/// `budget`; everything older than the first block that does not fit is
/// dropped.
pub fn budget_preamble(preamble: &[String], budget: usize) -> BudgetedPreamble {
    let mut used = 0;
    let mut taken = 0;
    for block in preamble.iter().rev() {
        let len = block.chars().count();
        if used + len > budget {
            break;
        }
        used += len;
        taken += 1;
    }
    let start = preamble.len() - taken;
    BudgetedPreamble { blocks: preamble[start..].to_vec(), dropped: start }
}

impl BudgetedPreamble {
    pub fn render(&self) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(self.blocks.len() + 1);
        if self.dropped > 0 {
            parts.push(TRUNCATION_SENTINEL);
        }
        parts.extend(self.blocks.iter().map(String::as_str));
        parts.join("\n\n")
    }
}
