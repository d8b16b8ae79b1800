use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

const BUILTIN: [&str; 3] = [
    include_str!("../../prompts/01_extract.txt"),
    include_str!("../../prompts/02_summarize.txt"),
    include_str!("../../prompts/03_focus.txt"),
];

/// Ordered prompt templates with `{budget}` and `{report}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptChain {
    templates: Vec<String>,
}

impl Default for PromptChain {
    fn default() -> Self {
        Self {
            templates: BUILTIN.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptChain {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::InvalidArgument("prompt chain is empty".into()));
        }
        if !templates.iter().any(|t| t.contains("{report}")) {
            return Err(Error::InvalidArgument(
                "no prompt template contains the {report} placeholder".into(),
            ));
        }
        Ok(Self { templates })
    }

    /// Loads every `*.txt` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .at(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        let templates = files
            .iter()
            .map(|p| fs::read_to_string(p).at(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(templates)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn render(&self, report: &str, budget: usize) -> String {
        self.templates
            .iter()
            .map(|t| {
                t.trim_end()
                    .replace("{budget}", &budget.to_string())
                    .replace("{report}", report.trim())
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Hex SHA-256 over the templates, length-prefixed.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.templates {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }
}
