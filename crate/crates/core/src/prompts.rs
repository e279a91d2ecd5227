//! Prompt packs: one template per prompt role, with `{{name}}` placeholders.
//!
//! Packs are plain data. The English pack ships inside the crate; other packs
//! are loaded from a directory holding `<role>.txt` for every role.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    ActivationDecision,
    SummaryDecision,
    DialogueFusion,
    TurnSummarization,
    BlockSummarization,
    MergeSummarization,
}

impl PromptRole {
    pub const ALL: [PromptRole; 6] = [
        PromptRole::ActivationDecision,
        PromptRole::SummaryDecision,
        PromptRole::DialogueFusion,
        PromptRole::TurnSummarization,
        PromptRole::BlockSummarization,
        PromptRole::MergeSummarization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptRole::ActivationDecision => "activation_decision",
            PromptRole::SummaryDecision => "summary_decision",
            PromptRole::DialogueFusion => "dialogue_fusion",
            PromptRole::TurnSummarization => "turn_summarization",
            PromptRole::BlockSummarization => "block_summarization",
            PromptRole::MergeSummarization => "merge_summarization",
        }
    }

    /// Placeholders every template for this role must contain.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptRole::ActivationDecision => &["observation"],
            PromptRole::SummaryDecision => &["observation", "memory_summary"],
            PromptRole::DialogueFusion => &["context"],
            PromptRole::TurnSummarization => &["speaker", "text"],
            PromptRole::BlockSummarization => &["memories", "block"],
            PromptRole::MergeSummarization => &["summaries"],
        }
    }
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt pack is missing template {0}")]
    MissingTemplate(PromptRole),
    #[error("template {role} lacks required placeholder {{{{{name}}}}}")]
    MissingPlaceholder { role: PromptRole, name: String },
    #[error("template {role} references {{{{{name}}}}} but no value was supplied")]
    MissingValue { role: PromptRole, name: String },
    #[error("template {role} has an unterminated placeholder")]
    Unterminated { role: PromptRole },
    #[error("reading prompt pack: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPack {
    id: String,
    templates: BTreeMap<PromptRole, String>,
}

impl PromptPack {
    pub fn english() -> Self {
        let templates = [
            (
                PromptRole::ActivationDecision,
                include_str!("../prompts/en/activation_decision.txt"),
            ),
            (
                PromptRole::SummaryDecision,
                include_str!("../prompts/en/summary_decision.txt"),
            ),
            (
                PromptRole::DialogueFusion,
                include_str!("../prompts/en/dialogue_fusion.txt"),
            ),
            (
                PromptRole::TurnSummarization,
                include_str!("../prompts/en/turn_summarization.txt"),
            ),
            (
                PromptRole::BlockSummarization,
                include_str!("../prompts/en/block_summarization.txt"),
            ),
            (
                PromptRole::MergeSummarization,
                include_str!("../prompts/en/merge_summarization.txt"),
            ),
        ];
        Self {
            id: "en".into(),
            templates: templates
                .into_iter()
                .map(|(r, t)| (r, t.to_string()))
                .collect(),
        }
    }

    /// Build a pack from in-memory templates, checking required placeholders.
    pub fn from_templates(
        id: impl Into<String>,
        templates: impl IntoIterator<Item = (PromptRole, String)>,
    ) -> Result<Self, PromptError> {
        let pack = Self {
            id: id.into(),
            templates: templates.into_iter().collect(),
        };
        pack.validate()?;
        Ok(pack)
    }

    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let mut templates = BTreeMap::new();
        for role in PromptRole::ALL {
            let path = dir.join(format!("{}.txt", role.as_str()));
            if !path.exists() {
                return Err(PromptError::MissingTemplate(role));
            }
            templates.insert(role, std::fs::read_to_string(path)?);
        }
        Self::from_templates(id, templates)
    }

    fn validate(&self) -> Result<(), PromptError> {
        for role in PromptRole::ALL {
            let template = self
                .templates
                .get(&role)
                .ok_or(PromptError::MissingTemplate(role))?;
            for name in role.placeholders() {
                if !template.contains(&format!("{{{{{name}}}}}")) {
                    return Err(PromptError::MissingPlaceholder {
                        role,
                        name: (*name).to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn template(&self, role: PromptRole) -> Option<&str> {
        self.templates.get(&role).map(String::as_str)
    }

    /// Replace a template mutably, without validation. Test hook for prompt
    /// rendering failures.
    pub fn set_template_unchecked(&mut self, role: PromptRole, template: impl Into<String>) {
        self.templates.insert(role, template.into());
    }

    /// Single-pass substitution: values are inserted verbatim and never
    /// re-scanned for placeholders.
    pub fn render(&self, role: PromptRole, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let template = self.template(role).ok_or(PromptError::MissingTemplate(role))?;
        let mut out = String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
        let mut rest = template;
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or(PromptError::Unterminated { role })?;
            let name = after[..close].trim();
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::MissingValue {
                    role,
                    name: name.to_string(),
                })?;
            out.push_str(value);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn english_pack_is_complete() {
        let pack = PromptPack::english();
        pack.validate().unwrap();
        assert_eq!(pack.id(), "en");
    }

    #[test]
    fn render_substitutes_once() {
        let pack = PromptPack::english();
        let out = pack
            .render(PromptRole::ActivationDecision, &[("observation", "say {{observation}}")])
            .unwrap();
        assert!(out.contains("say {{observation}}"));
        assert!(out.contains("yes(A)"));
    }

    #[test]
    fn missing_value_is_an_error() {
        let pack = PromptPack::english();
        assert!(matches!(
            pack.render(PromptRole::SummaryDecision, &[("observation", "x")]),
            Err(PromptError::MissingValue { .. })
        ));
    }

    #[test]
    fn load_dir_round_trips_english_files() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts/en");
        let loaded = PromptPack::load_dir(&dir).unwrap();
        assert_eq!(loaded, PromptPack::english());
    }

    #[test]
    fn load_dir_reports_missing_template() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("activation_decision.txt"), "{{observation}}").unwrap();
        assert!(matches!(
            PromptPack::load_dir(dir.path()),
            Err(PromptError::MissingTemplate(PromptRole::SummaryDecision))
        ));
    }

    #[test]
    fn templates_must_carry_their_placeholders() {
        let mut templates: Vec<(PromptRole, String)> = PromptRole::ALL
            .iter()
            .map(|r| (*r, PromptPack::english().template(*r).unwrap().to_string()))
            .collect();
        templates[0].1 = "no placeholder here".into();
        assert!(matches!(
            PromptPack::from_templates("bad", templates),
            Err(PromptError::MissingPlaceholder { .. })
        ));
    }
}
