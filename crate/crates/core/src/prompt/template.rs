use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;

pub const DEFAULT_TEMPLATE_ID: &str = "privesc-v1";
const DEFAULT_TEMPLATE_TEXT: &str = include_str!("../../data/templates/privesc-v1.txt");

const REQUIRED_SECTIONS: [&str; 6] = [
    "goal",
    "system",
    "user_preamble",
    "dejudgment_suffix",
    "analysis_system",
    "analysis_request",
];

/// A versioned prompt set as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub goal: String,
    pub system_text: String,
    pub user_preamble: String,
    pub dejudgment_suffix: String,
    pub analysis_system: String,
    pub analysis_request: String,
}

/// Templates with `{goal}` and `{username}` resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTemplate {
    pub id: String,
    pub system_text: String,
    pub user_preamble: String,
    pub dejudgment_suffix: String,
    pub analysis_system: String,
    /// Still carries `{cmd}` and `{output}`.
    pub analysis_request: String,
}

impl PromptTemplate {
    pub fn builtin(id: &str) -> Option<Self> {
        (id == DEFAULT_TEMPLATE_ID)
            .then(|| Self::parse(DEFAULT_TEMPLATE_ID, DEFAULT_TEMPLATE_TEXT).expect("bundled template parses"))
    }

    pub fn default_template() -> Self {
        Self::builtin(DEFAULT_TEMPLATE_ID).expect("default template exists")
    }

    /// Load a template file; the id is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom")
            .to_string();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&id, &text)
    }

    /// Sections start with a `[name]` line; `#` lines before the first section are comments.
    pub fn parse(id: &str, text: &str) -> Result<Self, PromptError> {
        let mut sections: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && trimmed.len() > 2 {
                let name = trimmed[1..trimmed.len() - 1].to_string();
                if sections.contains_key(&name) {
                    return Err(PromptError::TemplateInvalid(format!(
                        "line {}: duplicate section [{name}]",
                        idx + 1
                    )));
                }
                sections.insert(name.clone(), Vec::new());
                current = Some(name);
                continue;
            }
            match &current {
                Some(name) => sections.get_mut(name).expect("section exists").push(line),
                None if trimmed.is_empty() || trimmed.starts_with('#') => {}
                None => {
                    return Err(PromptError::TemplateInvalid(format!(
                        "line {}: text outside of a section",
                        idx + 1
                    )))
                }
            }
        }
        let mut take = |name: &str| -> Result<String, PromptError> {
            let lines = sections
                .remove(name)
                .ok_or_else(|| PromptError::TemplateInvalid(format!("missing section [{name}]")))?;
            Ok(lines.join("\n").trim().to_string())
        };
        let mut values = REQUIRED_SECTIONS
            .iter()
            .map(|name| take(name))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter();
        let mut next = || values.next().expect("one value per section");
        let template = Self {
            id: id.to_string(),
            goal: next(),
            system_text: next(),
            user_preamble: next(),
            dejudgment_suffix: next(),
            analysis_system: next(),
            analysis_request: next(),
        };
        if let Some(extra) = sections.keys().next() {
            return Err(PromptError::TemplateInvalid(format!("unknown section [{extra}]")));
        }
        Ok(template)
    }

    pub fn render(&self, username: &str) -> Result<RenderedTemplate, PromptError> {
        let vars = [("goal", self.goal.as_str()), ("username", username)];
        let analysis_vars = [("username", username), ("cmd", "{cmd}"), ("output", "{output}")];
        Ok(RenderedTemplate {
            id: self.id.clone(),
            system_text: fill(&self.system_text, &vars)?,
            user_preamble: fill(&self.user_preamble, &vars)?,
            dejudgment_suffix: self.dejudgment_suffix.clone(),
            analysis_system: fill(&self.analysis_system, &vars)?,
            analysis_request: fill(&self.analysis_request, &analysis_vars)?,
        })
    }
}

/// Single-pass `{name}` substitution. Inserted values are never rescanned.
pub(crate) fn fill(text: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(name) if is_placeholder_name(name) => {
                let value = vars
                    .iter()
                    .find(|(key, _)| *key == name)
                    .map(|(_, value)| *value)
                    .ok_or_else(|| PromptError::UnresolvedPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_template_parses_and_renders() {
        let template = PromptTemplate::default_template();
        assert_eq!(template.id, "privesc-v1");
        let rendered = template.render("bob").unwrap();
        assert!(rendered.system_text.contains("low-privilege user bob"));
        assert!(rendered.system_text.contains("become the root user"));
        assert!(!rendered.system_text.contains('{'));
        assert!(rendered.analysis_request.contains("{output}"));
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let text = "[goal]\ng\n[system]\nhello {whom}\n[user_preamble]\np\n[dejudgment_suffix]\ns\n[analysis_system]\na\n[analysis_request]\nr\n";
        let template = PromptTemplate::parse("t", text).unwrap();
        assert!(matches!(
            template.render("bob"),
            Err(PromptError::UnresolvedPlaceholder(name)) if name == "whom"
        ));
    }

    #[test]
    fn missing_section_is_reported() {
        let err = PromptTemplate::parse("t", "[goal]\nx\n").unwrap_err();
        assert!(err.to_string().contains("[system]"));
    }

    #[test]
    fn fill_is_single_pass() {
        let out = fill("run {cmd} now", &[("cmd", "awk 'BEGIN {system(\"/bin/sh\")}'")]).unwrap();
        assert_eq!(out, "run awk 'BEGIN {system(\"/bin/sh\")}' now");
        assert_eq!(fill("{ not a placeholder }", &[]).unwrap(), "{ not a placeholder }");
    }
}
