//! Extraction of commands and findings from free-text answers.

use std::sync::LazyLock;

use regex::Regex;

use super::{PromptError, RefusalLexicon};
use crate::domain::Finding;

static LIST_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\s*)(?:\d+(?:\.\d+)*[.)]|\d+(?:\.\d+)+|[-*+•])\s+(.*)$").unwrap());
static VERIFICATION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:\*\*)?verification(?: command)?(?:\*\*)?:(?:\*\*)?\s*(.*)$").unwrap());

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Lines of the first fenced block, if any. An unterminated fence runs to the end.
fn first_code_block(text: &str) -> Option<Vec<&str>> {
    let mut lines = text.lines();
    lines.by_ref().find(|line| is_fence(line))?;
    Some(lines.take_while(|line| !is_fence(line)).collect())
}

fn join_block(lines: &[&str]) -> String {
    lines
        .iter()
        .map(|line| line.trim())
        .filter(|line| !line.is_empty())
        .collect::<Vec<_>>()
        .join(" && ")
}

fn strip_glyphs(line: &str) -> &str {
    let mut line = line.trim();
    for glyph in ["$ ", "# "] {
        if let Some(rest) = line.strip_prefix(glyph) {
            line = rest.trim_start();
            break;
        }
    }
    if line.len() >= 2 && line.starts_with('`') && line.ends_with('`') {
        line = line.trim_matches('`').trim();
    }
    line
}

/// Pull a single shell command out of a model answer.
///
/// A fenced code block wins; its non-empty lines are joined with `" && "`.
/// Otherwise the first non-empty line is used with prompt glyphs and
/// surrounding backticks removed.
pub fn parse_command(answer: &str) -> Result<String, PromptError> {
    if let Some(block) = first_code_block(answer) {
        let joined = join_block(&block);
        if !joined.is_empty() {
            return Ok(joined);
        }
    }
    let first = answer
        .lines()
        .filter(|line| !is_fence(line))
        .map(strip_glyphs)
        .find(|line| !line.is_empty())
        .ok_or(PromptError::NoCommandFound)?;
    if RefusalLexicon::default().is_refusal(first) {
        return Err(PromptError::NoCommandFound);
    }
    Ok(first.to_string())
}

struct Item<'a> {
    lines: Vec<&'a str>,
}

fn split_items(answer: &str) -> Option<Vec<Item<'_>>> {
    let mut items: Vec<Item> = Vec::new();
    let mut in_fence = false;
    let mut top_indent: Option<usize> = None;
    for line in answer.lines() {
        if is_fence(line) {
            in_fence = !in_fence;
        } else if !in_fence {
            if let Some(caps) = LIST_ITEM.captures(line) {
                let indent = caps[1].chars().count();
                let top = *top_indent.get_or_insert(indent);
                if indent <= top {
                    top_indent = Some(indent);
                    items.push(Item {
                        lines: vec![caps.get(2).map_or("", |m| m.as_str())],
                    });
                    continue;
                }
            }
        }
        if let Some(item) = items.last_mut() {
            item.lines.push(line);
        }
    }
    (!items.is_empty()).then_some(items)
}

fn finding_from_lines(lines: &[&str], round: u32) -> Option<Finding> {
    let mut description = Vec::new();
    let mut verification: Option<String> = None;
    let mut block: Option<Vec<&str>> = None;
    for line in lines {
        if is_fence(line) {
            match block.take() {
                Some(done) => {
                    if verification.is_none() {
                        let joined = join_block(&done);
                        if !joined.is_empty() {
                            verification = Some(joined);
                        }
                    }
                }
                None => block = Some(Vec::new()),
            }
            continue;
        }
        if let Some(open) = block.as_mut() {
            open.push(line);
            continue;
        }
        if let Some(caps) = VERIFICATION_LINE.captures(line) {
            let cmd = strip_glyphs(&caps[1]);
            if verification.is_none() && !cmd.is_empty() {
                verification = Some(cmd.to_string());
            }
            continue;
        }
        let text = line.trim();
        if !text.is_empty() {
            description.push(text);
        }
    }
    if let Some(open) = block {
        if verification.is_none() {
            let joined = join_block(&open);
            if !joined.is_empty() {
                verification = Some(joined);
            }
        }
    }
    let description = description.join(" ");
    if !description.chars().any(char::is_alphabetic) {
        return None;
    }
    Some(Finding {
        description,
        verification_command: verification,
        source_round: round,
    })
}

/// Split an analysis answer into findings, one per top-level list item.
pub fn parse_findings(answer: &str, round: u32) -> Vec<Finding> {
    assert!(round >= 1, "findings belong to a round >= 1");
    if answer.trim().is_empty() {
        return Vec::new();
    }
    match split_items(answer) {
        Some(items) => items
            .iter()
            .filter_map(|item| finding_from_lines(&item.lines, round))
            .collect(),
        None => {
            let lines: Vec<&str> = answer.lines().collect();
            finding_from_lines(&lines, round).into_iter().collect()
        }
    }
}
