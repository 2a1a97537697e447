use rustpython_parser::{ast, Parse};
use serde::{Deserialize, Serialize};

use super::EditError;
use crate::repo::{FileRecord, Language};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxErrorDetails {
    /// 1-based.
    pub line: usize,
    /// 1-based, in characters.
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum SyntaxCheck {
    Ok,
    SyntaxError(SyntaxErrorDetails),
}

impl SyntaxCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, SyntaxCheck::Ok)
    }
}

/// Parses `content` as `language`. An unknown language is a configuration
/// error, not a syntax failure.
pub fn check_syntax(content: &str, language: &str) -> Result<SyntaxCheck, EditError> {
    let language: Language = language
        .parse()
        .map_err(|_| EditError::UnsupportedLanguage(language.to_string()))?;
    Ok(check_language(content, language))
}

pub fn check_file_syntax(file: &FileRecord) -> Result<SyntaxCheck, EditError> {
    let language = file
        .language()
        .ok_or_else(|| EditError::UnsupportedLanguage(file.path.clone()))?;
    Ok(check_language(&file.content, language))
}

fn check_language(content: &str, language: Language) -> SyntaxCheck {
    match language {
        Language::Python => match ast::Suite::parse(content, "<edit>") {
            Ok(_) => SyntaxCheck::Ok,
            Err(err) => {
                let offset = (usize::from(err.offset)).min(content.len());
                let before = &content[..floor_char_boundary(content, offset)];
                let line = before.matches('\n').count() + 1;
                let line_start = before.rfind('\n').map(|i| i + 1).unwrap_or(0);
                SyntaxCheck::SyntaxError(SyntaxErrorDetails {
                    line,
                    column: before[line_start..].chars().count() + 1,
                    message: err.error.to_string(),
                })
            }
        },
    }
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}
