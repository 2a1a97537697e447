//! File documentation ("skeletons"): module docstring, class headers with
//! their docstrings and method signatures, and top-level functions with at
//! most their first and last five body lines.

use rustpython_parser::ast::{self, Ranged};
use rustpython_parser::lexer::lex;
use rustpython_parser::{Mode, Parse, Tok};
use serde::{Deserialize, Serialize};

use crate::repo::{FileLines, FileRecord, Language};

/// Body lines kept from each end of a long function.
pub const BODY_EDGE_LINES: usize = 5;
/// Raw lines kept when a file cannot be parsed.
pub const FALLBACK_LINES: usize = 20;
/// Line placed between the head and tail of an elided body.
pub const ELISION_MARKER: &str = "...";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Class,
    Function,
    Method,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocItem {
    pub kind: ItemKind,
    /// Decorators and header lines, dedented by `indent`.
    pub signature: String,
    /// Column of the `def`/`class` keyword in the source.
    pub indent: usize,
    /// 1-based line of the first decorator or header line.
    pub line: usize,
    pub docstring: Option<String>,
    pub docstring_indent: usize,
    pub body_head: Vec<String>,
    pub body_tail: Vec<String>,
    pub elided: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDoc {
    pub path: String,
    pub module_docstring: Option<String>,
    pub items: Vec<DocItem>,
    /// Raw leading lines, populated only for fallback documents.
    pub raw_head: Vec<String>,
    pub fallback: bool,
    pub rendered: String,
}

impl FileDoc {
    fn finish(mut self) -> Self {
        self.rendered = render_skeleton(&self);
        self
    }

    pub fn empty(path: &str) -> Self {
        FileDoc {
            path: path.to_string(),
            module_docstring: None,
            items: Vec::new(),
            raw_head: Vec::new(),
            fallback: false,
            rendered: String::new(),
        }
        .finish()
    }

    /// Full-content view of a file, for the content-retrieval ablation.
    pub fn from_content(file: &FileRecord) -> Self {
        FileDoc {
            path: file.path.clone(),
            module_docstring: None,
            items: Vec::new(),
            raw_head: Vec::new(),
            fallback: false,
            rendered: format!("{}\n\n{}", file.path, file.content),
        }
    }

    fn fallback(file: &FileRecord) -> Self {
        FileDoc {
            path: file.path.clone(),
            module_docstring: None,
            items: Vec::new(),
            raw_head: file.lines().lines.into_iter().take(FALLBACK_LINES).collect(),
            fallback: true,
            rendered: String::new(),
        }
        .finish()
    }
}

/// Extracts the documentation view of a file. Files that are not Python or
/// fail to parse degrade to the first 20 raw lines with `fallback` set.
pub fn extract_skeleton(file: &FileRecord) -> FileDoc {
    if file.language() != Some(Language::Python) {
        return FileDoc::fallback(file);
    }
    let suite = match ast::Suite::parse(&file.content, &file.path) {
        Ok(suite) => suite,
        Err(_) => return FileDoc::fallback(file),
    };
    let src = Source::new(&file.content);
    let mut items = Vec::new();
    for stmt in &suite {
        match stmt {
            ast::Stmt::ClassDef(class) => {
                if let Some(()) = src.class_items(class, &mut items) {
                    continue;
                }
                return FileDoc::fallback(file);
            }
            ast::Stmt::FunctionDef(_) | ast::Stmt::AsyncFunctionDef(_) => {
                match src.function_item(stmt) {
                    Some(item) => items.push(item),
                    None => return FileDoc::fallback(file),
                }
            }
            _ => {}
        }
    }
    FileDoc {
        path: file.path.clone(),
        module_docstring: docstring_of(&suite),
        items,
        raw_head: Vec::new(),
        fallback: false,
        rendered: String::new(),
    }
    .finish()
}

fn docstring_of(body: &[ast::Stmt]) -> Option<String> {
    let ast::Stmt::Expr(expr) = body.first()? else {
        return None;
    };
    match expr.value.as_ref() {
        ast::Expr::Constant(c) => match &c.value {
            ast::Constant::Str(s) => Some(s.clone()),
            _ => None,
        },
        _ => None,
    }
}

struct Source<'a> {
    text: &'a str,
    lines: Vec<String>,
    line_starts: Vec<usize>,
}

impl<'a> Source<'a> {
    fn new(text: &'a str) -> Self {
        let mut line_starts = vec![0];
        line_starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        Source {
            text,
            lines: FileLines::from_content(text).lines,
            line_starts,
        }
    }

    /// 0-based line index holding byte `offset`.
    fn line_of(&self, offset: usize) -> usize {
        self.line_starts.partition_point(|&s| s <= offset) - 1
    }

    fn column_of(&self, offset: usize) -> usize {
        offset - self.line_starts[self.line_of(offset)]
    }

    /// Offset of the `:` closing the header that starts at `keyword_offset`.
    fn header_colon(&self, keyword_offset: usize) -> Option<usize> {
        let mut depth = 0i32;
        for tok in lex(&self.text[keyword_offset..], Mode::Module) {
            let (tok, range) = tok.ok()?;
            match tok {
                Tok::Lpar | Tok::Lsqb | Tok::Lbrace => depth += 1,
                Tok::Rpar | Tok::Rsqb | Tok::Rbrace => depth -= 1,
                Tok::Colon if depth == 0 => {
                    return Some(keyword_offset + usize::from(range.start()));
                }
                _ => {}
            }
        }
        None
    }

    /// Lines `first..=last` (0-based) dedented by `indent` columns.
    fn header_text(&self, first: usize, last: usize, indent: usize) -> String {
        self.lines[first..=last]
            .iter()
            .map(|l| dedent(l, indent))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Returns (indent, first line, header end line), all lines 0-based.
    fn header_extent(
        &self,
        stmt_start: usize,
        decorators: &[ast::Expr],
    ) -> Option<(usize, usize, usize)> {
        let keyword_line = self.line_of(stmt_start);
        let indent = self.column_of(stmt_start);
        let first = decorators
            .iter()
            .map(|d| {
                // decorator ranges exclude the '@'
                self.line_of(usize::from(d.range().start()))
            })
            .min()
            .unwrap_or(keyword_line)
            .min(keyword_line);
        let colon = self.header_colon(stmt_start)?;
        Some((indent, first, self.line_of(colon)))
    }

    fn function_item(&self, stmt: &ast::Stmt) -> Option<DocItem> {
        let (decorators, range) = match stmt {
            ast::Stmt::FunctionDef(f) => (&f.decorator_list, f.range),
            ast::Stmt::AsyncFunctionDef(f) => (&f.decorator_list, f.range),
            _ => return None,
        };
        let start = usize::from(range.start());
        let end = usize::from(range.end());
        let (indent, first, header_end) = self.header_extent(start, decorators)?;
        let last = self.line_of(end.saturating_sub(1).max(start));
        let body: Vec<String> = if last > header_end {
            self.lines[header_end + 1..=last].to_vec()
        } else {
            Vec::new()
        };
        let (body_head, body_tail, elided) = if body.len() > 2 * BODY_EDGE_LINES {
            (
                body[..BODY_EDGE_LINES].to_vec(),
                body[body.len() - BODY_EDGE_LINES..].to_vec(),
                true,
            )
        } else {
            (body, Vec::new(), false)
        };
        Some(DocItem {
            kind: ItemKind::Function,
            signature: self.header_text(first, header_end, indent),
            indent,
            line: first + 1,
            docstring: None,
            docstring_indent: 0,
            body_head,
            body_tail,
            elided,
        })
    }

    fn method_item(&self, stmt: &ast::Stmt) -> Option<DocItem> {
        let (decorators, range) = match stmt {
            ast::Stmt::FunctionDef(f) => (&f.decorator_list, f.range),
            ast::Stmt::AsyncFunctionDef(f) => (&f.decorator_list, f.range),
            _ => return None,
        };
        let (indent, first, header_end) =
            self.header_extent(usize::from(range.start()), decorators)?;
        Some(DocItem {
            kind: ItemKind::Method,
            signature: self.header_text(first, header_end, indent),
            indent,
            line: first + 1,
            docstring: None,
            docstring_indent: 0,
            body_head: Vec::new(),
            body_tail: Vec::new(),
            elided: false,
        })
    }

    fn class_items(&self, class: &ast::StmtClassDef, out: &mut Vec<DocItem>) -> Option<()> {
        let start = usize::from(class.range.start());
        let (indent, first, header_end) = self.header_extent(start, &class.decorator_list)?;
        let docstring = docstring_of(&class.body);
        let docstring_indent = class
            .body
            .first()
            .map(|s| self.column_of(usize::from(s.range().start())))
            .unwrap_or(indent + 4);
        out.push(DocItem {
            kind: ItemKind::Class,
            signature: self.header_text(first, header_end, indent),
            indent,
            line: first + 1,
            docstring,
            docstring_indent,
            body_head: Vec::new(),
            body_tail: Vec::new(),
            elided: false,
        });
        for member in &class.body {
            match member {
                ast::Stmt::FunctionDef(_) | ast::Stmt::AsyncFunctionDef(_) => {
                    out.push(self.method_item(member)?);
                }
                ast::Stmt::ClassDef(inner) => self.class_items(inner, out)?,
                _ => {}
            }
        }
        Some(())
    }
}

fn dedent(line: &str, indent: usize) -> &str {
    let lead = line.len() - line.trim_start_matches([' ', '\t']).len();
    &line[lead.min(indent)..]
}

fn push_indented(out: &mut String, indent: usize, text: &str) {
    for line in text.split('\n') {
        if !line.is_empty() {
            out.extend(std::iter::repeat_n(' ', indent));
        }
        out.push_str(line);
        out.push('\n');
    }
}

/// Canonical text form: the path, then a blank line before the module
/// docstring and before every top-level class or function block.
pub fn render_skeleton(doc: &FileDoc) -> String {
    let mut out = String::with_capacity(doc.path.len() + 64);
    out.push_str(&doc.path);
    out.push('\n');
    if doc.fallback {
        if !doc.raw_head.is_empty() {
            out.push('\n');
            for line in &doc.raw_head {
                out.push_str(line);
                out.push('\n');
            }
        }
        return out;
    }
    if let Some(ds) = &doc.module_docstring {
        out.push('\n');
        out.push_str("\"\"\"");
        out.push_str(ds);
        out.push_str("\"\"\"\n");
    }
    for item in &doc.items {
        let top_level = item.kind != ItemKind::Method && item.indent == 0;
        if top_level {
            out.push('\n');
        }
        push_indented(&mut out, item.indent, &item.signature);
        if let Some(ds) = &item.docstring {
            out.extend(std::iter::repeat_n(' ', item.docstring_indent));
            out.push_str("\"\"\"");
            out.push_str(ds);
            out.push_str("\"\"\"\n");
        }
        for line in &item.body_head {
            out.push_str(line);
            out.push('\n');
        }
        if item.elided {
            out.push_str(ELISION_MARKER);
            out.push('\n');
        }
        for line in &item.body_tail {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}
