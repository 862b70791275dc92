//! C/C++ function parsing with terminal-token extraction.
//!
//! Source is parsed with the error-tolerant tree-sitter C grammar. Terminals
//! (leaves, with string and character literals kept whole) become
//! [`AstToken`]s; joining their texts with single spaces yields the
//! *normalized* code, and every node span in the resulting [`Ast`] indexes
//! into that normalized string. Comments are dropped. Error-recovery nodes
//! are kept and their leaves are ordinary terminals.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::ops::Range;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use tree_sitter::{Node, Parser, Tree};

use crate::error::{Error, Result};

/// Leaves kept whole even though the grammar gives them children.
const ATOMIC_KINDS: &[&str] = &[
    "string_literal",
    "char_literal",
    "raw_string_literal",
    "system_lib_string",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Vulnerable,
    NonVulnerable,
}

impl Label {
    pub fn from_int(value: i64) -> Option<Self> {
        match value {
            1 => Some(Label::Vulnerable),
            0 => Some(Label::NonVulnerable),
            _ => None,
        }
    }

    pub fn as_int(self) -> u8 {
        match self {
            Label::Vulnerable => 1,
            Label::NonVulnerable => 0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Vulnerable => "vulnerable",
            Label::NonVulnerable => "non-vulnerable",
        })
    }
}

/// One function from a labelled corpus.
///
/// `bug_line_traces` holds static-analyzer traces as 1-based line numbers
/// into `code` (the original layout, not the normalized one).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFunction {
    pub id: String,
    pub code: String,
    pub label: Label,
    pub dataset: String,
    pub bug_line_traces: Vec<Vec<u32>>,
}

/// A terminal AST node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AstToken {
    pub index: usize,
    pub text: String,
    /// Byte range into the normalized code.
    pub span: Range<usize>,
    /// 1-based line of the token's first character in the original code.
    pub line: u32,
    /// 1-based byte column in the original code.
    pub column: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub struct SyntaxNode {
    pub kind: &'static str,
    /// Grammar field name of this node within its parent (`function`, `operator`, ...).
    pub field: Option<&'static str>,
    pub named: bool,
    pub is_error: bool,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Byte range into the normalized code.
    pub span: Range<usize>,
    /// The contiguous run of terminal indices below this node.
    pub terminals: Range<usize>,
    /// Set for leaves: the terminal this node is.
    pub terminal: Option<usize>,
}

/// Original line number of every terminal, indexed by terminal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LineTable(Vec<u32>);

impl LineTable {
    pub fn new(lines: Vec<u32>) -> Self {
        LineTable(lines)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn line_of(&self, terminal: usize) -> Option<u32> {
        self.0.get(terminal).copied()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub code: String,
    pub lines: LineTable,
}

#[derive(Debug, Clone)]
pub struct Ast {
    source: String,
    nodes: Vec<SyntaxNode>,
    terminals: Vec<AstToken>,
    lines: LineTable,
    has_errors: bool,
}

impl Ast {
    /// The normalized code all spans refer to.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn terminals(&self) -> &[AstToken] {
        &self.terminals
    }

    pub fn len(&self) -> usize {
        self.terminals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminals.is_empty()
    }

    pub fn lines(&self) -> &LineTable {
        &self.lines
    }

    /// True when the grammar needed error recovery somewhere.
    pub fn has_errors(&self) -> bool {
        self.has_errors
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &SyntaxNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &SyntaxNode)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    pub fn find_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = NodeId> + 'a {
        self.nodes()
            .filter(move |(_, n)| n.kind == kind)
            .map(|(id, _)| id)
    }

    pub fn child_by_field(&self, id: NodeId, field: &str) -> Option<NodeId> {
        self.node(id)
            .children
            .iter()
            .copied()
            .find(|c| self.node(*c).field == Some(field))
    }

    /// Direct children that are terminals with the given text.
    pub fn terminal_children<'a>(
        &'a self,
        id: NodeId,
        text: &'a str,
    ) -> impl Iterator<Item = usize> + 'a {
        self.node(id)
            .children
            .iter()
            .filter_map(|c| self.node(*c).terminal)
            .filter(move |t| self.terminals[*t].text == text)
    }

    /// Text of the node in the normalized code.
    pub fn text(&self, id: NodeId) -> &str {
        &self.source[self.node(id).span.clone()]
    }

    pub fn ancestors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        std::iter::successors(self.node(id).parent, |p| self.node(*p).parent)
    }

    pub fn tokens_on_lines(&self, lines: &BTreeSet<u32>) -> Vec<usize> {
        tokens_on_lines(&self.lines, lines)
    }
}

thread_local! {
    static PARSER: RefCell<Parser> = RefCell::new({
        let mut parser = Parser::new();
        parser
            .set_language(&tree_sitter_c::LANGUAGE.into())
            .expect("bundled C grammar is ABI compatible");
        parser
    });
}

fn parse_tree(code: &str) -> Result<Tree> {
    PARSER
        .with(|p| p.borrow_mut().parse(code, None))
        .ok_or(Error::UnparseableSource)
}

struct RawTerminal {
    text: String,
    line: u32,
    column: u32,
}

struct Builder<'s> {
    code: &'s str,
    line_starts: Vec<usize>,
    nodes: Vec<SyntaxNode>,
    raw: Vec<RawTerminal>,
}

/// Grammar node and field names, leaked once each. The vocabulary is fixed
/// by the grammar, so this stays small.
fn intern(name: &str) -> &'static str {
    static NAMES: OnceLock<Mutex<HashSet<&'static str>>> = OnceLock::new();
    let mut names = NAMES.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    if let Some(n) = names.get(name) {
        return n;
    }
    let leaked: &'static str = Box::leak(name.to_owned().into_boxed_str());
    names.insert(leaked);
    leaked
}

enum Frame<'t> {
    Enter(Node<'t>, Option<NodeId>, Option<&'static str>),
    Exit(NodeId),
}

impl<'s> Builder<'s> {
    fn new(code: &'s str) -> Self {
        let line_starts = std::iter::once(0)
            .chain(code.match_indices('\n').map(|(i, _)| i + 1))
            .collect();
        Builder {
            code,
            line_starts,
            nodes: Vec::new(),
            raw: Vec::new(),
        }
    }

    fn position(&self, byte: usize) -> (u32, u32) {
        let line = self.line_starts.partition_point(|s| *s <= byte) - 1;
        ((line + 1) as u32, (byte - self.line_starts[line] + 1) as u32)
    }

    fn push_node(&mut self, node: &Node, parent: Option<NodeId>, field: Option<&'static str>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let start = self.raw.len();
        self.nodes.push(SyntaxNode {
            kind: intern(node.kind()),
            field,
            named: node.is_named(),
            is_error: node.is_error(),
            parent,
            children: Vec::new(),
            span: 0..0,
            terminals: start..start,
            terminal: None,
        });
        if let Some(p) = parent {
            self.nodes[p.0].children.push(id);
        }
        id
    }

    fn walk(&mut self, root: Node) {
        let mut stack = vec![Frame::Enter(root, None, None)];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Exit(id) => self.nodes[id.0].terminals.end = self.raw.len(),
                Frame::Enter(node, parent, field) => {
                    if node.kind() == "comment" {
                        continue;
                    }
                    if node.child_count() == 0 || ATOMIC_KINDS.contains(&node.kind()) {
                        self.leaf(&node, parent, field);
                        continue;
                    }
                    let id = self.push_node(&node, parent, field);
                    stack.push(Frame::Exit(id));
                    let mut cursor = node.walk();
                    let mut children = Vec::with_capacity(node.child_count() as usize);
                    if cursor.goto_first_child() {
                        loop {
                            children.push((cursor.node(), cursor.field_name().map(intern)));
                            if !cursor.goto_next_sibling() {
                                break;
                            }
                        }
                    }
                    for (child, name) in children.into_iter().rev() {
                        stack.push(Frame::Enter(child, Some(id), name));
                    }
                }
            }
        }
    }

    fn leaf(&mut self, node: &Node, parent: Option<NodeId>, field: Option<&'static str>) {
        let range = node.byte_range();
        let slice = &self.code[range.clone()];
        let trimmed = slice.trim();
        if trimmed.is_empty() {
            // zero-width MISSING nodes and bare newline tokens
            return;
        }
        let offset = range.start + (slice.len() - slice.trim_start().len());
        let (line, column) = self.position(offset);
        let id = self.push_node(node, parent, field);
        let index = self.raw.len();
        self.raw.push(RawTerminal {
            text: trimmed.to_owned(),
            line,
            column,
        });
        let n = &mut self.nodes[id.0];
        n.terminal = Some(index);
        n.terminals = index..index + 1;
    }

    fn finish(self, has_errors: bool) -> Result<Ast> {
        if self.raw.is_empty() {
            return Err(Error::UnparseableSource);
        }
        let mut source = String::new();
        let mut terminals = Vec::with_capacity(self.raw.len());
        let mut lines = Vec::with_capacity(self.raw.len());
        for (index, raw) in self.raw.into_iter().enumerate() {
            if index > 0 {
                source.push(' ');
            }
            let start = source.len();
            source.push_str(&raw.text);
            lines.push(raw.line);
            terminals.push(AstToken {
                index,
                span: start..source.len(),
                text: raw.text,
                line: raw.line,
                column: raw.column,
            });
        }
        let mut nodes = self.nodes;
        for node in &mut nodes {
            let r = node.terminals.clone();
            node.span = if r.start < r.end {
                terminals[r.start].span.start..terminals[r.end - 1].span.end
            } else if r.start < terminals.len() {
                let at = terminals[r.start].span.start;
                at..at
            } else {
                source.len()..source.len()
            };
        }
        Ok(Ast {
            source,
            nodes,
            terminals,
            lines: LineTable(lines),
            has_errors,
        })
    }
}

/// Parses one function (or snippet) into an [`Ast`] over its normalized code.
pub fn parse(code: &str) -> Result<Ast> {
    let tree = parse_tree(code)?;
    let root = tree.root_node();
    let mut builder = Builder::new(code);
    builder.walk(root);
    builder.finish(root.has_error())
}

/// Joins the terminal texts with single spaces and records each terminal's
/// original line.
pub fn normalize_whitespace(code: &str) -> Result<Normalized> {
    let ast = parse(code)?;
    Ok(Normalized {
        code: ast.source,
        lines: ast.lines,
    })
}

/// Terminal indices whose original line is in `lines`, in source order.
pub fn tokens_on_lines(table: &LineTable, lines: &BTreeSet<u32>) -> Vec<usize> {
    if lines.is_empty() {
        return Vec::new();
    }
    table
        .0
        .iter()
        .enumerate()
        .filter(|(_, l)| lines.contains(l))
        .map(|(i, _)| i)
        .collect()
}
