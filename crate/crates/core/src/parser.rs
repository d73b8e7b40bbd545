// Copyright 2026 The imgforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Pifile reader.
//!
//! A Pifile is line oriented. Each logical line is blank, a `#` comment, or a
//! command keyword written in caps followed by its arguments. `RUN` and `HOST`
//! may end with a `<<DELIM` marker, in which case the following physical lines
//! up to a line equal to `DELIM` form a here-document fed to the command on
//! standard input. `INCLUDE <file>` (or `source <file>`) splices another
//! Pifile in place.
//!
//! Variable references (`$NAME`, `${NAME}`) are expanded once, while parsing,
//! from the supplied environment. `\$` produces a literal dollar sign.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Includes nest at most this deep; hitting the limit is reported as a cycle.
pub const MAX_INCLUDE_DEPTH: usize = 16;

/// Where a command came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SourceLine {
    pub file: PathBuf,
    /// 1-based number of the first physical line of the logical line.
    pub line_no: usize,
    /// Raw text of the logical line, continuations joined, before expansion.
    pub text: String,
}

impl SourceLine {
    /// File name (without directories) and line number, e.g. `example.Pifile:8`.
    pub fn short(&self) -> String {
        let name = self
            .file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.file.display().to_string());
        format!("{}:{}", name, self.line_no)
    }
}

impl fmt::Display for SourceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file.display(), self.line_no)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommandKind {
    From,
    To,
    Inplace,
    Pump,
    Path,
    Run,
    Install,
    Host,
    Include,
}

impl CommandKind {
    pub const ALL: [CommandKind; 9] = [
        CommandKind::From,
        CommandKind::To,
        CommandKind::Inplace,
        CommandKind::Pump,
        CommandKind::Path,
        CommandKind::Run,
        CommandKind::Install,
        CommandKind::Host,
        CommandKind::Include,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            CommandKind::From => "FROM",
            CommandKind::To => "TO",
            CommandKind::Inplace => "INPLACE",
            CommandKind::Pump => "PUMP",
            CommandKind::Path => "PATH",
            CommandKind::Run => "RUN",
            CommandKind::Install => "INSTALL",
            CommandKind::Host => "HOST",
            CommandKind::Include => "INCLUDE",
        }
    }

    /// Inclusive bounds on the argument count.
    fn arity(self) -> (usize, usize) {
        match self {
            CommandKind::From => (1, 2),
            CommandKind::To | CommandKind::Inplace | CommandKind::Pump | CommandKind::Path => {
                (1, 1)
            }
            CommandKind::Install => (2, 3),
            CommandKind::Run | CommandKind::Host => (1, usize::MAX),
            CommandKind::Include => (1, 1),
        }
    }

    /// `RUN` and `HOST` take the remainder of the line as one shell command.
    pub fn takes_shell_text(self) -> bool {
        matches!(self, CommandKind::Run | CommandKind::Host)
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// Maps the first token of a line to a command kind. Case sensitive; the
/// lowercase shell-style `source` is accepted as an alias for `INCLUDE`.
pub fn classify_token(first_token: &str) -> Option<CommandKind> {
    if first_token == "source" {
        return Some(CommandKind::Include);
    }
    CommandKind::ALL
        .into_iter()
        .find(|k| k.keyword() == first_token)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub kind: CommandKind,
    pub args: Vec<String>,
    pub heredoc: Option<String>,
    pub origin: SourceLine,
}

impl Command {
    /// Equality on everything but the origin.
    pub fn same_directive(&self, other: &Command) -> bool {
        self.kind == other.kind && self.args == other.args && self.heredoc == other.heredoc
    }

    /// The argument text as it would be typed, e.g. `raspbian.img 1`.
    pub fn display_args(&self) -> String {
        if self.kind.takes_shell_text() {
            self.args.join(" ")
        } else {
            self.args
                .iter()
                .map(|a| quote_arg(a))
                .collect::<Vec<_>>()
                .join(" ")
        }
    }

    /// Canonical source form. Parsing the output (with any environment)
    /// yields a command with the same kind, arguments and here-document.
    ///
    /// Shell text for `RUN`/`HOST` is emitted verbatim apart from `$`
    /// escaping, so it must not end in a backslash or a `<<WORD` marker.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(self.kind.keyword());
        if self.kind.takes_shell_text() {
            out.push(' ');
            out.push_str(&escape_dollars(&self.args.join(" ")));
        } else {
            for arg in &self.args {
                out.push(' ');
                out.push_str(&escape_dollars(&quote_arg(arg)));
            }
        }
        if let Some(body) = &self.heredoc {
            let delimiter = heredoc_delimiter_for(body);
            out.push_str(" <<");
            out.push_str(&delimiter);
            out.push('\n');
            out.push_str(&escape_dollars(body));
            out.push_str(&delimiter);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// `$NAME` had no value and expanded to the empty string.
    UndefinedVariable { name: String, origin: SourceLine },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::UndefinedVariable { name, origin } => {
                write!(
                    f,
                    "{}: variable ${} is not set, expanded to \"\"",
                    origin.short(),
                    name
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pifile {
    pub commands: Vec<Command>,
    pub source_path: PathBuf,
    pub warnings: Vec<ParseWarning>,
}

impl Pifile {
    /// Canonical text for the (include-flattened) command list.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for cmd in &self.commands {
            out.push_str(&cmd.render());
            out.push('\n');
        }
        out
    }

    pub fn same_commands(&self, other: &Pifile) -> bool {
        self.commands.len() == other.commands.len()
            && self
                .commands
                .iter()
                .zip(&other.commands)
                .all(|(a, b)| a.same_directive(b))
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{origin}: unknown command `{token}`")]
    UnknownCommand { origin: SourceLine, token: String },
    #[error("{origin}: {kind} {reason}")]
    MalformedArgs {
        origin: SourceLine,
        kind: CommandKind,
        reason: String,
    },
    #[error("{origin}: here-document is missing its terminating `{delimiter}` line")]
    UnterminatedHeredoc {
        origin: SourceLine,
        delimiter: String,
    },
    #[error("{origin}: includes nested deeper than {MAX_INCLUDE_DEPTH} levels (include cycle?)")]
    IncludeCycle { origin: SourceLine },
    #[error("{origin}: included file {} not found", path.display())]
    IncludeNotFound { origin: SourceLine, path: PathBuf },
}

impl ParseError {
    pub fn origin(&self) -> Option<&SourceLine> {
        match self {
            ParseError::Io { .. } => None,
            ParseError::UnknownCommand { origin, .. }
            | ParseError::MalformedArgs { origin, .. }
            | ParseError::UnterminatedHeredoc { origin, .. }
            | ParseError::IncludeCycle { origin }
            | ParseError::IncludeNotFound { origin, .. } => Some(origin),
        }
    }
}

/// Returned by [`parse_heredoc`] when input ends before the delimiter line.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("here-document is missing its terminating `{0}` line")]
pub struct UnterminatedHeredoc(pub String);

/// Reads and parses the Pifile at `path`, splicing includes.
///
/// `include_depth` is 0 for a top-level file.
pub fn parse_pifile(
    path: &Path,
    env: &HashMap<String, String>,
    include_depth: usize,
) -> Result<Pifile, ParseError> {
    let text = fs::read_to_string(path).map_err(|source| ParseError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_text(&text, path, env, include_depth)
}

/// Parses Pifile text as if it had been read from `path`. Includes are
/// resolved against the directory of `path`.
pub fn parse_str(
    text: &str,
    path: &Path,
    env: &HashMap<String, String>,
) -> Result<Pifile, ParseError> {
    parse_text(text, path, env, 0)
}

fn parse_text(
    text: &str,
    path: &Path,
    env: &HashMap<String, String>,
    include_depth: usize,
) -> Result<Pifile, ParseError> {
    let mut pifile = Pifile {
        commands: Vec::new(),
        source_path: path.to_path_buf(),
        warnings: Vec::new(),
    };
    let mut lines = PhysicalLines::new(text);

    while let Some((line_no, first)) = lines.next_numbered() {
        if is_blank_or_comment(first) {
            continue;
        }
        let mut logical = first.to_string();
        while ends_with_continuation(&logical) {
            logical.pop();
            match lines.next() {
                Some(next) => logical.push_str(next),
                None => break,
            }
        }
        let origin = SourceLine {
            file: path.to_path_buf(),
            line_no,
            text: logical.clone(),
        };

        let mut undefined = BTreeSet::new();
        let expanded = expand_env(&logical, env, &mut undefined);
        let trimmed = expanded.trim();
        if trimmed.is_empty() {
            warn_undefined(&mut pifile.warnings, undefined, &origin);
            continue;
        }
        let (token, rest) = split_first_token(trimmed);
        let kind = classify_token(token).ok_or_else(|| ParseError::UnknownCommand {
            origin: origin.clone(),
            token: token.to_string(),
        })?;

        let mut heredoc = None;
        let args = if kind.takes_shell_text() {
            let mut shell = rest.trim().to_string();
            if let Some((cmd, delimiter)) = split_heredoc_marker(&shell) {
                let body = parse_heredoc(&mut lines, &delimiter).map_err(|e| {
                    ParseError::UnterminatedHeredoc {
                        origin: origin.clone(),
                        delimiter: e.0,
                    }
                })?;
                heredoc = Some(expand_env(&body, env, &mut undefined));
                shell = cmd;
            }
            if shell.is_empty() {
                Vec::new()
            } else {
                vec![shell]
            }
        } else {
            tokenize(rest).map_err(|reason| ParseError::MalformedArgs {
                origin: origin.clone(),
                kind,
                reason,
            })?
        };
        warn_undefined(&mut pifile.warnings, undefined, &origin);

        let (min, max) = kind.arity();
        if args.len() < min || args.len() > max {
            let reason = if max == usize::MAX {
                "requires a command".to_string()
            } else if min == max {
                format!("takes exactly {} argument(s), found {}", min, args.len())
            } else {
                format!("takes {} to {} arguments, found {}", min, max, args.len())
            };
            return Err(ParseError::MalformedArgs {
                origin,
                kind,
                reason,
            });
        }

        if kind == CommandKind::Include {
            if include_depth + 1 >= MAX_INCLUDE_DEPTH {
                return Err(ParseError::IncludeCycle { origin });
            }
            let base = path.parent().unwrap_or_else(|| Path::new(""));
            let target = base.join(&args[0]);
            if !target.is_file() {
                return Err(ParseError::IncludeNotFound {
                    origin,
                    path: target,
                });
            }
            let included = parse_pifile(&target, env, include_depth + 1)?;
            pifile.commands.extend(included.commands);
            pifile.warnings.extend(included.warnings);
            continue;
        }

        pifile.commands.push(Command {
            kind,
            args,
            heredoc,
            origin,
        });
    }
    Ok(pifile)
}

fn warn_undefined(warnings: &mut Vec<ParseWarning>, names: BTreeSet<String>, origin: &SourceLine) {
    for name in names {
        warnings.push(ParseWarning::UndefinedVariable {
            name,
            origin: origin.clone(),
        });
    }
}

/// Collects a here-document body from `lines` up to (and consuming) the first
/// line exactly equal to `delimiter`. Every body line is newline terminated.
pub fn parse_heredoc<I, S>(lines: &mut I, delimiter: &str) -> Result<String, UnterminatedHeredoc>
where
    I: Iterator<Item = S>,
    S: AsRef<str>,
{
    let mut body = String::new();
    for line in lines.by_ref() {
        let line = line.as_ref();
        if line == delimiter {
            return Ok(body);
        }
        body.push_str(line);
        body.push('\n');
    }
    Err(UnterminatedHeredoc(delimiter.to_string()))
}

/// Expands `$NAME` and `${NAME}` from `env`. Unset names expand to the empty
/// string and are added to `undefined`. `\$` yields a literal `$`; any other
/// backslash is kept as is.
pub fn expand_env(
    text: &str,
    env: &HashMap<String, String>,
    undefined: &mut BTreeSet<String>,
) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' && chars.get(i + 1) == Some(&'$') {
            out.push('$');
            i += 2;
            continue;
        }
        if c != '$' {
            out.push(c);
            i += 1;
            continue;
        }
        // `${NAME}`
        if chars.get(i + 1) == Some(&'{') {
            if let Some(close) = chars[i + 2..].iter().position(|&c| c == '}') {
                let name: String = chars[i + 2..i + 2 + close].iter().collect();
                if is_var_name(&name) {
                    lookup(&name, env, undefined, &mut out);
                    i += close + 3;
                    continue;
                }
            }
            out.push('$');
            i += 1;
            continue;
        }
        // `$NAME`
        let start = i + 1;
        let mut end = start;
        while end < chars.len() && is_name_char(chars[end], end == start) {
            end += 1;
        }
        if end == start {
            out.push('$');
            i += 1;
        } else {
            let name: String = chars[start..end].iter().collect();
            lookup(&name, env, undefined, &mut out);
            i = end;
        }
    }
    out
}

fn lookup(
    name: &str,
    env: &HashMap<String, String>,
    undefined: &mut BTreeSet<String>,
    out: &mut String,
) {
    match env.get(name) {
        Some(value) => out.push_str(value),
        None => {
            undefined.insert(name.to_string());
        }
    }
}

fn is_name_char(c: char, first: bool) -> bool {
    c == '_' || c.is_ascii_alphabetic() || (!first && c.is_ascii_digit())
}

fn is_var_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if is_name_char(c, true) => chars.all(|c| is_name_char(c, false)),
        _ => false,
    }
}

fn escape_dollars(text: &str) -> String {
    text.replace('$', "\\$")
}

fn is_blank_or_comment(line: &str) -> bool {
    let t = line.trim_start();
    t.is_empty() || t.starts_with('#')
}

fn ends_with_continuation(line: &str) -> bool {
    line.chars().rev().take_while(|&c| c == '\\').count() % 2 == 1
}

fn split_first_token(text: &str) -> (&str, &str) {
    match text.find(char::is_whitespace) {
        Some(idx) => (&text[..idx], &text[idx..]),
        None => (text, ""),
    }
}

/// Splits `cmd <<DELIM` / `cmd << DELIM` into the command and delimiter.
fn split_heredoc_marker(text: &str) -> Option<(String, String)> {
    let delimiter_start = text
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_ascii_alphanumeric() || *c == '_')
        .last()
        .map(|(i, _)| i)?;
    let delimiter = &text[delimiter_start..];
    let before = text[..delimiter_start].trim_end();
    let cmd = before.strip_suffix("<<")?;
    if cmd.ends_with('<') {
        // `<<<` is a here-string, not a here-document
        return None;
    }
    Some((cmd.trim_end().to_string(), delimiter.to_string()))
}

fn heredoc_delimiter_for(body: &str) -> String {
    let mut candidate = "EOF".to_string();
    let mut n = 0;
    while body.lines().any(|l| l == candidate) {
        n += 1;
        candidate = format!("EOF{}", n);
    }
    candidate
}

/// Whitespace separated words with `"..."` (honouring `\"` and `\\`) and
/// `'...'` quoting. An unquoted word starting with `#` ends the line.
fn tokenize(text: &str) -> Result<Vec<String>, String> {
    let mut words = Vec::new();
    let mut chars = text.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.peek() {
            None => break,
            Some('#') => break,
            Some(_) => {}
        }
        let mut word = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() {
                break;
            }
            chars.next();
            match c {
                '"' => loop {
                    match chars.next() {
                        None => return Err("has an unterminated double quote".into()),
                        Some('"') => break,
                        Some('\\') => match chars.peek() {
                            Some(&e @ ('"' | '\\')) => {
                                chars.next();
                                word.push(e);
                            }
                            _ => word.push('\\'),
                        },
                        Some(other) => word.push(other),
                    }
                },
                '\'' => loop {
                    match chars.next() {
                        None => return Err("has an unterminated single quote".into()),
                        Some('\'') => break,
                        Some(other) => word.push(other),
                    }
                },
                other => word.push(other),
            }
        }
        words.push(word);
    }
    Ok(words)
}

fn quote_arg(arg: &str) -> String {
    let plain = !arg.is_empty()
        && !arg.starts_with('#')
        && !arg
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, '"' | '\'' | '\\'));
    if plain {
        return arg.to_string();
    }
    let mut out = String::with_capacity(arg.len() + 2);
    out.push('"');
    for c in arg.chars() {
        if matches!(c, '"' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// Physical lines with CR stripped, tracking a 1-based line counter.
struct PhysicalLines<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> PhysicalLines<'a> {
    fn new(text: &'a str) -> Self {
        let mut lines: Vec<&str> = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .collect();
        if text.ends_with('\n') || text.is_empty() {
            lines.pop();
        }
        PhysicalLines { lines, pos: 0 }
    }

    fn next_numbered(&mut self) -> Option<(usize, &'a str)> {
        let line = self.next()?;
        Some((self.pos, line))
    }
}

impl<'a> Iterator for PhysicalLines<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        let line = self.lines.get(self.pos).copied()?;
        self.pos += 1;
        Some(line)
    }
}
