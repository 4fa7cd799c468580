//! Run configuration: a strict, indentation-based key tree.
//!
//! The accepted syntax is a YAML subset: block maps, block lists (`- item`),
//! flow lists `[a, b]`, flow maps `{a: 1}`, plain and quoted scalars, and `#`
//! comments. Anchors, aliases, tags and multi-document streams are rejected.
//! Consumers read subtrees through [`Section`], which records every key it
//! hands out so leftovers can be reported as unknown.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

pub type Map = IndexMap<String, Value>;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Map(Map),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "map",
        }
    }

    pub fn as_map(&self) -> Option<&Map> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_map_mut(&mut self) -> Option<&mut Map> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Looks up a dotted path such as `trainer.max_steps`.
    pub fn lookup(&self, path: &str) -> Option<&Value> {
        path.split('.').try_fold(self, |v, key| v.as_map()?.get(key))
    }

    /// Builds a map value from `(key, value)` pairs.
    pub fn map<I, K>(pairs: I) -> Value
    where
        I: IntoIterator<Item = (K, Value)>,
        K: Into<String>,
    {
        Value::Map(pairs.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{path}` expects {expected}, found {found}")]
    Type {
        path: String,
        expected: &'static str,
        found: String,
    },
    #[error("invalid value for `{path}`: {msg}")]
    Invalid { path: String, msg: String },
    #[error("malformed override `{0}`; expected key.path=value")]
    Override(String),
}

pub fn load(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse(&text)
}

struct Line {
    number: usize,
    indent: usize,
    text: String,
}

/// Parses a document; the root must be a map (an empty document is `{}`).
pub fn parse(text: &str) -> Result<Value, ConfigError> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        if raw.contains('\t') && raw.trim_start().len() != raw.trim_start_matches('\t').len() {
            return Err(perr(number, "tabs are not allowed for indentation"));
        }
        let stripped = strip_comment(raw);
        let content = stripped.trim_end();
        if content.trim().is_empty() {
            continue;
        }
        if content.trim() == "---" || content.trim() == "..." {
            return Err(perr(number, "multi-document streams are not supported"));
        }
        let indent = content.len() - content.trim_start_matches(' ').len();
        lines.push(Line {
            number,
            indent,
            text: content[indent..].to_string(),
        });
    }
    if lines.is_empty() {
        return Ok(Value::Map(Map::new()));
    }
    if lines[0].indent != 0 {
        return Err(perr(lines[0].number, "document must start at column 0"));
    }
    let mut pos = 0;
    let root = parse_block(&mut lines, &mut pos, 0)?;
    if pos < lines.len() {
        return Err(perr(lines[pos].number, "unexpected indentation"));
    }
    match root {
        Value::Map(_) => Ok(root),
        other => Err(perr(1, &format!("root must be a map, found {}", other.type_name()))),
    }
}

fn perr(line: usize, msg: &str) -> ConfigError {
    ConfigError::Parse {
        line,
        msg: msg.to_string(),
    }
}

/// Drops a `#` comment that is outside quotes and starts a token.
fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut prev = ' ';
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == '#' && (prev == ' ' || i == 0) => return &line[..i],
            None => {}
        }
        prev = c;
    }
    line
}

fn is_list_item(text: &str) -> bool {
    text == "-" || text.starts_with("- ")
}

fn parse_block(lines: &mut [Line], pos: &mut usize, indent: usize) -> Result<Value, ConfigError> {
    if is_list_item(&lines[*pos].text) {
        parse_list(lines, pos, indent)
    } else {
        parse_map(lines, pos, indent)
    }
}

fn parse_list(lines: &mut [Line], pos: &mut usize, indent: usize) -> Result<Value, ConfigError> {
    let mut items = Vec::new();
    while *pos < lines.len() && lines[*pos].indent == indent && is_list_item(&lines[*pos].text) {
        let line = &lines[*pos];
        let number = line.number;
        let rest = line.text[1..].trim_start();
        if rest.is_empty() {
            *pos += 1;
            if *pos < lines.len() && lines[*pos].indent > indent {
                let child_indent = lines[*pos].indent;
                items.push(parse_block(lines, pos, child_indent)?);
            } else {
                items.push(Value::Null);
            }
            continue;
        }
        let item_indent = indent + (line.text.len() - rest.len());
        if split_key(rest).is_some() || is_list_item(rest) {
            // re-read the item body as a block starting at the content column
            let rest = rest.to_string();
            lines[*pos].indent = item_indent;
            lines[*pos].text = rest;
            items.push(parse_block(lines, pos, item_indent)?);
        } else {
            items.push(parse_scalar(rest, number)?);
            *pos += 1;
        }
    }
    Ok(Value::List(items))
}

/// Splits `key: value` / `key:`; returns `None` when the text is not a map entry.
fn split_key(text: &str) -> Option<(String, &str)> {
    if text.starts_with('"') || text.starts_with('\'') {
        let q = text.chars().next().unwrap();
        let end = text[1..].find(q)? + 1;
        let key = text[1..end].to_string();
        let after = &text[end + 1..];
        let rest = after.strip_prefix(':')?;
        if !rest.is_empty() && !rest.starts_with(' ') {
            return None;
        }
        return Some((key, rest.trim()));
    }
    if text.starts_with('[') || text.starts_with('{') {
        return None;
    }
    let mut idx = None;
    for (i, c) in text.char_indices() {
        if c == ':' {
            let after = &text[i + 1..];
            if after.is_empty() || after.starts_with(' ') {
                idx = Some(i);
                break;
            }
        }
    }
    let i = idx?;
    let key = text[..i].trim();
    if key.is_empty() {
        return None;
    }
    Some((key.to_string(), text[i + 1..].trim()))
}

fn parse_map(lines: &mut [Line], pos: &mut usize, indent: usize) -> Result<Value, ConfigError> {
    let mut map = Map::new();
    while *pos < lines.len() && lines[*pos].indent == indent && !is_list_item(&lines[*pos].text) {
        let number = lines[*pos].number;
        let text = lines[*pos].text.clone();
        let (key, rest) = split_key(&text).ok_or_else(|| perr(number, "expected `key: value`"))?;
        if map.contains_key(&key) {
            return Err(perr(number, &format!("duplicate key `{key}`")));
        }
        *pos += 1;
        let value = if rest.is_empty() {
            if *pos < lines.len() && lines[*pos].indent > indent {
                let child_indent = lines[*pos].indent;
                parse_block(lines, pos, child_indent)?
            } else if *pos < lines.len() && lines[*pos].indent == indent && is_list_item(&lines[*pos].text) {
                parse_list(lines, pos, indent)?
            } else {
                Value::Null
            }
        } else {
            parse_scalar(rest, number)?
        };
        map.insert(key, value);
    }
    if *pos < lines.len() && lines[*pos].indent > indent {
        return Err(perr(lines[*pos].number, "unexpected indentation"));
    }
    Ok(Value::Map(map))
}

fn looks_like_float(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let digits_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut saw_digit = i > digits_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        saw_digit |= i > frac_start;
    }
    if !saw_digit {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return false;
        }
    }
    i == b.len()
}

/// Parses a scalar, quoted string, or flow collection.
pub fn parse_scalar(text: &str, line: usize) -> Result<Value, ConfigError> {
    let t = text.trim();
    if t.is_empty() {
        return Ok(Value::Null);
    }
    match t.chars().next().unwrap() {
        '&' | '*' | '!' => return Err(perr(line, "anchors, aliases and tags are not supported")),
        '|' | '>' => return Err(perr(line, "block scalars are not supported")),
        '"' | '\'' => return parse_quoted(t, line).map(Value::Str),
        '[' => {
            let inner = t
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| perr(line, "unterminated flow list"))?;
            let items = split_flow(inner, line)?
                .into_iter()
                .map(|s| parse_scalar(&s, line))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(Value::List(items));
        }
        '{' => {
            let inner = t
                .strip_prefix('{')
                .and_then(|s| s.strip_suffix('}'))
                .ok_or_else(|| perr(line, "unterminated flow map"))?;
            let mut map = Map::new();
            for entry in split_flow(inner, line)? {
                let (k, v) = split_key(&entry).ok_or_else(|| perr(line, "expected `key: value` in flow map"))?;
                if map.contains_key(&k) {
                    return Err(perr(line, &format!("duplicate key `{k}`")));
                }
                map.insert(k, parse_scalar(v, line)?);
            }
            return Ok(Value::Map(map));
        }
        _ => {}
    }
    Ok(match t {
        "null" | "~" => Value::Null,
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => {
            if let Ok(i) = t.parse::<i64>() {
                Value::Int(i)
            } else if looks_like_float(t) {
                Value::Float(t.parse::<f64>().map_err(|e| perr(line, &e.to_string()))?)
            } else {
                Value::Str(t.to_string())
            }
        }
    })
}

fn parse_quoted(t: &str, line: usize) -> Result<String, ConfigError> {
    let q = t.chars().next().unwrap();
    let body = &t[1..];
    let mut out = String::new();
    let mut chars = body.chars();
    loop {
        let Some(c) = chars.next() else {
            return Err(perr(line, "unterminated quoted string"));
        };
        if c == q {
            if q == '\'' && chars.clone().next() == Some('\'') {
                chars.next();
                out.push('\'');
                continue;
            }
            break;
        }
        if q == '"' && c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some('"') => out.push('"'),
                other => return Err(perr(line, &format!("unsupported escape \\{}", other.unwrap_or(' ')))),
            }
            continue;
        }
        out.push(c);
    }
    if !chars.as_str().trim().is_empty() {
        return Err(perr(line, "trailing characters after quoted string"));
    }
    Ok(out)
}

/// Splits a flow body on top-level commas.
fn split_flow(inner: &str, line: usize) -> Result<Vec<String>, ConfigError> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut cur = String::new();
    for c in inner.chars() {
        match quote {
            Some(q) => {
                if c == q {
                    quote = None;
                }
                cur.push(c);
            }
            None => match c {
                '"' | '\'' => {
                    quote = Some(c);
                    cur.push(c);
                }
                '[' | '{' => {
                    depth += 1;
                    cur.push(c);
                }
                ']' | '}' => {
                    depth -= 1;
                    cur.push(c);
                }
                ',' if depth == 0 => parts.push(std::mem::take(&mut cur)),
                _ => cur.push(c),
            },
        }
    }
    if quote.is_some() || depth != 0 {
        return Err(perr(line, "unbalanced flow collection"));
    }
    if !cur.trim().is_empty() {
        parts.push(cur);
    } else if !parts.is_empty() {
        return Err(perr(line, "trailing comma in flow collection"));
    }
    Ok(parts.into_iter().map(|s| s.trim().to_string()).collect())
}

fn format_scalar(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) => {
            let s = format!("{f:?}");
            if looks_like_float(&s) {
                s
            } else {
                // inf / NaN have no plain spelling; keep them as strings
                quote(&s)
            }
        }
        Value::Str(s) => {
            let plain_ok = !s.is_empty()
                && s.trim() == s
                && !s.contains(": ")
                && !s.ends_with(':')
                && !s.contains(" #")
                && !s.contains(',')
                && !s.contains('\n')
                && !s.starts_with(['-', '[', '{', '"', '\'', '&', '*', '!', '|', '>', '#', '~'])
                && matches!(parse_scalar(s, 0), Ok(Value::Str(ref p)) if p == s);
            if plain_ok {
                s.clone()
            } else {
                quote(s)
            }
        }
        Value::List(items) if items.is_empty() => "[]".into(),
        Value::Map(m) if m.is_empty() => "{}".into(),
        _ => unreachable!("collections are emitted as blocks"),
    }
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

fn format_key(k: &str) -> String {
    match format_scalar(&Value::Str(k.to_string())) {
        s if s == k && !k.contains(':') => s,
        _ => quote(k),
    }
}

fn is_block(v: &Value) -> bool {
    matches!(v, Value::List(l) if !l.is_empty()) || matches!(v, Value::Map(m) if !m.is_empty())
}

fn emit_map(out: &mut String, map: &Map, indent: usize) {
    for (k, v) in map {
        let pad = " ".repeat(indent);
        if is_block(v) {
            let _ = writeln!(out, "{pad}{}:", format_key(k));
            emit_block(out, v, indent + 2);
        } else {
            let _ = writeln!(out, "{pad}{}: {}", format_key(k), format_scalar(v));
        }
    }
}

fn emit_block(out: &mut String, v: &Value, indent: usize) {
    match v {
        Value::Map(m) => emit_map(out, m, indent),
        Value::List(items) => {
            let pad = " ".repeat(indent);
            for item in items {
                if is_block(item) {
                    let mut body = String::new();
                    emit_block(&mut body, item, indent + 2);
                    // first line of the body moves onto the dash line
                    let body = body.strip_prefix(&" ".repeat(indent + 2)).unwrap_or(&body);
                    let _ = write!(out, "{pad}- {body}");
                } else {
                    let _ = writeln!(out, "{pad}- {}", format_scalar(item));
                }
            }
        }
        other => {
            let _ = writeln!(out, "{}{}", " ".repeat(indent), format_scalar(other));
        }
    }
}

/// Renders a map value in the accepted syntax; `parse(to_text(v)) == v`.
pub fn to_text(root: &Value) -> String {
    let mut out = String::new();
    match root {
        Value::Map(m) => emit_map(&mut out, m, 0),
        other => emit_block(&mut out, other, 0),
    }
    out
}

/// Applies `key.path=value`. An existing leaf keeps its type and the new text
/// must parse as that type; a missing leaf is inserted with an inferred type.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let keys: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, key) in keys[..keys.len() - 1].iter().enumerate() {
        let map = cur.as_map_mut().ok_or_else(|| ConfigError::Type {
            path: keys[..i].join("."),
            expected: "map",
            found: "scalar".into(),
        })?;
        cur = map.entry((*key).to_string()).or_insert_with(|| Value::Map(Map::new()));
    }
    let map = cur.as_map_mut().ok_or_else(|| ConfigError::Type {
        path: keys[..keys.len() - 1].join("."),
        expected: "map",
        found: "scalar".into(),
    })?;
    let leaf = keys[keys.len() - 1];
    let parsed = parse_scalar(raw, 0).map_err(|_| ConfigError::Invalid {
        path: path.to_string(),
        msg: format!("cannot parse `{raw}`"),
    })?;
    let typed = match map.get(leaf) {
        None | Some(Value::Null) => parsed,
        Some(existing) => coerce_like(existing, parsed, raw, path)?,
    };
    map.insert(leaf.to_string(), typed);
    Ok(())
}

fn coerce_like(existing: &Value, parsed: Value, raw: &str, path: &str) -> Result<Value, ConfigError> {
    let mismatch = |expected| ConfigError::Type {
        path: path.to_string(),
        expected,
        found: format!("`{raw}`"),
    };
    match (existing, parsed) {
        (Value::Int(_), v @ Value::Int(_)) => Ok(v),
        (Value::Int(_), _) => Err(mismatch("integer")),
        (Value::Float(_), Value::Int(i)) => Ok(Value::Float(i as f64)),
        (Value::Float(_), v @ Value::Float(_)) => Ok(v),
        (Value::Float(_), _) => Err(mismatch("float")),
        (Value::Bool(_), v @ Value::Bool(_)) => Ok(v),
        (Value::Bool(_), _) => Err(mismatch("bool")),
        (Value::Str(_), Value::Str(s)) => Ok(Value::Str(s)),
        (Value::Str(_), _) => Ok(Value::Str(raw.trim().to_string())),
        (Value::List(_), v @ Value::List(_)) => Ok(v),
        (Value::List(_), _) => Err(mismatch("list")),
        (Value::Map(_), v @ Value::Map(_)) => Ok(v),
        (Value::Map(_), _) => Err(mismatch("map")),
        (Value::Null, v) => Ok(v),
    }
}

/// Stable 64-bit FNV-1a hash of a component name.
pub fn stable_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Per-component seed derived from the global run seed.
pub fn derive_seed(global: u64, component: &str) -> u64 {
    global.wrapping_add(stable_hash(component))
}

/// Strict reader over one map subtree.
#[derive(Debug)]
pub struct Section<'a> {
    path: String,
    map: &'a Map,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Section<'a> {
    pub fn new(path: impl Into<String>, value: &'a Value) -> Result<Self, ConfigError> {
        let path = path.into();
        match value {
            Value::Map(map) => Ok(Self {
                path,
                map,
                used: RefCell::default(),
            }),
            other => Err(ConfigError::Type {
                path,
                expected: "map",
                found: other.type_name().into(),
            }),
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &'a String> {
        self.map.keys()
    }

    /// Marks `key` consumed and returns its value, treating `null` as absent.
    pub fn get(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.to_string());
        match self.map.get(key) {
            Some(Value::Null) | None => None,
            Some(v) => Some(v),
        }
    }

    pub fn require(&self, key: &str) -> Result<&'a Value, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing(self.key_path(key)))
    }

    fn type_err(&self, key: &str, expected: &'static str, v: &Value) -> ConfigError {
        ConfigError::Type {
            path: self.key_path(key),
            expected,
            found: v.type_name().into(),
        }
    }

    pub fn opt_str(&self, key: &str) -> Result<Option<&'a str>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s)),
            Some(v) => Err(self.type_err(key, "string", v)),
        }
    }

    pub fn req_str(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.opt_str(key)?.ok_or_else(|| ConfigError::Missing(self.key_path(key)))
    }

    pub fn opt_i64(&self, key: &str) -> Result<Option<i64>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Int(i)) => Ok(Some(*i)),
            Some(v) => Err(self.type_err(key, "integer", v)),
        }
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.opt_i64(key)? {
            None => Ok(None),
            Some(i) if i >= 0 => Ok(Some(i as usize)),
            Some(i) => Err(ConfigError::Invalid {
                path: self.key_path(key),
                msg: format!("{i} is negative"),
            }),
        }
    }

    pub fn req_usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.opt_usize(key)?.ok_or_else(|| ConfigError::Missing(self.key_path(key)))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    pub fn opt_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        Ok(self.opt_usize(key)?.map(|v| v as u64))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Int(i)) => Ok(Some(*i as f64)),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(v) => Err(self.type_err(key, "number", v)),
        }
    }

    pub fn req_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.opt_f64(key)?.ok_or_else(|| ConfigError::Missing(self.key_path(key)))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn opt_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(*b)),
            Some(v) => Err(self.type_err(key, "bool", v)),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        Ok(self.opt_bool(key)?.unwrap_or(default))
    }

    pub fn opt_list(&self, key: &str) -> Result<Option<&'a [Value]>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::List(l)) => Ok(Some(l)),
            Some(v) => Err(self.type_err(key, "list", v)),
        }
    }

    pub fn opt_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(list) = self.opt_list(key)? else {
            return Ok(None);
        };
        list.iter()
            .map(|v| match v {
                Value::Int(i) => Ok(*i as f64),
                Value::Float(f) => Ok(*f),
                other => Err(self.type_err(key, "list of numbers", other)),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn opt_str_list(&self, key: &str) -> Result<Option<Vec<&'a str>>, ConfigError> {
        let Some(list) = self.opt_list(key)? else {
            return Ok(None);
        };
        list.iter()
            .map(|v| match v {
                Value::Str(s) => Ok(s.as_str()),
                other => Err(self.type_err(key, "list of strings", other)),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn opt_section(&self, key: &str) -> Result<Option<Section<'a>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => Section::new(self.key_path(key), v).map(Some),
        }
    }

    pub fn section(&self, key: &str) -> Result<Section<'a>, ConfigError> {
        self.opt_section(key)?.ok_or_else(|| ConfigError::Missing(self.key_path(key)))
    }

    /// Errors on the first key that nothing consumed.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        match self.map.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(ConfigError::UnknownKey(self.key_path(k))),
            None => Ok(()),
        }
    }
}
