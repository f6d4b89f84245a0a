//! Class-graph extraction: scan project sources for class/interface
//! declarations and build the directed multi-relational graph over the
//! four UML relationship kinds.
//!
//! Name resolution is simple-name and project-local; imports, packages,
//! and generic-type arguments are ignored.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::normalize_class_name;

#[derive(Debug, Error)]
pub enum UmlError {
    #[error("unknown node id {0}")]
    UnknownNode(u32),
    #[error("graph file error: {0}")]
    BadGraphFile(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relation {
    Realization,
    Generalization,
    Dependency,
    Association,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Realization,
        Relation::Generalization,
        Relation::Dependency,
        Relation::Association,
    ];

    pub fn index(self) -> usize {
        match self {
            Relation::Realization => 0,
            Relation::Generalization => 1,
            Relation::Dependency => 2,
            Relation::Association => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct UmlNode {
    pub id: u32,
    pub name: String,
    pub name_tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UmlEdge {
    pub src: u32,
    pub dst: u32,
    pub relation: Relation,
}

/// Classes as nodes, typed directed edges over the four relations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct UmlGraph {
    pub nodes: Vec<UmlNode>,
    pub edges: Vec<UmlEdge>,
}

impl UmlGraph {
    pub fn node(&self, id: u32) -> Result<&UmlNode, UmlError> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or(UmlError::UnknownNode(id))
    }

    pub fn node_by_name(&self, name: &str) -> Option<&UmlNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn edge_count_by_relation(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for e in &self.edges {
            counts[e.relation.index()] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization")
    }

    pub fn from_json(text: &str) -> Result<UmlGraph, UmlError> {
        let graph: UmlGraph = serde_json::from_str(text)?;
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<(), UmlError> {
        let ids: BTreeSet<u32> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            return Err(UmlError::BadGraphFile("duplicate node ids".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if !ids.contains(&e.src) || !ids.contains(&e.dst) {
                return Err(UmlError::BadGraphFile(format!(
                    "edge {}->{} references a missing node",
                    e.src, e.dst
                )));
            }
            if !seen.insert(*e) {
                return Err(UmlError::BadGraphFile(format!(
                    "duplicate edge {}->{} {:?}",
                    e.src, e.dst, e.relation
                )));
            }
        }
        Ok(())
    }

    /// Induced subgraph of every node within `radius` undirected hops of
    /// `class_node`. Node ids are preserved.
    pub fn subgraph_for_method(&self, class_node: u32, radius: usize) -> Result<UmlGraph, UmlError> {
        self.node(class_node)?;
        let mut undirected: HashMap<u32, Vec<u32>> = HashMap::new();
        for e in &self.edges {
            undirected.entry(e.src).or_default().push(e.dst);
            undirected.entry(e.dst).or_default().push(e.src);
        }
        let mut dist: HashMap<u32, usize> = HashMap::new();
        dist.insert(class_node, 0);
        let mut queue = VecDeque::from([class_node]);
        while let Some(v) = queue.pop_front() {
            let d = dist[&v];
            if d == radius {
                continue;
            }
            for &w in undirected.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if !dist.contains_key(&w) {
                    dist.insert(w, d + 1);
                    queue.push_back(w);
                }
            }
        }
        let nodes: Vec<UmlNode> = self
            .nodes
            .iter()
            .filter(|n| dist.contains_key(&n.id))
            .cloned()
            .collect();
        let edges: Vec<UmlEdge> = self
            .edges
            .iter()
            .filter(|e| dist.contains_key(&e.src) && dist.contains_key(&e.dst))
            .cloned()
            .collect();
        Ok(UmlGraph { nodes, edges })
    }
}

/// Graphs keyed by the id that dataset records reference. Loading from a
/// directory uses each file's stem as its id.
#[derive(Debug, Clone, Default)]
pub struct GraphStore {
    graphs: HashMap<String, UmlGraph>,
}

impl GraphStore {
    pub fn insert(&mut self, id: String, graph: UmlGraph) {
        self.graphs.insert(id, graph);
    }

    pub fn get(&self, id: &str) -> Option<&UmlGraph> {
        self.graphs.get(id)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Load every `*.json` graph file in a directory (or a single file).
    pub fn load(path: &Path) -> Result<GraphStore, UmlError> {
        let mut store = GraphStore::default();
        let mut paths: Vec<std::path::PathBuf> = if path.is_dir() {
            walkdir::WalkDir::new(path)
                .max_depth(1)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
                .collect()
        } else {
            vec![path.to_path_buf()]
        };
        paths.sort();
        for p in paths {
            let text = std::fs::read_to_string(&p).map_err(|source| UmlError::Io {
                path: p.display().to_string(),
                source,
            })?;
            let graph = UmlGraph::from_json(&text)?;
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            store.insert(id, graph);
        }
        Ok(store)
    }
}

/// Declaration-level record for one class or interface.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassDecl {
    pub name: String,
    pub is_interface: bool,
    pub extends: Vec<String>,
    pub implements: Vec<String>,
    pub field_types: Vec<String>,
    pub signature_types: Vec<String>,
}

/// Map from simple class/interface name to its declaration record.
/// Collisions resolve first-declaration-wins (scan order is sorted by
/// path) and are logged.
#[derive(Debug, Clone, Default)]
pub struct ClassIndex {
    pub decls: Vec<ClassDecl>,
    by_name: HashMap<String, usize>,
}

impl ClassIndex {
    pub fn get(&self, name: &str) -> Option<&ClassDecl> {
        self.by_name.get(name).map(|&i| &self.decls[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    fn insert(&mut self, decl: ClassDecl) {
        if self.by_name.contains_key(&decl.name) {
            log::warn!("duplicate class name {:?}; keeping first declaration", decl.name);
            return;
        }
        self.by_name.insert(decl.name.clone(), self.decls.len());
        self.decls.push(decl);
    }
}

/// Scan in-memory source files (already sorted by path by the caller)
/// into a [`ClassIndex`].
pub fn scan_project(files: &[(String, String)]) -> ClassIndex {
    let mut index = ClassIndex::default();
    for (_, text) in files {
        for decl in scan_source(text) {
            index.insert(decl);
        }
    }
    index
}

/// Walk a directory for `.java` files (sorted by path) and scan them.
/// Unreadable files are skipped with a warning.
pub fn scan_dir(root: &Path) -> ClassIndex {
    let mut files: Vec<(String, String)> = Vec::new();
    let mut paths: Vec<_> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "java"))
        .collect();
    paths.sort();
    for path in paths {
        match std::fs::read_to_string(&path) {
            Ok(text) => files.push((path.display().to_string(), text)),
            Err(err) => log::warn!("skipping unreadable file {}: {err}", path.display()),
        }
    }
    scan_project(&files)
}

const MODIFIERS: [&str; 13] = [
    "public", "private", "protected", "static", "final", "abstract", "native", "synchronized",
    "transient", "volatile", "strictfp", "default", "sealed",
];

fn is_modifier(tok: &str) -> bool {
    MODIFIERS.contains(&tok)
}

fn is_ident(tok: &str) -> bool {
    tok.chars()
        .next()
        .is_some_and(|c| c.is_alphabetic() || c == '_' || c == '$')
}

fn strip_comments_and_literals(source: &str) -> String {
    let chars: Vec<char> = source.chars().collect();
    let mut out = String::with_capacity(source.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '/' && i + 1 < chars.len() && chars[i + 1] == '/' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && i + 1 < chars.len() && chars[i + 1] == '*' {
            i += 2;
            while i + 1 < chars.len() && !(chars[i] == '*' && chars[i + 1] == '/') {
                i += 1;
            }
            i = (i + 2).min(chars.len());
            out.push(' ');
        } else if c == '"' || c == '\'' {
            let quote = c;
            i += 1;
            while i < chars.len() && chars[i] != quote {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(chars.len());
            out.push(' ');
        } else {
            out.push(c);
            i += 1;
        }
    }
    out
}

fn tokenize(source: &str) -> Vec<String> {
    let cleaned = strip_comments_and_literals(source);
    let chars: Vec<char> = cleaned.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() || c == '_' || c == '$' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$')
            {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Parse a type reference starting at `pos`: a dotted identifier chain
/// with optional generic arguments and array brackets. Returns the simple
/// name and the position just past the type.
fn parse_type(tokens: &[String], mut pos: usize) -> Option<(String, usize)> {
    if pos >= tokens.len() || !is_ident(&tokens[pos]) {
        return None;
    }
    let mut simple = tokens[pos].clone();
    pos += 1;
    while pos + 1 < tokens.len() && tokens[pos] == "." && is_ident(&tokens[pos + 1]) {
        simple = tokens[pos + 1].clone();
        pos += 2;
    }
    if pos < tokens.len() && tokens[pos] == "<" {
        let mut depth = 1;
        pos += 1;
        while pos < tokens.len() && depth > 0 {
            match tokens[pos].as_str() {
                "<" => depth += 1,
                ">" => depth -= 1,
                _ => {}
            }
            pos += 1;
        }
    }
    while pos + 1 < tokens.len() && tokens[pos] == "[" && tokens[pos + 1] == "]" {
        pos += 2;
    }
    Some((simple, pos))
}

fn skip_generics(tokens: &[String], mut pos: usize) -> usize {
    if pos < tokens.len() && tokens[pos] == "<" {
        let mut depth = 1;
        pos += 1;
        while pos < tokens.len() && depth > 0 {
            match tokens[pos].as_str() {
                "<" => depth += 1,
                ">" => depth -= 1,
                _ => {}
            }
            pos += 1;
        }
    }
    pos
}

/// Find the matching `}` for the `{` at `open`.
fn close_brace(tokens: &[String], open: usize) -> usize {
    let mut depth = 0;
    for (i, t) in tokens.iter().enumerate().skip(open) {
        match t.as_str() {
            "{" => depth += 1,
            "}" => {
                depth -= 1;
                if depth == 0 {
                    return i;
                }
            }
            _ => {}
        }
    }
    tokens.len()
}

fn scan_source(source: &str) -> Vec<ClassDecl> {
    let tokens = tokenize(source);
    let mut decls = Vec::new();
    let mut depth = 0usize;
    let mut i = 0;
    while i < tokens.len() {
        match tokens[i].as_str() {
            "{" => {
                depth += 1;
                i += 1;
            }
            "}" => {
                depth = depth.saturating_sub(1);
                i += 1;
            }
            kw @ ("class" | "interface") if depth == 0 => {
                if i > 0 && tokens[i - 1] == "@" {
                    // annotation declaration, not a type declaration
                    i += 1;
                    continue;
                }
                let mut decl = ClassDecl {
                    is_interface: kw == "interface",
                    ..ClassDecl::default()
                };
                i += 1;
                if i >= tokens.len() || !is_ident(&tokens[i]) {
                    continue;
                }
                decl.name = tokens[i].clone();
                i += 1;
                i = skip_generics(&tokens, i);
                // extends / implements clauses up to the body
                while i < tokens.len() && tokens[i] != "{" {
                    match tokens[i].as_str() {
                        "extends" | "implements" => {
                            let into_extends = tokens[i] == "extends";
                            i += 1;
                            while i < tokens.len() && tokens[i] != "{" {
                                if let Some((name, next)) = parse_type(&tokens, i) {
                                    if into_extends {
                                        decl.extends.push(name);
                                    } else {
                                        decl.implements.push(name);
                                    }
                                    i = next;
                                }
                                if i < tokens.len() && tokens[i] == "," {
                                    i += 1;
                                } else {
                                    break;
                                }
                            }
                        }
                        _ => i += 1,
                    }
                }
                if i < tokens.len() && tokens[i] == "{" {
                    let end = close_brace(&tokens, i);
                    scan_body(&tokens[i + 1..end], &mut decl);
                    i = end + 1;
                }
                decls.push(decl);
            }
            _ => i += 1,
        }
    }
    decls
}

/// Scan a class body for field declarations and method signatures.
fn scan_body(body: &[String], decl: &mut ClassDecl) {
    let mut fields: Vec<String> = Vec::new();
    let mut signature: Vec<String> = Vec::new();
    let mut i = 0;
    while i < body.len() {
        // Collect one member segment: tokens up to `;` or a `{...}` block.
        let start = i;
        let mut paren = 0i32;
        let mut angle = 0i32;
        let mut open_brace: Option<usize> = None;
        while i < body.len() {
            match body[i].as_str() {
                "(" => paren += 1,
                ")" => paren -= 1,
                "<" => angle += 1,
                ">" => angle -= 1,
                ";" if paren == 0 && angle <= 0 => break,
                "{" if paren == 0 => {
                    open_brace = Some(i);
                    break;
                }
                _ => {}
            }
            i += 1;
        }
        let header = &body[start..i.min(body.len())];
        let header_paren = header.iter().position(|t| t == "(");
        if let Some(paren_pos) = header_paren {
            // Method (or constructor): name is the identifier before `(`.
            if paren_pos >= 1 && is_ident(&header[paren_pos - 1]) {
                // Return type: the type ending right before the name.
                let before_name = &header[..paren_pos - 1];
                if let Some(ret) = last_type_of(before_name) {
                    signature.push(ret);
                }
                // Parameter types at paren depth 1.
                let close = matching_paren(header, paren_pos);
                let mut p = paren_pos + 1;
                while p < close {
                    while p < close && (is_modifier(&header[p]) || header[p] == "@") {
                        p += if header[p] == "@" { 2 } else { 1 };
                    }
                    if let Some((name, next)) = parse_type(header, p) {
                        signature.push(name);
                        p = next;
                    }
                    while p < close && header[p] != "," {
                        p += 1;
                    }
                    p += 1;
                }
            }
            if let Some(ob) = open_brace {
                let end = close_brace(body, ob);
                scan_locals(&body[ob + 1..end], &mut signature);
                i = end + 1;
                continue;
            }
        } else if header.len() >= 2 {
            // Field declaration: [modifiers] Type name [...];
            let mut p = 0;
            while p < header.len() && (is_modifier(&header[p]) || header[p] == "@") {
                p += if header[p] == "@" { 2 } else { 1 };
            }
            if let Some((name, next)) = parse_type(header, p) {
                if next < header.len() && is_ident(&header[next]) {
                    fields.push(name);
                }
            }
        }
        if let Some(ob) = open_brace {
            // Initializer or nested block without a signature.
            let end = close_brace(body, ob);
            i = end + 1;
        } else {
            i += 1; // skip `;`
        }
    }
    dedup_preserving_order(&mut fields);
    dedup_preserving_order(&mut signature);
    decl.field_types = fields;
    decl.signature_types = signature;
}

/// The simple name of the last complete type in a modifier/type token
/// run, or None when the run is only modifiers (constructors).
fn last_type_of(tokens: &[String]) -> Option<String> {
    let mut p = 0;
    let mut last = None;
    while p < tokens.len() {
        if is_modifier(&tokens[p]) {
            p += 1;
        } else if tokens[p] == "@" {
            p += 2;
        } else if let Some((name, next)) = parse_type(tokens, p) {
            last = Some(name);
            p = next;
        } else {
            p += 1;
        }
    }
    last
}

fn matching_paren(tokens: &[String], open: usize) -> usize {
    let mut depth = 0;
    for (i, t) in tokens.iter().enumerate().skip(open) {
        match t.as_str() {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth == 0 {
                    return i;
                }
            }
            _ => {}
        }
    }
    tokens.len()
}

/// Collect local-variable and constructor-call type names inside a
/// method body.
fn scan_locals(body: &[String], out: &mut Vec<String>) {
    let mut i = 0;
    while i < body.len() {
        if body[i] == "new" {
            if let Some((name, next)) = parse_type(body, i + 1) {
                out.push(name);
                i = next;
                continue;
            }
        }
        // `Type ident =` / `Type ident ;` / `Type ident )` / `Type ident :`
        if is_ident(&body[i]) && body[i].chars().next().is_some_and(|c| c.is_uppercase()) {
            if let Some((name, next)) = parse_type(body, i) {
                if next < body.len()
                    && is_ident(&body[next])
                    && body
                        .get(next + 1)
                        .is_some_and(|t| matches!(t.as_str(), "=" | ";" | ")" | ":"))
                {
                    out.push(name);
                    i = next;
                    continue;
                }
            }
        }
        i += 1;
    }
}

fn dedup_preserving_order(items: &mut Vec<String>) {
    let mut seen = BTreeSet::new();
    items.retain(|x| seen.insert(x.clone()));
}

/// Build the multi-relational class graph from a [`ClassIndex`].
///
/// GENERALIZATION for extends pairs, REALIZATION for implements pairs,
/// ASSOCIATION when the target is a field type, DEPENDENCY when the
/// target appears in method signatures or locals but not as a field.
/// Edges connect only classes present in the index.
pub fn extract_relations(index: &ClassIndex) -> UmlGraph {
    let id_of: HashMap<&str, u32> = index
        .decls
        .iter()
        .enumerate()
        .map(|(i, d)| (d.name.as_str(), i as u32))
        .collect();
    let nodes: Vec<UmlNode> = index
        .decls
        .iter()
        .enumerate()
        .map(|(i, d)| UmlNode {
            id: i as u32,
            name: d.name.clone(),
            name_tokens: normalize_class_name(&d.name),
        })
        .collect();

    let mut edges: Vec<UmlEdge> = Vec::new();
    let mut seen: BTreeSet<UmlEdge> = BTreeSet::new();
    let mut push = |edges: &mut Vec<UmlEdge>, src: u32, dst: u32, relation: Relation| {
        if src == dst {
            return;
        }
        let e = UmlEdge { src, dst, relation };
        if seen.insert(e) {
            edges.push(e);
        }
    };

    for (i, decl) in index.decls.iter().enumerate() {
        let src = i as u32;
        for name in &decl.extends {
            if let Some(&dst) = id_of.get(name.as_str()) {
                push(&mut edges, src, dst, Relation::Generalization);
            }
        }
        for name in &decl.implements {
            if let Some(&dst) = id_of.get(name.as_str()) {
                push(&mut edges, src, dst, Relation::Realization);
            }
        }
        for name in &decl.field_types {
            if let Some(&dst) = id_of.get(name.as_str()) {
                push(&mut edges, src, dst, Relation::Association);
            }
        }
        for name in &decl.signature_types {
            if decl.field_types.contains(name) {
                continue; // field use dominates
            }
            if let Some(&dst) = id_of.get(name.as_str()) {
                push(&mut edges, src, dst, Relation::Dependency);
            }
        }
    }
    UmlGraph { nodes, edges }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG2: &str = r#"
        interface Vehicle { void run(); }
        class Car implements Vehicle { public void run() { } }
        class BMW extends Car {
            Type type;
            Engine engine;
            Body body;
        }
        class Person {
            void trip(BMW bmw) { bmw.run(); }
        }
        class Type { }
        class Engine { }
        class Body { }
    "#;

    fn fig2_graph() -> UmlGraph {
        let index = scan_project(&[("Fig2.java".to_string(), FIG2.to_string())]);
        extract_relations(&index)
    }

    #[test]
    fn scans_class_with_interface_and_field() {
        let index = scan_project(&[(
            "Car.java".into(),
            "class Car implements Vehicle { Engine e; }".into(),
        )]);
        let car = index.get("Car").unwrap();
        assert_eq!(car.implements, vec!["Vehicle"]);
        assert_eq!(car.field_types, vec!["Engine"]);
    }

    #[test]
    fn empty_file_empty_index() {
        let index = scan_project(&[("Empty.java".into(), "".into())]);
        assert!(index.is_empty());
    }

    #[test]
    fn duplicate_class_first_wins() {
        let index = scan_project(&[
            ("A.java".into(), "class Dup extends First { }".into()),
            ("B.java".into(), "class Dup extends Second { }".into()),
        ]);
        assert_eq!(index.len(), 1);
        assert_eq!(index.get("Dup").unwrap().extends, vec!["First"]);
    }

    #[test]
    fn vehicle_example_edges() {
        let g = fig2_graph();
        assert_eq!(g.nodes.len(), 7);
        assert_eq!(g.edges.len(), 6);
        let id = |name: &str| g.node_by_name(name).unwrap().id;
        let expect = |src: &str, dst: &str, relation: Relation| {
            assert!(
                g.edges.contains(&UmlEdge {
                    src: id(src),
                    dst: id(dst),
                    relation
                }),
                "missing {src}->{dst} {relation:?}"
            );
        };
        expect("Car", "Vehicle", Relation::Realization);
        expect("BMW", "Car", Relation::Generalization);
        expect("BMW", "Type", Relation::Association);
        expect("BMW", "Engine", Relation::Association);
        expect("BMW", "Body", Relation::Association);
        expect("Person", "BMW", Relation::Dependency);
    }

    #[test]
    fn isolated_class_is_isolated_node() {
        let index = scan_project(&[("Lone.java".into(), "class Lone { int x; }".into())]);
        let g = extract_relations(&index);
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn return_type_only_is_dependency() {
        let src = r#"
            class AbstractResourceHandle {
                public PropertyStatus getProperty(QualifiedName propertyName) {
                    return null;
                }
            }
            class PropertyStatus { }
        "#;
        let index = scan_project(&[("A.java".into(), src.into())]);
        let g = extract_relations(&index);
        let a = g.node_by_name("AbstractResourceHandle").unwrap().id;
        let p = g.node_by_name("PropertyStatus").unwrap().id;
        assert!(g.edges.contains(&UmlEdge {
            src: a,
            dst: p,
            relation: Relation::Dependency
        }));
    }

    #[test]
    fn association_dominates_dependency() {
        let src = r#"
            class Holder {
                Engine engine;
                Engine build() { return engine; }
            }
            class Engine { }
        "#;
        let index = scan_project(&[("H.java".into(), src.into())]);
        let g = extract_relations(&index);
        let relations: Vec<Relation> = g.edges.iter().map(|e| e.relation).collect();
        assert_eq!(relations, vec![Relation::Association]);
    }

    #[test]
    fn subgraph_radius_zero_is_single_node() {
        let g = fig2_graph();
        let bmw = g.node_by_name("BMW").unwrap().id;
        let sub = g.subgraph_for_method(bmw, 0).unwrap();
        assert_eq!(sub.nodes.len(), 1);
        assert_eq!(sub.nodes[0].name, "BMW");
        assert!(sub.edges.is_empty());
    }

    #[test]
    fn subgraph_radius_one_from_bmw() {
        let g = fig2_graph();
        let bmw = g.node_by_name("BMW").unwrap().id;
        let sub = g.subgraph_for_method(bmw, 1).unwrap();
        let mut names: Vec<&str> = sub.nodes.iter().map(|n| n.name.as_str()).collect();
        names.sort();
        assert_eq!(names, vec!["BMW", "Body", "Car", "Engine", "Person", "Type"]);
    }

    #[test]
    fn subgraph_large_radius_is_component() {
        let g = fig2_graph();
        let bmw = g.node_by_name("BMW").unwrap().id;
        let sub = g.subgraph_for_method(bmw, 10).unwrap();
        assert_eq!(sub.nodes.len(), g.nodes.len());
        assert_eq!(sub.edges.len(), g.edges.len());
    }

    #[test]
    fn subgraph_monotone_in_radius() {
        let g = fig2_graph();
        let person = g.node_by_name("Person").unwrap().id;
        let mut prev = 0;
        for r in 0..4 {
            let n = g.subgraph_for_method(person, r).unwrap().nodes.len();
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn subgraph_unknown_node_errors() {
        let g = fig2_graph();
        assert!(matches!(
            g.subgraph_for_method(999, 1),
            Err(UmlError::UnknownNode(999))
        ));
    }

    #[test]
    fn graph_json_round_trip() {
        let g = fig2_graph();
        let back = UmlGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn relations_serialize_screaming() {
        let text = serde_json::to_string(&Relation::Dependency).unwrap();
        assert_eq!(text, "\"DEPENDENCY\"");
    }

    #[test]
    fn rejects_edge_to_missing_node() {
        let bad = r#"{"nodes":[{"id":0,"name":"A","name_tokens":["a"]}],
                      "edges":[{"src":0,"dst":9,"relation":"ASSOCIATION"}]}"#;
        assert!(UmlGraph::from_json(bad).is_err());
    }
}
