//! Structure-based traversal (SBT) flattening of ASTs.
//!
//! Trees arrive in a neutral nested-list exchange format
//! `[label, [child, ...]]`; flattening emits, per node, the four tokens
//! `"(" label ... ")" label`, which is invertible back to the tree.

use serde_json::Value;
use thiserror::Error;

use crate::preprocess;

#[derive(Debug, Error)]
pub enum SbtError {
    #[error("ast parse error at {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("ast json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sbt parse error at token {index}: {message}")]
    BadSequence { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AstNode {
    pub label: String,
    pub children: Vec<AstNode>,
}

impl AstNode {
    pub fn new(label: impl Into<String>, children: Vec<AstNode>) -> AstNode {
        AstNode {
            label: label.into(),
            children,
        }
    }

    pub fn leaf(label: impl Into<String>) -> AstNode {
        AstNode::new(label, Vec::new())
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(AstNode::node_count).sum::<usize>()
    }

    /// Lowercase every label in place; the pipeline does this before
    /// vocabulary mapping so SBT tokens match the case rules applied to
    /// code tokens.
    pub fn lowercase_labels(&mut self) {
        self.label = self.label.to_lowercase();
        for c in &mut self.children {
            c.lowercase_labels();
        }
    }
}

/// Parse the nested-list exchange format: `["label", [children...]]`.
pub fn parse_ast(serialized: &str) -> Result<AstNode, SbtError> {
    let value: Value = serde_json::from_str(serialized)?;
    ast_from_value(&value)
}

pub fn ast_from_value(value: &Value) -> Result<AstNode, SbtError> {
    fn convert(value: &Value, path: &str) -> Result<AstNode, SbtError> {
        let arr = value.as_array().ok_or_else(|| SbtError::Malformed {
            path: path.to_string(),
            message: "expected a two-element [label, children] list".into(),
        })?;
        if arr.len() != 2 {
            return Err(SbtError::Malformed {
                path: path.to_string(),
                message: format!("expected 2 elements, found {}", arr.len()),
            });
        }
        let label = arr[0]
            .as_str()
            .ok_or_else(|| SbtError::Malformed {
                path: format!("{path}[0]"),
                message: "label must be a string".into(),
            })?
            .to_string();
        if label.is_empty() {
            return Err(SbtError::Malformed {
                path: format!("{path}[0]"),
                message: "label must be non-empty".into(),
            });
        }
        let kids = arr[1].as_array().ok_or_else(|| SbtError::Malformed {
            path: format!("{path}[1]"),
            message: "children must be a list".into(),
        })?;
        let children = kids
            .iter()
            .enumerate()
            .map(|(i, k)| convert(k, &format!("{path}[1][{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AstNode { label, children })
    }
    convert(value, "$")
}

/// Flatten a tree to its SBT token sequence. Every node contributes
/// exactly four tokens, so the output length is `4 * node_count`.
pub fn sbt_flatten(root: &AstNode) -> Vec<String> {
    let mut out = Vec::with_capacity(4 * root.node_count());
    fn walk(node: &AstNode, out: &mut Vec<String>) {
        out.push("(".to_string());
        out.push(node.label.clone());
        for child in &node.children {
            walk(child, out);
        }
        out.push(")".to_string());
        out.push(node.label.clone());
    }
    walk(root, &mut out);
    out
}

/// Inverse of [`sbt_flatten`].
pub fn sbt_parse(tokens: &[String]) -> Result<AstNode, SbtError> {
    fn parse_node(tokens: &[String], pos: &mut usize) -> Result<AstNode, SbtError> {
        let need = |pos: usize, what: &str| SbtError::BadSequence {
            index: pos,
            message: format!("expected {what}, found end of sequence"),
        };
        if tokens.get(*pos).map(String::as_str) != Some("(") {
            return Err(tokens
                .get(*pos)
                .map(|t| SbtError::BadSequence {
                    index: *pos,
                    message: format!("expected \"(\", found {t:?}"),
                })
                .unwrap_or_else(|| need(*pos, "\"(\"")));
        }
        *pos += 1;
        let label = tokens
            .get(*pos)
            .ok_or_else(|| need(*pos, "a label"))?
            .clone();
        *pos += 1;
        let mut children = Vec::new();
        loop {
            match tokens.get(*pos).map(String::as_str) {
                Some("(") => children.push(parse_node(tokens, pos)?),
                Some(")") => break,
                Some(other) => {
                    return Err(SbtError::BadSequence {
                        index: *pos,
                        message: format!("expected \"(\" or \")\", found {other:?}"),
                    })
                }
                None => return Err(need(*pos, "\")\"")),
            }
        }
        *pos += 1; // consume ")"
        let close = tokens.get(*pos).ok_or_else(|| need(*pos, "a closing label"))?;
        if *close != label {
            return Err(SbtError::BadSequence {
                index: *pos,
                message: format!("closing label {close:?} does not match opening {label:?}"),
            });
        }
        *pos += 1;
        Ok(AstNode { label, children })
    }

    if tokens.is_empty() {
        return Err(SbtError::BadSequence {
            index: 0,
            message: "empty sequence".into(),
        });
    }
    let mut pos = 0;
    let node = parse_node(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(SbtError::BadSequence {
            index: pos,
            message: "trailing tokens after the root".into(),
        });
    }
    Ok(node)
}

/// Tokenizer-level fallback AST for when no external parse is available:
/// method -> block -> one statement node per `;`/`{`/`}`-delimited
/// statement, with the statement's normalized tokens as leaves.
pub fn fallback_ast(code: &str) -> AstNode {
    let tokens = preprocess::preprocess_code(&preprocess::lex_code(code));
    let mut statements: Vec<AstNode> = Vec::new();
    let mut current: Vec<AstNode> = Vec::new();
    for tok in tokens {
        let boundary = matches!(tok.as_str(), ";" | "{" | "}");
        if !boundary {
            current.push(AstNode::leaf(tok));
        }
        if boundary && !current.is_empty() {
            statements.push(AstNode::new("statement", std::mem::take(&mut current)));
        }
    }
    if !current.is_empty() {
        statements.push(AstNode::new("statement", current));
    }
    AstNode::new(
        "method_declaration",
        vec![AstNode::new("block", statements)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_nested_list() {
        let ast = parse_ast(r#"["a",[["b",[]],["c",[]]]]"#).unwrap();
        assert_eq!(ast.label, "a");
        assert_eq!(ast.children.len(), 2);
        assert_eq!(ast.children[0], AstNode::leaf("b"));
        assert_eq!(ast.children[1], AstNode::leaf("c"));
    }

    #[test]
    fn parses_leaf() {
        assert_eq!(parse_ast(r#"["x",[]]"#).unwrap(), AstNode::leaf("x"));
    }

    #[test]
    fn rejects_unbalanced_input() {
        assert!(parse_ast(r#"["a",[["b",[]]"#).is_err());
        assert!(parse_ast(r#"["a"]"#).is_err());
        assert!(parse_ast(r#"[["a"],[]]"#).is_err());
    }

    #[test]
    fn flattens_leaf() {
        let seq = sbt_flatten(&AstNode::leaf("b"));
        assert_eq!(seq, toks(&["(", "b", ")", "b"]));
    }

    #[test]
    fn flattens_two_children() {
        let t = AstNode::new("a", vec![AstNode::leaf("b"), AstNode::leaf("c")]);
        assert_eq!(
            sbt_flatten(&t),
            toks(&["(", "a", "(", "b", ")", "b", "(", "c", ")", "c", ")", "a"])
        );
    }

    #[test]
    fn flattens_chain() {
        let t = AstNode::new("a", vec![AstNode::leaf("b")]);
        assert_eq!(sbt_flatten(&t), toks(&["(", "a", "(", "b", ")", "b", ")", "a"]));
    }

    #[test]
    fn parse_rejects_label_mismatch() {
        let err = sbt_parse(&toks(&["(", "a", ")", "b"])).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn parse_rejects_empty() {
        assert!(sbt_parse(&[]).is_err());
    }

    #[test]
    fn fallback_ast_has_expected_shape() {
        let ast = fallback_ast("int x = 1; return x;");
        assert_eq!(ast.label, "method_declaration");
        assert_eq!(ast.children.len(), 1);
        let block = &ast.children[0];
        assert_eq!(block.label, "block");
        assert_eq!(block.children.len(), 2);
        assert_eq!(block.children[0].label, "statement");
        assert_eq!(
            block.children[0]
                .children
                .iter()
                .map(|n| n.label.as_str())
                .collect::<Vec<_>>(),
            vec!["int", "x", "=", "<NUM>"]
        );
    }

    fn arb_tree() -> impl Strategy<Value = AstNode> {
        let leaf = "[a-e]{1,3}".prop_map(AstNode::leaf);
        leaf.prop_recursive(4, 50, 5, |inner| {
            ("[a-e]{1,3}", prop::collection::vec(inner, 0..5))
                .prop_map(|(label, children)| AstNode::new(label, children))
        })
    }

    proptest! {
        #[test]
        fn round_trip_and_length(tree in arb_tree()) {
            let seq = sbt_flatten(&tree);
            prop_assert_eq!(seq.len(), 4 * tree.node_count());
            let back = sbt_parse(&seq).unwrap();
            prop_assert_eq!(back, tree);
        }
    }
}
