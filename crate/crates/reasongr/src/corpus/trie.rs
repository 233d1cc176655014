//! Prefix tree over docid component sequences. Every root-to-terminal path
//! is exactly one registered docid; decoding walks it to mask continuations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Arena index of a trie node.
pub type NodeId = usize;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Node {
    // BTreeMap keeps child iteration deterministic
    children: BTreeMap<String, NodeId>,
    terminal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentTrie {
    nodes: Vec<Node>,
}

impl Default for ComponentTrie {
    fn default() -> Self {
        Self::new()
    }
}

impl ComponentTrie {
    pub fn new() -> Self {
        ComponentTrie {
            nodes: vec![Node::default()],
        }
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn insert(&mut self, components: &[String]) {
        let mut node = self.root();
        for comp in components {
            node = match self.nodes[node].children.get(comp) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(Node::default());
                    self.nodes[node].children.insert(comp.clone(), next);
                    next
                }
            };
        }
        self.nodes[node].terminal = true;
    }

    pub fn descend(&self, node: NodeId, component: &str) -> Option<NodeId> {
        self.nodes[node].children.get(component).copied()
    }

    pub fn is_terminal(&self, node: NodeId) -> bool {
        self.nodes[node].terminal
    }

    /// Child components in lexicographic order.
    pub fn children(&self, node: NodeId) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes[node]
            .children
            .iter()
            .map(|(c, &n)| (c.as_str(), n))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Exhaustively enumerates every root-to-terminal path.
    pub fn terminal_paths(&self) -> Vec<Vec<String>> {
        let mut paths = Vec::new();
        let mut stack = vec![(self.root(), Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if self.is_terminal(node) {
                paths.push(path.clone());
            }
            for (comp, child) in self.nodes[node].children.iter().rev() {
                let mut next = path.clone();
                next.push(comp.clone());
                stack.push((*child, next));
            }
        }
        paths
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_path() {
        let mut t = ComponentTrie::new();
        t.insert(&seq(&["a", "b"]));
        assert_eq!(t.terminal_paths(), vec![seq(&["a", "b"])]);
        assert_eq!(t.node_count(), 3);
    }

    #[test]
    fn prefix_terminal_and_extension() {
        let mut t = ComponentTrie::new();
        t.insert(&seq(&["a", "b"]));
        t.insert(&seq(&["a", "b", "c"]));
        let paths = t.terminal_paths();
        assert_eq!(paths.len(), 2);
        assert!(paths.contains(&seq(&["a", "b"])));
        assert!(paths.contains(&seq(&["a", "b", "c"])));
    }

    #[test]
    fn children_in_lexicographic_order() {
        let mut t = ComponentTrie::new();
        t.insert(&seq(&["b"]));
        t.insert(&seq(&["a"]));
        let kids: Vec<&str> = t.children(t.root()).map(|(c, _)| c).collect();
        assert_eq!(kids, vec!["a", "b"]);
    }
}
