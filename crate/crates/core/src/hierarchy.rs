//! Three-level sense taxonomy.
//!
//! Source files are line oriented, `level<TAB>name<TAB>parent-path`, where the
//! parent path is the dot-joined chain of ancestor names (empty for level 1).
//! Node order within a level is declaration order and fixes prototype row
//! indices.

use std::fmt;

use thiserror::Error;

/// Deepest supported level.
pub const MAX_LEVEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenseNode {
    pub id: NodeId,
    pub name: String,
    pub level: usize,
    pub parent: Option<NodeId>,
    /// Row of this node inside its level's prototype matrix.
    pub position: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("line {line}: expected `level<TAB>name<TAB>parent-path`")]
    Malformed { line: usize },
    #[error("line {line}: level {level} outside 1..=3")]
    BadLevel { line: usize, level: String },
    #[error("line {line}: empty sense name")]
    EmptyName { line: usize },
    #[error("line {line}: sense name {name:?} may not contain '.' or tabs")]
    IllegalName { line: usize, name: String },
    #[error("line {line}: duplicate sense name {name:?} at level {level}")]
    Duplicate {
        line: usize,
        name: String,
        level: usize,
    },
    #[error("line {line}: parent path {path:?} does not name a declared sense")]
    DanglingParent { line: usize, path: String },
    #[error("line {line}: {name:?} declared before its parent {path:?}")]
    LevelGap {
        line: usize,
        name: String,
        path: String,
    },
    #[error("line {line}: level {level} sense needs a parent path with {expected} components, got {path:?}")]
    ParentDepth {
        line: usize,
        level: usize,
        expected: usize,
        path: String,
    },
    #[error("hierarchy declares no senses")]
    Empty,
    #[error("unknown node handle {0}")]
    InvalidHandle(NodeId),
    #[error("sense path {path:?}: {reason}")]
    BadPath { path: String, reason: String },
    #[error("level {0} is not declared")]
    UndeclaredLevel(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenseHierarchy {
    nodes: Vec<SenseNode>,
    levels: Vec<Vec<NodeId>>,
    children: Vec<Vec<NodeId>>,
}

struct RawLine<'a> {
    line: usize,
    level: usize,
    name: &'a str,
    parent_path: &'a str,
}

impl SenseHierarchy {
    /// Parses the tab-separated hierarchy format. `#` lines and blank lines are skipped.
    pub fn parse(source: &str) -> Result<Self, HierarchyError> {
        let mut raw = Vec::new();
        for (idx, text) in source.lines().enumerate() {
            let line = idx + 1;
            let text = text.trim_end_matches('\r');
            if text.trim().is_empty() || text.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = text.split('\t');
            let (Some(level), Some(name)) = (fields.next(), fields.next()) else {
                return Err(HierarchyError::Malformed { line });
            };
            let parent_path = fields.next().unwrap_or("");
            if fields.next().is_some() {
                return Err(HierarchyError::Malformed { line });
            }
            let level: usize = match level.trim().parse() {
                Ok(l) if (1..=MAX_LEVEL).contains(&l) => l,
                _ => {
                    return Err(HierarchyError::BadLevel {
                        line,
                        level: level.to_string(),
                    })
                }
            };
            let name = name.trim();
            if name.is_empty() {
                return Err(HierarchyError::EmptyName { line });
            }
            if name.contains('.') {
                return Err(HierarchyError::IllegalName {
                    line,
                    name: name.to_string(),
                });
            }
            raw.push(RawLine {
                line,
                level,
                name,
                parent_path: parent_path.trim(),
            });
        }
        if raw.is_empty() {
            return Err(HierarchyError::Empty);
        }

        let mut h = SenseHierarchy {
            nodes: Vec::with_capacity(raw.len()),
            levels: Vec::new(),
            children: Vec::new(),
        };
        for (k, r) in raw.iter().enumerate() {
            let expected = r.level - 1;
            let components = if r.parent_path.is_empty() {
                0
            } else {
                r.parent_path.split('.').count()
            };
            if components != expected {
                return Err(HierarchyError::ParentDepth {
                    line: r.line,
                    level: r.level,
                    expected,
                    path: r.parent_path.to_string(),
                });
            }
            let parent = if expected == 0 {
                None
            } else {
                match h.resolve_path(r.parent_path) {
                    Ok(path) => path.last().copied(),
                    Err(_) => {
                        let declared_later = raw[k + 1..].iter().any(|later| {
                            later.level == expected && {
                                let full = if later.parent_path.is_empty() {
                                    later.name.to_string()
                                } else {
                                    format!("{}.{}", later.parent_path, later.name)
                                };
                                full == r.parent_path
                            }
                        });
                        return Err(if declared_later {
                            HierarchyError::LevelGap {
                                line: r.line,
                                name: r.name.to_string(),
                                path: r.parent_path.to_string(),
                            }
                        } else {
                            HierarchyError::DanglingParent {
                                line: r.line,
                                path: r.parent_path.to_string(),
                            }
                        });
                    }
                }
            };
            if h.levels.len() >= r.level
                && h.levels[r.level - 1]
                    .iter()
                    .any(|&id| h.nodes[id.0].name == r.name)
            {
                return Err(HierarchyError::Duplicate {
                    line: r.line,
                    name: r.name.to_string(),
                    level: r.level,
                });
            }
            h.push(r.name, r.level, parent);
        }
        Ok(h)
    }

    fn push(&mut self, name: &str, level: usize, parent: Option<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        while self.levels.len() < level {
            self.levels.push(Vec::new());
        }
        let position = self.levels[level - 1].len();
        self.levels[level - 1].push(id);
        self.nodes.push(SenseNode {
            id,
            name: name.to_string(),
            level,
            parent,
            position,
        });
        self.children.push(Vec::new());
        if let Some(p) = parent {
            self.children[p.0].push(id);
        }
        id
    }

    /// Serializes back to the tab-separated source format, in declaration order.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let parent = n
                .parent
                .map(|p| self.render_path(p).expect("parent is valid"))
                .unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\n", n.level, n.name, parent));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of declared levels.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&SenseNode, HierarchyError> {
        self.nodes
            .get(id.0)
            .ok_or(HierarchyError::InvalidHandle(id))
    }

    pub fn nodes(&self) -> &[SenseNode] {
        &self.nodes
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn parent_of(&self, id: NodeId) -> Result<Option<NodeId>, HierarchyError> {
        Ok(self.node(id)?.parent)
    }

    pub fn children_of(&self, id: NodeId) -> Result<&[NodeId], HierarchyError> {
        self.node(id)?;
        Ok(&self.children[id.0])
    }

    pub fn nodes_at_level(&self, level: usize) -> Result<&[NodeId], HierarchyError> {
        if level == 0 || level > self.levels.len() {
            return Err(HierarchyError::UndeclaredLevel(level));
        }
        Ok(&self.levels[level - 1])
    }

    /// `M_l`, the number of senses declared at `level`.
    pub fn level_size(&self, level: usize) -> Result<usize, HierarchyError> {
        Ok(self.nodes_at_level(level)?.len())
    }

    /// Looks up a node by name within a level.
    pub fn find(&self, level: usize, name: &str) -> Option<NodeId> {
        self.levels
            .get(level.checked_sub(1)?)?
            .iter()
            .copied()
            .find(|&id| self.nodes[id.0].name == name)
    }

    /// Resolves a dot-joined path into handles from level 1 downward.
    pub fn resolve_path(&self, path: &str) -> Result<Vec<NodeId>, HierarchyError> {
        let bad = |reason: String| HierarchyError::BadPath {
            path: path.to_string(),
            reason,
        };
        let parts: Vec<&str> = path.split('.').collect();
        if path.is_empty() || parts.len() > MAX_LEVEL {
            return Err(bad(format!("expected 1 to {MAX_LEVEL} components")));
        }
        let mut out: Vec<NodeId> = Vec::with_capacity(parts.len());
        for (depth, part) in parts.iter().enumerate() {
            let level = depth + 1;
            let Some(id) = self.find(level, part) else {
                return Err(bad(format!("no sense {part:?} at level {level}")));
            };
            if let Some(&prev) = out.last() {
                if self.nodes[id.0].parent != Some(prev) {
                    return Err(bad(format!(
                        "{part:?} is not a child of {:?}",
                        self.nodes[prev.0].name
                    )));
                }
            }
            out.push(id);
        }
        Ok(out)
    }

    /// Dot-joined path from the root down to `id`.
    pub fn render_path(&self, id: NodeId) -> Result<String, HierarchyError> {
        let mut names = vec![self.node(id)?.name.as_str()];
        let mut cur = self.nodes[id.0].parent;
        while let Some(p) = cur {
            names.push(&self.nodes[p.0].name);
            cur = self.nodes[p.0].parent;
        }
        names.reverse();
        Ok(names.join("."))
    }

    /// Full path (root first) ending at `id`.
    pub fn lineage(&self, id: NodeId) -> Result<SensePath, HierarchyError> {
        let mut ids = vec![self.node(id)?.id];
        let mut cur = self.nodes[id.0].parent;
        while let Some(p) = cur {
            ids.push(p);
            cur = self.nodes[p.0].parent;
        }
        ids.reverse();
        Ok(SensePath(ids))
    }
}

/// A resolved root-to-node chain; entry `l - 1` is the label at level `l`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SensePath(pub Vec<NodeId>);

impl SensePath {
    pub fn resolve(h: &SenseHierarchy, path: &str) -> Result<Self, HierarchyError> {
        h.resolve_path(path).map(SensePath)
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn at_level(&self, level: usize) -> Option<NodeId> {
        self.0.get(level.checked_sub(1)?).copied()
    }

    pub fn leaf(&self) -> NodeId {
        *self.0.last().expect("sense paths are non-empty")
    }

    pub fn render(&self, h: &SenseHierarchy) -> String {
        h.render_path(self.leaf())
            .expect("path built from this hierarchy")
    }
}
