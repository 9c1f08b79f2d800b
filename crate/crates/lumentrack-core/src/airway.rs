//! Labeled airway tree with centerline geometry.
//!
//! Branches are straight centerline segments in millimeters. Loading
//! normalizes the tree into a standard anatomical frame: the trachea starts
//! at the origin and points along +y; the x-axis lies in the plane spanned by
//! the origin and the ends of the two main bronchi, pointing from the left
//! main bronchus end toward the right one; z completes the right-handed
//! frame. All downstream angle and projection math assumes this frame.

use crate::geometry::Vec2;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Below this norm a direction is considered parallel to the branch axis.
pub const PARALLEL_EPS: f64 = 1e-6;

/// Graph failure cases.
#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    /// Structural or geometric validation failed; the file is rejected.
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    /// A label is not present in the tree.
    #[error("unknown branch label: {0}")]
    UnknownLabel(String),
    /// An ancestor query walked past the root.
    #[error("no ancestor {steps} generations above {label}")]
    AboveRoot { label: String, steps: usize },
}

/// Anatomical designations required by the standard frame.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Designations {
    pub trachea: String,
    pub lmb: String,
    pub rmb: String,
}

/// One branch as stored in a graph file (arbitrary source frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBranch {
    pub label: String,
    pub start: [f64; 3],
    pub end: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

/// A centerline tree as read from disk, prior to normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGraph {
    pub root: String,
    pub branches: Vec<RawBranch>,
    pub designations: Designations,
}

/// One branch in the normalized tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub label: String,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub parent: Option<String>,
    /// Child labels, sorted for deterministic iteration.
    pub children: Vec<String>,
    /// Root has generation 0; each child is one deeper than its parent.
    pub generation: usize,
}

impl Branch {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    /// Unit direction from start to end.
    pub fn dir(&self) -> Vector3<f64> {
        (self.end - self.start).normalize()
    }
}

/// A projected child direction in a branch's viewing plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedChild {
    pub label: String,
    /// Unit direction in the viewing plane, already rotated by the roll.
    pub dir: Vec2,
    /// Visibility weight of the child from inside the parent.
    pub weight: f64,
    /// True when the child runs (near-)parallel to the parent axis and the
    /// planar direction is the documented fixed placeholder.
    pub degenerate: bool,
}

/// Normalized airway tree.
#[derive(Debug, Clone)]
pub struct AirwayGraph {
    branches: BTreeMap<String, Branch>,
    root: String,
    designations: Designations,
}

impl AirwayGraph {
    /// Validate a raw tree and rigidly map it into the standard frame.
    pub fn load_and_normalize(raw: &RawGraph) -> Result<Self, GraphError> {
        let malformed = |msg: String| GraphError::MalformedTree(msg);

        let mut by_label: BTreeMap<String, &RawBranch> = BTreeMap::new();
        for b in &raw.branches {
            if by_label.insert(b.label.clone(), b).is_some() {
                return Err(malformed(format!("duplicate branch label {:?}", b.label)));
            }
        }
        if by_label.is_empty() {
            return Err(malformed("tree has no branches".into()));
        }

        let d = &raw.designations;
        if d.trachea != raw.root {
            return Err(malformed(format!(
                "designated trachea {:?} is not the root {:?}",
                d.trachea, raw.root
            )));
        }
        for (name, label) in [("trachea", &d.trachea), ("lmb", &d.lmb), ("rmb", &d.rmb)] {
            if !by_label.contains_key(label) {
                return Err(malformed(format!("designated {name} {label:?} not in tree")));
            }
        }
        if d.lmb == d.rmb || d.lmb == d.trachea || d.rmb == d.trachea {
            return Err(malformed("designations must name three distinct branches".into()));
        }

        let mut roots = Vec::new();
        for b in &raw.branches {
            match &b.parent {
                None => roots.push(b.label.clone()),
                Some(p) => {
                    if !by_label.contains_key(p) {
                        return Err(malformed(format!(
                            "branch {:?} references missing parent {:?}",
                            b.label, p
                        )));
                    }
                }
            }
        }
        if roots.len() != 1 || roots[0] != raw.root {
            return Err(malformed(format!(
                "expected exactly one parentless branch equal to the root, found {roots:?}"
            )));
        }

        for b in &raw.branches {
            let len2: f64 = (0..3).map(|i| (b.end[i] - b.start[i]).powi(2)).sum();
            if len2.sqrt() <= PARALLEL_EPS {
                return Err(malformed(format!("branch {:?} has zero length", b.label)));
            }
        }

        // Children lists + reachability (detects cycles as unreachable nodes).
        let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for b in &raw.branches {
            if let Some(p) = &b.parent {
                children.entry(p.clone()).or_default().push(b.label.clone());
            }
        }
        for list in children.values_mut() {
            list.sort();
        }
        let mut generation: BTreeMap<String, usize> = BTreeMap::new();
        let mut queue = std::collections::VecDeque::from([raw.root.clone()]);
        generation.insert(raw.root.clone(), 0);
        while let Some(label) = queue.pop_front() {
            let g = generation[&label];
            for c in children.get(&label).into_iter().flatten() {
                if generation.insert(c.clone(), g + 1).is_none() {
                    queue.push_back(c.clone());
                }
            }
        }
        if generation.len() != by_label.len() {
            let missing: Vec<_> = by_label
                .keys()
                .filter(|l| !generation.contains_key(*l))
                .cloned()
                .collect();
            return Err(malformed(format!(
                "branches not reachable from the root (cycle or orphan): {missing:?}"
            )));
        }

        // Standard frame from the trachea and the two main bronchus ends.
        let v3 = |a: &[f64; 3]| Vector3::new(a[0], a[1], a[2]);
        let trachea = by_label[&d.trachea];
        let origin = v3(&trachea.start);
        let y_axis = (v3(&trachea.end) - origin).normalize();
        let dl = v3(&by_label[&d.lmb].end) - origin;
        let dr = v3(&by_label[&d.rmb].end) - origin;
        let normal = dl.cross(&dr);
        if normal.norm() <= PARALLEL_EPS {
            return Err(malformed(
                "main bronchus ends are collinear with the trachea start".into(),
            ));
        }
        let mut x_axis = normal.normalize().cross(&y_axis);
        if x_axis.norm() <= PARALLEL_EPS {
            return Err(malformed(
                "carina plane is perpendicular to the trachea axis".into(),
            ));
        }
        x_axis = x_axis.normalize();
        if x_axis.dot(&(dr - dl)) < 0.0 {
            x_axis = -x_axis;
        }
        let z_axis = x_axis.cross(&y_axis);
        let to_frame = |p: Vector3<f64>| {
            let rel = p - origin;
            Vector3::new(rel.dot(&x_axis), rel.dot(&y_axis), rel.dot(&z_axis))
        };

        let mut branches = BTreeMap::new();
        for b in &raw.branches {
            branches.insert(
                b.label.clone(),
                Branch {
                    label: b.label.clone(),
                    start: to_frame(v3(&b.start)),
                    end: to_frame(v3(&b.end)),
                    parent: b.parent.clone(),
                    children: children.remove(&b.label).unwrap_or_default(),
                    generation: generation[&b.label],
                },
            );
        }
        Ok(Self {
            branches,
            root: raw.root.clone(),
            designations: raw.designations.clone(),
        })
    }

    /// Serialize back into the file representation (already normalized).
    pub fn to_raw(&self) -> RawGraph {
        RawGraph {
            root: self.root.clone(),
            branches: self
                .branches
                .values()
                .map(|b| RawBranch {
                    label: b.label.clone(),
                    start: [b.start.x, b.start.y, b.start.z],
                    end: [b.end.x, b.end.y, b.end.z],
                    parent: b.parent.clone(),
                })
                .collect(),
            designations: self.designations.clone(),
        }
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn designations(&self) -> &Designations {
        &self.designations
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.branches.keys().map(String::as_str)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.branches.contains_key(label)
    }

    pub fn branch(&self, label: &str) -> Result<&Branch, GraphError> {
        self.branches
            .get(label)
            .ok_or_else(|| GraphError::UnknownLabel(label.to_string()))
    }

    /// Label `steps` generations above `label`.
    pub fn ancestor(&self, label: &str, steps: usize) -> Result<&str, GraphError> {
        let mut cur = self.branch(label)?;
        for _ in 0..steps {
            match &cur.parent {
                Some(p) => cur = self.branch(p)?,
                None => {
                    return Err(GraphError::AboveRoot {
                        label: label.to_string(),
                        steps,
                    })
                }
            }
        }
        Ok(&cur.label)
    }

    /// Hop distance between two branches through their lowest common
    /// ancestor.
    pub fn generation_distance(&self, a: &str, b: &str) -> Result<usize, GraphError> {
        let (mut xa, mut xb) = (self.branch(a)?, self.branch(b)?);
        let mut hops = 0;
        while xa.generation > xb.generation {
            xa = self.branch(xa.parent.as_ref().expect("generation > 0 has parent"))?;
            hops += 1;
        }
        while xb.generation > xa.generation {
            xb = self.branch(xb.parent.as_ref().expect("generation > 0 has parent"))?;
            hops += 1;
        }
        while xa.label != xb.label {
            xa = self.branch(xa.parent.as_ref().expect("distinct roots impossible"))?;
            xb = self.branch(xb.parent.as_ref().expect("distinct roots impossible"))?;
            hops += 2;
        }
        Ok(hops)
    }

    /// Visibility weight of each child seen from inside `label`:
    /// `max(0, cos θ)` for branching angle θ, and 0 beyond `theta_max` rad.
    pub fn child_visibility_weights(
        &self,
        label: &str,
        theta_max: f64,
    ) -> Result<Vec<(String, f64)>, GraphError> {
        let parent = self.branch(label)?;
        let pd = parent.dir();
        parent
            .children
            .iter()
            .map(|c| {
                let cd = self.branch(c)?.dir();
                let cos = pd.dot(&cd).clamp(-1.0, 1.0);
                let theta = cos.acos();
                let w = if theta > theta_max { 0.0 } else { cos.max(0.0) };
                Ok((c.clone(), w))
            })
            .collect()
    }

    /// Project child directions onto the viewing plane of `label`.
    ///
    /// The plane is orthogonal to the branch axis. Its first basis vector is
    /// the normalized projection of +x (falling back to +z when the axis is
    /// near-parallel to x); the second completes a right-handed pair about
    /// the axis. Child directions are truncated at `d_trunc` mm, projected,
    /// normalized, and rotated by `roll`. A child running parallel to the
    /// axis yields a flagged entry with the fixed direction (1, 0) rotated by
    /// the roll.
    pub fn project_children(
        &self,
        label: &str,
        roll: f64,
        d_trunc: f64,
        theta_max: f64,
    ) -> Result<Vec<ProjectedChild>, GraphError> {
        let parent = self.branch(label)?;
        let axis = parent.dir();
        let project = |v: Vector3<f64>| v - axis * v.dot(&axis);
        let mut b1 = project(Vector3::x());
        if b1.norm() <= PARALLEL_EPS {
            b1 = project(Vector3::z());
        }
        let b1 = b1.normalize();
        let b2 = axis.cross(&b1);

        let weights = self.child_visibility_weights(label, theta_max)?;
        weights
            .into_iter()
            .map(|(c, weight)| {
                let child = self.branch(&c)?;
                let reach = d_trunc.min(child.length());
                let tip = child.start + child.dir() * reach;
                let planar = project(tip - child.start);
                let (dir, degenerate) = match Vec2::new(planar.dot(&b1), planar.dot(&b2))
                    .normalized()
                {
                    Some(u) => (u, false),
                    None => (Vec2::new(1.0, 0.0), true),
                };
                Ok(ProjectedChild {
                    label: c,
                    dir: dir.rotated(roll),
                    weight,
                    degenerate,
                })
            })
            .collect()
    }
}
