//! Geometric cluster tree and block-cluster tree.
//!
//! Clusters are built by recursive bisection of boxes: a node's box is halved
//! along its longest edge (lowest axis on ties) and points on the cutting
//! plane go to the lower half. Nodes keep the halved box rather than the tight
//! box of their points, so `volume(B_X) = 2^{-level} volume(B_root)` as long as
//! no empty half occurred. When one half would be empty, the tight extent of
//! the node's points is bisected instead and the node is marked
//! [`ClusterNode::resplit`].

use std::fmt::Write as _;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pointset::{BBox, PointSet};

pub const DEFAULT_C_LEAF: usize = 20;
pub const DEFAULT_ETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    /// Range into [`ClusterTree::perm`].
    pub start: usize,
    pub end: usize,
    pub bbox: BBox,
    pub level: usize,
    pub sons: Option<[usize; 2]>,
    pub parent: Option<usize>,
    /// The sons of this node were cut from its tight extent, not its box.
    pub resplit: bool,
}

impl ClusterNode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn is_leaf(&self) -> bool {
        self.sons.is_none()
    }
}

/// Binary cluster tree. Node 0 is the root; sons always have larger ids than
/// their parent. `perm[k]` is the original index of the point at position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub nodes: Vec<ClusterNode>,
    pub perm: Vec<usize>,
    pub c_leaf: usize,
    pub dim: usize,
}

impl ClusterTree {
    pub fn root(&self) -> &ClusterNode {
        &self.nodes[0]
    }

    pub fn n_points(&self) -> usize {
        self.perm.len()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf())
    }

    /// Permuted copy of a vector indexed by original point order.
    pub fn to_tree_order(&self, x: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&i| x[i]).collect()
    }

    /// Inverse of [`to_tree_order`](Self::to_tree_order).
    pub fn from_tree_order(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (k, &i) in self.perm.iter().enumerate() {
            out[i] = x[k];
        }
        out
    }
}

pub fn build_cluster_tree(ps: &PointSet, c_leaf: usize) -> Result<ClusterTree> {
    if ps.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if c_leaf < 1 {
        return Err(Error::Config("c_leaf must be at least 1".into()));
    }
    let dim = ps.dim();
    let mut perm: Vec<usize> = (0..ps.len()).collect();
    let mut nodes = vec![ClusterNode {
        start: 0,
        end: ps.len(),
        bbox: ps.bbox().clone(),
        level: 0,
        sons: None,
        parent: None,
        resplit: false,
    }];
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        let node = &nodes[id];
        if node.len() <= c_leaf {
            continue;
        }
        let (start, end, level) = (node.start, node.end, node.level);
        let slice = &mut perm[start..end];

        let mut boxes = node.bbox.split(node.bbox.longest_axis());
        let axis = node.bbox.longest_axis();
        let mut split = partition_lower(slice, ps, axis, boxes.0.hi[axis]);
        let mut resplit = false;
        if split == 0 || split == slice.len() {
            let tight = BBox::enclosing(
                &slice.iter().flat_map(|&i| ps.point(i).to_vec()).collect::<Vec<_>>(),
                dim,
            );
            let axis = tight.longest_axis();
            boxes = tight.split(axis);
            split = partition_lower(slice, ps, axis, boxes.0.hi[axis]);
            if split == 0 || split == slice.len() {
                // midpoint rounded onto an endpoint: cut at the median instead
                slice.sort_by(|&a, &b| ps.point(a)[axis].total_cmp(&ps.point(b)[axis]));
                split = slice.len() / 2;
                let cut = ps.point(slice[split - 1])[axis];
                boxes.0.hi[axis] = cut;
                boxes.1.lo[axis] = cut;
            }
            resplit = true;
        }
        let first = nodes.len();
        for ((s, e), b) in [((start, start + split), boxes.0), ((start + split, end), boxes.1)] {
            nodes.push(ClusterNode {
                start: s,
                end: e,
                bbox: b,
                level: level + 1,
                sons: None,
                parent: Some(id),
                resplit: false,
            });
        }
        nodes[id].sons = Some([first, first + 1]);
        nodes[id].resplit = resplit;
        stack.push(first + 1);
        stack.push(first);
    }
    Ok(ClusterTree {
        nodes,
        perm,
        c_leaf,
        dim,
    })
}

/// Stable partition of `slice` so points with `x[axis] <= cut` come first.
/// Returns the size of the lower part.
fn partition_lower(slice: &mut [usize], ps: &PointSet, axis: usize, cut: f64) -> usize {
    let (lower, upper): (Vec<usize>, Vec<usize>) =
        slice.iter().partition(|&&i| ps.point(i)[axis] <= cut);
    let n = lower.len();
    slice[..n].copy_from_slice(&lower);
    slice[n..].copy_from_slice(&upper);
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Block {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct BlockClusterTree {
    pub tree: ClusterTree,
    pub eta: f64,
    pub near: Vec<Block>,
    pub far: Vec<Block>,
}

/// `max(diam(a), diam(b)) <= eta dist(a, b)`; touching or overlapping boxes
/// are never admissible.
pub fn admissible(a: &BBox, b: &BBox, eta: f64) -> bool {
    let dist = a.dist(b);
    dist > 0.0 && a.diam().max(b.diam()) <= eta * dist
}

/// Block partition from the recursion on `(root, root)`:
/// a pair is a leaf block if it is admissible or both clusters are leaves;
/// otherwise whichever clusters have sons are subdivided.
pub fn build_block_tree(tree: &ClusterTree, eta: f64) -> BlockClusterTree {
    let mut near = Vec::new();
    let mut far = Vec::new();
    let mut stack = vec![(0usize, 0usize)];
    while let Some((x, y)) = stack.pop() {
        let (nx, ny) = (&tree.nodes[x], &tree.nodes[y]);
        if admissible(&nx.bbox, &ny.bbox, eta) {
            far.push(Block { row: x, col: y });
            continue;
        }
        match (nx.sons, ny.sons) {
            (None, None) => near.push(Block { row: x, col: y }),
            (None, Some([y0, y1])) => {
                stack.push((x, y1));
                stack.push((x, y0));
            }
            (Some([x0, x1]), None) => {
                stack.push((x1, y));
                stack.push((x0, y));
            }
            (Some([x0, x1]), Some([y0, y1])) => {
                stack.push((x1, y1));
                stack.push((x1, y0));
                stack.push((x0, y1));
                stack.push((x0, y0));
            }
        }
    }
    BlockClusterTree {
        tree: tree.clone(),
        eta,
        near,
        far,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SparsityStats {
    pub c_sparse: usize,
    pub depth: usize,
    pub near_count: usize,
    pub far_count: usize,
    pub n_clusters: usize,
}

impl BlockClusterTree {
    pub fn sparsity_stats(&self) -> SparsityStats {
        let mut count = vec![0usize; self.tree.nodes.len()];
        for b in self.near.iter().chain(&self.far) {
            count[b.row] += 1;
            count[b.col] += 1;
        }
        SparsityStats {
            c_sparse: count.into_iter().max().unwrap_or(0),
            depth: self.tree.depth(),
            near_count: self.near.len(),
            far_count: self.far.len(),
            n_clusters: self.tree.nodes.len(),
        }
    }

    /// `row_start,row_end,col_start,col_end,kind` per block, in tree
    /// positions (half-open ranges).
    pub fn block_list_csv(&self) -> String {
        let mut out = String::from("row_start,row_end,col_start,col_end,kind\n");
        let kinds = self.near.iter().map(|b| (b, "near")).chain(self.far.iter().map(|b| (b, "far")));
        for (b, kind) in kinds {
            let (x, y) = (&self.tree.nodes[b.row], &self.tree.nodes[b.col]);
            let _ = writeln!(out, "{},{},{},{},{kind}", x.start, x.end, y.start, y.end);
        }
        out
    }
}
