//! H²-matrix compression of kernel matrices by tensor Chebyshev interpolation.
//!
//! For an admissible block `(X, Y)` the kernel is replaced by its interpolant
//! on `p^d` Chebyshev nodes in each cluster box,
//!
//! ```text
//! C|_{X x Y}  ~  V^X M^{XY} (V^Y)^T,   V^X_{in} = L^X_n(x_i),   M^{XY}_{nm} = rho(q^X_n, q^Y_m).
//! ```
//!
//! Bases are stored only at leaves; a parent basis is reached through
//! transfer matrices `T^{X'X}_{mn} = L^X_n(q^{X'}_m)` because
//! `V^X = V^{X'} T^{X'X}` on the rows of each son `X'` (interpolation
//! reproduces polynomials of degree `p - 1` exactly). Inadmissible leaf pairs
//! are stored densely.
//!
//! Coupling and near-field blocks of a symmetric kernel are stored once per
//! unordered pair `{X, Y}` and applied transposed for `(Y, X)`. For a
//! translation-invariant kernel, `M^{XY}` depends only on the shapes of the
//! two boxes and their offset, so blocks with congruent geometry share one
//! coupling matrix.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::{BlockClusterTree, ClusterTree};
use crate::dense::{dot, DenseSymMatrix};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::linop::LinearOperator;
use crate::pointset::{BBox, PointSet};

/// Largest supported rank `p^d`.
pub const MAX_RANK: usize = 4096;

/// Tensor Chebyshev interpolation of order `p` (`p` nodes per axis) in `d`
/// dimensions. Multi-indices are flattened with axis 0 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebBasis {
    pub p: usize,
    pub dim: usize,
    /// `cos((2k+1) pi / (2p))`, `k = 0..p`, on `[-1, 1]`.
    pub ref_nodes: Vec<f64>,
    /// Barycentric weights `(-1)^k sin((2k+1) pi / (2p))`.
    pub weights: Vec<f64>,
}

impl ChebBasis {
    pub fn new(p: usize, dim: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config("interpolation order p must be at least 1".into()));
        }
        let rank = p.checked_pow(dim as u32).unwrap_or(usize::MAX);
        if rank > MAX_RANK {
            return Err(Error::Size {
                what: "interpolation rank p^d",
                got: rank,
                limit: MAX_RANK,
            });
        }
        let theta = |k: usize| (2 * k + 1) as f64 * PI / (2 * p) as f64;
        Ok(Self {
            p,
            dim,
            ref_nodes: (0..p).map(|k| theta(k).cos()).collect(),
            weights: (0..p)
                .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 } * theta(k).sin())
                .collect(),
        })
    }

    pub fn rank(&self) -> usize {
        self.p.pow(self.dim as u32)
    }

    /// Row-major `rank x dim` node coordinates in `bbox`.
    pub fn nodes(&self, bbox: &BBox) -> Vec<f64> {
        let (p, d) = (self.p, self.dim);
        let mut out = Vec::with_capacity(self.rank() * d);
        for n in 0..self.rank() {
            let mut rest = n;
            for a in 0..d {
                let t = self.ref_nodes[rest % p];
                rest /= p;
                let c = 0.5 * (bbox.lo[a] + bbox.hi[a]);
                let h = 0.5 * (bbox.hi[a] - bbox.lo[a]);
                out.push(c + h * t);
            }
        }
        out
    }

    /// 1D Lagrange values at reference coordinate `t`.
    fn eval_1d(&self, t: f64, out: &mut [f64]) {
        if let Some(k) = self.ref_nodes.iter().position(|&tk| tk == t) {
            out.fill(0.0);
            out[k] = 1.0;
            return;
        }
        let mut sum = 0.0;
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights[k] / (t - self.ref_nodes[k]);
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }

    /// All `rank` tensor Lagrange values `L_n(x)` of the basis on `bbox`.
    /// Zero-width axes map to reference coordinate 0.
    pub fn eval_all(&self, bbox: &BBox, x: &[f64], out: &mut [f64]) {
        let (p, d) = (self.p, self.dim);
        let mut per_axis = vec![0.0; p * d];
        for a in 0..d {
            let h = 0.5 * (bbox.hi[a] - bbox.lo[a]);
            let t = if h > 0.0 {
                (x[a] - 0.5 * (bbox.lo[a] + bbox.hi[a])) / h
            } else {
                0.0
            };
            self.eval_1d(t, &mut per_axis[a * p..(a + 1) * p]);
        }
        for (n, o) in out.iter_mut().enumerate() {
            let mut rest = n;
            let mut v = 1.0;
            for a in 0..d {
                v *= per_axis[a * p + rest % p];
                rest /= p;
            }
            *o = v;
        }
    }

    pub fn eval(&self, bbox: &BBox, n: usize, x: &[f64]) -> f64 {
        let mut all = vec![0.0; self.rank()];
        self.eval_all(bbox, x, &mut all);
        all[n]
    }
}

/// Tensor Chebyshev nodes of order `p` in `bbox`, row-major `p^d x d`.
pub fn chebyshev_nodes(bbox: &BBox, p: usize) -> Result<Vec<f64>> {
    Ok(ChebBasis::new(p, bbox.dim())?.nodes(bbox))
}

/// `L_n(x)` for the order-`p` tensor basis on `bbox`.
pub fn lagrange_eval(bbox: &BBox, p: usize, n: usize, x: &[f64]) -> Result<f64> {
    let b = ChebBasis::new(p, bbox.dim())?;
    if n >= b.rank() {
        return Err(Error::Config(format!("basis index {n} out of range {}", b.rank())));
    }
    Ok(b.eval(bbox, n, x))
}

/// Reference to a stored block applied as-is or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockRef {
    other: usize,
    store: usize,
    transposed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct H2Stats {
    pub n: usize,
    pub p: usize,
    pub rank: usize,
    pub depth: usize,
    pub c_sparse: usize,
    pub near_count: usize,
    pub far_count: usize,
    pub stored_near_blocks: usize,
    pub stored_coupling_blocks: usize,
    pub storage_entries: usize,
}

#[derive(Debug, Clone)]
pub struct H2Matrix {
    bct: BlockClusterTree,
    basis: ChebBasis,
    /// Point coordinates in tree order, row-major.
    tree_coords: Vec<f64>,
    /// `|X| x rank`, row-major, for leaves only.
    leaf_basis: Vec<Option<Vec<f64>>>,
    /// `T^{X'X}` indexed by the son `X'`; `None` at the root.
    transfer: Vec<Option<Vec<f64>>>,
    /// Distinct coupling matrices, `rank x rank` each, back to back.
    coupling: Vec<f64>,
    /// Per stored far pair: index of its matrix in `coupling`.
    coupling_index: Vec<usize>,
    /// Stored near blocks `|x| x |y|`, back to back.
    near: Vec<f64>,
    near_entry_offsets: Vec<usize>,
    /// Cluster pairs `(x, y)`, `x <= y`, of the stored coupling blocks.
    far_pairs: Vec<(usize, usize)>,
    near_pairs: Vec<(usize, usize)>,
    /// Start of each near block's slot in the matvec scratch buffer: `|x|`
    /// entries for `M z_y`, then `|y|` for `M^T z_x` unless `x == y`.
    near_offsets: Vec<usize>,
    /// Per row cluster: far blocks in tree order.
    far_rows: Vec<Vec<BlockRef>>,
    /// Per row leaf: near blocks in tree order.
    near_rows: Vec<Vec<BlockRef>>,
    levels: Vec<Vec<usize>>,
}

impl H2Matrix {
    pub fn assemble(kernel: &Kernel, ps: &PointSet, bct: &BlockClusterTree, p: usize) -> Result<Self> {
        let tree = &bct.tree;
        if tree.n_points() != ps.len() || tree.dim != ps.dim() {
            return Err(Error::DimensionMismatch {
                expected: tree.n_points(),
                got: ps.len(),
            });
        }
        let basis = ChebBasis::new(p, ps.dim())?;
        let r = basis.rank();
        let d = ps.dim();
        let tree_coords: Vec<f64> = tree.perm.iter().flat_map(|&i| ps.point(i).to_vec()).collect();
        let n_nodes = tree.nodes.len();

        let leaf_basis: Vec<Option<Vec<f64>>> = (0..n_nodes)
            .into_par_iter()
            .map(|id| {
                let node = &tree.nodes[id];
                node.is_leaf()
                    .then(|| direct_basis(&basis, &node.bbox, &tree_coords[node.start * d..node.end * d]))
            })
            .collect();

        let transfer: Vec<Option<Vec<f64>>> = (0..n_nodes)
            .into_par_iter()
            .map(|id| {
                let node = &tree.nodes[id];
                node.parent.map(|parent| {
                    let son_nodes = basis.nodes(&node.bbox);
                    direct_basis(&basis, &tree.nodes[parent].bbox, &son_nodes)
                })
            })
            .collect();

        let node_points: Vec<Vec<f64>> =
            tree.nodes.par_iter().map(|n| basis.nodes(&n.bbox)).collect();

        let (far_unique, far_rows) = share_symmetric(n_nodes, bct.far.iter().map(|b| (b.row, b.col)));
        let coupling_index = coupling_classes(tree, &far_unique, kernel.is_translation_invariant());
        let n_distinct = coupling_index.iter().max().map_or(0, |m| m + 1);
        let mut representative = vec![usize::MAX; n_distinct];
        for (store, &c) in coupling_index.iter().enumerate().rev() {
            representative[c] = store;
        }
        let mut coupling = vec![0.0; n_distinct * r * r];
        coupling
            .par_chunks_mut(r * r)
            .zip(&representative)
            .try_for_each(|(m, &store)| {
                let (x, y) = far_unique[store];
                let (qx, qy) = (&node_points[x], &node_points[y]);
                for a in 0..r {
                    for b in 0..r {
                        m[a * r + b] = kernel
                            .eval(&qx[a * d..(a + 1) * d], &qy[b * d..(b + 1) * d])
                            .map_err(|e| block_error("far", x, y, e))?;
                    }
                }
                Ok::<(), Error>(())
            })?;

        let (near_unique, near_rows) = share_symmetric(n_nodes, bct.near.iter().map(|b| (b.row, b.col)));
        let mut near_entry_offsets = Vec::with_capacity(near_unique.len() + 1);
        near_entry_offsets.push(0);
        for &(x, y) in &near_unique {
            near_entry_offsets.push(near_entry_offsets.last().unwrap() + tree.nodes[x].len() * tree.nodes[y].len());
        }
        let mut near = vec![0.0; *near_entry_offsets.last().unwrap()];
        split_by_offsets(&mut near, &near_entry_offsets)
            .into_par_iter()
            .zip(&near_unique)
            .try_for_each(|(m, &(x, y))| {
                let (nx, ny) = (&tree.nodes[x], &tree.nodes[y]);
                let mut k = 0;
                for i in nx.range() {
                    for j in ny.range() {
                        m[k] = kernel
                            .eval(&tree_coords[i * d..(i + 1) * d], &tree_coords[j * d..(j + 1) * d])
                            .map_err(|e| block_error("near", x, y, e))?;
                        k += 1;
                    }
                }
                Ok::<(), Error>(())
            })?;

        let mut near_offsets = Vec::with_capacity(near_unique.len() + 1);
        near_offsets.push(0);
        for &(x, y) in &near_unique {
            let len = tree.nodes[x].len() + if x == y { 0 } else { tree.nodes[y].len() };
            near_offsets.push(near_offsets.last().unwrap() + len);
        }

        let mut levels = vec![Vec::new(); tree.depth() + 1];
        for (id, n) in tree.nodes.iter().enumerate() {
            levels[n.level].push(id);
        }

        Ok(Self {
            bct: bct.clone(),
            basis,
            tree_coords,
            leaf_basis,
            transfer,
            coupling,
            coupling_index,
            near,
            near_entry_offsets,
            far_pairs: far_unique,
            near_pairs: near_unique,
            near_offsets,
            far_rows,
            near_rows,
            levels,
        })
    }

    pub fn n(&self) -> usize {
        self.bct.tree.n_points()
    }

    pub fn order(&self) -> usize {
        self.basis.p
    }

    pub fn rank(&self) -> usize {
        self.basis.rank()
    }

    pub fn basis(&self) -> &ChebBasis {
        &self.basis
    }

    pub fn block_tree(&self) -> &BlockClusterTree {
        &self.bct
    }

    pub fn tree(&self) -> &ClusterTree {
        &self.bct.tree
    }

    pub fn leaf_basis(&self, node: usize) -> Option<&[f64]> {
        self.leaf_basis[node].as_deref()
    }

    pub fn transfer(&self, son: usize) -> Option<&[f64]> {
        self.transfer[son].as_deref()
    }

    /// `M^{XY}` for a far block, row-major `rank x rank`.
    pub fn coupling(&self, x: usize, y: usize) -> Option<Vec<f64>> {
        let r = self.rank();
        let br = self.far_rows[x].iter().find(|b| b.other == y)?;
        let m = self.coupling_block(self.coupling_index[br.store]);
        Some(if br.transposed { transpose(m, r, r) } else { m.to_vec() })
    }

    fn coupling_block(&self, class: usize) -> &[f64] {
        let rr = self.rank() * self.rank();
        &self.coupling[class * rr..(class + 1) * rr]
    }

    fn near_block(&self, store: usize) -> &[f64] {
        &self.near[self.near_entry_offsets[store]..self.near_entry_offsets[store + 1]]
    }

    /// Number of stored floating-point entries.
    pub fn storage_entries(&self) -> usize {
        let r = self.rank();
        self.leaf_basis.iter().flatten().map(Vec::len).sum::<usize>()
            + self.transfer.iter().flatten().count() * r * r
            + self.coupling.len()
            + self.near.len()
    }

    pub fn stats(&self) -> H2Stats {
        let s = self.bct.sparsity_stats();
        H2Stats {
            n: self.n(),
            p: self.order(),
            rank: self.rank(),
            depth: s.depth,
            c_sparse: s.c_sparse,
            near_count: s.near_count,
            far_count: s.far_count,
            stored_near_blocks: self.near_pairs.len(),
            stored_coupling_blocks: self.far_pairs.len(),
            storage_entries: self.storage_entries(),
        }
    }

    /// `C_p z` with `z` in original point order.
    pub fn matvec(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: z.len(),
            });
        }
        let zt = self.tree().to_tree_order(z);
        Ok(self.tree().from_tree_order(&self.matvec_tree_order(&zt)))
    }

    /// `C_p z` with `z` and the result in tree order.
    pub fn matvec_tree_order(&self, z: &[f64]) -> Vec<f64> {
        let tree = self.tree();
        let r = self.rank();
        let n_nodes = tree.nodes.len();

        // upward: zhat_X = (V^X)^T z|_X at leaves, sum_{X'} (T^{X'X})^T zhat_X' above
        let mut zhat: Vec<Vec<f64>> = vec![Vec::new(); n_nodes];
        for level in self.levels.iter().rev() {
            let computed: Vec<Vec<f64>> = level
                .par_iter()
                .map(|&id| {
                    let node = &tree.nodes[id];
                    let mut out = vec![0.0; r];
                    match node.sons {
                        None => {
                            let v = self.leaf_basis[id].as_ref().expect("leaf basis");
                            for (row, &zi) in v.chunks_exact(r).zip(&z[node.range()]) {
                                axpy(zi, row, &mut out);
                            }
                        }
                        Some(sons) => {
                            for s in sons {
                                let t = self.transfer[s].as_ref().expect("transfer");
                                for (row, &zs) in t.chunks_exact(r).zip(&zhat[s]) {
                                    axpy(zs, row, &mut out);
                                }
                            }
                        }
                    }
                    out
                })
                .collect();
            for (&id, v) in level.iter().zip(computed) {
                zhat[id] = v;
            }
        }

        // coupling: each stored block is read once and yields both M zhat_y
        // and M^T zhat_x; every cluster then sums its slots in a fixed order
        let mut far_out = vec![0.0; self.far_pairs.len() * 2 * r];
        far_out
            .par_chunks_mut(2 * r)
            .zip(&self.far_pairs)
            .zip(&self.coupling_index)
            .for_each(|((slot, &(x, y)), &c)| {
                let m = self.coupling_block(c);
                let (a, b) = slot.split_at_mut(r);
                block_apply_both(m, r, &zhat[y], &zhat[x], a, Some(b));
            });
        let mut yhat: Vec<Vec<f64>> = (0..n_nodes)
            .into_par_iter()
            .map(|x| {
                let mut out = vec![0.0; r];
                for br in &self.far_rows[x] {
                    let off = br.store * 2 * r + if br.transposed { r } else { 0 };
                    for (o, v) in out.iter_mut().zip(&far_out[off..off + r]) {
                        *o += v;
                    }
                }
                out
            })
            .collect();

        // downward: yhat_X' += T^{X'X} yhat_X
        for level in self.levels.iter().skip(1) {
            let computed: Vec<Vec<f64>> = level
                .par_iter()
                .map(|&id| {
                    let parent = tree.nodes[id].parent.expect("non-root");
                    let t = self.transfer[id].as_ref().expect("transfer");
                    let mut out = yhat[id].clone();
                    for (o, row) in out.iter_mut().zip(t.chunks_exact(r)) {
                        *o += dot(row, &yhat[parent]);
                    }
                    out
                })
                .collect();
            for (&id, v) in level.iter().zip(computed) {
                yhat[id] = v;
            }
        }

        // near field, same single-pass scheme as the coupling phase
        let mut near_out = vec![0.0; *self.near_offsets.last().unwrap_or(&0)];
        split_by_offsets(&mut near_out, &self.near_offsets)
            .into_par_iter()
            .zip(&self.near_pairs)
            .zip(split_by_offsets_ref(&self.near, &self.near_entry_offsets))
            .for_each(|((slot, &(x, y)), m)| {
                let (nx, ny) = (&tree.nodes[x], &tree.nodes[y]);
                let (zx, zy) = (&z[nx.range()], &z[ny.range()]);
                if x == y {
                    block_apply_both(m, ny.len(), zy, zx, slot, None);
                } else {
                    let (a, b) = slot.split_at_mut(nx.len());
                    block_apply_both(m, ny.len(), zy, zx, a, Some(b));
                }
            });

        // leaves: V^X yhat_X plus near-field slots
        let leaves: Vec<usize> = tree.leaves().collect();
        let pieces: Vec<Vec<f64>> = leaves
            .par_iter()
            .map(|&x| {
                let node = &tree.nodes[x];
                let v = self.leaf_basis[x].as_ref().expect("leaf basis");
                let mut out: Vec<f64> = v.chunks_exact(r).map(|row| dot(row, &yhat[x])).collect();
                for br in &self.near_rows[x] {
                    let (ox, _) = self.near_pairs[br.store];
                    let off = self.near_offsets[br.store] + if br.transposed { self.tree().nodes[ox].len() } else { 0 };
                    for (o, v) in out.iter_mut().zip(&near_out[off..off + node.len()]) {
                        *o += v;
                    }
                }
                out
            })
            .collect();
        let mut y = vec![0.0; self.n()];
        for (&x, piece) in leaves.iter().zip(pieces) {
            y[tree.nodes[x].range()].copy_from_slice(&piece);
        }
        y
    }

    /// `V^X` evaluated directly from the Lagrange basis of `X`, without
    /// transfer matrices.
    pub fn direct_cluster_basis(&self, node: usize) -> Vec<f64> {
        let n = &self.tree().nodes[node];
        let d = self.basis.dim;
        direct_basis(&self.basis, &n.bbox, &self.tree_coords[n.start * d..n.end * d])
    }

    /// `V^X` assembled from leaf bases and transfer matrices.
    pub fn nested_cluster_basis(&self, node: usize) -> Vec<f64> {
        let tree = self.tree();
        let r = self.rank();
        match tree.nodes[node].sons {
            None => self.leaf_basis[node].clone().expect("leaf basis"),
            Some(sons) => {
                let mut out = Vec::with_capacity(tree.nodes[node].len() * r);
                for s in sons {
                    let vs = self.nested_cluster_basis(s);
                    let t = self.transfer[s].as_ref().expect("transfer");
                    out.extend(matmul(&vs, t, r, r));
                }
                out
            }
        }
    }

    /// Dense `V^X M^{XY} (V^Y)^T` for a far block, or the stored entries of a
    /// near block, row-major `|X| x |Y|`, using directly evaluated bases.
    pub fn explicit_block(&self, x: usize, y: usize) -> Option<Vec<f64>> {
        let tree = self.tree();
        let (nx, ny) = (tree.nodes[x].len(), tree.nodes[y].len());
        let r = self.rank();
        if let Some(m) = self.coupling(x, y) {
            let vx = self.direct_cluster_basis(x);
            let vy = self.direct_cluster_basis(y);
            let vm = matmul(&vx, &m, r, r);
            let mut out = vec![0.0; nx * ny];
            for i in 0..nx {
                for j in 0..ny {
                    out[i * ny + j] = dot(&vm[i * r..(i + 1) * r], &vy[j * r..(j + 1) * r]);
                }
            }
            return Some(out);
        }
        let br = self.near_rows[x].iter().find(|b| b.other == y)?;
        let m = self.near_block(br.store);
        Some(if br.transposed { transpose(m, ny, nx) } else { m.to_vec() })
    }

    /// Block-by-block reference product in tree order; no transfer recursion.
    pub fn matvec_explicit_tree_order(&self, z: &[f64]) -> Vec<f64> {
        let tree = self.tree();
        let mut y = vec![0.0; self.n()];
        for b in self.bct.near.iter().chain(&self.bct.far) {
            let (nx, ny) = (&tree.nodes[b.row], &tree.nodes[b.col]);
            let blk = self.explicit_block(b.row, b.col).expect("block");
            for (i, row) in nx.range().zip(blk.chunks_exact(ny.len())) {
                y[i] += dot(row, &z[ny.range()]);
            }
        }
        y
    }

    /// Densified `C_p` in original point order.
    pub fn to_dense(&self, cap: usize) -> Result<DenseSymMatrix> {
        let n = self.n();
        if n > cap {
            return Err(Error::Size {
                what: "dense matrix size N",
                got: n,
                limit: cap,
            });
        }
        let tree = self.tree();
        let perm = &tree.perm;
        let mut data = vec![0.0; n * n];
        let blocks: Vec<_> = self.bct.near.iter().chain(&self.bct.far).collect();
        let dense_blocks: Vec<Vec<f64>> =
            blocks.par_iter().map(|b| self.explicit_block(b.row, b.col).expect("block")).collect();
        for (b, blk) in blocks.iter().zip(dense_blocks) {
            let (nx, ny) = (&tree.nodes[b.row], &tree.nodes[b.col]);
            for (i, row) in nx.range().zip(blk.chunks_exact(ny.len())) {
                for (j, &v) in ny.range().zip(row) {
                    data[perm[i] * n + perm[j]] = v;
                }
            }
        }
        let mut m = DenseSymMatrix::from_row_major(n, data, false)?;
        m.symmetrize();
        Ok(m)
    }

    /// `||C - C_p||_F`, computed block by block against a dense matrix in
    /// original point order.
    pub fn frobenius_error(&self, dense: &DenseSymMatrix) -> Result<f64> {
        if dense.n() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: dense.n(),
            });
        }
        let tree = self.tree();
        let perm = &tree.perm;
        let sq: f64 = self
            .bct
            .near
            .par_iter()
            .chain(self.bct.far.par_iter())
            .map(|b| {
                let (nx, ny) = (&tree.nodes[b.row], &tree.nodes[b.col]);
                let blk = self.explicit_block(b.row, b.col).expect("block");
                let mut s = 0.0;
                for (i, row) in nx.range().zip(blk.chunks_exact(ny.len())) {
                    for (j, &v) in ny.range().zip(row) {
                        let e = dense.get(perm[i], perm[j]) - v;
                        s += e * e;
                    }
                }
                s
            })
            .sum();
        Ok(sq.sqrt())
    }
}

impl LinearOperator for H2Matrix {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n(), "H2Matrix::apply: input length");
        let out = self.matvec(x).expect("length checked");
        y.copy_from_slice(&out);
    }
}

/// Wraps an H²-matrix so vectors are taken and returned in tree order,
/// avoiding the permutation on every product.
pub struct TreeOrder<'a>(pub &'a H2Matrix);

impl LinearOperator for TreeOrder<'_> {
    fn dim(&self) -> usize {
        self.0.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.0.matvec_tree_order(x));
    }
}

fn block_error(kind: &str, x: usize, y: usize, e: Error) -> Error {
    Error::LinearAlgebra(format!("kernel evaluation failed in {kind} block ({x}, {y}): {e}"))
}

/// Row-major `(#points) x rank` Lagrange values on `bbox`.
fn direct_basis(basis: &ChebBasis, bbox: &BBox, coords: &[f64]) -> Vec<f64> {
    let r = basis.rank();
    let d = basis.dim;
    let mut out = vec![0.0; coords.len() / d * r];
    for (x, row) in coords.chunks_exact(d).zip(out.chunks_exact_mut(r)) {
        basis.eval_all(bbox, x, row);
    }
    out
}

/// Assigns one storage slot per unordered pair and per-row references.
/// Splits `buf` into consecutive slices `offsets[i]..offsets[i + 1]`.
fn split_by_offsets<'a>(mut buf: &'a mut [f64], offsets: &[usize]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(offsets.len().saturating_sub(1));
    for w in offsets.windows(2) {
        let (head, tail) = buf.split_at_mut(w[1] - w[0]);
        out.push(head);
        buf = tail;
    }
    out
}

fn split_by_offsets_ref<'a>(buf: &'a [f64], offsets: &[usize]) -> Vec<&'a [f64]> {
    offsets.windows(2).map(|w| &buf[w[0]..w[1]]).collect()
}

fn share_symmetric(
    n_nodes: usize,
    blocks: impl Iterator<Item = (usize, usize)>,
) -> (Vec<(usize, usize)>, Vec<Vec<BlockRef>>) {
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut rows = vec![Vec::new(); n_nodes];
    for (x, y) in blocks {
        let key = (x.min(y), x.max(y));
        let store = *slot.entry(key).or_insert_with(|| {
            unique.push(key);
            unique.len() - 1
        });
        rows[x].push(BlockRef {
            other: y,
            store,
            transposed: x > y,
        });
    }
    (unique, rows)
}

/// Integer position of each cluster box: per axis, the number of halvings
/// from the root box and the index of the box among the `2^halvings` slabs.
/// `None` below a node whose sons were cut from its tight extent.
fn box_positions(tree: &ClusterTree) -> Vec<Option<(Vec<u32>, Vec<u64>)>> {
    let mut pos: Vec<Option<(Vec<u32>, Vec<u64>)>> = vec![None; tree.nodes.len()];
    pos[0] = Some((vec![0; tree.dim], vec![0; tree.dim]));
    // sons always follow their parent in the node list
    for id in 0..tree.nodes.len() {
        let node = &tree.nodes[id];
        let (Some(sons), Some((halvings, index)), false) = (node.sons, pos[id].clone(), node.resplit) else {
            continue;
        };
        let axis = node.bbox.longest_axis();
        for (k, s) in sons.into_iter().enumerate() {
            let (mut h, mut i) = (halvings.clone(), index.clone());
            h[axis] += 1;
            i[axis] = 2 * i[axis] + k as u64;
            pos[s] = Some((h, i));
        }
    }
    pos
}

/// Class of each stored far pair; pairs in one class have identical
/// coupling matrices. Without translation invariance every pair is its own
/// class. Classes are numbered in order of first appearance.
fn coupling_classes(tree: &ClusterTree, pairs: &[(usize, usize)], invariant: bool) -> Vec<usize> {
    if !invariant {
        return (0..pairs.len()).collect();
    }
    let pos = box_positions(tree);
    // (halvings of x, halvings of y, corner offset)
    type Key = (Vec<u32>, Vec<u32>, Vec<i64>);
    let mut classes: HashMap<Key, usize> = HashMap::new();
    let mut next = 0;
    pairs
        .iter()
        .map(|&(x, y)| {
            let key = match (&pos[x], &pos[y]) {
                (Some((hx, ix)), Some((hy, iy))) if hx.iter().chain(hy).all(|&h| h < 62) => {
                    // offset of the lower corners in units of the finer slab
                    let offset = (0..hx.len())
                        .map(|a| {
                            let h = hx[a].max(hy[a]);
                            ((iy[a] << (h - hy[a])) as i64) - ((ix[a] << (h - hx[a])) as i64)
                        })
                        .collect();
                    Some((hx.clone(), hy.clone(), offset))
                }
                _ => None,
            };
            let mut fresh = || {
                next += 1;
                next - 1
            };
            match key {
                Some(k) => *classes.entry(k).or_insert_with(fresh),
                None => fresh(),
            }
        })
        .collect()
}

/// `a = M z_col` and, if requested, `b = M^T z_row` in one pass over the
/// row-major `M` with `cols` columns.
fn block_apply_both(m: &[f64], cols: usize, z_col: &[f64], z_row: &[f64], a: &mut [f64], mut b: Option<&mut [f64]>) {
    for ((ai, row), &zr) in a.iter_mut().zip(m.chunks_exact(cols)).zip(z_row) {
        *ai = dot(row, z_col);
        if let Some(b) = b.as_deref_mut() {
            axpy(zr, row, b);
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `(m x k) * (k x n)`, row-major; `m` inferred from `a`.
fn matmul(a: &[f64], b: &[f64], k: usize, n: usize) -> Vec<f64> {
    let m = a.len() / k;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            axpy(a[i * k + l], &b[l * n..(l + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_block_tree, build_cluster_tree};
    use crate::kernels::{assemble_dense, MaternParams};
    use crate::pointset::{generate_grid, generate_lowdiscrepancy};
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    fn matern(lambda: f64, mu: f64) -> Kernel {
        Kernel::matern(MaternParams::new(1.0, lambda, mu, 2).unwrap())
    }

    fn build(ps: &PointSet, k: &Kernel, c_leaf: usize, eta: f64, p: usize) -> H2Matrix {
        let t = build_cluster_tree(ps, c_leaf).unwrap();
        H2Matrix::assemble(k, ps, &build_block_tree(&t, eta), p).unwrap()
    }

    #[test]
    fn node_examples() {
        let b = BBox::new(vec![0.0], vec![2.0]).unwrap();
        assert_eq!(chebyshev_nodes(&b, 1).unwrap(), vec![1.0]);
        let b = BBox::new(vec![-1.0], vec![1.0]).unwrap();
        let q = chebyshev_nodes(&b, 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q[0] - h).abs() < 1e-15 && (q[1] + h).abs() < 1e-15);
        let q = chebyshev_nodes(&BBox::unit(2), 2).unwrap();
        assert_eq!(q.len(), 8);
        // axis 0 fastest
        assert_eq!(q[1], q[3]);
        assert_eq!(q[0], q[4]);
        for pt in q.chunks_exact(2) {
            assert!(BBox::unit(2).contains(pt));
        }
    }

    #[test]
    fn lagrange_interpolates_and_sums_to_one() {
        let b = BBox::new(vec![0.0, -1.0], vec![2.0, 3.0]).unwrap();
        let basis = ChebBasis::new(5, 2).unwrap();
        let nodes = basis.nodes(&b);
        let mut vals = vec![0.0; basis.rank()];
        for (m, q) in nodes.chunks_exact(2).enumerate() {
            basis.eval_all(&b, q, &mut vals);
            for (n, &v) in vals.iter().enumerate() {
                assert!((v - if n == m { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        for (i, x) in rand_vec(200, 3).chunks_exact(2).enumerate() {
            let pt = [1.0 + 2.0 * x[0], 1.0 + 4.0 * x[1]];
            basis.eval_all(&b, &pt, &mut vals);
            let s: f64 = vals.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "{i}");
        }
        let sym = BBox::new(vec![-1.0], vec![1.0]).unwrap();
        assert!((lagrange_eval(&sym, 2, 0, &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((lagrange_eval(&sym, 2, 1, &[0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_axis_is_finite() {
        let b = BBox::new(vec![0.0, 0.5], vec![1.0, 0.5]).unwrap();
        let basis = ChebBasis::new(4, 2).unwrap();
        let mut vals = vec![0.0; 16];
        basis.eval_all(&b, &[0.3, 0.5], &mut vals);
        assert!(vals.iter().all(|v| v.is_finite()));
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_leaf_is_dense() {
        let ps = generate_grid(4, 2, &BBox::unit(2)).unwrap();
        let k = matern(0.5, 0.5);
        let h = build(&ps, &k, 20, 1.0, 3);
        let c = assemble_dense(&k, &ps).unwrap();
        assert_eq!(h.frobenius_error(&c).unwrap(), 0.0);
        let z = rand_vec(16, 1);
        let a = h.matvec(&z).unwrap();
        let b = c.matvec(&z);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(h.matvec(&[0.0; 16]).unwrap().iter().all(|&v| v == 0.0));
        assert!(h.matvec(&[1.0]).is_err());
    }

    #[test]
    fn polynomial_kernel_is_exact() {
        let c: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let ps = PointSet::new(1, c).unwrap();
        let k = Kernel::custom(1, Arc::new(|x: &[f64], y: &[f64]| x[0] * y[0])).unwrap();
        let dense = assemble_dense(&k, &ps).unwrap();
        for p in [2, 3, 5] {
            let h = build(&ps, &k, 8, 1.0, p);
            assert!(!h.block_tree().far.is_empty());
            let err = h.frobenius_error(&dense).unwrap();
            assert!(err <= 1e-12 * dense.frobenius(), "p={p}: {err}");
        }
    }

    #[test]
    fn nested_basis_identity() {
        let ps = generate_lowdiscrepancy(9, 2).unwrap();
        let h = build(&ps, &matern(0.5, 0.5), 10, 1.0, 4);
        for id in 0..h.tree().nodes.len() {
            let direct = h.direct_cluster_basis(id);
            let nested = h.nested_cluster_basis(id);
            let worst = direct.iter().zip(&nested).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 1e-12, "node {id}: {worst}");
        }
    }

    #[test]
    fn coupling_blocks_are_transposes() {
        let ps = generate_lowdiscrepancy(8, 2).unwrap();
        let k = Kernel::example_nonstationary(1.0, 2).unwrap();
        let h = build(&ps, &k, 10, 1.0, 3);
        let r = h.rank();
        let d = 2;
        for b in h.block_tree().far.iter().take(40) {
            let qx = h.basis().nodes(&h.tree().nodes[b.row].bbox);
            let qy = h.basis().nodes(&h.tree().nodes[b.col].bbox);
            let m = h.coupling(b.row, b.col).unwrap();
            for a in 0..r {
                for c in 0..r {
                    let direct = k.eval(&qy[c * d..(c + 1) * d], &qx[a * d..(a + 1) * d]).unwrap();
                    assert!((m[a * r + c] - direct).abs() <= 1e-15 * direct.abs().max(1e-300) * 4.0);
                }
            }
        }
    }

    #[test]
    fn shared_couplings_match_direct_evaluation() {
        let ps = generate_lowdiscrepancy(11, 2).unwrap();
        let k = matern(0.4, 0.5);
        let h = build(&ps, &k, 12, 1.0, 3);
        let (r, d) = (h.rank(), 2);
        let tree = h.tree();
        for b in &h.block_tree().far {
            let qx = h.basis.nodes(&tree.nodes[b.row].bbox);
            let qy = h.basis.nodes(&tree.nodes[b.col].bbox);
            let m = h.coupling(b.row, b.col).unwrap();
            for i in 0..r {
                for j in 0..r {
                    let want = k.eval(&qx[i * d..(i + 1) * d], &qy[j * d..(j + 1) * d]).unwrap();
                    assert!((m[i * r + j] - want).abs() <= 1e-13, "{} vs {want}", m[i * r + j]);
                }
            }
        }
        let distinct = h.coupling.len() / (r * r);
        assert!(distinct * 10 < h.far_pairs.len(), "{distinct} of {}", h.far_pairs.len());

        let ns = build(&ps, &Kernel::example_nonstationary(1.0, 2).unwrap(), 12, 1.0, 3);
        assert_eq!(ns.coupling.len(), ns.far_pairs.len() * r * r);
    }

    #[test]
    fn operator_is_symmetric() {
        let ps = generate_lowdiscrepancy(10, 2).unwrap();
        let h = build(&ps, &matern(0.3, 1.5), 20, 1.0, 4);
        for s in 0..5 {
            let z = rand_vec(ps.len(), 10 + s);
            let w = rand_vec(ps.len(), 20 + s);
            let a = dot(&z, &h.matvec(&w).unwrap());
            let b = dot(&w, &h.matvec(&z).unwrap());
            assert!((a - b).abs() <= 1e-11 * norm(&z) * norm(&w));
        }
    }

    #[test]
    fn fast_matches_explicit_blocks() {
        let c: Vec<f64> = (0..512).map(|i| (i as f64 + 0.5) / 512.0).collect();
        let ps = PointSet::new(1, c).unwrap();
        let h = build(&ps, &matern(1.0, 0.5), 20, 1.0, 4);
        for s in 0..10 {
            let z = rand_vec(512, s);
            let fast = h.matvec_tree_order(&z);
            let slow = h.matvec_explicit_tree_order(&z);
            let diff: Vec<f64> = fast.iter().zip(&slow).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) <= 1e-12 * norm(&z), "{}", norm(&diff));
        }
    }

    #[test]
    fn gaussian_error_decays_in_p() {
        let ps = generate_grid(16, 2, &BBox::unit(2)).unwrap();
        let k = matern(1.0, f64::INFINITY);
        let dense = assemble_dense(&k, &ps).unwrap();
        let errs: Vec<f64> = (2..=6)
            .map(|p| build(&ps, &k, 20, 1.0, p).frobenius_error(&dense).unwrap())
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= 0.5 * w[0], "{errs:?}");
        }
    }

    #[test]
    fn to_dense_matches_explicit_matvec() {
        let ps = generate_lowdiscrepancy(8, 2).unwrap();
        let h = build(&ps, &matern(0.5, 0.5), 16, 1.0, 3);
        let c = h.to_dense(4096).unwrap();
        let z = rand_vec(256, 4);
        let a = c.matvec(&z);
        let b = h.matvec(&z).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn storage_is_linear() {
        let mut per_point = vec![];
        for m in [9u32, 11, 13] {
            let ps = generate_lowdiscrepancy(m, 2).unwrap();
            let h = build(&ps, &matern(0.5, 0.5), 20, 1.0, 3);
            per_point.push(h.storage_entries() as f64 / (ps.len() * h.rank() * h.rank()) as f64);
        }
        // pinned regression bound on storage / (p^{2d} N)
        assert!(per_point.iter().all(|&c| c < 5.0), "{per_point:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn random_operators_are_symmetric(m in 5u32..10, p in 1usize..6, c_leaf in 1usize..24,
                                              eta in 0.3..2.5f64, lambda in 0.05..1.0f64,
                                              mu in prop::sample::select(vec![0.5, 1.5, 2.5, f64::INFINITY]),
                                              seed in any::<u64>()) {
                let ps = generate_lowdiscrepancy(m, 2).unwrap();
                let h = build(&ps, &matern(lambda, mu), c_leaf, eta, p);
                let z = rand_vec(ps.len(), seed);
                let w = rand_vec(ps.len(), seed ^ 0x9e37_79b9);
                let a = dot(&z, &h.matvec(&w).unwrap());
                let b = dot(&w, &h.matvec(&z).unwrap());
                prop_assert!((a - b).abs() <= 1e-11 * norm(&z) * norm(&w), "{a} vs {b}");
            }
        }
    }
}
