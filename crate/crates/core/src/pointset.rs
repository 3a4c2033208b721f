//! Evaluation point sets: generation, validation, file I/O and
//! quasi-uniformity diagnostics.
//!
//! A [`PointSet`] fixes the row/column order of every matrix built on top of
//! it. Point `i` is matrix index `i` for the lifetime of the set; cluster
//! trees work on a permutation and translate back at the boundary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest point count the generators will produce unless told otherwise.
pub const DEFAULT_MAX_POINTS: usize = 1 << 24;

/// Axis-parallel box `[lo_0, hi_0] x ... x [lo_{d-1}, hi_{d-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::Config("box must have at least one axis".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(Error::Config(format!("invalid box bounds {lo:?} .. {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    /// Smallest box containing all `dim`-dimensional points in `coords`.
    pub fn enclosing(coords: &[f64], dim: usize) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in coords.chunks_exact(dim) {
            for a in 0..dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    /// Euclidean length of the main diagonal.
    pub fn diam(&self) -> f64 {
        (0..self.dim())
            .map(|a| self.width(a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance between the two boxes (zero if they touch).
    pub fn dist(&self, other: &BBox) -> f64 {
        (0..self.dim())
            .map(|a| {
                let gap = (self.lo[a] - other.hi[a])
                    .max(other.lo[a] - self.hi[a])
                    .max(0.0);
                gap * gap
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.width(a)).product()
    }

    /// Axis of the longest edge; ties go to the lowest axis index.
    pub fn longest_axis(&self) -> usize {
        let mut best = 0;
        for a in 1..self.dim() {
            if self.width(a) > self.width(best) {
                best = a;
            }
        }
        best
    }

    /// Halves the box along `axis`. The first half is the closed lower part.
    pub fn split(&self, axis: usize) -> (BBox, BBox) {
        let mid = 0.5 * (self.lo[axis] + self.hi[axis]);
        let mut lower = self.clone();
        let mut upper = self.clone();
        lower.hi[axis] = mid;
        upper.lo[axis] = mid;
        (lower, upper)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .enumerate()
            .all(|(a, &x)| self.lo[a] <= x && x <= self.hi[a])
    }
}

/// A finite, duplicate-free set of points in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
    bbox: BBox,
}

impl PointSet {
    /// Builds a point set from row-major coordinates, rejecting non-finite
    /// values and exact duplicates.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::UnsupportedDimension {
                dim,
                reason: "points need at least one coordinate",
            });
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: coords.len() % dim,
            });
        }
        if coords.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite { index: pos / dim });
        }
        if let Some((first, second)) = find_exact_duplicate(&coords, dim) {
            return Err(Error::DuplicatePoint { first, second });
        }
        let bbox = BBox::enclosing(&coords, dim);
        Ok(Self { dim, coords, bbox })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }
}

/// Returns the first pair `(i, j)`, `i < j`, of bitwise-equal points.
fn find_exact_duplicate(coords: &[f64], dim: usize) -> Option<(usize, usize)> {
    let n = coords.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    let pt = |i: usize| &coords[i * dim..(i + 1) * dim];
    let cmp = |a: &usize, b: &usize| {
        pt(*a)
            .iter()
            .zip(pt(*b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    order.sort_by(cmp);
    order
        .windows(2)
        .filter(|w| pt(w[0]).iter().zip(pt(w[1])).all(|(x, y)| x == y))
        .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
        .min()
}

/// `n_per_axis^dim` equispaced points in `bbox`, corners included, in
/// lexicographic order (axis 0 varies slowest).
pub fn generate_grid(n_per_axis: usize, dim: usize, bbox: &BBox) -> Result<PointSet> {
    if bbox.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bbox.dim(),
        });
    }
    generate_grid_axes(&vec![n_per_axis; dim], bbox, DEFAULT_MAX_POINTS)
}

/// Tensor grid with a separate point count per axis. A single point on an
/// axis sits at the lower bound.
pub fn generate_grid_axes(counts: &[usize], bbox: &BBox, max_points: usize) -> Result<PointSet> {
    let dim = counts.len();
    if bbox.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bbox.dim(),
        });
    }
    if counts.contains(&0) {
        return Err(Error::Config("grid needs at least one point per axis".into()));
    }
    let total = counts
        .iter()
        .try_fold(1usize, |acc, &c| acc.checked_mul(c))
        .filter(|&t| t <= max_points)
        .ok_or(Error::Size {
            what: "grid point count",
            got: counts.iter().fold(1usize, |a, &c| a.saturating_mul(c)),
            limit: max_points,
        })?;
    let axis_coord = |a: usize, i: usize| {
        if counts[a] == 1 {
            bbox.lo[a]
        } else if i == counts[a] - 1 {
            bbox.hi[a]
        } else {
            bbox.lo[a] + bbox.width(a) * i as f64 / (counts[a] - 1) as f64
        }
    };
    let mut coords = Vec::with_capacity(total * dim);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        for (a, &i) in idx.iter().enumerate() {
            coords.push(axis_coord(a, i));
        }
        for a in (0..dim).rev() {
            idx[a] += 1;
            if idx[a] < counts[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    PointSet::new(dim, coords)
}

const SOBOL_BITS: usize = 32;

fn sobol_directions(axis: usize) -> [u32; SOBOL_BITS] {
    let mut v = [0u32; SOBOL_BITS];
    for k in 0..SOBOL_BITS {
        v[k] = match axis {
            // van der Corput
            0 => 1u32 << (31 - k),
            // primitive polynomial x + 1, m_1 = 1
            _ if k == 0 => 1u32 << 31,
            _ => v[k - 1] ^ (v[k - 1] >> 1),
        };
    }
    v
}

/// First `2^m` points of the unscrambled Sobol sequence in `[0,1)^dim`,
/// Gray-code order, starting at the origin.
pub fn generate_lowdiscrepancy(m: u32, dim: usize) -> Result<PointSet> {
    if dim == 0 || dim > 2 {
        return Err(Error::UnsupportedDimension {
            dim,
            reason: "the low-discrepancy generator supports d <= 2; use a grid or a point file",
        });
    }
    if m > 24 {
        return Err(Error::Size {
            what: "low-discrepancy exponent m",
            got: m as usize,
            limit: 24,
        });
    }
    let n = 1usize << m;
    let dirs: Vec<[u32; SOBOL_BITS]> = (0..dim).map(sobol_directions).collect();
    let scale = 1.0 / (1u64 << 32) as f64;
    let mut state = vec![0u32; dim];
    let mut coords = Vec::with_capacity(n * dim);
    for i in 0..n {
        coords.extend(state.iter().map(|&x| x as f64 * scale));
        let c = (!i).trailing_zeros() as usize;
        for (s, v) in state.iter_mut().zip(&dirs) {
            *s ^= v[c];
        }
    }
    PointSet::new(dim, coords)
}

/// Quasi-uniformity diagnostics for a point set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniformityReport {
    pub min_pairwise_distance: f64,
    pub fill_distance_estimate: f64,
    pub c_u_estimate: f64,
}

fn min_pair(ps: &PointSet) -> (f64, usize, usize) {
    let n = ps.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = ps.point(i);
            let mut best = (f64::INFINITY, i, i);
            for j in i + 1..n {
                let d2: f64 = xi
                    .iter()
                    .zip(ps.point(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < best.0 {
                    best = (d2, i, j);
                }
            }
            best
        })
        .reduce(
            || (f64::INFINITY, 0, 0),
            |a, b| if b.0 < a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) { b } else { a },
        )
}

/// Exact minimum separation by an `O(N^2)` scan, fill distance sampled on a
/// tensor grid of candidate centres over the bounding box, and the implied
/// constant `C_u = max(h N^{1/d}, 1 / (q N^{1/d}), 1)`.
pub fn uniformity_report(ps: &PointSet) -> Result<UniformityReport> {
    let n = ps.len();
    if n < 2 {
        return Err(Error::Config("uniformity report needs at least two points".into()));
    }
    let (d2, i, j) = min_pair(ps);
    let min_dist = d2.sqrt();
    let diam = ps.bbox().diam();
    if min_dist <= 1e-14 * diam {
        return Err(Error::DuplicatePoint { first: i, second: j });
    }

    let dim = ps.dim();
    let per_axis = (4.0 * (n as f64).powf(1.0 / dim as f64)).ceil() as usize;
    let cap = if dim <= 2 { 256 } else { 48 };
    let res = per_axis.clamp(8, cap);
    let bbox = ps.bbox();
    let total = res.pow(dim as u32);
    let fill = (0..total)
        .into_par_iter()
        .map(|mut flat| {
            let mut c = vec![0.0; dim];
            for a in (0..dim).rev() {
                let k = flat % res;
                flat /= res;
                c[a] = bbox.lo[a] + bbox.width(a) * k as f64 / (res - 1) as f64;
            }
            ps.iter()
                .map(|p| p.iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .reduce(|| 0.0, f64::max);

    let root = (n as f64).powf(1.0 / dim as f64);
    let c_u = (fill * root).max(1.0 / (min_dist * root)).max(1.0);
    Ok(UniformityReport {
        min_pairwise_distance: min_dist,
        fill_distance_estimate: fill,
        c_u_estimate: c_u,
    })
}

/// Reads one point per line; fields separated by whitespace or commas.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_points(text: &str) -> Result<PointSet> {
    let mut dim = 0usize;
    let mut coords = Vec::new();
    let mut lines = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut count = 0;
        for tok in line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("not a number: {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite coordinate {tok:?}"),
                });
            }
            coords.push(v);
            count += 1;
        }
        if dim == 0 {
            dim = count;
        } else if count != dim {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {dim} columns, found {count}"),
            });
        }
        lines.push(line_no);
    }
    if lines.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            message: "no points".into(),
        });
    }
    PointSet::new(dim, coords).map_err(|e| match e {
        Error::DuplicatePoint { first, second } => Error::Parse {
            line: lines[second],
            message: format!("duplicate point (same as line {})", lines[first]),
        },
        other => other,
    })
}

pub fn load_points(path: impl AsRef<Path>) -> Result<PointSet> {
    parse_points(&fs::read_to_string(path)?)
}

/// Shortest round-trip decimal formatting, so `load(save(ps)) == ps` bitwise.
pub fn format_points(ps: &PointSet) -> String {
    let mut out = String::with_capacity(ps.coords().len() * 20);
    for p in ps.iter() {
        for (a, x) in p.iter().enumerate() {
            if a > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{x:?}");
        }
        out.push('\n');
    }
    out
}

pub fn save_points(ps: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_points(ps))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_min_dist(ps: &PointSet) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..ps.len() {
            for j in 0..ps.len() {
                if i != j {
                    let d = ps
                        .point(i)
                        .iter()
                        .zip(ps.point(j))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    best = best.min(d);
                }
            }
        }
        best
    }

    #[test]
    fn grid_corner_cases() {
        let g = generate_grid(2, 1, &BBox::unit(1)).unwrap();
        assert_eq!(g.coords(), &[0.0, 1.0]);
        let g = generate_grid(3, 1, &BBox::unit(1)).unwrap();
        assert_eq!(g.coords(), &[0.0, 0.5, 1.0]);
        let g = generate_grid(2, 2, &BBox::unit(2)).unwrap();
        assert_eq!(g.coords(), &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn grid_min_distance_is_spacing() {
        for n in 2..9 {
            let g = generate_grid(n, 2, &BBox::unit(2)).unwrap();
            let r = uniformity_report(&g).unwrap();
            assert!((r.min_pairwise_distance - 1.0 / (n - 1) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_overflow_is_size_error() {
        let err = generate_grid_axes(&[1 << 13, 1 << 13], &BBox::unit(2), DEFAULT_MAX_POINTS);
        assert!(matches!(err, Err(Error::Size { .. })));
        let err = generate_grid_axes(&[usize::MAX, 3], &BBox::unit(2), DEFAULT_MAX_POINTS);
        assert!(matches!(err, Err(Error::Size { .. })));
    }

    #[test]
    fn sobol_matches_reference_prefix() {
        // reference: unscrambled Sobol, first two dimensions
        let ps = generate_lowdiscrepancy(3, 2).unwrap();
        let want = [
            0.0, 0.0, 0.5, 0.5, 0.75, 0.25, 0.25, 0.75, 0.375, 0.375, 0.875, 0.875, 0.625,
            0.125, 0.125, 0.625,
        ];
        assert_eq!(ps.coords(), &want);
        assert_eq!(generate_lowdiscrepancy(0, 1).unwrap().coords(), &[0.0]);
    }

    #[test]
    fn sobol_one_dimensional_points_distinct_in_unit_interval() {
        let ps = generate_lowdiscrepancy(3, 1).unwrap();
        assert_eq!(ps.len(), 8);
        assert!(ps.coords().iter().all(|&x| (0.0..1.0).contains(&x)));
        let mut c = ps.coords().to_vec();
        c.sort_by(f64::total_cmp);
        c.dedup();
        assert_eq!(c.len(), 8);
    }

    #[test]
    fn sobol_rejects_three_dimensions() {
        assert!(matches!(
            generate_lowdiscrepancy(4, 3),
            Err(Error::UnsupportedDimension { dim: 3, .. })
        ));
        assert!(generate_lowdiscrepancy(25, 2).is_err());
    }

    #[test]
    fn sobol_is_deterministic() {
        let a = generate_lowdiscrepancy(10, 2).unwrap();
        let b = generate_lowdiscrepancy(10, 2).unwrap();
        assert_eq!(format_points(&a), format_points(&b));
    }

    #[test]
    fn sobol_32_points_report() {
        let ps = generate_lowdiscrepancy(5, 2).unwrap();
        let r = uniformity_report(&ps).unwrap();
        // brute force pair scan: 0.0883883476...
        assert_eq!(r.min_pairwise_distance, brute_min_dist(&ps));
        assert!((r.min_pairwise_distance - 0.125 / std::f64::consts::SQRT_2).abs() < 1e-15);
        assert!(r.min_pairwise_distance > 0.04);
        assert!(r.c_u_estimate <= 4.0, "{r:?}");
        assert!(r.c_u_estimate >= 1.0);
    }

    #[test]
    fn report_small_sets() {
        let ps = PointSet::new(1, vec![0.0, 1.0]).unwrap();
        assert_eq!(uniformity_report(&ps).unwrap().min_pairwise_distance, 1.0);
        let ps = PointSet::new(1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(uniformity_report(&ps).unwrap().min_pairwise_distance, 0.5);
        let one = PointSet::new(1, vec![0.0]).unwrap();
        assert!(uniformity_report(&one).is_err());
    }

    #[test]
    fn near_duplicates_are_degenerate() {
        let ps = PointSet::new(1, vec![0.0, 1.0, 1.0 + 1e-16 * 4.0]).unwrap();
        assert!(matches!(
            uniformity_report(&ps),
            Err(Error::DuplicatePoint { first: 1, second: 2 })
        ));
    }

    #[test]
    fn exact_duplicates_rejected() {
        let err = PointSet::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DuplicatePoint { first: 0, second: 2 }));
    }

    #[test]
    fn parse_roundtrip_and_errors() {
        let ps = PointSet::new(3, vec![0.1, 0.2, 0.3, 1.0 / 3.0, 2e-300, -7.5, 1e10, 0.0, 5.0])
            .unwrap();
        let back = parse_points(&format_points(&ps)).unwrap();
        assert_eq!(back, ps);

        let err = parse_points("# header\n1 2 3\n4, 5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_points("1 2\n3 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_points("").unwrap_err();
        assert!(err.to_string().contains("no points"));
        let err = parse_points("0 0\n1 1\n\n0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.txt");
        let ps = generate_lowdiscrepancy(4, 2).unwrap();
        save_points(&ps, &path).unwrap();
        assert_eq!(load_points(&path).unwrap(), ps);
    }

    #[test]
    fn box_geometry() {
        let a = BBox::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let b = BBox::new(vec![4.0, 6.0], vec![5.0, 7.0]).unwrap();
        assert_eq!(a.dist(&b), 5.0);
        assert_eq!(a.dist(&a), 0.0);
        assert_eq!(a.longest_axis(), 1);
        let sq = BBox::unit(2);
        assert_eq!(sq.longest_axis(), 0);
        let (lo, hi) = sq.split(0);
        assert_eq!(lo.hi, vec![0.5, 1.0]);
        assert_eq!(hi.lo, vec![0.5, 0.0]);
        assert_eq!(lo.volume(), 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn grid_spacing_is_min_distance(n in 2usize..12, dim in 1usize..4) {
                let g = generate_grid(n, dim, &BBox::unit(dim)).unwrap();
                let r = uniformity_report(&g).unwrap();
                prop_assert!((r.min_pairwise_distance - 1.0 / (n - 1) as f64).abs() < 1e-15);
            }

            #[test]
            fn report_min_matches_brute_force(raw in prop::collection::vec(0.0..1.0f64, 4..240)) {
                let mut c = raw;
                c.truncate(c.len() / 2 * 2);
                let ps = match PointSet::new(2, c) {
                    Ok(ps) => ps,
                    Err(_) => return Ok(()),
                };
                match uniformity_report(&ps) {
                    Ok(r) => {
                        prop_assert_eq!(r.min_pairwise_distance, brute_min_dist(&ps));
                        prop_assert!(r.c_u_estimate >= 1.0);
                    }
                    Err(e) => {
                        let dup = matches!(e, Error::DuplicatePoint { .. });
                        prop_assert!(dup, "unexpected error {}", e);
                    }
                }
            }

            #[test]
            fn lowdiscrepancy_is_pure(m in 0u32..11, dim in 1usize..3) {
                let a = generate_lowdiscrepancy(m, dim).unwrap();
                let b = generate_lowdiscrepancy(m, dim).unwrap();
                prop_assert_eq!(format_points(&a), format_points(&b));
            }
        }
    }
}
