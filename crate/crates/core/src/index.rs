//! Immutable k-d tree over 8-bit code vectors.
//!
//! Construction splits each node on the dimension with the widest code spread
//! at the median code value (`left: code ≤ split < right`). Every node keeps
//! the tight bounding box of its points, which drives both the kNN lower bounds
//! and range-query pruning. The tree keeps a row-permuted copy of the codes so
//! leaves are contiguous in memory.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use crate::catalog::{write_atomic, QuantizedCatalog};
use crate::error::{invalid, Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"CBKD";
pub const INDEX_VERSION: u16 = 1;
pub const DEFAULT_LEAF_SIZE: usize = 32;

/// Inclusive axis-aligned box in code space. `0..=255` in a dimension means
/// that dimension is unconstrained.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeBox {
    pub lower: Vec<u8>,
    pub upper: Vec<u8>,
}

impl CodeBox {
    pub fn unbounded(dim: usize) -> Self {
        Self { lower: vec![0; dim], upper: vec![u8::MAX; dim] }
    }

    pub fn new(lower: Vec<u8>, upper: Vec<u8>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), found: upper.len() });
        }
        if let Some(j) = (0..lower.len()).find(|&j| lower[j] > upper[j]) {
            return Err(invalid(format!("box lower bound exceeds upper bound in dim {j}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, code: &[u8]) -> bool {
        code.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(c, (l, u))| l <= c && c <= u)
    }

    /// Dimensions whose bounds are narrower than the full code range.
    pub fn constrained_dims(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&j| self.lower[j] > 0 || self.upper[j] < u8::MAX)
            .collect()
    }

    fn intersects(&self, lo: &[u8], hi: &[u8]) -> bool {
        (0..self.dim()).all(|j| lo[j] <= self.upper[j] && self.lower[j] <= hi[j])
    }

    fn encloses(&self, lo: &[u8], hi: &[u8]) -> bool {
        (0..self.dim()).all(|j| self.lower[j] <= lo[j] && hi[j] <= self.upper[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnMode {
    Exact,
    /// Best-first search that stops after scanning `max_leaves` leaves.
    Approximate { max_leaves: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub distance: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Node {
    start: u32,
    end: u32,
    dim: u16,
    split: u8,
    /// Child node indices; `left == 0` marks a leaf (the root is never a child).
    left: u32,
    right: u32,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.left == 0
    }
}

/// Counters collected by [`KdTree::range_query_with_stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RangeStats {
    pub leaves_scanned: usize,
    pub nodes_taken_whole: usize,
    pub points_checked: usize,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    leaf_size: usize,
    nodes: Vec<Node>,
    /// Per node: `dim` lower bounds followed by `dim` upper bounds.
    bounds: Vec<u8>,
    /// Tree order position → catalog row.
    perm: Vec<u32>,
    /// Codes in tree order.
    codes: Vec<u8>,
}

impl KdTree {
    pub fn build(catalog: &QuantizedCatalog, leaf_size: usize) -> Result<Self> {
        if catalog.is_empty() {
            return Err(invalid("cannot index an empty catalog"));
        }
        if leaf_size == 0 {
            return Err(invalid("leaf size must be at least 1"));
        }
        if catalog.len() > u32::MAX as usize {
            return Err(invalid("catalog too large for 32-bit row indices"));
        }
        let mut builder = Builder {
            codes: &catalog.codes,
            dim: catalog.dim(),
            leaf_size,
            nodes: Vec::new(),
            bounds: Vec::new(),
            scratch: Vec::new(),
        };
        let mut perm: Vec<u32> = (0..catalog.len() as u32).collect();
        builder.build(&mut perm, 0);
        let Builder { nodes, bounds, dim, .. } = builder;
        let codes = gather_codes(&catalog.codes, dim, &perm);
        Ok(Self { dim, leaf_size, nodes, bounds, perm, codes })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn node_bounds(&self, node: usize) -> (&[u8], &[u8]) {
        let base = node * 2 * self.dim;
        (&self.bounds[base..base + self.dim], &self.bounds[base + self.dim..base + 2 * self.dim])
    }

    fn code_at(&self, pos: usize) -> &[u8] {
        &self.codes[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Rows of every leaf whose bounding box intersects `b`.
    pub fn leaves_overlapping(&self, b: &CodeBox) -> usize {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_leaf())
            .filter(|&i| {
                let (lo, hi) = self.node_bounds(i);
                b.intersects(lo, hi)
            })
            .count()
    }

    pub fn knn(&self, query: &[u8], k: usize, mode: KnnMode) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: query.len() });
        }
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        let budget = match mode {
            KnnMode::Exact => usize::MAX,
            KnnMode::Approximate { max_leaves } => max_leaves.max(1),
        };
        let k = k.min(self.len());
        // Max-heap of the best k so far, keyed by (squared distance, row).
        let mut best: BinaryHeap<(u32, u32)> = BinaryHeap::with_capacity(k + 1);
        let mut frontier = BinaryHeap::new();
        frontier.push(Reverse((self.box_distance(0, query), 0usize)));
        let mut leaves = 0usize;
        while let Some(Reverse((bound, node))) = frontier.pop() {
            if best.len() == k && bound > best.peek().expect("non-empty").0 {
                break;
            }
            let n = self.nodes[node];
            if n.is_leaf() {
                for pos in n.start as usize..n.end as usize {
                    let d = sq_dist(query, self.code_at(pos));
                    let row = self.perm[pos];
                    if best.len() < k {
                        best.push((d, row));
                    } else if (d, row) < *best.peek().expect("non-empty") {
                        best.pop();
                        best.push((d, row));
                    }
                }
                leaves += 1;
                if leaves >= budget {
                    break;
                }
            } else {
                for child in [n.left as usize, n.right as usize] {
                    frontier.push(Reverse((self.box_distance(child, query), child)));
                }
            }
        }
        let mut out: Vec<(u32, u32)> = best.into_vec();
        out.sort_unstable();
        Ok(out
            .into_iter()
            .map(|(d, row)| Neighbor { row: row as usize, distance: (d as f32).sqrt() })
            .collect())
    }

    fn box_distance(&self, node: usize, q: &[u8]) -> u32 {
        let (lo, hi) = self.node_bounds(node);
        let mut acc = 0u32;
        for j in 0..self.dim {
            let gap = lo[j].saturating_sub(q[j]).max(q[j].saturating_sub(hi[j])) as u32;
            acc += gap * gap;
        }
        acc
    }

    /// Rows whose codes lie inside `b`, in ascending row order.
    pub fn range_query(&self, b: &CodeBox) -> Result<Vec<usize>> {
        Ok(self.range_query_with_stats(b)?.0)
    }

    pub fn range_query_with_stats(&self, b: &CodeBox) -> Result<(Vec<usize>, RangeStats)> {
        let mut rows = Vec::new();
        let stats = self.for_each_in_box(b, |row| rows.push(row))?;
        rows.sort_unstable();
        Ok((rows, stats))
    }

    /// Calls `visit` once for every row inside `b`, in tree order.
    pub fn for_each_in_box(&self, b: &CodeBox, mut visit: impl FnMut(usize)) -> Result<RangeStats> {
        if b.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: b.dim() });
        }
        let active = b.constrained_dims();
        let mut stats = RangeStats::default();
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            let n = self.nodes[node];
            let (lo, hi) = self.node_bounds(node);
            if !b.intersects(lo, hi) {
                continue;
            }
            if b.encloses(lo, hi) {
                stats.nodes_taken_whole += 1;
                for &row in &self.perm[n.start as usize..n.end as usize] {
                    visit(row as usize);
                }
                continue;
            }
            if n.is_leaf() {
                stats.leaves_scanned += 1;
                for pos in n.start as usize..n.end as usize {
                    stats.points_checked += 1;
                    let code = self.code_at(pos);
                    if active.iter().all(|&j| b.lower[j] <= code[j] && code[j] <= b.upper[j]) {
                        visit(self.perm[pos] as usize);
                    }
                }
            } else {
                stack.push(n.right as usize);
                stack.push(n.left as usize);
            }
        }
        Ok(stats)
    }

    /// Checks the structural invariants against the catalog the tree indexes.
    pub fn validate(&self, catalog: &QuantizedCatalog) -> Result<()> {
        if catalog.len() != self.len() || catalog.dim() != self.dim {
            return Err(invalid("tree and catalog disagree on size or dimensionality"));
        }
        let mut seen = vec![false; self.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            let (lo, hi) = self.node_bounds(i);
            for pos in n.start as usize..n.end as usize {
                let row = self.perm[pos] as usize;
                let code = catalog.code(row);
                if code != self.code_at(pos) {
                    return Err(invalid(format!("tree code copy differs from catalog row {row}")));
                }
                if (0..self.dim).any(|j| code[j] < lo[j] || code[j] > hi[j]) {
                    return Err(invalid(format!("row {row} outside node {i} bounds")));
                }
                if n.is_leaf() {
                    if seen[row] {
                        return Err(invalid(format!("row {row} appears in two leaves")));
                    }
                    seen[row] = true;
                } else {
                    let mid = self.nodes[n.left as usize].end as usize;
                    let left_side = pos < mid;
                    let v = code[n.dim as usize];
                    if left_side != (v <= n.split) {
                        return Err(invalid(format!("row {row} on wrong side of node {i}")));
                    }
                }
            }
            if !n.is_leaf() {
                let (l, r) = (self.nodes[n.left as usize], self.nodes[n.right as usize]);
                if l.start != n.start || l.end != r.start || r.end != n.end {
                    return Err(invalid(format!("children of node {i} do not tile it")));
                }
            }
        }
        if let Some(row) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("row {row} is in no leaf")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u16).to_le_bytes());
        buf.extend_from_slice(&(self.leaf_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        for n in &self.nodes {
            buf.extend_from_slice(&n.start.to_le_bytes());
            buf.extend_from_slice(&n.end.to_le_bytes());
            buf.extend_from_slice(&n.dim.to_le_bytes());
            buf.push(n.split);
            buf.extend_from_slice(&n.left.to_le_bytes());
            buf.extend_from_slice(&n.right.to_le_bytes());
        }
        buf.extend_from_slice(&self.bounds);
        for p in &self.perm {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    /// Restores a serialized tree. The codes themselves are not stored in the
    /// index file; they are re-gathered from `catalog`, which must be the
    /// catalog the tree was built from.
    pub fn from_bytes(bytes: &[u8], catalog: &QuantizedCatalog) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let dim = r.u16()? as usize;
        let leaf_size = r.u32()? as usize;
        let n = r.u64()? as usize;
        let node_count = r.u32()? as usize;
        if dim != catalog.dim() || n != catalog.len() {
            return Err(Error::Format(format!(
                "index covers {n} rows of width {dim}, catalog has {} of width {}",
                catalog.len(),
                catalog.dim()
            )));
        }
        let mut nodes = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            nodes.push(Node {
                start: r.u32()?,
                end: r.u32()?,
                dim: r.u16()?,
                split: r.take(1)?[0],
                left: r.u32()?,
                right: r.u32()?,
            });
        }
        let bounds = r.take(node_count * 2 * dim)?.to_vec();
        let perm = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in index file".into()));
        }
        for node in &nodes {
            let bad_child = !node.is_leaf()
                && (node.left as usize >= node_count || node.right as usize >= node_count);
            if bad_child || node.start > node.end || node.end as usize > n {
                return Err(Error::Format("corrupt index node".into()));
            }
        }
        if perm.iter().any(|&p| p as usize >= n) {
            return Err(Error::Format("corrupt index permutation".into()));
        }
        let codes = gather_codes(&catalog.codes, dim, &perm);
        let tree = Self { dim, leaf_size, nodes, bounds, perm, codes };
        tree.validate(catalog).map_err(|e| Error::Format(e.to_string()))?;
        Ok(tree)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>, catalog: &QuantizedCatalog) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, catalog)
    }

    /// `(rows, dimension)` from an index file header.
    pub fn read_shape(path: impl AsRef<Path>) -> Result<(usize, usize)> {
        use std::io::Read;
        let mut head = Vec::with_capacity(20);
        std::fs::File::open(path)?.take(20).read_to_end(&mut head)?;
        let mut r = ByteReader { bytes: &head, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let dim = r.u16()? as usize;
        r.u32()?;
        Ok((r.u64()? as usize, dim))
    }
}

fn sq_dist(a: &[u8], b: &[u8]) -> u32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i32 - y as i32;
            (d * d) as u32
        })
        .sum()
}

fn gather_codes(codes: &[u8], dim: usize, perm: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(perm.len() * dim);
    for &row in perm {
        let row = row as usize;
        out.extend_from_slice(&codes[row * dim..(row + 1) * dim]);
    }
    out
}

struct Builder<'a> {
    codes: &'a [u8],
    dim: usize,
    leaf_size: usize,
    nodes: Vec<Node>,
    bounds: Vec<u8>,
    scratch: Vec<u32>,
}

impl Builder<'_> {
    /// Builds the subtree over `rows` (tree positions starting at `offset`)
    /// and returns its node index.
    fn build(&mut self, rows: &mut [u32], offset: usize) -> usize {
        let d = self.dim;
        let mut lo = vec![u8::MAX; d];
        let mut hi = vec![0u8; d];
        for &row in rows.iter() {
            let code = &self.codes[row as usize * d..(row as usize + 1) * d];
            for j in 0..d {
                lo[j] = lo[j].min(code[j]);
                hi[j] = hi[j].max(code[j]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            start: offset as u32,
            end: (offset + rows.len()) as u32,
            dim: 0,
            split: 0,
            left: 0,
            right: 0,
        });
        self.bounds.extend_from_slice(&lo);
        self.bounds.extend_from_slice(&hi);

        // Widest spread, lowest dimension on ties.
        let (split_dim, spread) = (0..d)
            .map(|j| (j, hi[j] - lo[j]))
            .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if rows.len() <= self.leaf_size || spread == 0 {
            return id;
        }

        let mut hist = [0usize; 256];
        for &row in rows.iter() {
            hist[self.codes[row as usize * d + split_dim] as usize] += 1;
        }
        let target = rows.len() / 2;
        let mut cum = 0;
        let mut split = lo[split_dim];
        for v in lo[split_dim]..=hi[split_dim] {
            cum += hist[v as usize];
            if cum >= target {
                split = v;
                break;
            }
        }
        if split == hi[split_dim] {
            // Everything would go left; step down to the previous occupied value.
            split = (lo[split_dim]..hi[split_dim])
                .rev()
                .find(|&v| hist[v as usize] > 0)
                .expect("spread > 0 implies a value below the max");
        }

        // Stable partition keeps rows ascending within each side.
        self.scratch.clear();
        let mut write = 0;
        for i in 0..rows.len() {
            let row = rows[i];
            if self.codes[row as usize * d + split_dim] <= split {
                rows[write] = row;
                write += 1;
            } else {
                self.scratch.push(row);
            }
        }
        rows[write..].copy_from_slice(&self.scratch);

        let (left_rows, right_rows) = rows.split_at_mut(write);
        let left = self.build(left_rows, offset);
        let right = self.build(right_rows, offset + write);
        let node = &mut self.nodes[id];
        node.dim = split_dim as u16;
        node.split = split;
        node.left = left as u32;
        node.right = right as u32;
        id
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or(
            Error::Truncated { expected: (self.pos + len) as u64, found: self.bytes.len() as u64 },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
