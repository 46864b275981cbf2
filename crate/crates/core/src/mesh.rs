//! Regular triangular mesh over a square patch and the grid↔mesh maps.
//!
//! Patch coordinates put cell `(row, col)` at `(x, y) = (col, row)`. Mesh
//! rows are `r·√3/2` apart with odd rows shifted by `r/2`; nodes are kept
//! when they fall inside `[0, side-1]²`.

use crate::error::{Error, Result};

const LATTICE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub side: usize,
    pub spacing: usize,
    /// Node positions `(x, y)` in patch coordinates.
    pub nodes: Vec<(f64, f64)>,
    /// Undirected edges with `a < b`.
    pub edges: Vec<(usize, usize)>,
    pub neighbors: Vec<Vec<usize>>,
}

impl Mesh {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Both orientations of every edge as `(source, destination)`.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for &(a, b) in &self.edges {
            out.push((a, b));
            out.push((b, a));
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &m in &self.neighbors[n] {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn build_mesh(side: usize, spacing: usize) -> Result<Mesh> {
    if spacing == 0 || side == 0 {
        return Err(Error::invalid("mesh side and spacing must be >= 1"));
    }
    if spacing > side {
        return Err(Error::invalid(format!("mesh spacing {spacing} exceeds patch side {side}")));
    }
    let r = spacing as f64;
    let dy = r * 3f64.sqrt() / 2.0;
    let max = (side - 1) as f64;

    // row-major lattice with (row, column) -> node index
    let mut nodes = Vec::new();
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut m = 0usize;
    while m as f64 * dy <= max + LATTICE_TOL {
        let y = m as f64 * dy;
        let x0 = if m % 2 == 1 { r / 2.0 } else { 0.0 };
        let mut row = Vec::new();
        let mut n = 0usize;
        while x0 + n as f64 * r <= max + LATTICE_TOL {
            row.push(nodes.len());
            nodes.push((x0 + n as f64 * r, y));
            n += 1;
        }
        rows.push(row);
        m += 1;
    }

    let mut neighbors = vec![Vec::new(); nodes.len()];
    let mut edges = Vec::new();
    let mut link = |a: usize, b: usize, neighbors: &mut Vec<Vec<usize>>| {
        let (pa, pb) = (nodes[a], nodes[b]);
        let d = (pa.0 - pb.0).hypot(pa.1 - pb.1);
        if (d - r).abs() <= LATTICE_TOL {
            edges.push((a.min(b), a.max(b)));
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
    };
    for (m, row) in rows.iter().enumerate() {
        for w in row.windows(2) {
            link(w[0], w[1], &mut neighbors);
        }
        if let Some(next) = rows.get(m + 1) {
            for &a in row {
                for &b in next {
                    link(a, b, &mut neighbors);
                }
            }
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    edges.sort_unstable();
    Ok(Mesh {
        side,
        spacing,
        nodes,
        edges,
        neighbors,
    })
}

/// Cell↔node assignment used by the encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeshMap {
    /// For each node, the patch cells (row-major index) nearest to it.
    pub node_cells: Vec<Vec<usize>>,
    /// For each cell, its nearest node.
    pub cell_node: Vec<usize>,
    /// For each cell, the distance to its nearest node, in cells.
    pub cell_distance: Vec<f64>,
}

pub fn build_maps(mesh: &Mesh, side: usize) -> GridMeshMap {
    let mut node_cells = vec![Vec::new(); mesh.len()];
    let mut cell_node = Vec::with_capacity(side * side);
    let mut cell_distance = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64, row as f64);
            let mut best = (f64::INFINITY, 0usize);
            for (k, &(nx, ny)) in mesh.nodes.iter().enumerate() {
                let d2 = (x - nx).powi(2) + (y - ny).powi(2);
                // strict comparison keeps the lowest index on ties
                if d2 < best.0 {
                    best = (d2, k);
                }
            }
            node_cells[best.1].push(row * side + col);
            cell_node.push(best.1);
            cell_distance.push(best.0.sqrt());
        }
    }
    GridMeshMap {
        node_cells,
        cell_node,
        cell_distance,
    }
}
