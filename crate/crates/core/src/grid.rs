//! Periodic lattices, grid functions and their binary dump format.
//!
//! A [`Grid`] is the torus `[0, L)^d` with `m` equispaced nodes per unit
//! length, so `n = L m` nodes per axis and spacing `h = 1/m`. Node values are
//! stored row-major with the last axis fastest.
//!
//! # Dump layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | type        | field                                  |
//! |--------|-------------|----------------------------------------|
//! | 0      | `[u8; 4]`   | magic `HGF1`                           |
//! | 4      | `u16`       | format version (1)                     |
//! | 6      | `u8`        | quantity tag                           |
//! | 7      | `u8`        | dimension `d`                          |
//! | 8      | `u32`       | torus side `L` (unit cells)            |
//! | 12     | `u32`       | points per unit cell `m`               |
//! | 16     | `u32`       | components per node                    |
//! | 20     | `u32`       | reserved, zero                         |
//! | 24     | `u64`       | step count `S`                         |
//! | 32     | `f64`       | scheme time step `dt`                  |
//! | 40     | `f64 * S`   | snapshot times                         |
//! | ...    | `f64 * S*C*n^d` | values, `[step][component][node]`  |

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub cells: usize,
    pub per_cell: usize,
}

impl Grid {
    pub fn new(dim: usize, cells: usize, per_cell: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(invalid("dim", format!("must be 1, 2 or 3, got {dim}")));
        }
        if cells == 0 {
            return Err(invalid("cells", "must be positive"));
        }
        if per_cell == 0 {
            return Err(invalid("per_cell", "must be positive"));
        }
        Ok(Grid {
            dim,
            cells,
            per_cell,
        })
    }

    /// Nodes per axis.
    #[inline]
    pub fn n(&self) -> usize {
        self.cells * self.per_cell
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.per_cell as f64
    }

    #[inline]
    pub fn side(&self) -> f64 {
        self.cells as f64
    }

    /// Total number of nodes.
    #[inline]
    pub fn len(&self) -> usize {
        self.n().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Quadrature weight of one node, `h^d`.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.n().pow((self.dim - 1 - axis) as u32)
    }

    pub fn coords(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let n = self.n();
        let mut c = [0; MAX_DIM];
        for axis in (0..self.dim).rev() {
            c[axis] = idx % n;
            idx /= n;
        }
        c
    }

    /// Linear index of (possibly negative or overflowing) integer coordinates,
    /// wrapped onto the torus.
    pub fn index_wrapped(&self, coords: &[i64]) -> usize {
        let n = self.n() as i64;
        coords[..self.dim]
            .iter()
            .fold(0usize, |acc, &c| acc * n as usize + c.rem_euclid(n) as usize)
    }

    /// Periodic neighbour along `axis` (`forward` = +1 step).
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, forward: bool) -> usize {
        let n = self.n();
        let s = self.stride(axis);
        let c = (idx / s) % n;
        if forward {
            if c + 1 == n {
                idx - (n - 1) * s
            } else {
                idx + s
            }
        } else if c == 0 {
            idx + (n - 1) * s
        } else {
            idx - s
        }
    }

    /// Node position in `[0, L)^d`.
    pub fn position(&self, idx: usize) -> [f64; MAX_DIM] {
        let c = self.coords(idx);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = c[a] as f64 * self.h();
        }
        x
    }

    /// Node position wrapped into the signed window `[-L/2, L/2)^d`.
    pub fn signed_position(&self, idx: usize) -> [f64; MAX_DIM] {
        let c = self.coords(idx);
        let n = self.n();
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            let ci = if 2 * c[a] >= n {
                c[a] as f64 - n as f64
            } else {
                c[a] as f64
            };
            x[a] = ci * self.h();
        }
        x
    }

    /// Nodes of the unit cell `Q_1(site)`, i.e. offsets in `[-1/2, 1/2)^d`
    /// around the site's node.
    pub fn unit_cell_nodes(&self, site: &[i64]) -> Vec<usize> {
        let m = self.per_cell as i64;
        let lo = -(m / 2);
        let offsets: Vec<i64> = (lo..lo + m).collect();
        let mut out = Vec::with_capacity(self.per_cell.pow(self.dim as u32));
        let mut c = [0i64; MAX_DIM];
        let total = self.per_cell.pow(self.dim as u32);
        for k in 0..total {
            let mut r = k;
            for a in (0..self.dim).rev() {
                c[a] = site[a] * m + offsets[r % self.per_cell];
                r /= self.per_cell;
            }
            out.push(self.index_wrapped(&c[..self.dim]));
        }
        out
    }
}

/// Forward-difference gradient, component-major: `out[a * len + i]`.
pub fn forward_gradient(grid: &Grid, u: &[f64], out: &mut [f64]) {
    let len = grid.len();
    let inv_h = 1.0 / grid.h();
    debug_assert_eq!(u.len(), len);
    debug_assert_eq!(out.len(), grid.dim * len);
    for a in 0..grid.dim {
        let o = &mut out[a * len..(a + 1) * len];
        for i in 0..len {
            o[i] = (u[grid.neighbor(i, a, true)] - u[i]) * inv_h;
        }
    }
}

/// Backward-difference divergence of a component-major vector field. This is
/// minus the adjoint of [`forward_gradient`].
pub fn backward_divergence(grid: &Grid, f: &[f64], out: &mut [f64]) {
    let len = grid.len();
    let inv_h = 1.0 / grid.h();
    out.iter_mut().for_each(|v| *v = 0.0);
    for a in 0..grid.dim {
        let fa = &f[a * len..(a + 1) * len];
        for i in 0..len {
            out[i] += (fa[i] - fa[grid.neighbor(i, a, false)]) * inv_h;
        }
    }
}

/// Standard `2d+1`-point Laplacian.
pub fn laplacian(grid: &Grid, u: &[f64], out: &mut [f64]) {
    let len = grid.len();
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    for i in 0..len {
        let mut s = -2.0 * grid.dim as f64 * u[i];
        for a in 0..grid.dim {
            s += u[grid.neighbor(i, a, true)] + u[grid.neighbor(i, a, false)];
        }
        out[i] = s * inv_h2;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    Generic,
    V,
    GradV,
    Z,
    Chi,
    GradChi,
    Flux,
    U,
    W,
    Phi,
}

impl Quantity {
    pub fn tag(self) -> u8 {
        match self {
            Quantity::Generic => 0,
            Quantity::V => 1,
            Quantity::GradV => 2,
            Quantity::Z => 3,
            Quantity::Chi => 4,
            Quantity::GradChi => 5,
            Quantity::Flux => 6,
            Quantity::U => 7,
            Quantity::W => 8,
            Quantity::Phi => 9,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Quantity::Generic,
            1 => Quantity::V,
            2 => Quantity::GradV,
            3 => Quantity::Z,
            4 => Quantity::Chi,
            5 => Quantity::GradChi,
            6 => Quantity::Flux,
            7 => Quantity::U,
            8 => Quantity::W,
            9 => Quantity::Phi,
            _ => return None,
        })
    }
}

/// Values of a scalar or vector field on a [`Grid`], optionally at several
/// snapshot times. Layout is `[step][component][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub components: usize,
    pub tag: Quantity,
    /// Time step of the scheme that produced the data (0 for static data).
    pub dt: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: Grid, components: usize, tag: Quantity) -> Self {
        GridFunction {
            grid,
            components,
            tag,
            dt: 0.0,
            times: vec![0.0],
            values: vec![0.0; grid.len() * components],
        }
    }

    /// Static scalar field from a closure of the node position.
    pub fn from_fn(grid: Grid, tag: Quantity, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|i| f(&grid.position(i)[..grid.dim]))
            .collect();
        GridFunction {
            grid,
            components: 1,
            tag,
            dt: 0.0,
            times: vec![0.0],
            values,
        }
    }

    pub fn steps(&self) -> usize {
        self.times.len()
    }

    fn frame_len(&self) -> usize {
        self.grid.len() * self.components
    }

    /// All components at snapshot `k`.
    pub fn frame(&self, k: usize) -> &[f64] {
        let fl = self.frame_len();
        &self.values[k * fl..(k + 1) * fl]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        let fl = self.frame_len();
        &mut self.values[k * fl..(k + 1) * fl]
    }

    pub fn component(&self, k: usize, c: usize) -> &[f64] {
        let len = self.grid.len();
        &self.frame(k)[c * len..(c + 1) * len]
    }

    /// Appends one snapshot.
    pub fn push_frame(&mut self, t: f64, frame: &[f64]) {
        assert_eq!(frame.len(), self.frame_len());
        self.times.push(t);
        self.values.extend_from_slice(frame);
    }

    /// Empty trajectory container.
    pub fn trajectory(grid: Grid, components: usize, tag: Quantity, dt: f64) -> Self {
        GridFunction {
            grid,
            components,
            tag,
            dt,
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Snapshot `k` as a static single-frame function.
    pub fn snapshot(&self, k: usize) -> GridFunction {
        GridFunction {
            grid: self.grid,
            components: self.components,
            tag: self.tag,
            dt: self.dt,
            times: vec![self.times[k]],
            values: self.frame(k).to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * (self.times.len() + self.values.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.tag.tag());
        out.push(self.grid.dim as u8);
        out.extend_from_slice(&(self.grid.cells as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid.per_cell as u32).to_le_bytes());
        out.extend_from_slice(&(self.components as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(self.times.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        for t in &self.times {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a dump. Every header field is validated and the payload length
    /// must match exactly.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Decode(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let tag = Quantity::from_tag(bytes[6]).ok_or_else(|| bad("unknown quantity tag"))?;
        let dim = bytes[7] as usize;
        let cells = u32_at(8) as usize;
        let per_cell = u32_at(12) as usize;
        let components = u32_at(16) as usize;
        if u32_at(20) != 0 {
            return Err(bad("reserved field is not zero"));
        }
        let steps = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let dt = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let grid = Grid::new(dim, cells, per_cell).map_err(|e| Error::Decode(e.to_string()))?;
        if components == 0 {
            return Err(bad("zero components"));
        }
        if !dt.is_finite() || dt < 0.0 {
            return Err(bad("invalid dt"));
        }
        let steps = usize::try_from(steps).map_err(|_| bad("step count overflow"))?;
        let nodes = grid
            .n()
            .checked_pow(dim as u32)
            .ok_or_else(|| bad("grid size overflow"))?;
        let value_count = steps
            .checked_mul(components)
            .and_then(|v| v.checked_mul(nodes))
            .ok_or_else(|| bad("payload size overflow"))?;
        let expected = value_count
            .checked_add(steps)
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| bad("payload size overflow"))?;
        if bytes.len() != expected {
            return Err(Error::Decode(format!(
                "payload length {} does not match header ({expected})",
                bytes.len()
            )));
        }
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let times: Vec<f64> = (0..steps).map(|k| f64_at(HEADER_LEN + 8 * k)).collect();
        if times.iter().any(|t| !t.is_finite()) {
            return Err(bad("non-finite snapshot time"));
        }
        let base = HEADER_LEN + 8 * steps;
        let values = (0..value_count).map(|k| f64_at(base + 8 * k)).collect();
        Ok(GridFunction {
            grid,
            components,
            tag,
            dt,
            times,
            values,
        })
    }
}

const MAGIC: &[u8; 4] = b"HGF1";
const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 40;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn periodic_neighbors_wrap() {
        let g = Grid::new(2, 2, 2).unwrap();
        // n = 4, node (0, 3) -> forward along axis 1 wraps to (0, 0)
        let i = 3;
        assert_eq!(g.neighbor(i, 1, true), 0);
        assert_eq!(g.neighbor(0, 1, false), 3);
        assert_eq!(g.neighbor(0, 0, false), 12);
        assert_eq!(g.neighbor(12, 0, true), 0);
        assert_eq!(g.index_wrapped(&[-1, 5]), 12 + 1);
    }

    #[test]
    fn signed_positions_are_centered() {
        let g = Grid::new(1, 4, 2).unwrap();
        let xs: Vec<f64> = (0..g.len()).map(|i| g.signed_position(i)[0]).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0, 1.5, -2.0, -1.5, -1.0, -0.5]);
    }

    #[test]
    fn unit_cell_nodes_cover_one_cell() {
        let g = Grid::new(2, 4, 4).unwrap();
        let nodes = g.unit_cell_nodes(&[0, 0]);
        assert_eq!(nodes.len(), 16);
        for &i in &nodes {
            let x = g.signed_position(i);
            assert!(x[0] >= -0.5 && x[0] < 0.5 && x[1] >= -0.5 && x[1] < 0.5);
        }
    }

    #[test]
    fn decode_rejects_truncation_and_bad_magic() {
        let g = Grid::new(1, 2, 2).unwrap();
        let f = GridFunction::zeros(g, 1, Quantity::V);
        let bytes = f.encode();
        assert!(GridFunction::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut b2 = bytes.clone();
        b2[0] = b'X';
        assert!(GridFunction::decode(&b2).is_err());
        let mut b3 = bytes.clone();
        b3[7] = 9;
        assert!(GridFunction::decode(&b3).is_err());
    }

    proptest! {
        #[test]
        fn dump_round_trip_is_bit_exact(
            dim in 1usize..=2,
            cells in 1usize..3,
            m in 1usize..4,
            comps in 1usize..3,
            steps in 0usize..3,
            seed in any::<u64>(),
        ) {
            let grid = Grid::new(dim, cells, m).unwrap();
            let mut f = GridFunction::trajectory(grid, comps, Quantity::GradV, 0.125);
            for k in 0..steps {
                let frame: Vec<f64> = (0..grid.len() * comps)
                    .map(|i| f64::from_bits(crate::rng::hash(seed, &[k as u64, i as u64]) >> 2))
                    .collect();
                f.push_frame(k as f64 * 0.5, &frame);
            }
            let back = GridFunction::decode(&f.encode()).unwrap();
            prop_assert_eq!(back.encode(), f.encode());
        }

        #[test]
        fn summation_by_parts(seed in any::<u64>(), dim in 1usize..=3) {
            let grid = Grid::new(dim, 2, 3).unwrap();
            let len = grid.len();
            let u: Vec<f64> = (0..len).map(|i| crate::rng::unit(crate::rng::hash(seed, &[i as u64])) - 0.5).collect();
            let f: Vec<f64> = (0..dim * len).map(|i| crate::rng::unit(crate::rng::hash(seed ^ 1, &[i as u64])) - 0.5).collect();
            let mut g = vec![0.0; dim * len];
            forward_gradient(&grid, &u, &mut g);
            let mut div = vec![0.0; len];
            backward_divergence(&grid, &f, &mut div);
            let lhs: f64 = div.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
                + f.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            let scale: f64 = f.iter().zip(&g).map(|(a, b)| (a * b).abs()).sum::<f64>() + 1.0;
            prop_assert!(lhs.abs() <= 1e-13 * scale, "lhs {}", lhs);
        }
    }
}
